#include "stgmrf/mesh.hpp"

#include "stgmrf/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <queue>

namespace stgmrf {
namespace {

double orient(const SpatialPoint& a, const SpatialPoint& b, const SpatialPoint& c) {
  return (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
}

double dist(const SpatialPoint& a, const SpatialPoint& b) { return std::hypot(a.x - b.x, a.y - b.y); }

// Positive when d lies strictly inside the circumcircle of the ccw triangle abc.
// `perm` receives the magnitude bound used for the relative tolerance.
double incircle(const SpatialPoint& a, const SpatialPoint& b, const SpatialPoint& c, const SpatialPoint& d,
                double* perm) {
  const double adx = a.x - d.x, ady = a.y - d.y;
  const double bdx = b.x - d.x, bdy = b.y - d.y;
  const double cdx = c.x - d.x, cdy = c.y - d.y;
  const double alift = adx * adx + ady * ady;
  const double blift = bdx * bdx + bdy * bdy;
  const double clift = cdx * cdx + cdy * cdy;
  const double bc = bdx * cdy - bdy * cdx, ca = cdx * ady - cdy * adx, ab = adx * bdy - ady * bdx;
  *perm = alift * (std::abs(bdx * cdy) + std::abs(bdy * cdx)) + blift * (std::abs(cdx * ady) + std::abs(cdy * adx)) +
          clift * (std::abs(adx * bdy) + std::abs(ady * bdx));
  return alift * bc + blift * ca + clift * ab;
}

std::vector<SpatialPoint> convex_hull(std::vector<SpatialPoint> pts) {
  std::sort(pts.begin(), pts.end(), [](auto& a, auto& b) { return std::tie(a.x, a.y) < std::tie(b.x, b.y); });
  if (pts.size() < 3) return pts;
  std::vector<SpatialPoint> h(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && orient(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && orient(h[k - 2], h[k - 1], pts[i]) <= 0) --k;
    h[k++] = pts[i];
  }
  h.resize(k - 1);
  return h;
}

double polygon_area(const std::vector<SpatialPoint>& poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * a;
}

double segment_distance(const SpatialPoint& p, const SpatialPoint& a, const SpatialPoint& b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((p.x - a.x) * vx + (p.y - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(p.x - (a.x + t * vx), p.y - (a.y + t * vy));
}

// Distance from p to a ccw convex polygon; zero inside.
double hull_distance(const SpatialPoint& p, const std::vector<SpatialPoint>& hull) {
  bool inside = true;
  for (std::size_t i = 0; i < hull.size(); ++i)
    if (orient(hull[i], hull[(i + 1) % hull.size()], p) < 0) inside = false;
  if (inside) return 0.0;
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < hull.size(); ++i) d = std::min(d, segment_distance(p, hull[i], hull[(i + 1) % hull.size()]));
  return d;
}

// Incremental Delaunay triangulation with Lawson edge flips inside a large
// enclosing triangle whose three vertices are dropped at the end.
class Delaunay {
public:
  Delaunay(double xmin, double ymin, double xmax, double ymax) {
    const double cx = 0.5 * (xmin + xmax), cy = 0.5 * (ymin + ymax);
    const double span = std::max({xmax - xmin, ymax - ymin, 1e-9});
    const double r = 1000.0 * span;
    pts_.push_back({cx - r * std::sqrt(3.0), cy - r});
    pts_.push_back({cx + r * std::sqrt(3.0), cy - r});
    pts_.push_back({cx, cy + 2.0 * r});
    tris_.push_back({{0, 1, 2}, {-1, -1, -1}});
  }

  /// Inserts p unless an existing vertex lies within `cutoff`; returns the vertex id
  /// (offset by the three enclosing vertices) either way.
  int insert(const SpatialPoint& p, double cutoff) {
    const int t = locate(p);
    const int near = nearby_vertex(t, p, cutoff);
    if (near >= 0) return near;
    const int id = static_cast<int>(pts_.size());
    pts_.push_back(p);

    const auto& tr = tris_[static_cast<std::size_t>(t)];
    int edge = -1;
    for (int i = 0; i < 3; ++i) {
      const auto& a = pts_[static_cast<std::size_t>(tr.v[(i + 1) % 3])];
      const auto& b = pts_[static_cast<std::size_t>(tr.v[(i + 2) % 3])];
      const double scale = dist(a, b);
      if (std::abs(orient(a, b, p)) <= 1e-12 * scale * scale) edge = i;
    }
    if (edge >= 0 && tr.nb[static_cast<std::size_t>(edge)] >= 0)
      split_edge(t, edge, id);
    else
      split_triangle(t, id);
    return id;
  }

  const std::vector<SpatialPoint>& points() const { return pts_; }

  /// Edges shared by two real triangles, as vertex pairs (without the offset).
  std::vector<std::pair<int, int>> interior_edges() const {
    std::vector<std::pair<int, int>> out;
    for (std::size_t t = 0; t < tris_.size(); ++t) {
      const auto& tr = tris_[t];
      if (is_super(tr)) continue;
      for (int i = 0; i < 3; ++i) {
        const int u = tr.nb[static_cast<std::size_t>(i)];
        if (u < 0 || static_cast<std::size_t>(u) < t || is_super(tris_[static_cast<std::size_t>(u)])) continue;
        out.emplace_back(tr.v[(i + 1) % 3], tr.v[(i + 2) % 3]);
      }
    }
    return out;
  }

  TriangleMesh finish() const {
    TriangleMesh mesh;
    mesh.vertices.assign(pts_.begin() + 3, pts_.end());
    for (const auto& tr : tris_) {
      if (is_super(tr)) continue;
      mesh.triangles.push_back({tr.v[0] - 3, tr.v[1] - 3, tr.v[2] - 3});
    }
    std::map<std::pair<int, int>, int> edge_count;
    for (const auto& t : mesh.triangles)
      for (int i = 0; i < 3; ++i) {
        int a = t[static_cast<std::size_t>(i)], b = t[static_cast<std::size_t>((i + 1) % 3)];
        edge_count[{std::min(a, b), std::max(a, b)}]++;
      }
    mesh.boundary.assign(mesh.vertices.size(), false);
    for (const auto& [e, count] : edge_count)
      if (count == 1) {
        mesh.boundary[static_cast<std::size_t>(e.first)] = true;
        mesh.boundary[static_cast<std::size_t>(e.second)] = true;
      }
    return mesh;
  }

private:
  struct Tri {
    std::array<int, 3> v;
    std::array<int, 3> nb;  // nb[i] is opposite v[i]
  };

  bool is_super(const Tri& t) const { return t.v[0] < 3 || t.v[1] < 3 || t.v[2] < 3; }

  const SpatialPoint& P(int i) const { return pts_[static_cast<std::size_t>(i)]; }
  Tri& T(int i) { return tris_[static_cast<std::size_t>(i)]; }

  bool contains(int t, const SpatialPoint& p) const {
    const auto& tr = tris_[static_cast<std::size_t>(t)];
    for (int i = 0; i < 3; ++i) {
      const auto& a = P(tr.v[(i + 1) % 3]);
      const auto& b = P(tr.v[(i + 2) % 3]);
      const double scale = dist(a, b) * (dist(a, p) + 1e-300);
      if (orient(a, b, p) < -1e-13 * scale) return false;
    }
    return true;
  }

  int locate(const SpatialPoint& p) {
    int t = std::min(last_, static_cast<int>(tris_.size()) - 1);
    const std::size_t max_steps = 4 * tris_.size() + 16;
    for (std::size_t step = 0; step < max_steps; ++step) {
      const auto& tr = tris_[static_cast<std::size_t>(t)];
      int next = -1;
      for (int i = 0; i < 3; ++i) {
        const auto& a = P(tr.v[(i + 1) % 3]);
        const auto& b = P(tr.v[(i + 2) % 3]);
        const double scale = dist(a, b) * (dist(a, p) + 1e-300);
        if (orient(a, b, p) < -1e-13 * scale && tr.nb[static_cast<std::size_t>(i)] >= 0) {
          next = tr.nb[static_cast<std::size_t>(i)];
          break;
        }
      }
      if (next < 0) return last_ = t;
      t = next;
    }
    for (int k = 0; k < static_cast<int>(tris_.size()); ++k)
      if (contains(k, p)) return last_ = k;
    throw Error("mesh_internal", "point location failed during triangulation");
  }

  int nearby_vertex(int t, const SpatialPoint& p, double cutoff) const {
    if (cutoff <= 0) return -1;
    int best = -1;
    double best_d = cutoff;
    auto check = [&](int tri) {
      if (tri < 0) return;
      for (int v : tris_[static_cast<std::size_t>(tri)].v) {
        if (v < 3) continue;
        const double d = dist(P(v), p);
        if (d < best_d) {
          best_d = d;
          best = v;
        }
      }
    };
    check(t);
    for (int nb : tris_[static_cast<std::size_t>(t)].nb) check(nb);
    return best;
  }

  void set(int t, std::array<int, 3> v, std::array<int, 3> nb) { T(t) = Tri{v, nb}; }

  void repoint(int tri, int old_nb, int new_nb) {
    if (tri < 0) return;
    for (auto& n : T(tri).nb)
      if (n == old_nb) n = new_nb;
  }

  void split_triangle(int t, int p) {
    const Tri old = T(t);
    const int a = old.v[0], b = old.v[1], c = old.v[2];
    const int n0 = old.nb[0], n1 = old.nb[1], n2 = old.nb[2];
    const int tA = t;
    const int tB = static_cast<int>(tris_.size());
    const int tC = tB + 1;
    tris_.resize(tris_.size() + 2);
    set(tA, {a, b, p}, {tB, tC, n2});
    set(tB, {b, c, p}, {tC, tA, n0});
    set(tC, {c, a, p}, {tA, tB, n1});
    repoint(n0, t, tB);
    repoint(n1, t, tC);
    stack_ = {{tA, 2}, {tB, 2}, {tC, 2}};
    legalize();
  }

  void split_edge(int t, int i, int p) {
    const Tri ot = T(t);
    const int a = ot.v[static_cast<std::size_t>(i)];
    const int b = ot.v[static_cast<std::size_t>((i + 1) % 3)];
    const int c = ot.v[static_cast<std::size_t>((i + 2) % 3)];
    const int t_opp_b = ot.nb[static_cast<std::size_t>((i + 1) % 3)];  // edge (c, a)
    const int t_opp_c = ot.nb[static_cast<std::size_t>((i + 2) % 3)];  // edge (a, b)
    const int u = ot.nb[static_cast<std::size_t>(i)];
    const Tri ou = T(u);
    int j = 0;
    while (ou.nb[static_cast<std::size_t>(j)] != t) ++j;
    const int d = ou.v[static_cast<std::size_t>(j)];
    // ou is (d, c, b) up to rotation
    int u_opp_b = -1, u_opp_c = -1;
    for (int k = 0; k < 3; ++k) {
      if (ou.v[static_cast<std::size_t>(k)] == b) u_opp_b = ou.nb[static_cast<std::size_t>(k)];  // edge (d, c)
      if (ou.v[static_cast<std::size_t>(k)] == c) u_opp_c = ou.nb[static_cast<std::size_t>(k)];  // edge (b, d)
    }
    const int t1 = t, t3 = u;
    const int t2 = static_cast<int>(tris_.size());
    const int t4 = t2 + 1;
    tris_.resize(tris_.size() + 2);
    set(t1, {a, b, p}, {t4, t2, t_opp_c});
    set(t2, {a, p, c}, {t3, t_opp_b, t1});
    set(t3, {d, c, p}, {t2, t4, u_opp_b});
    set(t4, {d, p, b}, {t1, u_opp_c, t3});
    repoint(t_opp_b, t, t2);
    repoint(u_opp_c, u, t4);
    stack_ = {{t1, 2}, {t2, 1}, {t3, 2}, {t4, 1}};
    legalize();
  }

  // Each stack entry is (triangle, index of the newly inserted vertex); the edge
  // opposite that vertex is tested and flipped when it violates the empty-circle rule.
  void legalize() {
    std::size_t guard = 0;
    while (!stack_.empty()) {
      if (++guard > 100000000) throw Error("mesh_internal", "edge flipping did not terminate");
      auto [t, i] = stack_.back();
      stack_.pop_back();
      const Tri tr = T(t);
      const int u = tr.nb[static_cast<std::size_t>(i)];
      if (u < 0) continue;
      const Tri tu = T(u);
      int j = 0;
      while (j < 3 && tu.nb[static_cast<std::size_t>(j)] != t) ++j;
      if (j == 3) continue;
      const int p = tr.v[static_cast<std::size_t>(i)];
      const int b = tr.v[static_cast<std::size_t>((i + 1) % 3)];
      const int c = tr.v[static_cast<std::size_t>((i + 2) % 3)];
      const int d = tu.v[static_cast<std::size_t>(j)];
      double perm = 0.0;
      const double ic = incircle(P(tr.v[0]), P(tr.v[1]), P(tr.v[2]), P(d), &perm);
      if (!(ic > 1e-12 * perm)) continue;
      if (orient(P(p), P(b), P(d)) <= 0 || orient(P(p), P(d), P(c)) <= 0) continue;

      const int tb = tr.nb[static_cast<std::size_t>((i + 1) % 3)];  // edge (c, p)
      const int tc = tr.nb[static_cast<std::size_t>((i + 2) % 3)];  // edge (p, b)
      int ub = -1, uc = -1;
      for (int k = 0; k < 3; ++k) {
        if (tu.v[static_cast<std::size_t>(k)] == b) ub = tu.nb[static_cast<std::size_t>(k)];  // edge (d, c)
        if (tu.v[static_cast<std::size_t>(k)] == c) uc = tu.nb[static_cast<std::size_t>(k)];  // edge (b, d)
      }
      set(t, {p, b, d}, {uc, u, tc});
      set(u, {p, d, c}, {ub, tb, t});
      repoint(uc, u, t);
      repoint(tb, t, u);
      stack_.push_back({t, 0});
      stack_.push_back({u, 0});
    }
  }

  std::vector<SpatialPoint> pts_;
  std::vector<Tri> tris_;
  std::vector<std::pair<int, int>> stack_;
  int last_ = 0;
};

std::vector<SpatialPoint> lattice(double xmin, double ymin, double xmax, double ymax, double spacing) {
  std::vector<SpatialPoint> out;
  const double dy = spacing * std::sqrt(3.0) / 2.0;
  int row = 0;
  for (double y = ymin; y <= ymax + 1e-9 * spacing; y += dy, ++row) {
    const double shift = (row % 2) ? 0.5 * spacing : 0.0;
    for (double x = xmin + shift; x <= xmax + 1e-9 * spacing; x += spacing) out.push_back({x, y});
  }
  return out;
}

}  // namespace

void MeshConfig::validate() const {
  if (!(max_edge_inner > 0 && max_edge_outer > 0 && extension > 0 && cutoff > 0))
    throw Error("invalid_mesh_config", "mesh parameters must be positive");
  if (max_edge_outer < max_edge_inner)
    throw Error("invalid_mesh_config", "max_edge_outer must be at least max_edge_inner");
}

MeshConfig MeshConfig::from_range_guess(double range_km) {
  MeshConfig cfg;
  cfg.max_edge_inner = range_km / 5.0;
  cfg.max_edge_outer = 3.0 * cfg.max_edge_inner;
  cfg.extension = range_km;
  cfg.cutoff = cfg.max_edge_inner / 50.0;
  return cfg;
}

double TriangleMesh::triangle_area(int t) const {
  const auto& tr = triangles[static_cast<std::size_t>(t)];
  return 0.5 * orient(vertices[static_cast<std::size_t>(tr[0])], vertices[static_cast<std::size_t>(tr[1])],
                      vertices[static_cast<std::size_t>(tr[2])]);
}

double TriangleMesh::total_area() const {
  double a = 0.0;
  for (int t = 0; t < num_triangles(); ++t) a += triangle_area(t);
  return a;
}

bool TriangleMesh::connected() const {
  if (vertices.empty()) return true;
  std::vector<std::vector<int>> adj(vertices.size());
  for (const auto& t : triangles)
    for (int i = 0; i < 3; ++i) {
      adj[static_cast<std::size_t>(t[static_cast<std::size_t>(i)])].push_back(t[static_cast<std::size_t>((i + 1) % 3)]);
      adj[static_cast<std::size_t>(t[static_cast<std::size_t>((i + 1) % 3)])].push_back(t[static_cast<std::size_t>(i)]);
    }
  std::vector<bool> seen(vertices.size(), false);
  std::queue<int> q;
  q.push(0);
  seen[0] = true;
  std::size_t count = 1;
  while (!q.empty()) {
    const int v = q.front();
    q.pop();
    for (int w : adj[static_cast<std::size_t>(v)])
      if (!seen[static_cast<std::size_t>(w)]) {
        seen[static_cast<std::size_t>(w)] = true;
        ++count;
        q.push(w);
      }
  }
  return count == vertices.size();
}

void TriangleMesh::build_buckets() const {
  auto& b = buckets_;
  double xmin = 1e300, ymin = 1e300, xmax = -1e300, ymax = -1e300;
  for (const auto& v : vertices) {
    xmin = std::min(xmin, v.x);
    ymin = std::min(ymin, v.y);
    xmax = std::max(xmax, v.x);
    ymax = std::max(ymax, v.y);
  }
  const int n = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(triangles.size()))));
  b.cell = std::max((xmax - xmin), (ymax - ymin)) / n + 1e-12;
  b.x0 = xmin;
  b.y0 = ymin;
  b.nx = static_cast<int>((xmax - xmin) / b.cell) + 1;
  b.ny = static_cast<int>((ymax - ymin) / b.cell) + 1;
  b.cells.assign(static_cast<std::size_t>(b.nx * b.ny), {});
  for (int t = 0; t < num_triangles(); ++t) {
    double tx0 = 1e300, ty0 = 1e300, tx1 = -1e300, ty1 = -1e300;
    for (int v : triangles[static_cast<std::size_t>(t)]) {
      const auto& p = vertices[static_cast<std::size_t>(v)];
      tx0 = std::min(tx0, p.x);
      ty0 = std::min(ty0, p.y);
      tx1 = std::max(tx1, p.x);
      ty1 = std::max(ty1, p.y);
    }
    const int i0 = std::clamp(static_cast<int>((tx0 - b.x0) / b.cell), 0, b.nx - 1);
    const int i1 = std::clamp(static_cast<int>((tx1 - b.x0) / b.cell), 0, b.nx - 1);
    const int j0 = std::clamp(static_cast<int>((ty0 - b.y0) / b.cell), 0, b.ny - 1);
    const int j1 = std::clamp(static_cast<int>((ty1 - b.y0) / b.cell), 0, b.ny - 1);
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i) b.cells[static_cast<std::size_t>(j * b.nx + i)].push_back(t);
  }
}

int TriangleMesh::locate(const SpatialPoint& p, std::array<double, 3>* bary) const {
  if (buckets_.cells.empty()) build_buckets();
  const auto& b = buckets_;
  const double fx = (p.x - b.x0) / b.cell, fy = (p.y - b.y0) / b.cell;
  // neighbouring cells cover points sitting exactly on a cell edge
  std::vector<int> cand;
  for (int dj = -1; dj <= 1; ++dj)
    for (int di = -1; di <= 1; ++di) {
      const int i = static_cast<int>(std::floor(fx)) + di, j = static_cast<int>(std::floor(fy)) + dj;
      if (i < 0 || j < 0 || i >= b.nx || j >= b.ny) continue;
      const auto& c = b.cells[static_cast<std::size_t>(j * b.nx + i)];
      cand.insert(cand.end(), c.begin(), c.end());
    }
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  for (int t : cand) {
    const auto& tr = triangles[static_cast<std::size_t>(t)];
    const auto& a = vertices[static_cast<std::size_t>(tr[0])];
    const auto& bb = vertices[static_cast<std::size_t>(tr[1])];
    const auto& c = vertices[static_cast<std::size_t>(tr[2])];
    const double area = orient(a, bb, c);
    const double l0 = orient(bb, c, p) / area;
    const double l1 = orient(c, a, p) / area;
    const double l2 = orient(a, bb, p) / area;
    constexpr double tol = -1e-12;
    if (l0 >= tol && l1 >= tol && l2 >= tol) {
      if (bary) *bary = {l0, l1, l2};
      return t;
    }
  }
  return -1;
}

SpMat FemMatrices::C() const {
  SpMat m(c.size(), c.size());
  m.reserve(Eigen::VectorXi::Constant(c.size(), 1));
  for (Eigen::Index i = 0; i < c.size(); ++i) m.insert(i, i) = c[i];
  m.makeCompressed();
  return m;
}

TriangleMesh triangulate(const std::vector<SpatialPoint>& points) {
  if (points.size() < 3) throw Error("degenerate_sites", "need at least three points");
  double xmin = 1e300, ymin = 1e300, xmax = -1e300, ymax = -1e300;
  for (const auto& p : points) {
    xmin = std::min(xmin, p.x);
    ymin = std::min(ymin, p.y);
    xmax = std::max(xmax, p.x);
    ymax = std::max(ymax, p.y);
  }
  Delaunay dt(xmin, ymin, xmax, ymax);
  TriangleMesh tmp;
  for (const auto& p : points) tmp.site_vertex.push_back(dt.insert(p, 0.0) - 3);
  TriangleMesh mesh = dt.finish();
  mesh.site_vertex = tmp.site_vertex;
  return mesh;
}

TriangleMesh build_mesh(const std::vector<SpatialPoint>& sites, const MeshConfig& cfg) {
  cfg.validate();
  if (sites.size() < 3) throw Error("degenerate_sites", "need at least three non-collinear sites");

  const auto hull = convex_hull(sites);
  double diam = 0.0;
  for (const auto& a : hull)
    for (const auto& b : hull) diam = std::max(diam, dist(a, b));
  if (hull.size() < 3 || polygon_area(hull) <= 1e-10 * diam * diam)
    throw Error("degenerate_sites", "sites are collinear or coincident");
  if (cfg.cutoff >= diam)
    throw Error("cutoff_too_large", "mesh cutoff exceeds the extent of the site domain", std::to_string(diam));

  std::vector<SpatialPoint> unique_sites;
  std::vector<int> site_to_unique;
  for (const auto& s : sites) {
    int found = -1;
    for (std::size_t k = 0; k < unique_sites.size(); ++k)
      if (dist(unique_sites[k], s) < cfg.cutoff) {
        found = static_cast<int>(k);
        break;
      }
    if (found < 0) {
      found = static_cast<int>(unique_sites.size());
      unique_sites.push_back(s);
    }
    site_to_unique.push_back(found);
  }

  SpatialPoint center{0, 0};
  for (const auto& h : hull) {
    center.x += h.x / static_cast<double>(hull.size());
    center.y += h.y / static_cast<double>(hull.size());
  }
  double radius = 0.0;
  for (const auto& h : hull) radius = std::max(radius, dist(h, center));
  radius += cfg.extension;

  const double a = cfg.max_edge_inner;
  const double b = cfg.max_edge_outer;
  Delaunay dt(center.x - radius, center.y - radius, center.x + radius, center.y + radius);

  std::vector<int> unique_vertex;
  for (const auto& s : unique_sites) unique_vertex.push_back(dt.insert(s, cfg.cutoff) - 3);

  double hx0 = 1e300, hy0 = 1e300, hx1 = -1e300, hy1 = -1e300;
  for (const auto& h : hull) {
    hx0 = std::min(hx0, h.x);
    hy0 = std::min(hy0, h.y);
    hx1 = std::max(hx1, h.x);
    hy1 = std::max(hy1, h.y);
  }
  for (const auto& p : lattice(hx0 - a, hy0 - a, hx1 + a, hy1 + a, a)) {
    if (hull_distance(p, hull) > a) continue;
    bool close = false;
    for (const auto& s : unique_sites)
      if (dist(s, p) < 0.5 * a) {
        close = true;
        break;
      }
    if (!close) dt.insert(p, cfg.cutoff);
  }
  for (const auto& p : lattice(center.x - radius, center.y - radius, center.x + radius, center.y + radius, b)) {
    if (dist(p, center) > radius - 0.5 * b) continue;
    if (hull_distance(p, hull) <= a + 0.5 * b) continue;
    dt.insert(p, cfg.cutoff);
  }
  const int n_boundary = std::max(12, static_cast<int>(std::ceil(2.0 * std::numbers::pi * radius / b)));
  for (int k = 0; k < n_boundary; ++k) {
    const double ang = 2.0 * std::numbers::pi * k / n_boundary;
    dt.insert({center.x + radius * std::cos(ang), center.y + radius * std::sin(ang)}, cfg.cutoff);
  }

  for (int pass = 0; pass < 30; ++pass) {
    std::vector<std::pair<double, SpatialPoint>> splits;
    const auto& pts = dt.points();
    for (const auto& [u, v] : dt.interior_edges()) {
      const auto& p = pts[static_cast<std::size_t>(u)];
      const auto& q = pts[static_cast<std::size_t>(v)];
      const SpatialPoint mid{0.5 * (p.x + q.x), 0.5 * (p.y + q.y)};
      const double limit = hull_distance(mid, hull) <= a ? a : b;
      const double len = dist(p, q);
      if (len > limit * (1.0 + 1e-9)) splits.push_back({len, mid});
    }
    if (splits.empty()) break;
    std::stable_sort(splits.begin(), splits.end(), [](auto& x, auto& y) { return x.first > y.first; });
    for (const auto& s : splits) dt.insert(s.second, cfg.cutoff);
  }

  TriangleMesh mesh = dt.finish();
  for (int u : site_to_unique) mesh.site_vertex.push_back(unique_vertex[static_cast<std::size_t>(u)]);

  std::vector<SpatialPoint> all_hull = convex_hull(mesh.vertices);
  if (std::abs(mesh.total_area() - polygon_area(all_hull)) > 1e-8 * polygon_area(all_hull))
    throw Error("mesh_internal", "triangulation does not cover the convex hull of its vertices");
  for (int t = 0; t < mesh.num_triangles(); ++t)
    if (!(mesh.triangle_area(t) > 0)) throw Error("mesh_internal", "non-positive triangle orientation");
  if (!mesh.connected()) throw Error("mesh_internal", "mesh graph is not connected");
  return mesh;
}

SpMat make_projector(const TriangleMesh& mesh, const std::vector<SpatialPoint>& targets) {
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(3 * targets.size());
  for (std::size_t q = 0; q < targets.size(); ++q) {
    std::array<double, 3> w{};
    const int t = mesh.locate(targets[q], &w);
    if (t < 0) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "x=%.6g y=%.6g", targets[q].x, targets[q].y);
      throw Error("out_of_domain", "target lies outside the mesh", buf);
    }
    double sum = 0.0;
    for (auto& x : w) {
      if (x < 1e-12) x = 0.0;
      sum += x;
    }
    const auto& tr = mesh.triangles[static_cast<std::size_t>(t)];
    for (int i = 0; i < 3; ++i)
      if (w[static_cast<std::size_t>(i)] > 0.0)
        trip.emplace_back(static_cast<int>(q), tr[static_cast<std::size_t>(i)], w[static_cast<std::size_t>(i)] / sum);
  }
  SpMat A(static_cast<Eigen::Index>(targets.size()), mesh.num_vertices());
  A.setFromTriplets(trip.begin(), trip.end());
  return A;
}

FemMatrices fem_matrices(const TriangleMesh& mesh) {
  const int m = mesh.num_vertices();
  FemMatrices fem;
  fem.c = Eigen::VectorXd::Zero(m);
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(9 * mesh.triangles.size());
  for (int t = 0; t < mesh.num_triangles(); ++t) {
    const auto& tr = mesh.triangles[static_cast<std::size_t>(t)];
    std::array<SpatialPoint, 3> v;
    for (int i = 0; i < 3; ++i) v[static_cast<std::size_t>(i)] = mesh.vertices[static_cast<std::size_t>(tr[static_cast<std::size_t>(i)])];
    const double area2 = orient(v[0], v[1], v[2]);
    const double scale = dist(v[0], v[1]) * dist(v[0], v[2]);
    if (!(area2 > 1e-14 * scale) || scale == 0.0) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "(%.6g,%.6g) (%.6g,%.6g) (%.6g,%.6g)", v[0].x, v[0].y, v[1].x, v[1].y, v[2].x,
                    v[2].y);
      throw Error("zero_area_triangle", "degenerate triangle in mesh", buf);
    }
    const double area = 0.5 * area2;
    std::array<double, 3> gx, gy;
    for (int i = 0; i < 3; ++i) {
      const auto& pj = v[static_cast<std::size_t>((i + 1) % 3)];
      const auto& pk = v[static_cast<std::size_t>((i + 2) % 3)];
      gx[static_cast<std::size_t>(i)] = (pj.y - pk.y) / area2;
      gy[static_cast<std::size_t>(i)] = (pk.x - pj.x) / area2;
    }
    for (int i = 0; i < 3; ++i) {
      fem.c[tr[static_cast<std::size_t>(i)]] += area / 3.0;
      for (int j = 0; j < 3; ++j)
        trip.emplace_back(tr[static_cast<std::size_t>(i)], tr[static_cast<std::size_t>(j)],
                          area * (gx[static_cast<std::size_t>(i)] * gx[static_cast<std::size_t>(j)] +
                                  gy[static_cast<std::size_t>(i)] * gy[static_cast<std::size_t>(j)]));
    }
  }
  fem.G.resize(m, m);
  fem.G.setFromTriplets(trip.begin(), trip.end());
  fem.G.makeCompressed();
  return fem;
}

void write_mesh_csv(const TriangleMesh& mesh, const std::string& vertices_path, const std::string& triangles_path) {
  std::ofstream fv(vertices_path, std::ios::binary), ft(triangles_path, std::ios::binary);
  if (!fv || !ft) throw Error("write_failed", "cannot write mesh files", vertices_path);
  char buf[128];
  fv << "id,x,y,boundary\n";
  for (int i = 0; i < mesh.num_vertices(); ++i) {
    const auto& v = mesh.vertices[static_cast<std::size_t>(i)];
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%d\n", i, v.x, v.y, mesh.boundary[static_cast<std::size_t>(i)] ? 1 : 0);
    fv << buf;
  }
  ft << "v0,v1,v2\n";
  for (const auto& t : mesh.triangles) ft << t[0] << ',' << t[1] << ',' << t[2] << '\n';
}

}  // namespace stgmrf

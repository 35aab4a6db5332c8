#pragma once

#include "stgmrf/data_io.hpp"

#include <Eigen/Sparse>

#include <array>
#include <string>
#include <vector>

namespace stgmrf {

using SpMat = Eigen::SparseMatrix<double>;

struct MeshConfig {
  double max_edge_inner = 75.0;  // km
  double max_edge_outer = 225.0;
  double extension = 600.0;
  double cutoff = 1.0;  // minimum distance between distinct mesh vertices

  void validate() const;
  /// Defaults derived from a prior range guess: inner edge range/5, extension one range.
  static MeshConfig from_range_guess(double range_km);
};

struct TriangleMesh {
  std::vector<SpatialPoint> vertices;
  std::vector<std::array<int, 3>> triangles;  // counter-clockwise
  std::vector<bool> boundary;                 // per vertex
  /// Vertex index of each input site after cutoff merging.
  std::vector<int> site_vertex;

  int num_vertices() const { return static_cast<int>(vertices.size()); }
  int num_triangles() const { return static_cast<int>(triangles.size()); }
  double triangle_area(int t) const;
  double total_area() const;
  bool connected() const;

  /// Lowest-index triangle containing p, or -1. Barycentric weights go to `bary`.
  int locate(const SpatialPoint& p, std::array<double, 3>* bary = nullptr) const;

private:
  struct Buckets {
    double x0 = 0, y0 = 0, cell = 1;
    int nx = 0, ny = 0;
    std::vector<std::vector<int>> cells;
  };
  mutable Buckets buckets_;
  void build_buckets() const;
};

struct FemMatrices {
  Eigen::VectorXd c;  // lumped mass (diagonal of C)
  SpMat G;            // stiffness

  SpMat C() const;
};

/// Builds a refined Delaunay triangulation with a fine inner region around the
/// sites and a coarser extension ring out to a convex outer boundary.
TriangleMesh build_mesh(const std::vector<SpatialPoint>& sites, const MeshConfig& cfg);

/// Delaunay triangulation of the given points only (no extra vertices).
TriangleMesh triangulate(const std::vector<SpatialPoint>& points);

/// Sparse n_targets x m barycentric interpolation matrix.
SpMat make_projector(const TriangleMesh& mesh, const std::vector<SpatialPoint>& targets);

FemMatrices fem_matrices(const TriangleMesh& mesh);

void write_mesh_csv(const TriangleMesh& mesh, const std::string& vertices_path, const std::string& triangles_path);

}  // namespace stgmrf

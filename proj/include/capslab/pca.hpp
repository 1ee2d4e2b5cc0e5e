#pragma once

#include <span>
#include <string>
#include <vector>

namespace capslab {

// Principal components of a point cloud, fitted in double precision. Rows of
// `components` are unit length and mutually orthogonal; `variances` holds the
// matching eigenvalues of the sample covariance (divisor N-1), sorted
// non-increasing. Each component's largest-magnitude element is positive so
// repeated fits produce identical axes.
struct PcaModel {
  int dim = 0;
  std::vector<double> mean;        // dim
  std::vector<double> components;  // dim x dim, row k = component k
  std::vector<double> variances;   // dim, non-increasing, >= 0
  std::string fitted_class;        // metadata: which capsule class the points came from
  std::string fitted_on;           // metadata: which image set produced them
};

// Eigendecomposition of the sample covariance. Throws a usage error for
// fewer than two points or ragged rows.
PcaModel fit_pca_points(const std::vector<std::vector<double>>& points);

// Coordinates of x in component space: coords[k] = <components[k], x - mean>.
std::vector<double> pca_project(const PcaModel& m, std::span<const double> x);

// Inverse map; with all dim coordinates this is lossless.
std::vector<double> pca_unproject(const PcaModel& m, std::span<const double> coords);

// Eigenvalues/vectors of a symmetric matrix by cyclic Jacobi rotations.
// a is dim x dim row-major and is consumed. vectors come back row-major,
// row k = eigenvector of values[k]; unsorted.
void symmetric_eigen(std::vector<double> a, int dim, std::vector<double>& vectors,
                     std::vector<double>& values);

}  // namespace capslab

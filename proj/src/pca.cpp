#include "capslab/pca.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "capslab/errors.hpp"

namespace capslab {

void symmetric_eigen(std::vector<double> a, int dim, std::vector<double>& vectors,
                     std::vector<double>& values) {
  const size_t d = static_cast<size_t>(dim);
  vectors.assign(d * d, 0.0);
  for (size_t i = 0; i < d; ++i) vectors[i * d + i] = 1.0;

  double scale = 0.0;
  for (double x : a) scale += x * x;
  const double stop = 1e-30 * (1.0 + scale);

  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (size_t p = 0; p < d; ++p) {
      for (size_t q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    }
    if (off <= stop) break;

    for (size_t p = 0; p < d; ++p) {
      for (size_t q = p + 1; q < d; ++q) {
        const double apq = a[p * d + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (size_t k = 0; k < d; ++k) {
          const double akp = a[k * d + p], akq = a[k * d + q];
          a[k * d + p] = c * akp - s * akq;
          a[k * d + q] = s * akp + c * akq;
        }
        for (size_t k = 0; k < d; ++k) {
          const double apk = a[p * d + k], aqk = a[q * d + k];
          a[p * d + k] = c * apk - s * aqk;
          a[q * d + k] = s * apk + c * aqk;
        }
        // Rows of `vectors` track the accumulated rotations' columns.
        for (size_t k = 0; k < d; ++k) {
          const double vp = vectors[p * d + k], vq = vectors[q * d + k];
          vectors[p * d + k] = c * vp - s * vq;
          vectors[q * d + k] = s * vp + c * vq;
        }
      }
    }
  }

  values.resize(d);
  for (size_t i = 0; i < d; ++i) values[i] = a[i * d + i];
}

PcaModel fit_pca_points(const std::vector<std::vector<double>>& points) {
  const size_t n = points.size();
  if (n < 2) throw UsageError("pca needs at least 2 points, got " + std::to_string(n));
  const size_t d = points[0].size();
  if (d < 1) throw UsageError("pca points are zero-dimensional");
  for (const auto& p : points) {
    if (p.size() != d) throw UsageError("pca points have inconsistent dimensions");
  }

  PcaModel m;
  m.dim = static_cast<int>(d);
  m.mean.assign(d, 0.0);
  for (const auto& p : points) {
    for (size_t i = 0; i < d; ++i) m.mean[i] += p[i];
  }
  for (double& v : m.mean) v /= static_cast<double>(n);

  std::vector<double> cov(d * d, 0.0);
  for (const auto& p : points) {
    for (size_t i = 0; i < d; ++i) {
      const double xi = p[i] - m.mean[i];
      for (size_t j = i; j < d; ++j) cov[i * d + j] += xi * (p[j] - m.mean[j]);
    }
  }
  for (size_t i = 0; i < d; ++i) {
    for (size_t j = i; j < d; ++j) {
      cov[i * d + j] /= static_cast<double>(n - 1);
      cov[j * d + i] = cov[i * d + j];
    }
  }

  std::vector<double> vectors, values;
  symmetric_eigen(std::move(cov), m.dim, vectors, values);

  std::vector<size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return values[a] > values[b]; });

  m.components.resize(d * d);
  m.variances.resize(d);
  for (size_t k = 0; k < d; ++k) {
    const size_t src = order[k];
    m.variances[k] = std::max(0.0, values[src]);  // clamp eigensolver dust
    std::copy_n(vectors.begin() + static_cast<ptrdiff_t>(src * d), d,
                m.components.begin() + static_cast<ptrdiff_t>(k * d));
  }

  // Orient each axis so its largest-magnitude element is positive.
  for (size_t k = 0; k < d; ++k) {
    double* row = m.components.data() + k * d;
    size_t big = 0;
    for (size_t i = 1; i < d; ++i) {
      if (std::fabs(row[i]) > std::fabs(row[big])) big = i;
    }
    if (row[big] < 0.0) {
      for (size_t i = 0; i < d; ++i) row[i] = -row[i];
    }
  }
  return m;
}

std::vector<double> pca_project(const PcaModel& m, std::span<const double> x) {
  const size_t d = static_cast<size_t>(m.dim);
  if (x.size() != d) {
    throw UsageError("pca projection wants " + std::to_string(d) + " values, got " +
                     std::to_string(x.size()));
  }
  std::vector<double> coords(d, 0.0);
  for (size_t k = 0; k < d; ++k) {
    double acc = 0.0;
    for (size_t i = 0; i < d; ++i) acc += m.components[k * d + i] * (x[i] - m.mean[i]);
    coords[k] = acc;
  }
  return coords;
}

std::vector<double> pca_unproject(const PcaModel& m, std::span<const double> coords) {
  const size_t d = static_cast<size_t>(m.dim);
  if (coords.size() != d) {
    throw UsageError("pca inverse wants " + std::to_string(d) + " coordinates, got " +
                     std::to_string(coords.size()));
  }
  std::vector<double> x(m.mean.begin(), m.mean.end());
  for (size_t k = 0; k < d; ++k) {
    for (size_t i = 0; i < d; ++i) x[i] += coords[k] * m.components[k * d + i];
  }
  return x;
}

}  // namespace capslab

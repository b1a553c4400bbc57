// Copyright 2026 The BPLF Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "bplf/svd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <iomanip>
#include <sstream>

namespace bplf {

void SvdConfig::validate() const {
  if (mode == Mode::kEnergy && !(energy > 0.0 && energy <= 1.0))
    fail(ErrorKind::kInvalidArgument, "svd energy fraction must lie in (0,1], got " + std::to_string(energy));
  if (mode == Mode::kRank && rank == 0) fail(ErrorKind::kInvalidArgument, "svd rank must be at least 1");
}

std::string SvdConfig::describe() const {
  std::ostringstream out;
  switch (mode) {
    case Mode::kOff: return "off";
    case Mode::kEnergy: {
      out << "energy:" << energy;
      // Short form unless it loses bits.
      if (std::stod(out.str().substr(7)) != energy) {
        out.str("");
        out << "energy:" << std::setprecision(17) << energy;
      }
      break;
    }
    case Mode::kRank: out << "rank:" << rank; break;
  }
  return out.str();
}

SvdConfig SvdConfig::parse(const std::string& text) {
  const SvdConfig cfg = parse_unchecked(text);
  cfg.validate();
  return cfg;
}

SvdConfig SvdConfig::parse_unchecked(const std::string& text) {
  SvdConfig cfg;
  try {
    if (text == "off" || text == "none") return off();
    if (text.rfind("rank:", 0) == 0) {
      cfg = with_rank(std::stoul(text.substr(5)));
    } else if (text.rfind("energy:", 0) == 0) {
      cfg = with_energy(std::stod(text.substr(7)));
    } else {
      std::size_t used = 0;
      cfg = with_energy(std::stod(text, &used));
      if (used != text.size()) throw std::invalid_argument(text);
    }
  } catch (const std::logic_error&) {
    fail(ErrorKind::kInvalidArgument, "cannot parse svd setting '" + text + "'");
  }
  return cfg;
}

SvdResult jacobi_svd(const std::vector<double>& matrix, std::size_t rows, std::size_t cols, std::size_t max_sweeps) {
  if (matrix.size() != rows * cols || rows == 0 || cols == 0)
    fail(ErrorKind::kShapeMismatch, "jacobi_svd: bad matrix dimensions");
  for (double v : matrix)
    if (!std::isfinite(v)) fail(ErrorKind::kNonFinite, "jacobi_svd: non-finite input");

  // Work on the orientation with at least as many rows as columns; columns of
  // `a` are rotated until mutually orthogonal, accumulating the rotations in `v`.
  const bool transposed = rows < cols;
  const std::size_t m = transposed ? cols : rows;
  const std::size_t n = transposed ? rows : cols;
  std::vector<double> a(m * n);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      if (transposed) {
        a[j * n + i] = matrix[i * cols + j];
      } else {
        a[i * n + j] = matrix[i * cols + j];
      }
    }
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

  constexpr double kTolerance = 1e-10;
  // Columns at rounding level relative to the whole matrix count as zero.
  double frob2 = 0.0;
  for (double x : a) frob2 += x * x;
  const double eps_m = static_cast<double>(m) * std::numeric_limits<double>::epsilon();
  const double negligible = eps_m * eps_m * frob2;
  std::size_t sweep = 0;
  bool converged = n == 1;
  while (!converged) {
    if (sweep == max_sweeps)
      fail(ErrorKind::kNotConverged, "jacobi_svd: no convergence after " + std::to_string(max_sweeps) + " sweeps");
    ++sweep;
    double off = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a[i * n + p], aq = a[i * n + q];
          alpha += ap * ap;
          beta += aq * aq;
          gamma += ap * aq;
        }
        if (alpha <= negligible || beta <= negligible) continue;
        const double ratio = std::abs(gamma) / std::sqrt(alpha * beta);
        off = std::max(off, ratio);
        if (ratio < kTolerance) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double ap = a[i * n + p], aq = a[i * n + q];
          a[i * n + p] = c * ap - s * aq;
          a[i * n + q] = s * ap + c * aq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v[i * n + p], vq = v[i * n + q];
          v[i * n + p] = c * vp - s * vq;
          v[i * n + q] = s * vp + c * vq;
        }
      }
    }
    converged = off < kTolerance;
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += a[i * n + j] * a[i * n + j];
    norms[j] = std::sqrt(acc);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  // a = U Sigma (m x n), and the input (in working orientation) is a V^T.
  std::vector<double> left(m * n, 0.0), right(n * n);
  std::vector<double> sigma(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    sigma[k] = norms[j];
    for (std::size_t i = 0; i < m; ++i) left[i * n + k] = sigma[k] > 0.0 ? a[i * n + j] / sigma[k] : 0.0;
    for (std::size_t i = 0; i < n; ++i) right[i * n + k] = v[i * n + j];
  }

  SvdResult out;
  out.rows = rows;
  out.cols = cols;
  out.sigma = std::move(sigma);
  out.sweeps = sweep;
  if (transposed) {
    out.u = std::move(right);  // rows x n
    out.v = std::move(left);   // cols x n
  } else {
    out.u = std::move(left);
    out.v = std::move(right);
  }
  return out;
}

template <typename T>
std::vector<double> singular_values(const Tensor<T>& matrix) {
  if (matrix.rank() != 2) fail(ErrorKind::kShapeMismatch, "singular_values expects [H,W], got " + to_string(matrix.shape()));
  std::vector<double> m(matrix.data().begin(), matrix.data().end());
  return jacobi_svd(m, matrix.dim(0), matrix.dim(1)).sigma;
}

std::size_t rank_for_energy(const std::vector<double>& sigma, double energy) {
  if (!(energy > 0.0 && energy <= 1.0))
    fail(ErrorKind::kInvalidArgument, "energy fraction must lie in (0,1], got " + std::to_string(energy));
  if (energy == 1.0) return sigma.size();
  double total = 0.0;
  for (double s : sigma) total += s * s;
  if (total == 0.0) return std::min<std::size_t>(1, sigma.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < sigma.size(); ++k) {
    acc += sigma[k] * sigma[k];
    if (acc >= energy * total) return k + 1;
  }
  return sigma.size();
}

std::vector<double> reconstruct(const SvdResult& svd, std::size_t k) {
  const std::size_t r = svd.sigma.size();
  k = std::min(k, r);
  std::vector<double> out(svd.rows * svd.cols, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    const double s = svd.sigma[t];
    for (std::size_t i = 0; i < svd.rows; ++i) {
      const double ui = svd.u[i * r + t] * s;
      for (std::size_t j = 0; j < svd.cols; ++j) out[i * svd.cols + j] += ui * svd.v[j * r + t];
    }
  }
  return out;
}

template <typename T>
Tensor<T> svd_truncate(const Tensor<T>& image, const SvdConfig& cfg) {
  cfg.validate();
  if (image.rank() != 3) fail(ErrorKind::kShapeMismatch, "svd_truncate expects [C,H,W], got " + to_string(image.shape()));
  if (!image.all_finite()) fail(ErrorKind::kNonFinite, "svd_truncate: non-finite input");
  if (!cfg.enabled()) return image;
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<T> out(image.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<double> plane(image.data().begin() + static_cast<std::ptrdiff_t>(ch * h * w),
                              image.data().begin() + static_cast<std::ptrdiff_t>((ch + 1) * h * w));
    const auto svd = jacobi_svd(plane, h, w);
    const std::size_t k = cfg.mode == SvdConfig::Mode::kRank ? std::min(cfg.rank, svd.sigma.size())
                                                             : rank_for_energy(svd.sigma, cfg.energy);
    const auto rec = reconstruct(svd, k);
    std::transform(rec.begin(), rec.end(), out.data().begin() + static_cast<std::ptrdiff_t>(ch * h * w),
                   [](double v) { return static_cast<T>(v); });
  }
  return out;
}

template std::vector<double> singular_values(const Tensor<float>&);
template std::vector<double> singular_values(const Tensor<double>&);
template Tensor<float> svd_truncate(const Tensor<float>&, const SvdConfig&);
template Tensor<double> svd_truncate(const Tensor<double>&, const SvdConfig&);

}  // namespace bplf

#include "rsm/wasserstein.hpp"

#include "rsm/errors.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>

namespace rsm {

namespace {

Mat2 sqrtm_psd(const Mat2& m) {
  Eigen::SelfAdjointEigenSolver<Mat2> es(m);
  const Vec2 ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double gaussian_w2(const Vec2& m1, const Mat2& c1, const Vec2& m2, const Mat2& c2) {
  const Mat2 r2 = sqrtm_psd(c2);
  const Mat2 cross = sqrtm_psd(r2 * c1 * r2);
  const double w2sq = (m1 - m2).squaredNorm() + (c1 + c2 - 2.0 * cross).trace();
  return std::sqrt(std::max(w2sq, 0.0));
}

double empirical_gaussian_w2(const std::vector<Vec2>& samples, const Vec2& mean, const Mat2& cov) {
  if (samples.size() < 2) throw DomainError("need at least two samples");
  const Vec2 m = pairwise_mean(samples);
  Mat2 c = Mat2::Zero();
  for (const auto& x : samples) c += (x - m) * (x - m).transpose();
  c /= static_cast<double>(samples.size() - 1);
  return gaussian_w2(m, c, mean, cov);
}

double assignment_w2(const std::vector<Vec2>& a, const std::vector<Vec2>& b) {
  if (a.size() != b.size()) throw DomainError("assignment_w2 needs equal sample counts");
  const std::size_t n = a.size();
  if (n == 0) return 0.0;
  // Shortest augmenting path with potentials (1-indexed rows/cols, column 0 is a sentinel).
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      const Vec2& ai = a[i0 - 1];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = (ai - b[j - 1]).squaredNorm() - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double cost = 0.0;
  for (std::size_t j = 1; j <= n; ++j) cost += (a[p[j] - 1] - b[j - 1]).squaredNorm();
  return std::sqrt(cost / static_cast<double>(n));
}

double blocked_w2(const std::vector<Vec2>& a, const std::vector<Vec2>& b, std::size_t block) {
  if (a.size() != b.size()) throw DomainError("blocked_w2 needs equal sample counts");
  if (block == 0) throw DomainError("block size must be positive");
  double total = 0.0;
  for (std::size_t start = 0; start < a.size(); start += block) {
    const std::size_t end = std::min(a.size(), start + block);
    std::vector<Vec2> aa(a.begin() + static_cast<long>(start), a.begin() + static_cast<long>(end));
    std::vector<Vec2> bb(b.begin() + static_cast<long>(start), b.begin() + static_cast<long>(end));
    const double w = assignment_w2(aa, bb);
    total += w * w * static_cast<double>(end - start);
  }
  return a.empty() ? 0.0 : std::sqrt(total / static_cast<double>(a.size()));
}

double mixture_w2(const std::vector<Vec2>& samples, const GaussianMixture& gmm, std::uint64_t seed,
                  std::size_t block) {
  Rng rng(seed);
  std::vector<Vec2> ref(samples.size());
  for (auto& x : ref) x = sample(gmm, rng);
  return blocked_w2(samples, ref, block);
}

}  // namespace rsm

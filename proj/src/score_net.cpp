#include "rsm/score_net.hpp"

#include "rsm/errors.hpp"
#include "rsm/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rsm {

namespace {

constexpr int kW1 = 0;
constexpr int kB1 = kW1 + ScoreNet::kHidden * ScoreNet::kIn;
constexpr int kW2 = kB1 + ScoreNet::kHidden;
constexpr int kB2 = kW2 + ScoreNet::kHidden * ScoreNet::kHidden;
constexpr int kW3 = kB2 + ScoreNet::kHidden;
constexpr int kB3 = kW3 + ScoreNet::kOut * ScoreNet::kHidden;
static_assert(kB3 + ScoreNet::kOut == ScoreNet::kParams);

using MapM = Eigen::Map<const Eigen::MatrixXd>;
using MapV = Eigen::Map<const Eigen::VectorXd>;
using MutM = Eigen::Map<Eigen::MatrixXd>;
using MutV = Eigen::Map<Eigen::VectorXd>;

MapM mat(const Eigen::VectorXd& p, int off, int rows, int cols) { return MapM(p.data() + off, rows, cols); }
MapV vec(const Eigen::VectorXd& p, int off, int n) { return MapV(p.data() + off, n); }
MutM mat(Eigen::VectorXd& p, int off, int rows, int cols) { return MutM(p.data() + off, rows, cols); }
MutV vec(Eigen::VectorXd& p, int off, int n) { return MutV(p.data() + off, n); }

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Eigen::MatrixXd silu(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double v) { return v * sigmoid(v); });
}

Eigen::MatrixXd silu_grad(const Eigen::MatrixXd& z) {
  return z.unaryExpr([](double v) {
    const double s = sigmoid(v);
    return s * (1.0 + v * (1.0 - s));
  });
}

}  // namespace

ScoreNet::ScoreNet() : params_(Eigen::VectorXd::Zero(kParams)) {}

ScoreNet ScoreNet::initialized(std::uint64_t seed) {
  ScoreNet net;
  Rng rng(seed);
  auto fill = [&](int off, int rows, int cols, double gain) {
    const double scale = gain / std::sqrt(static_cast<double>(cols));
    for (int k = 0; k < rows * cols; ++k) net.params_[off + k] = scale * rng.normal();
  };
  fill(kW1, kHidden, kIn, 1.0);
  fill(kW2, kHidden, kHidden, 1.0);
  fill(kW3, kOut, kHidden, 0.1);
  return net;
}

Eigen::MatrixXd ScoreNet::time_features(const Eigen::VectorXd& t) {
  Eigen::MatrixXd f(2 * kFreqs, t.size());
  for (int b = 0; b < t.size(); ++b) {
    for (int k = 0; k < kFreqs; ++k) {
      const double w = std::numbers::pi * static_cast<double>(1 << k);
      f(2 * k, b) = std::sin(w * t[b]);
      f(2 * k + 1, b) = std::cos(w * t[b]);
    }
  }
  return f;
}

Batch2 ScoreNet::forward(const Batch2& x, const Eigen::VectorXd& t, Cache* cache) const {
  const auto B = x.cols();
  if (t.size() != B) throw ContractError("score net: batch and time sizes differ");
  Eigen::MatrixXd in(kIn, B);
  in.topRows(2) = x;
  in.bottomRows(2 * kFreqs) = time_features(t);
  Eigen::MatrixXd z1 = mat(params_, kW1, kHidden, kIn) * in;
  z1.colwise() += vec(params_, kB1, kHidden);
  Eigen::MatrixXd h1 = silu(z1);
  Eigen::MatrixXd z2 = mat(params_, kW2, kHidden, kHidden) * h1;
  z2.colwise() += vec(params_, kB2, kHidden);
  Eigen::MatrixXd h2 = silu(z2);
  Batch2 out = mat(params_, kW3, kOut, kHidden) * h2;
  out.colwise() += vec(params_, kB3, kOut);
  if (cache) {
    cache->in = std::move(in);
    cache->z1 = std::move(z1);
    cache->h1 = std::move(h1);
    cache->z2 = std::move(z2);
    cache->h2 = std::move(h2);
  }
  return out;
}

Vec2 ScoreNet::predict_eps(const Vec2& x, double t) const {
  Batch2 xb(2, 1);
  xb.col(0) = x;
  Eigen::VectorXd tb(1);
  tb[0] = t;
  return forward(xb, tb).col(0);
}

void ScoreNet::backward(const Cache& c, const Batch2& d_eps, Eigen::VectorXd& grad) const {
  if (grad.size() != kParams) grad = Eigen::VectorXd::Zero(kParams);
  mat(grad, kW3, kOut, kHidden).noalias() += d_eps * c.h2.transpose();
  vec(grad, kB3, kOut) += d_eps.rowwise().sum();
  Eigen::MatrixXd dz2 = (mat(params_, kW3, kOut, kHidden).transpose() * d_eps).cwiseProduct(silu_grad(c.z2));
  mat(grad, kW2, kHidden, kHidden).noalias() += dz2 * c.h1.transpose();
  vec(grad, kB2, kHidden) += dz2.rowwise().sum();
  Eigen::MatrixXd dz1 = (mat(params_, kW2, kHidden, kHidden).transpose() * dz2).cwiseProduct(silu_grad(c.z1));
  mat(grad, kW1, kHidden, kIn).noalias() += dz1 * c.in.transpose();
  vec(grad, kB1, kHidden) += dz1.rowwise().sum();
}

std::string ScoreNet::to_json() const {
  nlohmann::json j;
  j["architecture"] = {{"kind", "mlp_eps"},
                       {"inputs", kIn},
                       {"time_freqs", kFreqs},
                       {"hidden", {kHidden, kHidden}},
                       {"activation", "silu"},
                       {"outputs", kOut},
                       {"n_params", kParams}};
  j["params"] = std::vector<double>(params_.data(), params_.data() + params_.size());
  return j.dump();
}

ScoreNet ScoreNet::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  const auto& a = j.at("architecture");
  if (a.at("inputs").get<int>() != kIn || a.at("outputs").get<int>() != kOut ||
      a.at("n_params").get<int>() != kParams || a.at("hidden") != nlohmann::json({kHidden, kHidden})) {
    throw ConfigError("checkpoint architecture does not match this network");
  }
  const auto p = j.at("params").get<std::vector<double>>();
  if (p.size() != static_cast<std::size_t>(kParams)) throw ConfigError("checkpoint parameter count mismatch");
  ScoreNet net;
  net.params_ = Eigen::Map<const Eigen::VectorXd>(p.data(), kParams);
  return net;
}

// ---------------------------------------------------------------------------------------

Vec2 NetField::score(const Vec2& x, int step) const {
  const double b = schedule_.b(step);
  if (!(b > 0.0)) throw SingularityError("eps-to-score conversion needs b_t > 0");
  return -net_.predict_eps(x, schedule_.t(step)) / b;
}

Batch2 NetField::score_batch(const Batch2& x, int step) const {
  const double b = schedule_.b(step);
  if (!(b > 0.0)) throw SingularityError("eps-to-score conversion needs b_t > 0");
  const Eigen::VectorXd t = Eigen::VectorXd::Constant(x.cols(), schedule_.t(step));
  return -net_.forward(x, t) / b;
}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  if (m.size() != params.size()) {
    m = Eigen::VectorXd::Zero(params.size());
    v = Eigen::VectorXd::Zero(params.size());
  }
  ++step_count;
  m = beta1 * m + (1.0 - beta1) * grad;
  v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  params.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

double grad_check(const Eigen::VectorXd& params, const LossWithGrad& loss, int n_params_sampled,
                  std::uint64_t seed) {
  if (n_params_sampled <= 0 || params.size() == 0) return 0.0;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(params.size());
  loss(params, &grad);
  Rng rng(seed);
  constexpr double h = 1e-5;
  double worst = 0.0;
  Eigen::VectorXd p = params;
  for (int s = 0; s < n_params_sampled; ++s) {
    const auto k = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(params.size())));
    p[k] = params[k] + h;
    const double up = loss(p, nullptr);
    p[k] = params[k] - h;
    const double dn = loss(p, nullptr);
    p[k] = params[k];
    const double fd = (up - dn) / (2.0 * h);
    const double denom = std::max({std::abs(fd), std::abs(grad[k]), 1e-6});
    worst = std::max(worst, std::abs(fd - grad[k]) / denom);
  }
  return worst;
}

}  // namespace rsm

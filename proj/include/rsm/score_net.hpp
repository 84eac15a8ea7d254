#pragma once

// Fixed-architecture epsilon-prediction MLP with explicit backward rules.
//   in  = [x (2), sin(pi 2^k t), cos(pi 2^k t) for k = 0..3]     (10)
//   h1  = silu(W1 in + b1)                                          (64)
//   h2  = silu(W2 h1 + b2)                                          (64)
//   eps = W3 h2 + b3                                                (2)

#include "rsm/flow_schedules.hpp"
#include "rsm/sampler.hpp"
#include "rsm/types.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>

namespace rsm {

using Batch2 = Eigen::Matrix<double, 2, Eigen::Dynamic>;

class ScoreNet {
 public:
  static constexpr int kFreqs = 4;
  static constexpr int kIn = 2 + 2 * kFreqs;
  static constexpr int kHidden = 64;
  static constexpr int kOut = 2;
  static constexpr int kParams =
      kHidden * kIn + kHidden + kHidden * kHidden + kHidden + kOut * kHidden + kOut;

  ScoreNet();  // all-zero parameters
  static ScoreNet initialized(std::uint64_t seed);

  Eigen::VectorXd& params() { return params_; }
  const Eigen::VectorXd& params() const { return params_; }

  struct Cache {
    Eigen::MatrixXd in, z1, h1, z2, h2;
  };

  Batch2 forward(const Batch2& x, const Eigen::VectorXd& t, Cache* cache = nullptr) const;
  Vec2 predict_eps(const Vec2& x, double t) const;
  // grad += d(sum_b d_eps[:,b] . eps[:,b]) / d params.
  void backward(const Cache& cache, const Batch2& d_eps, Eigen::VectorXd& grad) const;

  std::string to_json() const;
  static ScoreNet from_json(const std::string& text);

  static Eigen::MatrixXd time_features(const Eigen::VectorXd& t);

 private:
  Eigen::VectorXd params_;
};

// s(x, t_i) = -eps_theta(x, t_i) / b_i on a VP schedule.
class NetField final : public ScoreField {
 public:
  NetField(const ScoreNet& net, const ReverseSchedule& schedule) : net_(net), schedule_(schedule) {}
  Vec2 score(const Vec2& x, int step) const override;
  Batch2 score_batch(const Batch2& x, int step) const override;

 private:
  const ScoreNet& net_;
  const ReverseSchedule& schedule_;
};

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Eigen::VectorXd m, v;
  long step_count = 0;

  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
};

using LossWithGrad = std::function<double(const Eigen::VectorXd& params, Eigen::VectorXd* grad)>;

// Max relative error between the analytic gradient and central differences (h = 1e-5) over
// n randomly chosen coordinates; 0 when n == 0.
double grad_check(const Eigen::VectorXd& params, const LossWithGrad& loss, int n_params_sampled,
                  std::uint64_t seed);

}  // namespace rsm

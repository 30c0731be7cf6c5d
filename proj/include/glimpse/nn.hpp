#pragma once
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "glimpse/rng.hpp"

namespace glimpse {

using Vec = std::vector<double>;

[[noreturn]] inline void contract_violation(const std::string& what) {
  throw std::invalid_argument(what);
}

#define GLIMPSE_REQUIRE(cond, msg) \
  do {                             \
    if (!(cond)) ::glimpse::contract_violation(msg); \
  } while (0)

// Row-major dense matrix. All arithmetic in the project is double precision.
struct Matrix {
  int rows = 0, cols = 0;
  Vec a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c, 0.0) {}

  double& operator()(int r, int c) { return a[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return a[static_cast<std::size_t>(r) * cols + c]; }
  const double* row(int r) const { return a.data() + static_cast<std::size_t>(r) * cols; }
  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
  std::size_t size() const { return a.size(); }
};

enum class Activation { Relu, Sigmoid };

// One-hidden-layer dense network: o = w2 * act(w1 * x + b1) + b2.
struct Mlp {
  Matrix w1;  // hidden x in
  Vec b1;     // hidden
  Matrix w2;  // out x hidden
  Vec b2;     // out
  Activation hidden_activation = Activation::Relu;

  int in_dim() const { return w1.cols; }
  int hidden_dim() const { return w1.rows; }
  int out_dim() const { return w2.rows; }

  // weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero
  static Mlp random(int in, int hidden, int out, SplitMix64& rng,
                    Activation act = Activation::Relu);
  void check_shapes() const;
};

struct MlpGrads {
  Matrix w1;
  Vec b1;
  Matrix w2;
  Vec b2;

  static MlpGrads zeros_like(const Mlp& net);
  void clear();
  void add(const MlpGrads& other);
  void scale(double s);
};

struct MlpOut {
  Vec h;  // hidden activations
  Vec o;  // output logits
};

MlpOut mlp_forward(const Mlp& net, std::span<const double> x);

// Numerically stable (max subtraction); output sums to 1.
Vec softmax(std::span<const double> o);

double log_sum_exp(std::span<const double> o);

// -log softmax(logits)[label], computed in log space.
double cross_entropy(std::span<const double> logits, int label);

// d cross_entropy / d logits = softmax(logits) - onehot(label)
Vec cross_entropy_grad(std::span<const double> logits, int label);

// Accumulates parameter gradients into `grads` (callers zero the buffer when
// they want a fresh gradient). `h` must be the hidden vector produced by
// mlp_forward for this `x`. `extra_grad_h`, when nonempty, is added to the
// hidden gradient before the activation derivative is applied (used when a
// second loss path consumes the hidden layer directly). relu derivative at 0
// is 0. grad_x, when non-null, receives the gradient w.r.t. the input.
void mlp_backward(const Mlp& net, std::span<const double> x, const Vec& h,
                  std::span<const double> grad_o, MlpGrads& grads,
                  Vec* grad_x = nullptr,
                  std::span<const double> extra_grad_h = {});

// Classical momentum: v <- momentum*v - lr*g; p <- p + v.
struct OptimizerState {
  double momentum = 0.9;
  double learning_rate = 0.05;
  std::vector<Vec> velocity;  // mirrors the parameter tensor list

  void init(const std::vector<std::span<double>>& params);
};

void sgd_momentum_step(const std::vector<std::span<double>>& params,
                       const std::vector<std::span<const double>>& grads,
                       OptimizerState& state);

struct GradCheckTensor {
  std::span<double> values;
  std::span<const double> analytic;
};

// Central differences against the analytic gradient over every coordinate
// (every stride-th coordinate when stride > 1); returns the worst relative
// error |analytic - numeric| / max(|analytic|, |numeric|, 1e-4).
double grad_check(const std::function<double()>& loss_fn,
                  std::span<GradCheckTensor> tensors, double epsilon,
                  std::size_t stride = 1);

// Multiply-accumulates of the two weight-matrix products. Biases,
// activations, resampling and cropping are charged nothing.
std::int64_t mac_count(std::int64_t in_dim, std::int64_t hidden_dim,
                       std::int64_t out_dim);

std::vector<std::span<double>> mlp_tensors(Mlp& net);
std::vector<std::span<double>> mlp_tensors(MlpGrads& g);
std::vector<std::span<const double>> mlp_tensors(const MlpGrads& g);

}  // namespace glimpse

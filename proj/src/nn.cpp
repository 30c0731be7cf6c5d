#include "glimpse/nn.hpp"

#include <algorithm>
#include <cmath>

namespace glimpse {

Mlp Mlp::random(int in, int hidden, int out, SplitMix64& rng, Activation act) {
  GLIMPSE_REQUIRE(in > 0 && hidden > 0 && out > 0, "Mlp::random: dims must be positive");
  Mlp net;
  net.hidden_activation = act;
  net.w1 = Matrix(hidden, in);
  net.b1.assign(hidden, 0.0);
  net.w2 = Matrix(out, hidden);
  net.b2.assign(out, 0.0);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& w : net.w1.a) w = rng.next_range(-s1, s1);
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (auto& w : net.w2.a) w = rng.next_range(-s2, s2);
  return net;
}

void Mlp::check_shapes() const {
  GLIMPSE_REQUIRE(w1.rows == static_cast<int>(b1.size()) &&
                      w2.cols == w1.rows && w2.rows == static_cast<int>(b2.size()),
                  "Mlp: inconsistent parameter shapes");
  for (const Vec* v : {&w1.a, &b1, &w2.a, &b2})
    for (double x : *v)
      GLIMPSE_REQUIRE(std::isfinite(x), "Mlp: non-finite parameter");
}

MlpGrads MlpGrads::zeros_like(const Mlp& net) {
  MlpGrads g;
  g.w1 = Matrix(net.w1.rows, net.w1.cols);
  g.b1.assign(net.b1.size(), 0.0);
  g.w2 = Matrix(net.w2.rows, net.w2.cols);
  g.b2.assign(net.b2.size(), 0.0);
  return g;
}

void MlpGrads::clear() {
  std::fill(w1.a.begin(), w1.a.end(), 0.0);
  std::fill(b1.begin(), b1.end(), 0.0);
  std::fill(w2.a.begin(), w2.a.end(), 0.0);
  std::fill(b2.begin(), b2.end(), 0.0);
}

void MlpGrads::add(const MlpGrads& other) {
  for (std::size_t i = 0; i < w1.a.size(); ++i) w1.a[i] += other.w1.a[i];
  for (std::size_t i = 0; i < b1.size(); ++i) b1[i] += other.b1[i];
  for (std::size_t i = 0; i < w2.a.size(); ++i) w2.a[i] += other.w2.a[i];
  for (std::size_t i = 0; i < b2.size(); ++i) b2[i] += other.b2[i];
}

void MlpGrads::scale(double s) {
  for (auto& x : w1.a) x *= s;
  for (auto& x : b1) x *= s;
  for (auto& x : w2.a) x *= s;
  for (auto& x : b2) x *= s;
}

static double activate(double pre, Activation act) {
  switch (act) {
    case Activation::Relu: return pre > 0.0 ? pre : 0.0;
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-pre));
  }
  return 0.0;
}

MlpOut mlp_forward(const Mlp& net, std::span<const double> x) {
  GLIMPSE_REQUIRE(static_cast<int>(x.size()) == net.in_dim(),
                  "mlp_forward: input length does not match network input dim");
  const int hidden = net.hidden_dim(), out = net.out_dim(), in = net.in_dim();
  MlpOut r;
  r.h.resize(hidden);
  for (int i = 0; i < hidden; ++i) {
    const double* w = net.w1.row(i);
    double s = net.b1[i];
    for (int j = 0; j < in; ++j) s += w[j] * x[j];
    r.h[i] = activate(s, net.hidden_activation);
  }
  r.o.resize(out);
  for (int i = 0; i < out; ++i) {
    const double* w = net.w2.row(i);
    double s = net.b2[i];
    for (int j = 0; j < hidden; ++j) s += w[j] * r.h[j];
    r.o[i] = s;
  }
  return r;
}

Vec softmax(std::span<const double> o) {
  Vec p(o.size());
  double m = o[0];
  for (double v : o) m = std::max(m, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < o.size(); ++i) {
    p[i] = std::exp(o[i] - m);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return p;
}

double log_sum_exp(std::span<const double> o) {
  double m = o[0];
  for (double v : o) m = std::max(m, v);
  double sum = 0.0;
  for (double v : o) sum += std::exp(v - m);
  return m + std::log(sum);
}

double cross_entropy(std::span<const double> logits, int label) {
  GLIMPSE_REQUIRE(label >= 0 && label < static_cast<int>(logits.size()),
                  "cross_entropy: label out of range");
  return log_sum_exp(logits) - logits[label];
}

Vec cross_entropy_grad(std::span<const double> logits, int label) {
  GLIMPSE_REQUIRE(label >= 0 && label < static_cast<int>(logits.size()),
                  "cross_entropy_grad: label out of range");
  Vec g = softmax(logits);
  g[label] -= 1.0;
  return g;
}

void mlp_backward(const Mlp& net, std::span<const double> x, const Vec& h,
                  std::span<const double> grad_o, MlpGrads& grads, Vec* grad_x,
                  std::span<const double> extra_grad_h) {
  const int hidden = net.hidden_dim(), out = net.out_dim(), in = net.in_dim();
  GLIMPSE_REQUIRE(static_cast<int>(x.size()) == in &&
                      static_cast<int>(h.size()) == hidden &&
                      static_cast<int>(grad_o.size()) == out,
                  "mlp_backward: shape mismatch");
  GLIMPSE_REQUIRE(extra_grad_h.empty() || static_cast<int>(extra_grad_h.size()) == hidden,
                  "mlp_backward: extra hidden gradient shape mismatch");

  // output layer
  Vec grad_h(hidden, 0.0);
  for (int i = 0; i < out; ++i) {
    const double g = grad_o[i];
    grads.b2[i] += g;
    const double* w = net.w2.row(i);
    double* gw = grads.w2.row(i);
    for (int j = 0; j < hidden; ++j) {
      gw[j] += g * h[j];
      grad_h[j] += w[j] * g;
    }
  }
  if (!extra_grad_h.empty())
    for (int j = 0; j < hidden; ++j) grad_h[j] += extra_grad_h[j];

  // through the activation; relu subgradient at 0 is 0
  Vec grad_pre(hidden);
  for (int j = 0; j < hidden; ++j) {
    switch (net.hidden_activation) {
      case Activation::Relu: grad_pre[j] = h[j] > 0.0 ? grad_h[j] : 0.0; break;
      case Activation::Sigmoid: grad_pre[j] = grad_h[j] * h[j] * (1.0 - h[j]); break;
    }
  }

  // input layer
  if (grad_x) grad_x->assign(in, 0.0);
  for (int i = 0; i < hidden; ++i) {
    const double g = grad_pre[i];
    grads.b1[i] += g;
    if (g == 0.0 && !grad_x) continue;
    const double* w = net.w1.row(i);
    double* gw = grads.w1.row(i);
    for (int j = 0; j < in; ++j) gw[j] += g * x[j];
    if (grad_x)
      for (int j = 0; j < in; ++j) (*grad_x)[j] += w[j] * g;
  }
}

void OptimizerState::init(const std::vector<std::span<double>>& params) {
  velocity.clear();
  velocity.reserve(params.size());
  for (const auto& p : params) velocity.emplace_back(p.size(), 0.0);
}

void sgd_momentum_step(const std::vector<std::span<double>>& params,
                       const std::vector<std::span<const double>>& grads,
                       OptimizerState& state) {
  GLIMPSE_REQUIRE(params.size() == grads.size() && params.size() == state.velocity.size(),
                  "sgd_momentum_step: tensor count mismatch");
  for (std::size_t t = 0; t < params.size(); ++t) {
    GLIMPSE_REQUIRE(params[t].size() == grads[t].size() &&
                        params[t].size() == state.velocity[t].size(),
                    "sgd_momentum_step: tensor shape mismatch");
    auto& v = state.velocity[t];
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = state.momentum * v[i] - state.learning_rate * grads[t][i];
      params[t][i] += v[i];
    }
  }
}

double grad_check(const std::function<double()>& loss_fn,
                  std::span<GradCheckTensor> tensors, double epsilon,
                  std::size_t stride) {
  GLIMPSE_REQUIRE(epsilon > 0.0 && stride >= 1, "grad_check: bad epsilon/stride");
  double worst = 0.0;
  for (auto& t : tensors) {
    GLIMPSE_REQUIRE(t.values.size() == t.analytic.size(), "grad_check: shape mismatch");
    for (std::size_t i = 0; i < t.values.size(); i += stride) {
      const double saved = t.values[i];
      t.values[i] = saved + epsilon;
      const double up = loss_fn();
      t.values[i] = saved - epsilon;
      const double down = loss_fn();
      t.values[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double analytic = t.analytic[i];
      const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-4});
      worst = std::max(worst, std::fabs(analytic - numeric) / denom);
    }
  }
  return worst;
}

std::int64_t mac_count(std::int64_t in_dim, std::int64_t hidden_dim,
                       std::int64_t out_dim) {
  GLIMPSE_REQUIRE(in_dim > 0 && hidden_dim > 0 && out_dim > 0,
                  "mac_count: dims must be positive");
  return in_dim * hidden_dim + hidden_dim * out_dim;
}

std::vector<std::span<double>> mlp_tensors(Mlp& net) {
  return {std::span<double>(net.w1.a), std::span<double>(net.b1),
          std::span<double>(net.w2.a), std::span<double>(net.b2)};
}

std::vector<std::span<double>> mlp_tensors(MlpGrads& g) {
  return {std::span<double>(g.w1.a), std::span<double>(g.b1),
          std::span<double>(g.w2.a), std::span<double>(g.b2)};
}

std::vector<std::span<const double>> mlp_tensors(const MlpGrads& g) {
  return {std::span<const double>(g.w1.a), std::span<const double>(g.b1),
          std::span<const double>(g.w2.a), std::span<const double>(g.b2)};
}

}  // namespace glimpse

#include "glimpse/train.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

#include "glimpse/report.hpp"

namespace glimpse {

void TrainHyper::validate() const {
  GLIMPSE_REQUIRE(lambda >= 0.0 && gamma >= 0.0 && sigma_sq > 0.0 && lr >= 0.0,
                  "TrainHyper: negative hyperparameter");
  GLIMPSE_REQUIRE(momentum >= 0.0 && momentum < 1.0, "TrainHyper: momentum must be in [0,1)");
  GLIMPSE_REQUIRE(batch >= 1 && epochs >= 0 && fine_tune_epochs >= 0,
                  "TrainHyper: bad batch/epoch counts");
  GLIMPSE_REQUIRE(grid_side >= 1 && grid_side % 2 == 1, "TrainHyper: grid_side must be odd");
  GLIMPSE_REQUIRE(grid_step >= 1, "TrainHyper: grid_step must be >= 1");
  GLIMPSE_REQUIRE(workers >= 0, "TrainHyper: workers must be >= 0");
}

std::vector<NormLoc> candidate_grid(NormLoc l, int side_px, int grid_side,
                                    int grid_step) {
  GLIMPSE_REQUIRE(grid_side >= 1 && grid_side % 2 == 1,
                  "candidate_grid: grid_side must be odd");
  const PixelRC center = to_pixel_center(l, side_px);
  const int half = grid_side / 2;
  std::vector<NormLoc> grid;
  grid.reserve(static_cast<std::size_t>(grid_side) * grid_side);
  for (int i = -half; i <= half; ++i) {
    for (int j = -half; j <= half; ++j) {
      PixelRC p{std::clamp(center.row + i * grid_step, 0, side_px - 1),
                std::clamp(center.col + j * grid_step, 0, side_px - 1)};
      grid.push_back(to_norm(p, side_px));
    }
  }
  return grid;
}

double diversity_penalty(NormLoc z, std::span<const NormLoc> previous,
                         double gamma, double sigma_sq) {
  GLIMPSE_REQUIRE(sigma_sq > 0.0, "diversity_penalty: sigma_sq must be positive");
  double total = 0.0;
  for (const NormLoc& p : previous) {
    const double dx = z.x - p.x, dy = z.y - p.y;
    total += std::exp(-(dx * dx + dy * dy) / (2.0 * sigma_sq));
  }
  return gamma * total;
}

StageContext stage_context(const GlimpseModel& model, int k, const Image& img) {
  GLIMPSE_REQUIRE(k >= 1 && k <= static_cast<int>(model.stages.size()),
                  "stage_context: stage out of range");
  StageContext ctx;
  const Image low = box_downsample(img, model.config.downsample_factor());
  ctx.low_input = low.data;
  MlpOut n0 = mlp_forward(model.n0, ctx.low_input);
  ctx.low_h = std::move(n0.h);
  ctx.low_o = std::move(n0.o);
  ctx.glimpse_logit_sum.assign(ctx.low_o.size(), 0.0);
  for (int j = 1; j < k; ++j) {
    const NormLoc lj =
        predict_location(model, j, ctx.low_h, ctx.low_o, ctx.prior_logits);
    ctx.prior_locs.push_back(lj);
    ctx.prior_logits.push_back(glimpse_forward(model, j, img, lj));
    for (std::size_t i = 0; i < ctx.glimpse_logit_sum.size(); ++i)
      ctx.glimpse_logit_sum[i] += ctx.prior_logits.back()[i];
  }
  ctx.loc_input_sum = ctx.low_o;
  for (std::size_t i = 0; i < ctx.loc_input_sum.size(); ++i)
    ctx.loc_input_sum[i] += ctx.glimpse_logit_sum[i];
  ctx.predicted = predict_location(model, k, ctx.low_h, ctx.low_o, ctx.prior_logits);
  return ctx;
}

namespace {

// cached forward pieces of one grid candidate
struct GridPointEval {
  NormLoc z;
  Vec patch;   // flattened foveal stack
  Vec h;       // glimpse hidden
  Vec logits;  // glimpse logits
  Vec agg;     // aggregate logits at this candidate
};

// Forward of several patches through one network with each weight row kept
// hot across the candidates. Per candidate this performs the exact operation
// sequence of mlp_forward, so the results are bitwise identical to it.
void forward_candidates(const Mlp& net, std::vector<GridPointEval>& evals) {
  const int hidden = net.hidden_dim(), out = net.out_dim(), in = net.in_dim();
  for (auto& e : evals) {
    e.h.resize(hidden);
    e.logits.resize(out);
  }
  for (int r = 0; r < hidden; ++r) {
    const double* w = net.w1.row(r);
    const double b = net.b1[r];
    for (auto& e : evals) {
      const double* p = e.patch.data();
      double s = b;
      for (int j = 0; j < in; ++j) s += w[j] * p[j];
      e.h[r] = net.hidden_activation == Activation::Relu
                   ? (s > 0.0 ? s : 0.0)
                   : 1.0 / (1.0 + std::exp(-s));
    }
  }
  for (int r = 0; r < out; ++r) {
    const double* w = net.w2.row(r);
    const double b = net.b2[r];
    for (auto& e : evals) {
      const double* h = e.h.data();
      double s = b;
      for (int j = 0; j < hidden; ++j) s += w[j] * h[j];
      e.logits[r] = s;
    }
  }
}

void fill_aggregate(const StageContext& ctx, int k, GridPointEval& e) {
  const double inv_k = 1.0 / static_cast<double>(k);
  e.agg.resize(ctx.low_o.size());
  for (std::size_t i = 0; i < e.agg.size(); ++i)
    e.agg[i] = ctx.low_o[i] + inv_k * (ctx.glimpse_logit_sum[i] + e.logits[i]);
}

GridPointEval eval_candidate(const GlimpseModel& model, int k, const Image& img,
                             const StageContext& ctx, NormLoc z) {
  GridPointEval e;
  e.z = z;
  const FovealStack stack =
      foveal_extract(img, z, model.config.patch_side, model.config.scales);
  e.patch = stack.flatten();
  MlpOut out = mlp_forward(*model.stages[k - 1].net, e.patch);
  e.h = std::move(out.h);
  e.logits = std::move(out.o);
  fill_aggregate(ctx, k, e);
  return e;
}

struct EStepScan {
  EStepResult result;
  int star_idx = 0;
  int minus_idx = 0;
  std::vector<GridPointEval> evals;
};

EStepScan e_step_scan(const GlimpseModel& model, int k, const Image& img,
                      int label, const StageContext& ctx, const TrainHyper& hyper) {
  GLIMPSE_REQUIRE(label >= 0 && label < model.config.classes,
                  "e_step: label out of range");
  const std::vector<NormLoc> grid =
      candidate_grid(ctx.predicted, model.config.full_side, hyper.grid_side,
                     hyper.grid_step);
  EStepScan scan;
  scan.evals.resize(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    scan.evals[g].z = grid[g];
    scan.evals[g].patch =
        foveal_extract(img, grid[g], model.config.patch_side, model.config.scales)
            .flatten();
  }
  forward_candidates(*model.stages[k - 1].net, scan.evals);

  double best_total = 0.0, best_wrong = 0.0;
  int best_wrong_class = -1;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    GridPointEval& e = scan.evals[g];
    fill_aggregate(ctx, k, e);
    const double lse = log_sum_exp(e.agg);
    const double data_ce = lse - e.agg[label];
    const double dx = ctx.predicted.x - e.z.x, dy = ctx.predicted.y - e.z.y;
    double total = data_ce + 0.5 * hyper.lambda * (dx * dx + dy * dy);
    if (k > 1 && hyper.diversity_enabled)
      total += diversity_penalty(e.z, ctx.prior_locs, hyper.gamma, hyper.sigma_sq);

    // most confident wrong class at this candidate
    int wrong = -1;
    for (int c = 0; c < static_cast<int>(e.agg.size()); ++c) {
      if (c == label) continue;
      if (wrong < 0 || e.agg[c] > e.agg[wrong]) wrong = c;
    }
    const double wrong_ce = lse - e.agg[wrong];

    if (g == 0 || total < best_total) {
      best_total = total;
      scan.star_idx = static_cast<int>(g);
    }
    if (g == 0 || wrong_ce < best_wrong) {
      best_wrong = wrong_ce;
      scan.minus_idx = static_cast<int>(g);
      best_wrong_class = wrong;
    }
  }
  scan.result.z_star = scan.evals[scan.star_idx].z;
  scan.result.z_minus = scan.evals[scan.minus_idx].z;
  scan.result.best_loss = best_total;
  scan.result.offending_class = best_wrong_class;
  return scan;
}

}  // namespace

EStepResult e_step(const GlimpseModel& model, int k, const Image& img, int label,
                   const StageContext& ctx, const TrainHyper& hyper) {
  return e_step_scan(model, k, img, label, ctx, hyper).result;
}

EStepResult e_step(const GlimpseModel& model, int k, const Image& img, int label,
                   const TrainHyper& hyper) {
  const StageContext ctx = stage_context(model, k, img);
  return e_step(model, k, img, label, ctx, hyper);
}

StageGrads StageGrads::for_stage(const GlimpseModel& model, int k) {
  GLIMPSE_REQUIRE(k >= 1 && k <= static_cast<int>(model.stages.size()),
                  "StageGrads: stage out of range");
  StageGrads g;
  g.with_n0 = (k == 1);
  if (g.with_n0) g.n0 = MlpGrads::zeros_like(model.n0);
  g.net = MlpGrads::zeros_like(*model.stages[k - 1].net);
  const LocPredictor& loc = model.stages[k - 1].loc;
  g.loc_w_h = Matrix(loc.w_h.rows, loc.w_h.cols);
  g.loc_w_o = Matrix(loc.w_o.rows, loc.w_o.cols);
  g.loc_b.assign(loc.b.size(), 0.0);
  return g;
}

void StageGrads::clear() {
  if (with_n0) n0.clear();
  net.clear();
  std::fill(loc_w_h.a.begin(), loc_w_h.a.end(), 0.0);
  std::fill(loc_w_o.a.begin(), loc_w_o.a.end(), 0.0);
  std::fill(loc_b.begin(), loc_b.end(), 0.0);
}

void StageGrads::add(const StageGrads& other) {
  if (with_n0) n0.add(other.n0);
  net.add(other.net);
  for (std::size_t i = 0; i < loc_w_h.a.size(); ++i) loc_w_h.a[i] += other.loc_w_h.a[i];
  for (std::size_t i = 0; i < loc_w_o.a.size(); ++i) loc_w_o.a[i] += other.loc_w_o.a[i];
  for (std::size_t i = 0; i < loc_b.size(); ++i) loc_b[i] += other.loc_b[i];
}

void StageGrads::scale(double s) {
  if (with_n0) n0.scale(s);
  net.scale(s);
  for (auto& x : loc_w_h.a) x *= s;
  for (auto& x : loc_w_o.a) x *= s;
  for (auto& x : loc_b) x *= s;
}

namespace {

// shared gradient core; cached candidate evals avoid refeeding the glimpse net
double stage_loss_impl(const GlimpseModel& model, int k, const Image& img,
                       int label, const StageContext& ctx,
                       const GridPointEval* star, const GridPointEval* minus,
                       NormLoc z_star, NormLoc z_minus, const TrainHyper& hyper,
                       StageGrads* out) {
  const Mlp& net = *model.stages[k - 1].net;
  const LocPredictor& loc = model.stages[k - 1].loc;
  const int classes = model.config.classes;
  const double inv_k = 1.0 / static_cast<double>(k);

  GridPointEval star_local, minus_local;
  if (!star) {
    star_local = eval_candidate(model, k, img, ctx, z_star);
    star = &star_local;
  }
  if (hyper.contrastive_enabled && !minus) {
    minus_local = eval_candidate(model, k, img, ctx, z_minus);
    minus = &minus_local;
  }

  Vec grad_low_o(classes, 0.0);
  Vec grad_low_h;  // filled by the location-penalty path for stage 1
  double loss = 0.0;

  // data term at z* (and the contrastive twin at z-), both with the true label
  for (const GridPointEval* e : {star, hyper.contrastive_enabled ? minus : nullptr}) {
    if (!e) continue;
    loss += cross_entropy(e->agg, label);
    if (!out) continue;
    Vec delta = cross_entropy_grad(e->agg, label);
    Vec delta_glimpse(classes);
    for (int c = 0; c < classes; ++c) delta_glimpse[c] = inv_k * delta[c];
    mlp_backward(net, e->patch, e->h, delta_glimpse, out->net);
    if (k == 1)
      for (int c = 0; c < classes; ++c) grad_low_o[c] += delta[c];
  }

  // location penalty on the prediction against z*
  const NormLoc l = ctx.predicted;
  const double ex = l.x - z_star.x, ey = l.y - z_star.y;
  loss += 0.5 * hyper.lambda * (ex * ex + ey * ey);
  if (out) {
    const double grad_l[2] = {hyper.lambda * ex, hyper.lambda * ey};
    const double lv[2] = {l.x, l.y};
    double delta_pre[2];
    for (int i = 0; i < 2; ++i) delta_pre[i] = grad_l[i] * lv[i] * (1.0 - lv[i]);
    for (int i = 0; i < 2; ++i) {
      out->loc_b[i] += delta_pre[i];
      double* gwh = out->loc_w_h.row(i);
      for (std::size_t j = 0; j < ctx.low_h.size(); ++j)
        gwh[j] += delta_pre[i] * ctx.low_h[j];
      double* gwo = out->loc_w_o.row(i);
      for (int j = 0; j < classes; ++j)
        gwo[j] += delta_pre[i] * ctx.loc_input_sum[j];
    }
    if (k == 1) {
      grad_low_h.assign(ctx.low_h.size(), 0.0);
      for (int i = 0; i < 2; ++i) {
        const double* wh = loc.w_h.row(i);
        for (std::size_t j = 0; j < ctx.low_h.size(); ++j)
          grad_low_h[j] += wh[j] * delta_pre[i];
        const double* wo = loc.w_o.row(i);
        for (int j = 0; j < classes; ++j) grad_low_o[j] += wo[j] * delta_pre[i];
      }
    }
  }

  if (k == 1) {
    // low-resolution cross-entropy, then one backward pass through N0 with
    // every contribution to o_low and h_low combined
    loss += cross_entropy(ctx.low_o, label);
    if (out) {
      const Vec delta0 = cross_entropy_grad(ctx.low_o, label);
      for (int c = 0; c < classes; ++c) grad_low_o[c] += delta0[c];
      mlp_backward(model.n0, ctx.low_input, ctx.low_h, grad_low_o, out->n0,
                   nullptr, grad_low_h);
    }
  }
  return loss;
}

}  // namespace

double stage_loss_and_grads(const GlimpseModel& model, int k, const Image& img,
                            int label, const StageContext& ctx, NormLoc z_star,
                            NormLoc z_minus, const TrainHyper& hyper,
                            StageGrads* out) {
  GLIMPSE_REQUIRE(k >= 1 && k <= static_cast<int>(model.stages.size()),
                  "stage_loss_and_grads: stage out of range");
  return stage_loss_impl(model, k, img, label, ctx, nullptr, nullptr, z_star,
                         z_minus, hyper, out);
}

std::vector<std::span<double>> stage_param_tensors(GlimpseModel& model, int k) {
  std::vector<std::span<double>> t;
  if (k == 1)
    for (auto s : mlp_tensors(model.n0)) t.push_back(s);
  for (auto s : mlp_tensors(*model.stages[k - 1].net)) t.push_back(s);
  LocPredictor& loc = model.stages[k - 1].loc;
  t.push_back(std::span<double>(loc.w_h.a));
  t.push_back(std::span<double>(loc.w_o.a));
  t.push_back(std::span<double>(loc.b));
  return t;
}

std::vector<std::span<const double>> stage_grad_tensors(const StageGrads& g) {
  std::vector<std::span<const double>> t;
  if (g.with_n0)
    for (auto s : mlp_tensors(g.n0)) t.push_back(s);
  for (auto s : mlp_tensors(g.net)) t.push_back(s);
  t.push_back(std::span<const double>(g.loc_w_h.a));
  t.push_back(std::span<const double>(g.loc_w_o.a));
  t.push_back(std::span<const double>(g.loc_b));
  return t;
}

std::vector<std::span<double>> finetune_param_tensors(GlimpseModel& model, int k) {
  return mlp_tensors(*model.stages[k - 1].net);
}

std::vector<std::span<const double>> finetune_grad_tensors(const StageGrads& g) {
  return mlp_tensors(g.net);
}

// --- minibatch engine ------------------------------------------------------
// The expensive per-sample work (grid search, forwards, output deltas) runs
// in parallel and is pure, so its results do not depend on scheduling. The
// gradient is then accumulated from rank-1 contributions in fixed sample
// order with each gradient row owned by exactly one worker, which keeps every
// run bitwise identical for any worker count while touching each gradient
// matrix only once per batch.

namespace {

int resolve_workers(int requested, int jobs) {
  int t = requested > 0 ? requested
                        : static_cast<int>(std::thread::hardware_concurrency());
  return std::clamp(t, 1, std::max(jobs, 1));
}

void parallel_batch(const std::vector<int>& batch, int workers,
                    const std::function<void(int, int)>& fn) {
  const int n = static_cast<int>(batch.size());
  const int t = resolve_workers(workers, n);
  if (t == 1) {
    for (int s = 0; s < n; ++s) fn(s, batch[s]);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(t);
  for (int w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int s = w; s < n; s += t) fn(s, batch[s]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// one rank-1 term: grad.row(r) += delta[r] * input for every row r
struct Rank1 {
  const double* delta;
  const double* input;
};

// applied row-partitioned: each entry accumulates its contributions in list
// order no matter how many workers run
void accumulate_rank1(Matrix& grad, const std::vector<Rank1>& contribs, int workers) {
  if (contribs.empty()) return;
  const int rows = grad.rows, cols = grad.cols;
  auto run_rows = [&](int row_begin, int row_end) {
    for (int r = row_begin; r < row_end; ++r) {
      double* g = grad.row(r);
      for (const Rank1& c : contribs) {
        const double d = c.delta[r];
        if (d == 0.0) continue;
        const double* in = c.input;
        for (int j = 0; j < cols; ++j) g[j] += d * in[j];
      }
    }
  };
  const int t = std::min(resolve_workers(workers, rows), rows >= 64 ? 8 : 1);
  if (t == 1) {
    run_rows(0, rows);
    return;
  }
  std::vector<std::thread> pool;
  const int chunk = (rows + t - 1) / t;
  for (int w = 0; w < t; ++w)
    pool.emplace_back(run_rows, std::min(rows, w * chunk),
                      std::min(rows, (w + 1) * chunk));
  for (auto& th : pool) th.join();
}

void accumulate_bias(Vec& grad_b, const std::vector<const double*>& deltas) {
  for (std::size_t r = 0; r < grad_b.size(); ++r)
    for (const double* d : deltas) grad_b[r] += d[r];
}

// hidden-layer delta: activation'(h) applied to w2^T * delta_out (+ extra)
void hidden_delta(const Mlp& net, const Vec& h, std::span<const double> delta_out,
                  std::span<const double> extra, Vec& dpre) {
  const int hidden = net.hidden_dim(), out = net.out_dim();
  dpre.assign(hidden, 0.0);
  for (int i = 0; i < out; ++i) {
    const double d = delta_out[i];
    const double* w = net.w2.row(i);
    for (int j = 0; j < hidden; ++j) dpre[j] += w[j] * d;
  }
  if (!extra.empty())
    for (int j = 0; j < hidden; ++j) dpre[j] += extra[j];
  for (int j = 0; j < hidden; ++j) {
    if (net.hidden_activation == Activation::Relu)
      dpre[j] = h[j] > 0.0 ? dpre[j] : 0.0;
    else
      dpre[j] *= h[j] * (1.0 - h[j]);
  }
}

// per-sample products of the stage loss, ready for ordered accumulation
struct StageWork {
  StageContext ctx;
  EStepScan scan;
  Vec delta_star, delta_minus;  // glimpse output deltas (already scaled by 1/k)
  Vec dpre_star, dpre_minus;    // glimpse hidden deltas
  Vec dloc;                     // location-head deltas (2)
  Vec grad_low_o, grad_low_h, dpre_low;  // stage-1 flow into N0
  double loss = 0.0;
};

void stage_phase_a(const GlimpseModel& model, int k, const Image& img, int label,
                   const TrainHyper& hyper, StageWork& w) {
  const Mlp& net = *model.stages[k - 1].net;
  const LocPredictor& loc = model.stages[k - 1].loc;
  const int classes = model.config.classes;
  const double inv_k = 1.0 / static_cast<double>(k);

  w.ctx = stage_context(model, k, img);
  w.scan = e_step_scan(model, k, img, label, w.ctx, hyper);
  const GridPointEval& star = w.scan.evals[w.scan.star_idx];
  const GridPointEval& minus = w.scan.evals[w.scan.minus_idx];
  w.loss = 0.0;

  if (k == 1) w.grad_low_o.assign(classes, 0.0);

  auto data_term = [&](const GridPointEval& e, Vec& delta_out, Vec& dpre) {
    w.loss += cross_entropy(e.agg, label);
    Vec delta = cross_entropy_grad(e.agg, label);
    delta_out.resize(classes);
    for (int c = 0; c < classes; ++c) delta_out[c] = inv_k * delta[c];
    hidden_delta(net, e.h, delta_out, {}, dpre);
    if (k == 1)
      for (int c = 0; c < classes; ++c) w.grad_low_o[c] += delta[c];
  };
  data_term(star, w.delta_star, w.dpre_star);
  if (hyper.contrastive_enabled) data_term(minus, w.delta_minus, w.dpre_minus);

  const NormLoc l = w.ctx.predicted;
  const NormLoc zs = star.z;
  const double ex = l.x - zs.x, ey = l.y - zs.y;
  w.loss += 0.5 * hyper.lambda * (ex * ex + ey * ey);
  w.dloc.assign(2, 0.0);
  const double grad_l[2] = {hyper.lambda * ex, hyper.lambda * ey};
  const double lv[2] = {l.x, l.y};
  for (int i = 0; i < 2; ++i) w.dloc[i] = grad_l[i] * lv[i] * (1.0 - lv[i]);

  if (k == 1) {
    w.grad_low_h.assign(w.ctx.low_h.size(), 0.0);
    for (int i = 0; i < 2; ++i) {
      const double* wh = loc.w_h.row(i);
      for (std::size_t j = 0; j < w.ctx.low_h.size(); ++j)
        w.grad_low_h[j] += wh[j] * w.dloc[i];
      const double* wo = loc.w_o.row(i);
      for (int c = 0; c < classes; ++c) w.grad_low_o[c] += wo[c] * w.dloc[i];
    }
    w.loss += cross_entropy(w.ctx.low_o, label);
    const Vec delta0 = cross_entropy_grad(w.ctx.low_o, label);
    for (int c = 0; c < classes; ++c) w.grad_low_o[c] += delta0[c];
    hidden_delta(model.n0, w.ctx.low_h, w.grad_low_o, w.grad_low_h, w.dpre_low);
  }
}

// ordered accumulation of a batch of StageWork into one gradient buffer
void stage_phase_b(int k, const TrainHyper& hyper,
                   const std::vector<StageWork>& work, std::size_t count,
                   StageGrads& grads) {
  std::vector<Rank1> w1c, w2c;
  std::vector<const double*> b1c, b2c;
  w1c.reserve(2 * count);
  w2c.reserve(2 * count);
  b1c.reserve(2 * count);
  b2c.reserve(2 * count);
  for (std::size_t s = 0; s < count; ++s) {
    const StageWork& w = work[s];
    const GridPointEval& star = w.scan.evals[w.scan.star_idx];
    w1c.push_back({w.dpre_star.data(), star.patch.data()});
    w2c.push_back({w.delta_star.data(), star.h.data()});
    b1c.push_back(w.dpre_star.data());
    b2c.push_back(w.delta_star.data());
    if (hyper.contrastive_enabled) {
      const GridPointEval& minus = w.scan.evals[w.scan.minus_idx];
      w1c.push_back({w.dpre_minus.data(), minus.patch.data()});
      w2c.push_back({w.delta_minus.data(), minus.h.data()});
      b1c.push_back(w.dpre_minus.data());
      b2c.push_back(w.delta_minus.data());
    }
  }
  accumulate_rank1(grads.net.w1, w1c, hyper.workers);
  accumulate_rank1(grads.net.w2, w2c, hyper.workers);
  accumulate_bias(grads.net.b1, b1c);
  accumulate_bias(grads.net.b2, b2c);

  std::vector<Rank1> lwh, lwo;
  std::vector<const double*> lb;
  for (std::size_t s = 0; s < count; ++s) {
    lwh.push_back({work[s].dloc.data(), work[s].ctx.low_h.data()});
    lwo.push_back({work[s].dloc.data(), work[s].ctx.loc_input_sum.data()});
    lb.push_back(work[s].dloc.data());
  }
  accumulate_rank1(grads.loc_w_h, lwh, hyper.workers);
  accumulate_rank1(grads.loc_w_o, lwo, hyper.workers);
  accumulate_bias(grads.loc_b, lb);

  if (k == 1) {
    std::vector<Rank1> n1c, n2c;
    std::vector<const double*> nb1, nb2;
    for (std::size_t s = 0; s < count; ++s) {
      n1c.push_back({work[s].dpre_low.data(), work[s].ctx.low_input.data()});
      n2c.push_back({work[s].grad_low_o.data(), work[s].ctx.low_h.data()});
      nb1.push_back(work[s].dpre_low.data());
      nb2.push_back(work[s].grad_low_o.data());
    }
    accumulate_rank1(grads.n0.w1, n1c, hyper.workers);
    accumulate_rank1(grads.n0.w2, n2c, hyper.workers);
    accumulate_bias(grads.n0.b1, nb1);
    accumulate_bias(grads.n0.b2, nb2);
  }
}

double heldout_error(const GlimpseModel& model, const LabeledSet* heldout,
                     int glimpses, int workers) {
  if (!heldout || heldout->size() == 0) return -1.0;
  return evaluate(model, *heldout, glimpses, 0, workers).error_rate;
}

void check_finite(double loss, const std::string& phase, int epoch) {
  if (!std::isfinite(loss))
    throw std::runtime_error("training diverged: non-finite loss in " + phase +
                             " epoch " + std::to_string(epoch + 1));
}

}  // namespace

void train_stage(GlimpseModel& model, int k, const LabeledSet& train,
                 const TrainHyper& hyper, const TrainCallbacks& cb,
                 const LabeledSet* heldout) {
  hyper.validate();
  GLIMPSE_REQUIRE(k >= 1 && k <= static_cast<int>(model.stages.size()),
                  "train_stage: stage out of range");
  GLIMPSE_REQUIRE(train.size() > 0, "train_stage: empty training set");
  const std::string phase = "stage" + std::to_string(k);

  auto params = stage_param_tensors(model, k);
  OptimizerState opt;
  opt.momentum = hyper.momentum;
  opt.learning_rate = hyper.lr;
  opt.init(params);

  std::vector<StageWork> work(hyper.batch);
  StageGrads mean = StageGrads::for_stage(model, k);

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const auto order =
        batches(train.size(), hyper.batch, hyper.shuffle_seed ^ (0xABCD0000ull + k), epoch);
    double loss_sum = 0.0;
    for (const auto& batch : order) {
      parallel_batch(batch, hyper.workers, [&](int s, int idx) {
        stage_phase_a(model, k, train.images[idx], train.labels[idx], hyper,
                      work[s]);
      });
      mean.clear();
      stage_phase_b(k, hyper, work, batch.size(), mean);
      double batch_loss = 0.0;
      for (std::size_t s = 0; s < batch.size(); ++s) batch_loss += work[s].loss;
      const double inv = 1.0 / static_cast<double>(batch.size());
      mean.scale(inv);
      batch_loss *= inv;
      check_finite(batch_loss, phase, epoch);
      loss_sum += batch_loss * static_cast<double>(batch.size());
      sgd_momentum_step(params, stage_grad_tensors(mean), opt);
    }
    if (cb.on_epoch)
      cb.on_epoch(phase, epoch + 1, loss_sum / static_cast<double>(train.size()),
                  heldout_error(model, heldout, k, hyper.workers));
  }
}

void fine_tune(GlimpseModel& model, int k, const LabeledSet& train,
               const TrainHyper& hyper, const TrainCallbacks& cb,
               const LabeledSet* heldout) {
  hyper.validate();
  GLIMPSE_REQUIRE(k >= 1 && k <= static_cast<int>(model.stages.size()),
                  "fine_tune: stage out of range");
  GLIMPSE_REQUIRE(train.size() > 0, "fine_tune: empty training set");
  const std::string phase = "fine_tune";
  const Mlp& net = *model.stages[k - 1].net;
  const double inv_k = 1.0 / static_cast<double>(k);

  auto params = finetune_param_tensors(model, k);
  OptimizerState opt;
  opt.momentum = hyper.momentum;
  opt.learning_rate = hyper.lr;
  opt.init(params);

  // locations are the model's own predictions; only the glimpse net moves
  struct TuneWork {
    StageContext ctx;
    GridPointEval eval;
    Vec delta, dpre;
    double loss = 0.0;
  };
  std::vector<TuneWork> work(hyper.batch);
  StageGrads mean = StageGrads::for_stage(model, k);

  for (int epoch = 0; epoch < hyper.fine_tune_epochs; ++epoch) {
    const auto order = batches(train.size(), hyper.batch,
                               hyper.shuffle_seed ^ (0xF17E0000ull + k), epoch);
    double loss_sum = 0.0;
    for (const auto& batch : order) {
      parallel_batch(batch, hyper.workers, [&](int s, int idx) {
        TuneWork& w = work[s];
        w.ctx = stage_context(model, k, train.images[idx]);
        w.eval = eval_candidate(model, k, train.images[idx], w.ctx, w.ctx.predicted);
        const int label = train.labels[idx];
        w.loss = cross_entropy(w.eval.agg, label);
        w.delta = cross_entropy_grad(w.eval.agg, label);
        for (auto& d : w.delta) d *= inv_k;
        hidden_delta(net, w.eval.h, w.delta, {}, w.dpre);
      });
      mean.clear();
      std::vector<Rank1> w1c, w2c;
      std::vector<const double*> b1c, b2c;
      double batch_loss = 0.0;
      for (std::size_t s = 0; s < batch.size(); ++s) {
        w1c.push_back({work[s].dpre.data(), work[s].eval.patch.data()});
        w2c.push_back({work[s].delta.data(), work[s].eval.h.data()});
        b1c.push_back(work[s].dpre.data());
        b2c.push_back(work[s].delta.data());
        batch_loss += work[s].loss;
      }
      accumulate_rank1(mean.net.w1, w1c, hyper.workers);
      accumulate_rank1(mean.net.w2, w2c, hyper.workers);
      accumulate_bias(mean.net.b1, b1c);
      accumulate_bias(mean.net.b2, b2c);
      const double inv = 1.0 / static_cast<double>(batch.size());
      mean.scale(inv);
      batch_loss *= inv;
      check_finite(batch_loss, phase, epoch);
      loss_sum += batch_loss * static_cast<double>(batch.size());
      sgd_momentum_step(params, finetune_grad_tensors(mean), opt);
    }
    if (cb.on_epoch)
      cb.on_epoch(phase, epoch + 1, loss_sum / static_cast<double>(train.size()),
                  heldout_error(model, heldout, k, hyper.workers));
  }
}

void train_n0_only(GlimpseModel& model, const LabeledSet& train,
                   const TrainHyper& hyper, const TrainCallbacks& cb,
                   const LabeledSet* heldout) {
  hyper.validate();
  GLIMPSE_REQUIRE(train.size() > 0, "train_n0_only: empty training set");
  const std::string phase = "n0";

  auto params = mlp_tensors(model.n0);
  OptimizerState opt;
  opt.momentum = hyper.momentum;
  opt.learning_rate = hyper.lr;
  opt.init(params);

  struct N0Work {
    Vec input, h, delta, dpre;
    double loss = 0.0;
  };
  std::vector<N0Work> work(hyper.batch);
  MlpGrads mean = MlpGrads::zeros_like(model.n0);

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    const auto order =
        batches(train.size(), hyper.batch, hyper.shuffle_seed ^ 0xA0A0A0ull, epoch);
    double loss_sum = 0.0;
    for (const auto& batch : order) {
      parallel_batch(batch, hyper.workers, [&](int s, int idx) {
        N0Work& w = work[s];
        w.input =
            box_downsample(train.images[idx], model.config.downsample_factor()).data;
        MlpOut out = mlp_forward(model.n0, w.input);
        w.h = std::move(out.h);
        const int label = train.labels[idx];
        w.loss = cross_entropy(out.o, label);
        w.delta = cross_entropy_grad(out.o, label);
        hidden_delta(model.n0, w.h, w.delta, {}, w.dpre);
      });
      mean.clear();
      std::vector<Rank1> w1c, w2c;
      std::vector<const double*> b1c, b2c;
      double batch_loss = 0.0;
      for (std::size_t s = 0; s < batch.size(); ++s) {
        w1c.push_back({work[s].dpre.data(), work[s].input.data()});
        w2c.push_back({work[s].delta.data(), work[s].h.data()});
        b1c.push_back(work[s].dpre.data());
        b2c.push_back(work[s].delta.data());
        batch_loss += work[s].loss;
      }
      accumulate_rank1(mean.w1, w1c, hyper.workers);
      accumulate_rank1(mean.w2, w2c, hyper.workers);
      accumulate_bias(mean.b1, b1c);
      accumulate_bias(mean.b2, b2c);
      const double inv = 1.0 / static_cast<double>(batch.size());
      mean.scale(inv);
      batch_loss *= inv;
      check_finite(batch_loss, phase, epoch);
      loss_sum += batch_loss * static_cast<double>(batch.size());
      std::vector<std::span<const double>> grads;
      for (auto g : mlp_tensors(mean)) grads.push_back(g);
      sgd_momentum_step(params, grads, opt);
    }
    if (cb.on_epoch)
      cb.on_epoch(phase, epoch + 1, loss_sum / static_cast<double>(train.size()),
                  heldout_error(model, heldout, 0, hyper.workers));
  }
}

void train_full(GlimpseModel& model, const LabeledSet& train,
                const TrainHyper& hyper, const TrainCallbacks& cb,
                const LabeledSet* heldout) {
  if (model.config.num_glimpses == 0) {
    train_n0_only(model, train, hyper, cb, heldout);
    if (cb.on_phase_done) cb.on_phase_done("n0", model);
    return;
  }
  for (int k = 1; k <= model.config.num_glimpses; ++k) {
    train_stage(model, k, train, hyper, cb, heldout);
    if (cb.on_phase_done) cb.on_phase_done("stage" + std::to_string(k), model);
  }
  if (hyper.fine_tune_enabled && hyper.fine_tune_epochs > 0) {
    fine_tune(model, model.config.num_glimpses, train, hyper, cb, heldout);
    if (cb.on_phase_done) cb.on_phase_done("fine_tune", model);
  }
}

// --- finite-difference verification ---------------------------------------

namespace {

ModelConfig toy_config() {
  ModelConfig cfg;
  cfg.full_side = 12;
  cfg.low_side = 6;
  cfg.patch_side = 4;
  cfg.scales = 2;
  cfg.classes = 3;
  cfg.hidden = 8;
  cfg.num_glimpses = 2;
  return cfg;
}

Image toy_image(std::uint64_t seed, int side) {
  SplitMix64 rng(seed);
  Image img(side, side);
  for (auto& p : img.data) p = rng.next_double();
  return img;
}

std::vector<GradCheckTensor> pair_tensors(std::vector<std::span<double>> params,
                                          std::vector<std::span<const double>> grads) {
  std::vector<GradCheckTensor> t;
  for (std::size_t i = 0; i < params.size(); ++i)
    t.push_back({params[i], grads[i]});
  return t;
}

}  // namespace

std::vector<GradCheckReport> gradient_check_suite(double epsilon, bool inject_fault) {
  std::vector<GradCheckReport> reports;
  const int label = 1;

  {  // sanity: quadratic loss, gradient is the parameter vector itself
    SplitMix64 rng(7);
    Vec p(30);
    for (auto& v : p) v = rng.next_range(0.2, 1.0) * (rng.next() % 2 ? 1.0 : -1.0);
    auto loss = [&p] {
      double s = 0.0;
      for (double v : p) s += 0.5 * v * v;
      return s;
    };
    std::vector<GradCheckTensor> t = {{std::span<double>(p), std::span<const double>(p)}};
    reports.push_back({"quadratic", grad_check(loss, t, epsilon)});
  }

  const ModelConfig cfg = toy_config();
  const Image img = toy_image(11, cfg.full_side);
  TrainHyper hyper;
  hyper.lambda = 100.0;

  {  // low-resolution cross-entropy, parameters and input pixels
    GlimpseModel model = GlimpseModel::create(cfg, 21);
    Image low = box_downsample(img, cfg.downsample_factor());
    auto loss = [&] { return cross_entropy(mlp_forward(model.n0, low.data).o, label); };
    MlpGrads g = MlpGrads::zeros_like(model.n0);
    Vec grad_x;
    const MlpOut out = mlp_forward(model.n0, low.data);
    mlp_backward(model.n0, low.data, out.h, cross_entropy_grad(out.o, label), g,
                 &grad_x);
    auto t = pair_tensors(mlp_tensors(model.n0), mlp_tensors(std::as_const(g)));
    reports.push_back({"low_res_ce", grad_check(loss, t, epsilon)});
    std::vector<GradCheckTensor> ti = {
        {std::span<double>(low.data), std::span<const double>(grad_x)}};
    reports.push_back({"low_res_input", grad_check(loss, ti, epsilon)});
  }

  for (int k : {1, 2}) {  // the full stage losses at fixed locations
    GlimpseModel model = GlimpseModel::create(cfg, 33 + k);
    const StageContext ctx0 = stage_context(model, k, img);
    const EStepResult es = e_step(model, k, img, label, ctx0, hyper);
    StageGrads grads = StageGrads::for_stage(model, k);
    stage_loss_and_grads(model, k, img, label, ctx0, es.z_star, es.z_minus, hyper,
                         &grads);
    if (inject_fault && k == 1)
      for (auto& v : grads.net.w2.a) v *= 1.01;
    auto loss = [&] {
      // parameters move between evaluations, so the frozen context is rebuilt
      const StageContext ctx = stage_context(model, k, img);
      return stage_loss_and_grads(model, k, img, label, ctx, es.z_star, es.z_minus,
                                  hyper, nullptr);
    };
    auto t = pair_tensors(stage_param_tensors(model, k), stage_grad_tensors(grads));
    reports.push_back({"stage" + std::to_string(k) + "_loss",
                       grad_check(loss, t, epsilon)});
  }

  return reports;
}

}  // namespace glimpse

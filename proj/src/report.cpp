#include "glimpse/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace glimpse {

std::int64_t baseline_fc_flops(int side, int hidden, int classes) {
  return mac_count(static_cast<std::int64_t>(side) * side, hidden, classes);
}

namespace {

void parallel_indices(std::size_t n, int workers,
                      const std::function<void(std::size_t)>& fn) {
  int t = workers > 0 ? workers : static_cast<int>(std::thread::hardware_concurrency());
  t = std::clamp<int>(t, 1, static_cast<int>(std::max<std::size_t>(n, 1)));
  if (t == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(t);
  for (int w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += t) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void check_set(const GlimpseModel& model, const LabeledSet& set) {
  GLIMPSE_REQUIRE(set.size() > 0, "evaluate: empty set");
  GLIMPSE_REQUIRE(set.width() == model.config.full_side &&
                      set.height() == model.config.full_side,
                  "evaluate: set dimensions do not match the model");
}

double finish_speedup(EvalReport& r, const GlimpseModel& model, int baseline_side) {
  const int side = baseline_side > 0 ? baseline_side : model.config.full_side;
  const double baseline = static_cast<double>(
      baseline_fc_flops(side, model.config.hidden, model.config.classes));
  r.speedup = baseline / r.mean_flops;
  return baseline;
}

}  // namespace

EvalReport evaluate(const GlimpseModel& model, const LabeledSet& set, int glimpses,
                    int baseline_side, int workers) {
  check_set(model, set);
  GLIMPSE_REQUIRE(glimpses >= 0 && glimpses <= model.config.num_glimpses,
                  "evaluate: glimpse budget exceeds the model");
  const std::size_t n = set.size();
  std::vector<unsigned char> wrong(n, 0);
  parallel_indices(n, workers, [&](std::size_t i) {
    const GlimpseTrace t = run(model, set.images[i], glimpses);
    wrong[i] = t.predicted_label() != set.labels[i];
  });
  EvalReport r;
  std::size_t bad = 0;
  for (auto w : wrong) bad += w;
  r.error_rate = static_cast<double>(bad) / static_cast<double>(n);
  r.rejection_rate = 0.0;
  r.per_stage_classified.assign(glimpses + 1, 0.0);
  r.per_stage_error.assign(glimpses + 1, 0.0);
  r.per_stage_classified[glimpses] = 1.0;
  r.per_stage_error[glimpses] = r.error_rate;
  r.mean_flops = static_cast<double>(run_flops(model.config, glimpses));
  finish_speedup(r, model, baseline_side);
  return r;
}

EvalReport evaluate_cascade(const GlimpseModel& model, const LabeledSet& set,
                            double threshold, bool force_final, int baseline_side,
                            int workers) {
  check_set(model, set);
  const std::size_t n = set.size();
  const int stages = model.config.num_glimpses + 1;
  std::vector<int> decided(n, 0);
  std::vector<unsigned char> wrong(n, 0);
  std::vector<std::int64_t> flops(n, 0);
  parallel_indices(n, workers, [&](std::size_t i) {
    const CascadeDecision d = run_cascaded(model, set.images[i], threshold, force_final);
    decided[i] = d.trace.decided_at;
    flops[i] = d.trace.flops;
    wrong[i] = !d.rejected() && d.label != set.labels[i];
  });
  EvalReport r;
  r.per_stage_classified.assign(stages, 0.0);
  r.per_stage_error.assign(stages, 0.0);
  std::size_t rejected = 0, bad = 0;
  double flop_sum = 0.0;
  std::vector<std::size_t> stage_count(stages, 0), stage_bad(stages, 0);
  for (std::size_t i = 0; i < n; ++i) {
    flop_sum += static_cast<double>(flops[i]);
    if (decided[i] == GlimpseTrace::kRejected) {
      ++rejected;
      continue;
    }
    ++stage_count[decided[i]];
    stage_bad[decided[i]] += wrong[i];
    bad += wrong[i];
  }
  for (int s = 0; s < stages; ++s) {
    r.per_stage_classified[s] = static_cast<double>(stage_count[s]) / static_cast<double>(n);
    r.per_stage_error[s] = stage_count[s] == 0
                               ? 0.0
                               : static_cast<double>(stage_bad[s]) /
                                     static_cast<double>(stage_count[s]);
  }
  r.rejection_rate = static_cast<double>(rejected) / static_cast<double>(n);
  r.error_rate = static_cast<double>(bad) / static_cast<double>(n);
  r.mean_flops = flop_sum / static_cast<double>(n);
  finish_speedup(r, model, baseline_side);
  return r;
}

// --- image artifacts -------------------------------------------------------

namespace {

struct Gray8 {
  int width = 0, height = 0;
  std::vector<unsigned char> px;

  Gray8(int w, int h) : width(w), height(h), px(static_cast<std::size_t>(w) * h, 0) {}
  unsigned char& at(int r, int c) { return px[static_cast<std::size_t>(r) * width + c]; }
};

void write_pgm(const Gray8& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open PGM for writing: " + path);
  f << "P5\n" << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.px.data()), img.px.size());
  if (!f) throw std::runtime_error("write failed on PGM: " + path);
}

// min-max normalize one tile; flat tiles map to mid-gray
void blit_normalized(Gray8& out, int top, int left, const double* v, int side) {
  double lo = v[0], hi = v[0];
  for (int i = 1; i < side * side; ++i) {
    lo = std::min(lo, v[i]);
    hi = std::max(hi, v[i]);
  }
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double x = v[r * side + c];
      const unsigned char g =
          hi > lo ? static_cast<unsigned char>(std::lround((x - lo) / (hi - lo) * 255.0))
                  : 128;
      out.at(top + r, left + c) = g;
    }
}

void blit_image(Gray8& out, int top, int left, const Image& img) {
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      out.at(top + r, left + c) =
          static_cast<unsigned char>(std::lround(img.at(r, c) * 255.0));
}

}  // namespace

void dump_filters(const Mlp& net, int tile_rows, int tile_cols,
                  const std::string& out_path) {
  const int hidden = net.hidden_dim();
  GLIMPSE_REQUIRE(tile_rows * tile_cols >= hidden,
                  "dump_filters: tile grid smaller than hidden unit count");
  // the input is either one square patch or several stacked square scales
  const int in = net.in_dim();
  int scales = 0, side = 0;
  for (int s = 1; s <= in; ++s) {
    const int block = in / s;
    if (in % s != 0) continue;
    const int w = static_cast<int>(std::lround(std::sqrt(static_cast<double>(block))));
    if (w * w == block) {
      scales = s;
      side = w;
      break;
    }
  }
  GLIMPSE_REQUIRE(scales > 0, "dump_filters: input dim is not a stack of squares");

  const int block_w = tile_cols * (side + 1) - 1;
  const int block_h = tile_rows * (side + 1) - 1;
  Gray8 out(block_w, scales * block_h + (scales - 1));
  for (int s = 0; s < scales; ++s) {
    const int block_top = s * (block_h + 1);
    for (int u = 0; u < hidden; ++u) {
      const int tr = u / tile_cols, tc = u % tile_cols;
      blit_normalized(out, block_top + tr * (side + 1), tc * (side + 1),
                      net.w1.row(u) + s * side * side, side);
    }
  }
  write_pgm(out, out_path);
}

void dump_traces(const GlimpseModel& model, const LabeledSet& set, int n_examples,
                 const std::string& out_path) {
  GLIMPSE_REQUIRE(n_examples >= 0, "dump_traces: negative example count");
  check_set(model, set);
  const auto& cfg = model.config;
  n_examples = std::min<int>(n_examples, static_cast<int>(set.size()));

  // rank by disagreement between the low-resolution and final distributions
  std::vector<GlimpseTrace> traces(set.size());
  std::vector<double> disagreement(set.size(), 0.0);
  for (std::size_t i = 0; i < set.size(); ++i) {
    traces[i] = run(model, set.images[i], cfg.num_glimpses);
    const Vec y0 = softmax(traces[i].low_logits);
    const Vec yf = traces[i].final_distribution();
    double d = 0.0;
    for (std::size_t c = 0; c < y0.size(); ++c) d += std::fabs(y0[c] - yf[c]);
    disagreement[i] = d;
  }
  std::vector<std::size_t> idx(set.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (disagreement[a] != disagreement[b]) return disagreement[a] > disagreement[b];
    return a < b;
  });

  const std::string sidecar_path = out_path + ".txt";
  std::ofstream side(sidecar_path);
  if (!side) throw std::runtime_error("cannot open sidecar for writing: " + sidecar_path);

  if (n_examples == 0) return;  // empty sidecar, no image

  const int row_h = cfg.full_side;
  const int row_w = cfg.full_side + 1 + cfg.low_side + 1 +
                    cfg.num_glimpses * (cfg.patch_side + 1);
  Gray8 out(row_w, n_examples * (row_h + 1) - 1);
  char buf[128];
  for (int e = 0; e < n_examples; ++e) {
    const std::size_t i = idx[e];
    const GlimpseTrace& t = traces[i];
    const int top = e * (row_h + 1);
    int left = 0;
    blit_image(out, top, left, set.images[i]);
    left += cfg.full_side + 1;
    blit_image(out, top, left, box_downsample(set.images[i], cfg.downsample_factor()));
    left += cfg.low_side + 1;
    for (int g = 0; g < cfg.num_glimpses; ++g) {
      const FovealStack stack =
          foveal_extract(set.images[i], t.locations[g], cfg.patch_side, cfg.scales);
      blit_image(out, top, left, stack.patches.front());
      left += cfg.patch_side + 1;
    }

    const Vec y0 = softmax(t.low_logits);
    const int n0_pred = static_cast<int>(std::max_element(y0.begin(), y0.end()) - y0.begin());
    side << "example " << e << ": index=" << i << " true=" << set.labels[i]
         << " n0_pred=" << n0_pred << " final_pred=" << t.predicted_label() << "\n";
    for (int g = 0; g < cfg.num_glimpses; ++g) {
      const Vec& ya = t.aggregates[g];
      const int pred = static_cast<int>(std::max_element(ya.begin(), ya.end()) - ya.begin());
      std::snprintf(buf, sizeof buf, "  glimpse %d: loc=(%.17g,%.17g) pred=%d\n",
                    g + 1, t.locations[g].x, t.locations[g].y, pred);
      side << buf;
    }
  }
  if (!side) throw std::runtime_error("write failed on sidecar: " + sidecar_path);
  write_pgm(out, out_path);
}

std::string format_report_table(const EvalReport& r) {
  std::ostringstream os;
  char buf[160];
  os << "stage       classified   error-among-classified\n";
  for (std::size_t s = 0; s < r.per_stage_classified.size(); ++s) {
    const std::string name = s == 0 ? "N0" : ("glimpse " + std::to_string(s));
    std::snprintf(buf, sizeof buf, "%-11s %10.4f   %10.4f\n", name.c_str(),
                  r.per_stage_classified[s], r.per_stage_error[s]);
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "%-11s %10.4f\n", "rejected", r.rejection_rate);
  os << buf;
  std::snprintf(buf, sizeof buf,
                "error %.4f%% | mean flops %.1f | speed-up %.1f\n",
                r.error_rate * 100.0, r.mean_flops, r.speedup);
  os << buf;
  return os.str();
}

std::string format_report_kv(const EvalReport& r) {
  std::ostringstream os;
  char buf[64];
  auto join = [&](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", v[i]);
      if (i) s += ",";
      s += buf;
    }
    return s;
  };
  std::snprintf(buf, sizeof buf, "%.17g", r.error_rate);
  os << "error_rate=" << buf << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", r.rejection_rate);
  os << "rejection_rate=" << buf << "\n";
  os << "per_stage_classified=" << join(r.per_stage_classified) << "\n";
  os << "per_stage_error=" << join(r.per_stage_error) << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", r.mean_flops);
  os << "mean_flops=" << buf << "\n";
  std::snprintf(buf, sizeof buf, "%.17g", r.speedup);
  os << "speedup=" << buf << "\n";
  std::snprintf(buf, sizeof buf, "%.1f", r.speedup);
  os << "speedup_1dp=" << buf << "\n";
  return os.str();
}

}  // namespace glimpse

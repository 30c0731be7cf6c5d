#include "glimpse/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace glimpse {

void ModelConfig::validate() const {
  GLIMPSE_REQUIRE(full_side > 0 && low_side > 0 && patch_side > 0 && scales >= 1 &&
                      classes >= 2 && hidden >= 1 && num_glimpses >= 0,
                  "ModelConfig: dimensions must be positive");
  GLIMPSE_REQUIRE(full_side % low_side == 0,
                  "ModelConfig: low_side must divide full_side");
  GLIMPSE_REQUIRE((patch_side << (scales - 1)) <= full_side,
                  "ModelConfig: widest glimpse scale exceeds the image");
}

LocPredictor LocPredictor::random(int hidden, int classes, SplitMix64& rng) {
  LocPredictor p;
  p.w_h = Matrix(2, hidden);
  p.w_o = Matrix(2, classes);
  p.b.assign(2, 0.0);
  const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (auto& w : p.w_h.a) w = rng.next_range(-sh, sh);
  const double so = 1.0 / std::sqrt(static_cast<double>(classes));
  for (auto& w : p.w_o.a) w = rng.next_range(-so, so);
  return p;
}

GlimpseModel GlimpseModel::create(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SplitMix64 rng(seed);
  GlimpseModel m;
  m.config = cfg;
  m.n0 = Mlp::random(cfg.low_side * cfg.low_side, cfg.hidden, cfg.classes, rng);
  std::shared_ptr<Mlp> shared;
  for (int n = 0; n < cfg.num_glimpses; ++n) {
    GlimpseStage stage;
    if (cfg.weight_sharing) {
      if (!shared)
        shared = std::make_shared<Mlp>(
            Mlp::random(cfg.glimpse_input_dim(), cfg.hidden, cfg.classes, rng));
      stage.net = shared;
    } else {
      stage.net = std::make_shared<Mlp>(
          Mlp::random(cfg.glimpse_input_dim(), cfg.hidden, cfg.classes, rng));
    }
    stage.loc = LocPredictor::random(cfg.hidden, cfg.classes, rng);
    m.stages.push_back(std::move(stage));
  }
  return m;
}

GlimpseModel GlimpseModel::clone() const {
  GlimpseModel m;
  m.config = config;
  m.n0 = n0;
  std::shared_ptr<Mlp> shared;
  for (const auto& s : stages) {
    GlimpseStage stage;
    if (config.weight_sharing) {
      if (!shared) shared = std::make_shared<Mlp>(*s.net);
      stage.net = shared;
    } else {
      stage.net = std::make_shared<Mlp>(*s.net);
    }
    stage.loc = s.loc;
    m.stages.push_back(std::move(stage));
  }
  return m;
}

N0Out n0_forward(const GlimpseModel& model, const Image& img) {
  const auto& cfg = model.config;
  GLIMPSE_REQUIRE(img.width == cfg.full_side && img.height == cfg.full_side,
                  "n0_forward: image dims do not match the model");
  const Image low = box_downsample(img, cfg.downsample_factor());
  MlpOut out = mlp_forward(model.n0, low.data);
  N0Out r;
  r.h = std::move(out.h);
  r.o = std::move(out.o);
  r.y = softmax(r.o);
  return r;
}

static double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

NormLoc predict_location(const GlimpseModel& model, int stage_n, const Vec& h_low,
                         const Vec& o_low, const std::vector<Vec>& prior_logits) {
  GLIMPSE_REQUIRE(stage_n >= 1 && stage_n <= static_cast<int>(model.stages.size()),
                  "predict_location: stage out of range");
  GLIMPSE_REQUIRE(static_cast<int>(prior_logits.size()) == stage_n - 1,
                  "predict_location: need logits of all earlier glimpses");
  const LocPredictor& p = model.stages[stage_n - 1].loc;
  Vec s(o_low);
  for (const auto& o : prior_logits)
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += o[i];
  NormLoc l;
  double* out[2] = {&l.x, &l.y};
  for (int i = 0; i < 2; ++i) {
    double v = p.b[i];
    const double* wh = p.w_h.row(i);
    for (std::size_t j = 0; j < h_low.size(); ++j) v += wh[j] * h_low[j];
    const double* wo = p.w_o.row(i);
    for (std::size_t j = 0; j < s.size(); ++j) v += wo[j] * s[j];
    *out[i] = sigmoid(v);
  }
  return l;
}

Vec glimpse_forward(const GlimpseModel& model, int stage_n, const Image& img,
                    NormLoc l) {
  GLIMPSE_REQUIRE(stage_n >= 1 && stage_n <= static_cast<int>(model.stages.size()),
                  "glimpse_forward: stage out of range");
  const auto& cfg = model.config;
  const FovealStack stack = foveal_extract(img, l, cfg.patch_side, cfg.scales);
  return mlp_forward(*model.stages[stage_n - 1].net, stack.flatten()).o;
}

Vec aggregate(const Vec& o_low, const std::vector<Vec>& glimpse_logits) {
  GLIMPSE_REQUIRE(!glimpse_logits.empty(), "aggregate: need at least one glimpse");
  Vec c(o_low);
  const double inv_n = 1.0 / static_cast<double>(glimpse_logits.size());
  for (const auto& o : glimpse_logits)
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += inv_n * o[i];
  return softmax(c);
}

Vec GlimpseTrace::final_distribution() const {
  if (!aggregates.empty()) return aggregates.back();
  return softmax(low_logits);
}

int GlimpseTrace::predicted_label() const {
  const Vec y = final_distribution();
  return static_cast<int>(std::max_element(y.begin(), y.end()) - y.begin());
}

GlimpseTrace run(const GlimpseModel& model, const Image& img, int max_glimpses) {
  GLIMPSE_REQUIRE(max_glimpses >= 0 && max_glimpses <= model.config.num_glimpses,
                  "run: max_glimpses exceeds the model");
  GlimpseTrace t;
  const N0Out low = n0_forward(model, img);
  t.low_logits = low.o;
  t.flops = n0_flops(model.config);
  for (int n = 1; n <= max_glimpses; ++n) {
    const NormLoc l = predict_location(model, n, low.h, low.o, t.stage_logits);
    t.locations.push_back(l);
    t.stage_logits.push_back(glimpse_forward(model, n, img, l));
    t.aggregates.push_back(aggregate(low.o, t.stage_logits));
    t.flops += loc_predictor_flops(model.config) + glimpse_net_flops(model.config);
  }
  t.decided_at = max_glimpses;
  return t;
}

CascadeDecision run_cascaded(const GlimpseModel& model, const Image& img,
                             double threshold, bool force_final) {
  GLIMPSE_REQUIRE(threshold > 0.0, "run_cascaded: threshold must be positive");
  CascadeDecision d;
  GlimpseTrace& t = d.trace;
  const N0Out low = n0_forward(model, img);
  t.low_logits = low.o;
  t.flops = n0_flops(model.config);

  auto confident = [&](const Vec& y) {
    return *std::max_element(y.begin(), y.end()) >= threshold;
  };
  auto argmax = [](const Vec& y) {
    return static_cast<int>(std::max_element(y.begin(), y.end()) - y.begin());
  };

  if (confident(low.y)) {
    t.decided_at = 0;
    d.label = argmax(low.y);
    return d;
  }
  for (int n = 1; n <= model.config.num_glimpses; ++n) {
    const NormLoc l = predict_location(model, n, low.h, low.o, t.stage_logits);
    t.locations.push_back(l);
    t.stage_logits.push_back(glimpse_forward(model, n, img, l));
    t.aggregates.push_back(aggregate(low.o, t.stage_logits));
    t.flops += loc_predictor_flops(model.config) + glimpse_net_flops(model.config);
    if (confident(t.aggregates.back())) {
      t.decided_at = n;
      d.label = argmax(t.aggregates.back());
      return d;
    }
  }
  if (force_final) {
    t.decided_at = model.config.num_glimpses;
    d.label = t.predicted_label();
  } else {
    t.decided_at = GlimpseTrace::kRejected;
    d.label = -1;
  }
  return d;
}

std::int64_t n0_flops(const ModelConfig& cfg) {
  return mac_count(static_cast<std::int64_t>(cfg.low_side) * cfg.low_side,
                   cfg.hidden, cfg.classes);
}

std::int64_t loc_predictor_flops(const ModelConfig& cfg) {
  return 2ll * cfg.hidden + 2ll * cfg.classes;
}

std::int64_t glimpse_net_flops(const ModelConfig& cfg) {
  return mac_count(cfg.glimpse_input_dim(), cfg.hidden, cfg.classes);
}

std::int64_t run_flops(const ModelConfig& cfg, int glimpses) {
  return n0_flops(cfg) +
         glimpses * (loc_predictor_flops(cfg) + glimpse_net_flops(cfg));
}

// --- serialization -------------------------------------------------------
// "GLM1", then eight little-endian int32 config fields, then every tensor as
// row-major little-endian doubles: n0.w1, n0.b1, n0.w2, n0.b2, then per stage
// net.w1, net.b1, net.w2, net.b2, loc.w_h, loc.w_o, loc.b.

namespace {

constexpr char kMagic[4] = {'G', 'L', 'M', '1'};

void put_i32(std::ofstream& f, std::int32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::int32_t get_i32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("truncated checkpoint: " + path);
  return static_cast<std::int32_t>(std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                                   (std::uint32_t(b[2]) << 16) |
                                   (std::uint32_t(b[3]) << 24));
}

void put_tensor(std::ofstream& f, const Vec& v) {
  for (double d : v) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(d);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    f.write(reinterpret_cast<const char*>(b), 8);
  }
}

void get_tensor(std::ifstream& f, Vec& v, const std::string& path) {
  for (double& d : v) {
    unsigned char b[8];
    if (!f.read(reinterpret_cast<char*>(b), 8))
      throw std::runtime_error("truncated checkpoint: " + path);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
    d = std::bit_cast<double>(u);
  }
}

void put_mlp(std::ofstream& f, const Mlp& net) {
  put_tensor(f, net.w1.a);
  put_tensor(f, net.b1);
  put_tensor(f, net.w2.a);
  put_tensor(f, net.b2);
}

void get_mlp(std::ifstream& f, Mlp& net, const std::string& path) {
  get_tensor(f, net.w1.a, path);
  get_tensor(f, net.b1, path);
  get_tensor(f, net.w2.a, path);
  get_tensor(f, net.b2, path);
}

}  // namespace

void GlimpseModel::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f.write(kMagic, 4);
  put_i32(f, config.full_side);
  put_i32(f, config.low_side);
  put_i32(f, config.patch_side);
  put_i32(f, config.scales);
  put_i32(f, config.classes);
  put_i32(f, config.hidden);
  put_i32(f, config.num_glimpses);
  put_i32(f, config.weight_sharing ? 1 : 0);
  put_mlp(f, n0);
  for (const auto& s : stages) {
    put_mlp(f, *s.net);
    put_tensor(f, s.loc.w_h.a);
    put_tensor(f, s.loc.w_o.a);
    put_tensor(f, s.loc.b);
  }
  if (!f) throw std::runtime_error("write failed on checkpoint: " + path);
}

GlimpseModel GlimpseModel::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad checkpoint magic (want GLM1): " + path);
  ModelConfig cfg;
  cfg.full_side = get_i32(f, path);
  cfg.low_side = get_i32(f, path);
  cfg.patch_side = get_i32(f, path);
  cfg.scales = get_i32(f, path);
  cfg.classes = get_i32(f, path);
  cfg.hidden = get_i32(f, path);
  cfg.num_glimpses = get_i32(f, path);
  cfg.weight_sharing = get_i32(f, path) != 0;
  cfg.validate();

  // shapes come from the config; bytes fill them in
  GlimpseModel m = GlimpseModel::create(cfg, 0);
  get_mlp(f, m.n0, path);
  for (auto& s : m.stages) {
    get_mlp(f, *s.net, path);
    get_tensor(f, s.loc.w_h.a, path);
    get_tensor(f, s.loc.w_o.a, path);
    get_tensor(f, s.loc.b, path);
  }
  char extra;
  if (f.read(&extra, 1))
    throw std::runtime_error("trailing bytes in checkpoint: " + path);
  return m;
}

}  // namespace glimpse

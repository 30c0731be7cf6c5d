#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "glimpse/report.hpp"
#include "glimpse/train.hpp"
#include "oracles.hpp"

using namespace glimpse;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.full_side = 24;
  cfg.low_side = 6;
  cfg.patch_side = 6;
  cfg.scales = 2;
  cfg.classes = 4;
  cfg.hidden = 10;
  cfg.num_glimpses = 2;
  return cfg;
}

LabeledSet random_set(int n, int side, int classes, std::uint64_t seed) {
  LabeledSet set;
  SplitMix64 rng(seed);
  for (int i = 0; i < n; ++i) {
    Image img(side, side);
    for (auto& v : img.data) v = rng.next_double();
    set.images.push_back(std::move(img));
    set.labels.push_back(static_cast<int>(rng.next_below(classes)));
  }
  return set;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("glimpse_report_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("baseline_fc_flops arithmetic") {
  CHECK(baseline_fc_flops(48, 500, 10) == 1157000);
  CHECK(baseline_fc_flops(28, 500, 10) == 397000);
  // down-sampled operating point: 397000 / 55000 rounds to 7.2
  const double ratio = 397000.0 / static_cast<double>(mac_count(100, 500, 10));
  CHECK(std::round(ratio * 10) / 10 == 7.2);
}

TEST_CASE("a model biased to the set's single label scores zero error") {
  GlimpseModel model = GlimpseModel::create(small_config(), 61);
  // rig the cheap network and glimpse nets to shout class 2
  model.n0.b2 = {0.0, 0.0, 50.0, 0.0};
  for (auto& s : model.stages) s.net->b2 = {0.0, 0.0, 50.0, 0.0};
  LabeledSet set = random_set(3, 24, 4, 61);
  set.labels = {2, 2, 2};
  const EvalReport r = evaluate(model, set, 2);
  CHECK(r.error_rate == 0.0);
  CHECK(r.rejection_rate == 0.0);
}

TEST_CASE("evaluate reports the closed-form cost of its glimpse budget") {
  GlimpseModel model = GlimpseModel::create(small_config(), 62);
  const LabeledSet set = random_set(6, 24, 4, 62);
  for (int g : {0, 1, 2}) {
    const EvalReport r = evaluate(model, set, g);
    CHECK(r.mean_flops == static_cast<double>(run_flops(model.config, g)));
    CHECK(r.per_stage_classified[g] == 1.0);
    CHECK(r.speedup > 0.0);
  }
}

TEST_CASE("evaluate error matches an independent per-sample loop") {
  GlimpseModel model = GlimpseModel::create(small_config(), 63);
  const LabeledSet set = random_set(20, 24, 4, 63);
  const EvalReport r = evaluate(model, set, 2);
  int wrong = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const GlimpseTrace t = run(model, set.images[i], 2);
    wrong += t.predicted_label() != set.labels[i];
  }
  CHECK(r.error_rate == doctest::Approx(wrong / 20.0));
}

TEST_CASE("evaluate rejects a mismatched set") {
  GlimpseModel model = GlimpseModel::create(small_config(), 64);
  const LabeledSet set = random_set(2, 12, 4, 64);
  CHECK_THROWS_AS(evaluate(model, set, 1), std::invalid_argument);
}

TEST_CASE("a permissive cascade threshold classifies everything in the cheap stage") {
  GlimpseModel model = GlimpseModel::create(small_config(), 65);
  const LabeledSet set = random_set(10, 24, 4, 65);
  const EvalReport r = evaluate_cascade(model, set, 1e-9, false);
  CHECK(r.per_stage_classified[0] == 1.0);
  CHECK(r.per_stage_classified[1] == 0.0);
  CHECK(r.per_stage_classified[2] == 0.0);
  CHECK(r.mean_flops == static_cast<double>(n0_flops(model.config)));
  CHECK(r.rejection_rate == 0.0);
}

TEST_CASE("cascade accounting reconstructs the overall error and never costs more") {
  GlimpseModel model = GlimpseModel::create(small_config(), 66);
  const LabeledSet set = random_set(40, 24, 4, 66);
  for (const bool force : {false, true}) {
    const EvalReport r = evaluate_cascade(model, set, 0.6, force);
    double mass = r.rejection_rate, reconstructed = 0.0;
    for (std::size_t s = 0; s < r.per_stage_classified.size(); ++s) {
      mass += r.per_stage_classified[s];
      reconstructed += r.per_stage_classified[s] * r.per_stage_error[s];
    }
    CHECK(std::fabs(mass - 1.0) <= 1e-9);
    CHECK(std::fabs(reconstructed - r.error_rate) <= 1e-9);
    if (force) CHECK(r.rejection_rate == 0.0);

    const EvalReport full = evaluate(model, set, 2);
    CHECK(r.mean_flops <= full.mean_flops);
  }
}

TEST_CASE("filter dumps render one-hot and flat units as expected") {
  TempDir tmp;
  Mlp net;
  net.w1 = Matrix(3, 16);  // three units over a 4x4 patch
  net.b1.assign(3, 0.0);
  net.w2 = Matrix(2, 3);
  net.b2.assign(2, 0.0);
  net.w1(0, 5) = 1.0;                         // one-hot unit
  for (int j = 0; j < 16; ++j) net.w1(1, j) = 0.7;  // flat unit
  net.w1(2, 0) = -1.0;
  net.w1(2, 15) = 1.0;

  dump_filters(net, 2, 2, tmp.file("f.pgm"));
  const std::string bytes = slurp(tmp.file("f.pgm"));
  // header: P5, 2*(4+1)-1 = 9 wide, 9 tall
  CHECK(bytes.substr(0, 2) == "P5");
  CHECK(bytes.find("9 9") != std::string::npos);

  const std::size_t data_at = bytes.find("255\n") + 4;
  auto px = [&](int r, int c) {
    return static_cast<unsigned char>(bytes[data_at + r * 9 + c]);
  };
  // unit 0: bright pixel at (1,1) of its tile, black elsewhere
  CHECK(px(1, 1) == 255);
  CHECK(px(0, 0) == 0);
  // unit 1 (tile at columns 5..8): flat renders mid-gray
  CHECK(px(0, 5) == 128);
  CHECK(px(3, 8) == 128);

  // byte determinism
  dump_filters(net, 2, 2, tmp.file("g.pgm"));
  CHECK(slurp(tmp.file("f.pgm")) == slurp(tmp.file("g.pgm")));
}

TEST_CASE("filter dumps stack one block per scale") {
  TempDir tmp;
  SplitMix64 rng(67);
  Mlp net = Mlp::random(2 * 16, 6, 3, rng);  // two 4x4 scales
  dump_filters(net, 2, 3, tmp.file("s.pgm"));
  const std::string bytes = slurp(tmp.file("s.pgm"));
  // width 3*(4+1)-1 = 14, height 2 blocks of 2*(4+1)-1 = 9 plus a separator
  CHECK(bytes.find("14 19") != std::string::npos);
}

TEST_CASE("filter dumps reject an undersized tile grid") {
  SplitMix64 rng(68);
  Mlp net = Mlp::random(16, 9, 2, rng);
  CHECK_THROWS_AS(dump_filters(net, 2, 2, "unused.pgm"), std::invalid_argument);
}

TEST_CASE("trace dumps: empty selection writes an empty sidecar and no image") {
  TempDir tmp;
  GlimpseModel model = GlimpseModel::create(small_config(), 69);
  const LabeledSet set = random_set(4, 24, 4, 69);
  dump_traces(model, set, 0, tmp.file("t.pgm"));
  CHECK(slurp(tmp.file("t.pgm.txt")).empty());
  CHECK_FALSE(fs::exists(tmp.file("t.pgm")));
}

TEST_CASE("trace dumps are deterministic and replayable") {
  TempDir tmp;
  GlimpseModel model = GlimpseModel::create(small_config(), 70);
  const LabeledSet set = random_set(12, 24, 4, 70);
  dump_traces(model, set, 3, tmp.file("a.pgm"));
  dump_traces(model, set, 3, tmp.file("b.pgm"));
  CHECK(slurp(tmp.file("a.pgm")) == slurp(tmp.file("b.pgm")));
  CHECK(slurp(tmp.file("a.pgm.txt")) == slurp(tmp.file("b.pgm.txt")));

  // replay: every listed location must reproduce under a fresh run
  const std::string sidecar = slurp(tmp.file("a.pgm.txt"));
  std::istringstream is(sidecar);
  std::string line;
  int current_index = -1, glimpse_no = 0;
  int checked = 0;
  while (std::getline(is, line)) {
    if (line.rfind("example", 0) == 0) {
      const auto at = line.find("index=");
      current_index = std::stoi(line.substr(at + 6));
      glimpse_no = 0;
    } else {
      const GlimpseTrace t = run(model, set.images[current_index], 2);
      char expect[96];
      std::snprintf(expect, sizeof expect, "loc=(%.17g,%.17g)",
                    t.locations[glimpse_no].x, t.locations[glimpse_no].y);
      CHECK(line.find(expect) != std::string::npos);
      ++glimpse_no;
      ++checked;
    }
  }
  CHECK(checked == 6);  // 3 examples x 2 glimpses
}

TEST_CASE("report formatting carries the fields") {
  EvalReport r;
  r.error_rate = 0.023;
  r.rejection_rate = 0.048;
  r.per_stage_classified = {0.78, 0.15, 0.03};
  r.per_stage_error = {0.0045, 0.02, 0.1};
  r.mean_flops = 123456.0;
  r.speedup = 5.0965;
  const std::string kv = format_report_kv(r);
  CHECK(kv.find("error_rate=0.023") != std::string::npos);
  CHECK(kv.find("speedup_1dp=5.1") != std::string::npos);
  const std::string table = format_report_table(r);
  CHECK(table.find("N0") != std::string::npos);
  CHECK(table.find("rejected") != std::string::npos);
}

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "glimpse/config.hpp"
#include "glimpse/dataset.hpp"
#include "glimpse/model.hpp"
#include "glimpse/report.hpp"
#include "glimpse/train.hpp"

namespace fs = std::filesystem;
using namespace glimpse;

namespace {

// exit codes: 0 ok, 1 validation/config, 2 runtime (IO, parse, divergence)
constexpr int kOk = 0;
constexpr int kValidationError = 1;
constexpr int kRuntimeError = 2;

struct KvOverride {
  std::vector<std::string> pairs;
};

void apply_overrides(RunConfig& cfg, const KvOverride& kv) {
  for (const auto& pair : kv.pairs) {
    const std::size_t eq = pair.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got '" + pair + "'");
    cfg.set(pair.substr(0, eq), pair.substr(eq + 1));
  }
}

// ---------------------------------------------------------------- gen-jittered

struct GenArgs {
  std::string images, labels, out_images, out_labels;
  int canvas = 48;
  int copies = 10;
  std::uint64_t seed = 0;
};

void write_be32_raw(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

int cmd_gen_jittered(const GenArgs& a) {
  GLIMPSE_REQUIRE(a.copies >= 1, "gen-jittered: --copies must be >= 1");
  const LabeledSet src = read_idx(a.images, a.labels);
  GLIMPSE_REQUIRE(a.canvas >= src.width() && a.canvas >= src.height(),
                  "gen-jittered: canvas smaller than source images");

  // streamed so the full output never lives in memory
  std::ofstream imgf(a.out_images, std::ios::binary);
  if (!imgf) throw std::runtime_error("cannot open for writing: " + a.out_images);
  std::ofstream labf(a.out_labels, std::ios::binary);
  if (!labf) throw std::runtime_error("cannot open for writing: " + a.out_labels);
  const std::uint32_t total =
      static_cast<std::uint32_t>(src.size()) * static_cast<std::uint32_t>(a.copies);
  write_be32_raw(imgf, 0x00000803);
  write_be32_raw(imgf, total);
  write_be32_raw(imgf, static_cast<std::uint32_t>(a.canvas));
  write_be32_raw(imgf, static_cast<std::uint32_t>(a.canvas));
  write_be32_raw(labf, 0x00000801);
  write_be32_raw(labf, total);

  SplitMix64 rng(a.seed);
  const int sw = src.width(), sh = src.height();
  const std::uint64_t span_x = static_cast<std::uint64_t>(a.canvas - sw) + 1;
  const std::uint64_t span_y = static_cast<std::uint64_t>(a.canvas - sh) + 1;
  std::vector<unsigned char> canvas(static_cast<std::size_t>(a.canvas) * a.canvas);
  for (std::size_t i = 0; i < src.size(); ++i) {
    for (int c = 0; c < a.copies; ++c) {
      const int top = static_cast<int>(rng.next_below(span_y));
      const int left = static_cast<int>(rng.next_below(span_x));
      std::fill(canvas.begin(), canvas.end(), 0);
      for (int r = 0; r < sh; ++r)
        for (int k = 0; k < sw; ++k)
          canvas[static_cast<std::size_t>(top + r) * a.canvas + left + k] =
              static_cast<unsigned char>(
                  std::lround(src.images[i].at(r, k) * 255.0));
      imgf.write(reinterpret_cast<const char*>(canvas.data()), canvas.size());
      const unsigned char lb = static_cast<unsigned char>(src.labels[i]);
      labf.write(reinterpret_cast<const char*>(&lb), 1);
    }
  }
  if (!imgf || !labf) throw std::runtime_error("write failed while generating dataset");
  std::cout << "sources=" << src.size() << " copies=" << a.copies
            << " generated=" << total << " canvas=" << a.canvas
            << " seed=" << a.seed << "\n";
  std::cout << "wrote " << a.out_images << " and " << a.out_labels << "\n";
  return kOk;
}

// ---------------------------------------------------------------------- train

struct TrainArgs {
  std::string config_file;
  KvOverride overrides;
  bool dry_run = false;
};

void print_flop_budget(const RunConfig& cfg) {
  const ModelConfig& m = cfg.model;
  const int side = cfg.baseline_side > 0 ? cfg.baseline_side : m.full_side;
  const std::int64_t baseline = baseline_fc_flops(side, m.hidden, m.classes);
  std::cout << "baseline_flops=" << baseline << " (side " << side << ")\n";
  for (int g = 0; g <= m.num_glimpses; ++g) {
    const std::int64_t f = run_flops(m, g);
    std::printf("glimpses=%d flops=%lld speedup=%.1f\n", g,
                static_cast<long long>(f),
                static_cast<double>(baseline) / static_cast<double>(f));
  }
}

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = a.config_file.empty() ? RunConfig() : RunConfig::from_file(a.config_file);
  apply_overrides(cfg, a.overrides);
  cfg.validate();
  GLIMPSE_REQUIRE(!cfg.train_images.empty() && !cfg.train_labels.empty(),
                  "train: train_images/train_labels must be set");

  if (a.dry_run) {
    std::cout << cfg.to_kv();
    print_flop_budget(cfg);
    return kOk;
  }

  fs::create_directories(cfg.out_dir);
  {
    std::ofstream eff(fs::path(cfg.out_dir) / "config_effective.txt");
    eff << cfg.to_kv();
  }

  const LabeledSet train = read_idx(cfg.train_images, cfg.train_labels);
  LabeledSet test;
  const bool have_test = !cfg.test_images.empty() && !cfg.test_labels.empty();
  if (have_test) test = read_idx(cfg.test_images, cfg.test_labels);
  for (int l : train.labels)
    GLIMPSE_REQUIRE(l >= 0 && l < cfg.model.classes, "train: label out of range");

  TrainHyper hyper = cfg.hyper;
  hyper.shuffle_seed = cfg.seed + 1;
  GlimpseModel model = GlimpseModel::create(cfg.model, cfg.seed);

  std::ofstream log(fs::path(cfg.out_dir) / "train_log.txt");
  TrainCallbacks cb;
  cb.on_epoch = [&](const std::string& phase, int epoch, double mean_loss,
                    double heldout) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "phase=%s epoch=%d mean_loss=%.17g heldout_error=%.17g\n",
                  phase.c_str(), epoch, mean_loss, heldout);
    std::cout << buf;
    log << buf;
    log.flush();
  };
  cb.on_phase_done = [&](const std::string& phase, const GlimpseModel& m) {
    m.save((fs::path(cfg.out_dir) / (phase + ".glm")).string());
  };

  train_full(model, train, hyper, cb, have_test ? &test : nullptr);
  model.save((fs::path(cfg.out_dir) / "model.glm").string());
  std::cout << "final checkpoint: " << (fs::path(cfg.out_dir) / "model.glm").string()
            << "\n";
  if (have_test) {
    const EvalReport r =
        evaluate(model, test, cfg.model.num_glimpses, cfg.baseline_side, hyper.workers);
    std::cout << format_report_table(r) << format_report_kv(r);
  }
  return kOk;
}

// ----------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, images, labels, out_file;
  int glimpses = -1;  // -1 = model's glimpse count
  bool cascade = false;
  double threshold = 0.95;
  bool force_final = false;
  int baseline_side = 0;
  int workers = 0;
};

int cmd_eval(const EvalArgs& a) {
  const GlimpseModel model = GlimpseModel::load(a.checkpoint);
  const LabeledSet set = read_idx(a.images, a.labels);
  GLIMPSE_REQUIRE(set.width() == model.config.full_side &&
                      set.height() == model.config.full_side,
                  "eval: dataset dims do not match the checkpoint");
  EvalReport r;
  if (a.cascade) {
    r = evaluate_cascade(model, set, a.threshold, a.force_final, a.baseline_side,
                         a.workers);
  } else {
    const int g = a.glimpses < 0 ? model.config.num_glimpses : a.glimpses;
    r = evaluate(model, set, g, a.baseline_side, a.workers);
  }
  std::cout << format_report_table(r) << format_report_kv(r);
  if (!a.out_file.empty()) {
    std::ofstream f(a.out_file);
    if (!f) throw std::runtime_error("cannot open report file: " + a.out_file);
    f << format_report_kv(r);
  }
  return kOk;
}

// ----------------------------------------------------------------------- dump

struct DumpArgs {
  std::string checkpoint, what, images, labels, out_path;
  int n_examples = 5;
};

int cmd_dump(const DumpArgs& a) {
  const GlimpseModel model = GlimpseModel::load(a.checkpoint);
  const int hidden = model.config.hidden;
  // near-square tile grid; 500 hidden units render as 20 x 25
  const int cols = static_cast<int>(std::ceil(std::sqrt(hidden * 5.0 / 4.0)));
  const int rows = (hidden + cols - 1) / cols;
  if (a.what == "filters-n0") {
    dump_filters(model.n0, rows, cols, a.out_path);
  } else if (a.what == "filters-n1") {
    GLIMPSE_REQUIRE(!model.stages.empty(), "dump: model has no glimpse stages");
    dump_filters(*model.stages.front().net, rows, cols, a.out_path);
  } else if (a.what == "traces") {
    GLIMPSE_REQUIRE(!a.images.empty() && !a.labels.empty(),
                    "dump traces: --images/--labels required");
    const LabeledSet set = read_idx(a.images, a.labels);
    dump_traces(model, set, a.n_examples, a.out_path);
  } else {
    throw std::invalid_argument("dump: unknown artifact '" + a.what +
                                "' (filters-n0 | filters-n1 | traces)");
  }
  std::cout << "wrote " << a.out_path << "\n";
  return kOk;
}

// ------------------------------------------------------------------ gradcheck

int cmd_gradcheck(double epsilon, bool inject_fault) {
  constexpr double kTolerance = 1e-4;
  const auto reports = gradient_check_suite(epsilon, inject_fault);
  bool ok = true;
  for (const auto& r : reports) {
    const bool pass = r.max_rel_error <= kTolerance;
    ok = ok && pass;
    std::printf("%-16s max_rel_error=%.3e %s\n", r.name.c_str(), r.max_rel_error,
                pass ? "ok" : "FAIL");
  }
  std::cout << (ok ? "gradient check passed\n" : "gradient check FAILED\n");
  return ok ? kOk : kValidationError;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sequential-glimpse image classifier"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* sc_gen = app.add_subcommand("gen-jittered",
                                    "paste source digits at random canvas offsets");
  sc_gen->add_option("--images", gen.images, "source IDX image file")->required();
  sc_gen->add_option("--labels", gen.labels, "source IDX label file")->required();
  sc_gen->add_option("--out-images", gen.out_images, "output IDX image file")->required();
  sc_gen->add_option("--out-labels", gen.out_labels, "output IDX label file")->required();
  sc_gen->add_option("--canvas", gen.canvas, "canvas side in pixels");
  sc_gen->add_option("--copies", gen.copies, "jittered copies per source image");
  sc_gen->add_option("--seed", gen.seed, "placement seed");

  TrainArgs train;
  auto* sc_train = app.add_subcommand("train", "run the staged training pipeline");
  sc_train->add_option("--config", train.config_file, "key=value config file");
  sc_train->add_option("--set", train.overrides.pairs,
                       "override a config key (key=value, repeatable)");
  sc_train->add_flag("--dry-run", train.dry_run,
                     "validate the config and print the flop budget only");
  // conveniences for the common overrides
  sc_train->add_option_function<int>(
      "--glimpses", [&](int v) { train.overrides.pairs.push_back("glimpses=" + std::to_string(v)); },
      "number of glimpse stages");
  sc_train->add_option_function<int>(
      "--epochs", [&](int v) { train.overrides.pairs.push_back("epochs=" + std::to_string(v)); },
      "training epochs per stage");
  sc_train->add_option_function<std::string>(
      "--seed", [&](std::string v) { train.overrides.pairs.push_back("seed=" + v); },
      "master seed");
  sc_train->add_option_function<std::string>(
      "--out", [&](std::string v) { train.overrides.pairs.push_back("out_dir=" + v); },
      "output directory");
  sc_train->add_flag_callback(
      "--no-diversity", [&] { train.overrides.pairs.push_back("diversity=0"); },
      "drop the location-diversity bump from the grid search");
  sc_train->add_flag_callback(
      "--no-contrastive", [&] { train.overrides.pairs.push_back("contrastive=0"); },
      "drop the most-offending-location loss term");
  sc_train->add_flag_callback(
      "--fine-tune", [&] { train.overrides.pairs.push_back("fine_tune=1"); },
      "fine-tune the last glimpse network (default)");
  sc_train->add_flag_callback(
      "--no-fine-tune", [&] { train.overrides.pairs.push_back("fine_tune=0"); },
      "skip fine-tuning");

  EvalArgs ev;
  auto* sc_eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  sc_eval->add_option("--checkpoint", ev.checkpoint, "GLM1 checkpoint")->required();
  sc_eval->add_option("--images", ev.images, "IDX image file")->required();
  sc_eval->add_option("--labels", ev.labels, "IDX label file")->required();
  sc_eval->add_option("--glimpses", ev.glimpses, "glimpse budget (default: all)");
  sc_eval->add_flag("--cascade", ev.cascade, "early-exit evaluation");
  sc_eval->add_option("--threshold", ev.threshold, "cascade confidence threshold");
  sc_eval->add_flag("--force-final", ev.force_final,
                    "classify every sample instead of rejecting");
  sc_eval->add_option("--baseline-side", ev.baseline_side,
                      "image side backing the speed-up baseline");
  sc_eval->add_option("--workers", ev.workers, "evaluation threads (0 = auto)");
  sc_eval->add_option("--out", ev.out_file, "also write the key=value report here");

  DumpArgs dump;
  auto* sc_dump = app.add_subcommand("dump", "write filter grids or example traces");
  sc_dump->add_option("--checkpoint", dump.checkpoint, "GLM1 checkpoint")->required();
  sc_dump->add_option("what", dump.what, "filters-n0 | filters-n1 | traces")->required();
  sc_dump->add_option("--images", dump.images, "IDX image file (traces)");
  sc_dump->add_option("--labels", dump.labels, "IDX label file (traces)");
  sc_dump->add_option("--n", dump.n_examples, "example rows for traces");
  sc_dump->add_option("--out", dump.out_path, "output file")->required();

  double gc_epsilon = 1e-5;
  bool gc_fault = false;
  auto* sc_gc = app.add_subcommand("gradcheck",
                                   "verify analytic gradients with finite differences");
  sc_gc->add_option("--epsilon", gc_epsilon, "finite-difference step");
  sc_gc->add_flag("--inject-fault", gc_fault, "corrupt one gradient (checker self-test)")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidationError;
  }

  try {
    if (sc_gen->parsed()) return cmd_gen_jittered(gen);
    if (sc_train->parsed()) return cmd_train(train);
    if (sc_eval->parsed()) return cmd_eval(ev);
    if (sc_dump->parsed()) return cmd_dump(dump);
    if (sc_gc->parsed()) return cmd_gradcheck(gc_epsilon, gc_fault);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidationError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}

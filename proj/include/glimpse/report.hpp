#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "glimpse/dataset.hpp"
#include "glimpse/model.hpp"

namespace glimpse {

struct EvalReport {
  double error_rate = 0.0;      // wrong-and-classified / total
  double rejection_rate = 0.0;
  std::vector<double> per_stage_classified;  // fractions of all samples, N0 first
  std::vector<double> per_stage_error;       // error among samples decided at each stage
  double mean_flops = 0.0;
  double speedup = 0.0;  // baseline flops / mean flops
};

// mac_count of a one-hidden-layer network on the full-resolution image.
std::int64_t baseline_fc_flops(int side, int hidden, int classes);

// Fixed-budget evaluation: every sample gets exactly `glimpses` glimpses.
// baseline_side 0 means the model's own full_side.
EvalReport evaluate(const GlimpseModel& model, const LabeledSet& set, int glimpses,
                    int baseline_side = 0, int workers = 0);

// Early-exit evaluation at the given confidence threshold.
EvalReport evaluate_cascade(const GlimpseModel& model, const LabeledSet& set,
                            double threshold, bool force_final,
                            int baseline_side = 0, int workers = 0);

// Hidden-unit weight tiles as a binary PGM grid, one block per input scale,
// each tile min-max normalized (flat tiles render mid-gray).
void dump_filters(const Mlp& net, int tile_rows, int tile_cols,
                  const std::string& out_path);

// For the n examples where the low-resolution and final predictions disagree
// the most: original image, downsampled image and each glimpse patch side by
// side (PGM), plus a text sidecar with per-stage labels and locations.
void dump_traces(const GlimpseModel& model, const LabeledSet& set, int n_examples,
                 const std::string& out_path);

std::string format_report_table(const EvalReport& r);
std::string format_report_kv(const EvalReport& r);

}  // namespace glimpse

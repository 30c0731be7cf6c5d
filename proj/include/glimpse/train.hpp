#pragma once
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "glimpse/dataset.hpp"
#include "glimpse/model.hpp"

namespace glimpse {

struct TrainHyper {
  double lambda = 100.0;     // weight of the location-prediction penalty
  double gamma = 0.01;       // diversity bump height
  double sigma_sq = 0.002;   // diversity bump width (normalized units)
  double lr = 0.05;
  double momentum = 0.9;
  int batch = 50;
  int epochs = 50;
  int grid_side = 3;         // odd
  int grid_step = 2;         // pixels at the finest resolution
  int fine_tune_epochs = 10;
  bool diversity_enabled = true;
  bool contrastive_enabled = true;
  bool fine_tune_enabled = true;
  std::uint64_t shuffle_seed = 1;
  int workers = 0;  // 0 = hardware concurrency; results do not depend on it

  void validate() const;
};

struct EStepResult {
  NormLoc z_star;       // grid point minimizing the stage objective
  NormLoc z_minus;      // grid point with the most confident wrong class
  double best_loss = 0.0;   // minimized objective at z_star
  int offending_class = -1; // wrong class backing z_minus
};

// grid_side x grid_side points spaced grid_step pixels around l (converted to
// its pixel center), clamped to the image, mapped back to normalized
// coordinates. Duplicates after clamping are retained. Row-major order.
std::vector<NormLoc> candidate_grid(NormLoc l, int side_px, int grid_side,
                                    int grid_step);

// gamma * sum_j exp(-|z - previous_j|^2 / (2 sigma_sq)); 0 for an empty list.
double diversity_penalty(NormLoc z, std::span<const NormLoc> previous,
                         double gamma, double sigma_sq);

// Frozen forward state of one sample up to stage k's location prediction.
struct StageContext {
  Vec low_input;                   // flattened downsampled image (N0 input)
  Vec low_h, low_o;                // N0 hidden / logits
  std::vector<Vec> prior_logits;   // glimpse logits of stages < k
  std::vector<NormLoc> prior_locs; // their predicted locations
  Vec glimpse_logit_sum;           // sum of prior_logits
  Vec loc_input_sum;               // low_o + glimpse_logit_sum
  NormLoc predicted;               // location predicted for stage k
};

StageContext stage_context(const GlimpseModel& model, int k, const Image& img);

// Grid search for the best location z* (data term + location penalty +
// diversity when k > 1) and the most offending location z- (most confident
// wrong class). Forward passes only. Ties break to the lowest grid index.
EStepResult e_step(const GlimpseModel& model, int k, const Image& img, int label,
                   const StageContext& ctx, const TrainHyper& hyper);
EStepResult e_step(const GlimpseModel& model, int k, const Image& img, int label,
                   const TrainHyper& hyper);

// Gradient buffers for one stage update. n0 is populated only for stage 1.
struct StageGrads {
  bool with_n0 = false;
  MlpGrads n0;
  MlpGrads net;
  Matrix loc_w_h, loc_w_o;
  Vec loc_b;

  static StageGrads for_stage(const GlimpseModel& model, int k);
  void clear();
  void add(const StageGrads& other);
  void scale(double s);
};

// Compound stage loss at fixed locations:
//   [stage 1 only: low-resolution cross-entropy]
//   + cross-entropy of the aggregate at z*
//   + cross-entropy of the aggregate at z- (when contrastive is enabled)
//   + (lambda/2) |predicted - z*|^2.
// Gradients flow through both glimpse evaluations, through the location
// predictor, and (stage 1 only) into N0 via all three paths; nothing crosses
// the crop. Accumulates into *out when non-null; returns the loss.
double stage_loss_and_grads(const GlimpseModel& model, int k, const Image& img,
                            int label, const StageContext& ctx, NormLoc z_star,
                            NormLoc z_minus, const TrainHyper& hyper,
                            StageGrads* out);

// parameter tensors updated when training stage k (n0 included for k == 1),
// in the same order as the matching gradient tensors
std::vector<std::span<double>> stage_param_tensors(GlimpseModel& model, int k);
std::vector<std::span<const double>> stage_grad_tensors(const StageGrads& g);
std::vector<std::span<double>> finetune_param_tensors(GlimpseModel& model, int k);
std::vector<std::span<const double>> finetune_grad_tensors(const StageGrads& g);

struct TrainCallbacks {
  // heldout_error is negative when no heldout set was supplied
  std::function<void(const std::string& phase, int epoch, double mean_loss,
                     double heldout_error)>
      on_epoch;
  std::function<void(const std::string& phase, const GlimpseModel& model)>
      on_phase_done;
};

// One stage of alternating training: per sample, grid-search the latent
// location, then one momentum step per minibatch on the mean gradient.
// Stages below k must already be trained; they are not touched. Throws
// std::runtime_error if the loss becomes non-finite.
void train_stage(GlimpseModel& model, int k, const LabeledSet& train,
                 const TrainHyper& hyper, const TrainCallbacks& cb = {},
                 const LabeledSet* heldout = nullptr);

// Locations fixed to the model's own predictions; only stage k's glimpse
// network is updated, for fine_tune_epochs epochs.
void fine_tune(GlimpseModel& model, int k, const LabeledSet& train,
               const TrainHyper& hyper, const TrainCallbacks& cb = {},
               const LabeledSet* heldout = nullptr);

// Plain cross-entropy training of the low-resolution network alone.
void train_n0_only(GlimpseModel& model, const LabeledSet& train,
                   const TrainHyper& hyper, const TrainCallbacks& cb = {},
                   const LabeledSet* heldout = nullptr);

// Stage 1 trains N0 and the first glimpse jointly, later stages train only
// themselves, then the last stage is fine-tuned (when enabled). A model with
// zero glimpses trains N0 alone.
void train_full(GlimpseModel& model, const LabeledSet& train,
                const TrainHyper& hyper, const TrainCallbacks& cb = {},
                const LabeledSet* heldout = nullptr);

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
};

// Finite-difference verification of every loss used in training, on toy
// dimensions. inject_fault corrupts one analytic gradient to prove the
// detector detects.
std::vector<GradCheckReport> gradient_check_suite(double epsilon,
                                                  bool inject_fault = false);

}  // namespace glimpse

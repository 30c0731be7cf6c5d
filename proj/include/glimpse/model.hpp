#pragma once
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "glimpse/image.hpp"
#include "glimpse/nn.hpp"

namespace glimpse {

struct ModelConfig {
  int full_side = 48;    // high-resolution input side
  int low_side = 12;     // cheap downsampled side (must divide full_side)
  int patch_side = 12;   // glimpse patch side at the finest scale
  int scales = 2;        // multi-scale stack depth per glimpse
  int classes = 10;
  int hidden = 500;
  int num_glimpses = 2;
  bool weight_sharing = false;  // tie all glimpse-network parameters

  int downsample_factor() const { return full_side / low_side; }
  int glimpse_input_dim() const { return scales * patch_side * patch_side; }
  void validate() const;
};

// Two-output sigmoid head mapping low-resolution features and accumulated
// logits to a normalized (x,y) location.
struct LocPredictor {
  Matrix w_h;  // 2 x hidden
  Matrix w_o;  // 2 x classes
  Vec b;       // 2

  static LocPredictor random(int hidden, int classes, SplitMix64& rng);
};

struct GlimpseStage {
  std::shared_ptr<Mlp> net;  // shared across stages when weight_sharing is on
  LocPredictor loc;
};

class GlimpseModel {
 public:
  ModelConfig config;
  Mlp n0;  // low_side^2 -> hidden -> classes
  std::vector<GlimpseStage> stages;

  GlimpseModel() = default;
  GlimpseModel(GlimpseModel&&) = default;
  GlimpseModel& operator=(GlimpseModel&&) = default;
  // copying is explicit: stages hold shared nets
  GlimpseModel(const GlimpseModel&) = delete;
  GlimpseModel& operator=(const GlimpseModel&) = delete;

  static GlimpseModel create(const ModelConfig& cfg, std::uint64_t seed);

  // deep copy preserving the weight-sharing structure
  GlimpseModel clone() const;

  void save(const std::string& path) const;
  static GlimpseModel load(const std::string& path);
};

struct N0Out {
  Vec h;  // hidden features of the low-resolution network
  Vec o;  // its logits
  Vec y;  // softmax(o)
};

// Downsample to low_side, flatten row-major, run the low-resolution network.
N0Out n0_forward(const GlimpseModel& model, const Image& img);

// stage_n is 1-based. prior_logits holds the glimpse logits of stages < n.
// l = sigmoid(w_h*h_low + w_o*(o_low + sum(prior_logits)) + b).
NormLoc predict_location(const GlimpseModel& model, int stage_n, const Vec& h_low,
                         const Vec& o_low,
                         const std::vector<Vec>& prior_logits);

// Extract the foveal stack at l and run stage n's glimpse network.
Vec glimpse_forward(const GlimpseModel& model, int stage_n, const Image& img,
                    NormLoc l);

// softmax(o_low + mean of glimpse logits); requires at least one glimpse.
Vec aggregate(const Vec& o_low, const std::vector<Vec>& glimpse_logits);

struct GlimpseTrace {
  static constexpr int kRejected = -1;

  std::vector<NormLoc> locations;   // predicted location per executed glimpse
  std::vector<Vec> stage_logits;    // glimpse logits per executed glimpse
  Vec low_logits;                   // low-resolution logits
  std::vector<Vec> aggregates;      // class distribution after each glimpse
  std::int64_t flops = 0;           // MACs of layers actually executed
  int decided_at = 0;               // stage that produced the decision (0 = N0), or kRejected

  // distribution backing the final decision
  Vec final_distribution() const;
  int predicted_label() const;
};

// Full sequential pass with max_glimpses glimpses (0 = low-resolution only).
GlimpseTrace run(const GlimpseModel& model, const Image& img, int max_glimpses);

struct CascadeDecision {
  int label = -1;  // -1 = rejected
  GlimpseTrace trace;

  bool rejected() const { return label < 0; }
};

// Early-exit inference: stop as soon as the current class distribution has a
// component >= threshold; after the last stage classify anyway when
// force_final, otherwise reject. flops cover only executed stages.
CascadeDecision run_cascaded(const GlimpseModel& model, const Image& img,
                             double threshold, bool force_final);

// Closed-form cost model.
std::int64_t n0_flops(const ModelConfig& cfg);
std::int64_t loc_predictor_flops(const ModelConfig& cfg);
std::int64_t glimpse_net_flops(const ModelConfig& cfg);
std::int64_t run_flops(const ModelConfig& cfg, int glimpses);

}  // namespace glimpse

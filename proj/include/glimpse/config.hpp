#pragma once
#include <cstdint>
#include <string>

#include "glimpse/model.hpp"
#include "glimpse/train.hpp"

namespace glimpse {

// Textual key=value run configuration. Defaults are the jittered-digit
// reference setup. Unknown keys are rejected; values are validated before any
// work starts.
struct RunConfig {
  ModelConfig model;
  TrainHyper hyper;
  std::uint64_t seed = 12345;
  int baseline_side = 0;  // 0 = model.full_side; speed-ups are quoted vs this
  std::string train_images, train_labels, test_images, test_labels;
  std::string out_dir = "out";

  // applies one key=value pair; throws std::invalid_argument on unknown keys
  // or unparseable values
  void set(const std::string& key, const std::string& value);

  void validate() const;

  // effective-config echo; parsing it back yields an identical configuration
  std::string to_kv() const;

  static RunConfig from_file(const std::string& path);
  static RunConfig from_string(const std::string& text);
};

}  // namespace glimpse

#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "glimpse/image.hpp"

namespace glimpse {

struct LabeledSet {
  std::vector<Image> images;  // uniform dims
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
  int width() const { return images.empty() ? 0 : images.front().width; }
  int height() const { return images.empty() ? 0 : images.front().height; }
};

struct JitterSpec {
  int canvas = 48;
  int copies_per_image = 10;
  std::uint64_t seed = 0;
};

// IDX container, big endian: image magic 0x00000803, label magic 0x00000801.
// Pixel bytes are divided by 255. Throws std::runtime_error naming the
// offense (bad magic / truncation / count mismatch) and the file.
LabeledSet read_idx(const std::string& images_path, const std::string& labels_path);

// Pixel values quantized back to bytes with round(v*255).
void write_idx(const LabeledSet& set, const std::string& images_path,
               const std::string& labels_path);

// Each source produces copies_per_image canvases of zeros with the source
// pasted at a uniformly random legal offset. Deterministic given spec.seed.
LabeledSet make_jittered(const LabeledSet& src, const JitterSpec& spec);

// Seeded permutation of [0, n) split into consecutive batches; the final
// short batch is kept. The order is a pure function of (shuffle_seed, epoch).
std::vector<std::vector<int>> batches(std::size_t n_items, int batch_size,
                                      std::uint64_t shuffle_seed, int epoch);

}  // namespace glimpse

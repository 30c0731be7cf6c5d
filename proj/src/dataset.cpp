#include "glimpse/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "glimpse/rng.hpp"

namespace glimpse {

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

[[noreturn]] void fail(const std::string& what, const std::string& path) {
  throw std::runtime_error(what + ": " + path);
}

std::uint32_t read_be32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4)) fail("truncated IDX header", path);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

void write_be32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::string hex_magic(std::uint32_t m) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", m);
  return buf;
}

}  // namespace

LabeledSet read_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgf(images_path, std::ios::binary);
  if (!imgf) fail("cannot open IDX image file", images_path);
  std::ifstream labf(labels_path, std::ios::binary);
  if (!labf) fail("cannot open IDX label file", labels_path);

  const std::uint32_t imagic = read_be32(imgf, images_path);
  if (imagic != kImageMagic)
    fail("bad magic " + hex_magic(imagic) + " in IDX image file (want " +
             hex_magic(kImageMagic) + ")",
         images_path);
  const std::uint32_t count = read_be32(imgf, images_path);
  const std::uint32_t rows = read_be32(imgf, images_path);
  const std::uint32_t cols = read_be32(imgf, images_path);

  const std::uint32_t lmagic = read_be32(labf, labels_path);
  if (lmagic != kLabelMagic)
    fail("bad magic " + hex_magic(lmagic) + " in IDX label file (want " +
             hex_magic(kLabelMagic) + ")",
         labels_path);
  const std::uint32_t lcount = read_be32(labf, labels_path);
  if (lcount != count)
    throw std::runtime_error("IDX count mismatch: " + std::to_string(count) +
                             " images in " + images_path + " vs " +
                             std::to_string(lcount) + " labels in " + labels_path);

  LabeledSet set;
  set.images.reserve(count);
  set.labels.reserve(count);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < count; ++i) {
    if (!imgf.read(reinterpret_cast<char*>(buf.data()), buf.size()))
      fail("truncated IDX image file", images_path);
    Image img(static_cast<int>(cols), static_cast<int>(rows));
    for (std::size_t k = 0; k < buf.size(); ++k) img.data[k] = buf[k] / 255.0;
    set.images.push_back(std::move(img));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    unsigned char l;
    if (!labf.read(reinterpret_cast<char*>(&l), 1))
      fail("truncated IDX label file", labels_path);
    set.labels.push_back(static_cast<int>(l));
  }
  return set;
}

void write_idx(const LabeledSet& set, const std::string& images_path,
               const std::string& labels_path) {
  GLIMPSE_REQUIRE(set.images.size() == set.labels.size(),
                  "write_idx: image/label count mismatch");
  std::ofstream imgf(images_path, std::ios::binary);
  if (!imgf) fail("cannot open IDX image file for writing", images_path);
  write_be32(imgf, kImageMagic);
  write_be32(imgf, static_cast<std::uint32_t>(set.size()));
  write_be32(imgf, static_cast<std::uint32_t>(set.height()));
  write_be32(imgf, static_cast<std::uint32_t>(set.width()));
  std::vector<unsigned char> buf;
  for (const auto& img : set.images) {
    GLIMPSE_REQUIRE(img.width == set.width() && img.height == set.height(),
                    "write_idx: images must share dimensions");
    buf.resize(img.data.size());
    for (std::size_t k = 0; k < buf.size(); ++k)
      buf[k] = static_cast<unsigned char>(std::lround(img.data[k] * 255.0));
    imgf.write(reinterpret_cast<const char*>(buf.data()), buf.size());
  }
  if (!imgf) fail("write failed on IDX image file", images_path);

  std::ofstream labf(labels_path, std::ios::binary);
  if (!labf) fail("cannot open IDX label file for writing", labels_path);
  write_be32(labf, kLabelMagic);
  write_be32(labf, static_cast<std::uint32_t>(set.size()));
  for (int l : set.labels) {
    const unsigned char b = static_cast<unsigned char>(l);
    labf.write(reinterpret_cast<const char*>(&b), 1);
  }
  if (!labf) fail("write failed on IDX label file", labels_path);
}

LabeledSet make_jittered(const LabeledSet& src, const JitterSpec& spec) {
  GLIMPSE_REQUIRE(spec.copies_per_image >= 1, "make_jittered: copies_per_image must be >= 1");
  GLIMPSE_REQUIRE(spec.canvas >= src.width() && spec.canvas >= src.height(),
                  "make_jittered: canvas smaller than source images");
  SplitMix64 rng(spec.seed);
  const int sw = src.width(), sh = src.height();
  const std::uint64_t span_x = static_cast<std::uint64_t>(spec.canvas - sw) + 1;
  const std::uint64_t span_y = static_cast<std::uint64_t>(spec.canvas - sh) + 1;
  LabeledSet out;
  out.images.reserve(src.size() * spec.copies_per_image);
  out.labels.reserve(src.size() * spec.copies_per_image);
  for (std::size_t i = 0; i < src.size(); ++i) {
    for (int c = 0; c < spec.copies_per_image; ++c) {
      const int top = static_cast<int>(rng.next_below(span_y));
      const int left = static_cast<int>(rng.next_below(span_x));
      Image canvas(spec.canvas, spec.canvas);
      for (int r = 0; r < sh; ++r)
        for (int k = 0; k < sw; ++k)
          canvas.at(top + r, left + k) = src.images[i].at(r, k);
      out.images.push_back(std::move(canvas));
      out.labels.push_back(src.labels[i]);
    }
  }
  return out;
}

std::vector<std::vector<int>> batches(std::size_t n_items, int batch_size,
                                      std::uint64_t shuffle_seed, int epoch) {
  GLIMPSE_REQUIRE(batch_size >= 1, "batches: batch_size must be >= 1");
  // per-epoch stream derived from the shuffle seed
  SplitMix64 mix(shuffle_seed ^ (0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch + 1)));
  SplitMix64 rng(mix.next());
  std::vector<int> order(n_items);
  for (std::size_t i = 0; i < n_items; ++i) order[i] = static_cast<int>(i);
  for (std::size_t i = n_items; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.next_below(i));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<int>> out;
  for (std::size_t start = 0; start < n_items; start += batch_size) {
    const std::size_t end = std::min(n_items, start + batch_size);
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

}  // namespace glimpse

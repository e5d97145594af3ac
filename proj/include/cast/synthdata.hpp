#pragma once

#include "cast/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace cast {

/// Glyph shapes used as appearance classes, in class-index order.
inline const std::vector<std::string>& glyph_names() {
  static const std::vector<std::string> names = {"disk", "square", "triangle", "cross", "ring", "diamond"};
  return names;
}

/// Motion classes in class-index order. Classes 2k and 2k+1 are temporal
/// reversals of each other.
inline const std::vector<std::string>& motion_names() {
  static const std::vector<std::string> names = {"move_right", "move_left", "move_up", "move_down"};
  return names;
}

/// Parameters of the compositional moving-glyph benchmark.
struct SyntheticSpec {
  int height = 32;
  int width = 32;
  int frames = 16;  ///< 2T
  int channels = 3;
  int appearance_classes = 4;
  int motion_classes = 4;
  int train_count = 4000;
  int val_count = 1000;
  double noise = 0.02;
  double glyph_size = 0.3;   ///< side of the equal-area reference square, as a fraction of min(H, W)
  double glyph_value = 0.95;
  /// Per-class colour: glyph channels on the class's low set are dimmed by this much.
  double tint = 0.3;
  double background = 0.25;
  double texture = 0.1;      ///< background sinusoid amplitude
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<std::pair<std::string, std::string>> to_kv() const;
  void set(const std::string& key, const std::string& value);
};

struct Sample {
  std::uint16_t appearance = 0;
  std::uint16_t motion = 0;
  std::vector<std::uint8_t> pixels;  ///< [2T, H, W, C], value = round(255 * clamp(x, 0, 1))
};

struct Dataset {
  int frames = 0, height = 0, width = 0, channels = 0;
  int appearance_classes = 0, motion_classes = 0;
  std::vector<Sample> samples;

  std::size_t clip_size() const { return static_cast<std::size_t>(frames) * height * width * channels; }
  /// Samples [begin, end) as a [end - begin, 2T, H, W, C] tensor in [0, 1].
  template <class Scalar>
  Tensor<Scalar> batch(const std::vector<std::size_t>& indices) const;
};

/// Label pair of sample i: pairs cycle through all (appearance, motion)
/// combinations so any prefix of A*M samples covers each exactly once.
std::pair<int, int> label_pair(std::size_t i, int appearance_classes, int motion_classes);

/// Glyph colour of an appearance class for channel c: glyph_value, minus
/// `tint` on the channels the class's palette entry dims (red, green, blue,
/// yellow, cyan, magenta in class order; channels beyond three repeat).
double glyph_channel_value(const SyntheticSpec& spec, int appearance, int channel);

/// Renders one clip in [0, 1], shaped [2T, H, W, C].
std::vector<float> render_clip(const SyntheticSpec& spec, int appearance, int motion, std::uint64_t clip_seed);

/// Train samples first, then validation samples. Sample i uses the seed
/// mix_seed(spec.seed, i).
Dataset generate(const SyntheticSpec& spec);

void write_dataset(const Dataset& data, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace cast

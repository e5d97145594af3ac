#include "cast/synthdata.hpp"

#include "cast/binary_io.hpp"
#include "cast/kv.hpp"
#include "cast/parallel.hpp"
#include "cast/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace cast {

namespace {

constexpr std::string_view kMagic("CASTDATA\x01", 9);
constexpr int kMinResolution = 16;
constexpr int kSupersample = 4;

/// Coverage test for a glyph of reference side `s` (every glyph has area s^2),
/// at offset (dx, dy) from its centre; y grows downwards.
bool inside(int glyph, double dx, double dy, double s) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (glyph) {
    case 0: {  // disk
      const double r = s / std::sqrt(std::numbers::pi);
      return dx * dx + dy * dy <= r * r;
    }
    case 1:  // square
      return ax <= 0.5 * s && ay <= 0.5 * s;
    case 2: {  // upward isosceles triangle, base = height, centred on its centroid
      const double h = std::sqrt(2.0) * s;
      const double top = -2.0 * h / 3.0;
      if (dy < top || dy > h / 3.0) return false;
      return ax <= 0.5 * h * (dy - top) / h;
    }
    case 3: {  // plus sign, arm width a third of its span
      const double span = std::sqrt(9.0 / 5.0) * s;
      const double half = 0.5 * span, arm = span / 6.0;
      return (ax <= half && ay <= arm) || (ay <= half && ax <= arm);
    }
    case 4: {  // ring, inner radius half the outer
      const double r = std::sqrt(4.0 / (3.0 * std::numbers::pi)) * s;
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.25 * r * r;
    }
    default: {  // diamond
      const double d = s / std::sqrt(2.0);
      return ax + ay <= d;
    }
  }
}

double wrap(double d, double period) { return d - period * std::round(d / period); }

}  // namespace

void SyntheticSpec::validate() const {
  if (height < kMinResolution || width < kMinResolution)
    throw ConfigError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                      " too small for glyphs (minimum " + std::to_string(kMinResolution) + ")");
  if (frames < 2 || frames % 2) throw ConfigError("data.frames must be even and >= 2");
  if (channels < 1) throw ConfigError("data.channels must be positive");
  if (appearance_classes < 1 || appearance_classes > static_cast<int>(glyph_names().size()))
    throw ConfigError("data.appearance_classes must be in [1, " + std::to_string(glyph_names().size()) + "]");
  if (motion_classes < 2 || motion_classes > static_cast<int>(motion_names().size()) || motion_classes % 2)
    throw ConfigError("data.motion_classes must be 2 or 4 (reversal pairs)");
  if (train_count < 0 || val_count < 0 || train_count + val_count == 0)
    throw ConfigError("data.train_count and data.val_count must be non-negative, not both zero");
  if (noise < 0.0) throw ConfigError("data.noise must be non-negative");
  if (tint < 0.0 || tint > glyph_value) throw ConfigError("data.tint must lie in [0, glyph_value]");
  if (glyph_size <= 0.0 || glyph_size > 0.5) throw ConfigError("data.glyph_size must be in (0, 0.5]");
}

std::vector<std::pair<std::string, std::string>> SyntheticSpec::to_kv() const {
  return {{"appearance_classes", std::to_string(appearance_classes)},
          {"background", fmt_double(background)},
          {"channels", std::to_string(channels)},
          {"frames", std::to_string(frames)},
          {"glyph_size", fmt_double(glyph_size)},
          {"glyph_value", fmt_double(glyph_value)},
          {"height", std::to_string(height)},
          {"motion_classes", std::to_string(motion_classes)},
          {"noise", fmt_double(noise)},
          {"seed", std::to_string(seed)},
          {"texture", fmt_double(texture)},
          {"tint", fmt_double(tint)},
          {"train_count", std::to_string(train_count)},
          {"val_count", std::to_string(val_count)},
          {"width", std::to_string(width)}};
}

void SyntheticSpec::set(const std::string& key, const std::string& v) {
  if (key == "height") height = parse_int(key, v);
  else if (key == "width") width = parse_int(key, v);
  else if (key == "frames") frames = parse_int(key, v);
  else if (key == "channels") channels = parse_int(key, v);
  else if (key == "appearance_classes") appearance_classes = parse_int(key, v);
  else if (key == "motion_classes") motion_classes = parse_int(key, v);
  else if (key == "train_count") train_count = parse_int(key, v);
  else if (key == "val_count") val_count = parse_int(key, v);
  else if (key == "noise") noise = parse_double(key, v);
  else if (key == "glyph_size") glyph_size = parse_double(key, v);
  else if (key == "glyph_value") glyph_value = parse_double(key, v);
  else if (key == "background") background = parse_double(key, v);
  else if (key == "texture") texture = parse_double(key, v);
  else if (key == "tint") tint = parse_double(key, v);
  else if (key == "seed") seed = parse_u64(key, v);
  else throw ConfigError("unknown key 'data." + key + "'");
}

std::pair<int, int> label_pair(std::size_t i, int appearance_classes, int motion_classes) {
  const auto k = static_cast<int>(i % static_cast<std::size_t>(appearance_classes * motion_classes));
  return {k / motion_classes, k % motion_classes};
}

double glyph_channel_value(const SyntheticSpec& spec, int appearance, int channel) {
  // Dimmed channels per class; the six entries are distinct cube vertices.
  static constexpr bool kDim[6][3] = {{0, 1, 1}, {1, 0, 1}, {1, 1, 0}, {0, 0, 1}, {1, 0, 0}, {0, 1, 0}};
  return spec.glyph_value - (kDim[appearance % 6][channel % 3] ? spec.tint : 0.0);
}

std::vector<float> render_clip(const SyntheticSpec& spec, int appearance, int motion, std::uint64_t clip_seed) {
  const int F = spec.frames, H = spec.height, W = spec.width, C = spec.channels;
  Rng rng(clip_seed);
  const double cx0 = rng.uniform() * W, cy0 = rng.uniform() * H;
  const int kx = 1 + static_cast<int>(rng.below(2)), ky = 1 + static_cast<int>(rng.below(2));
  std::vector<double> phase(static_cast<std::size_t>(C));
  for (auto& p : phase) p = rng.uniform(0.0, 2.0 * std::numbers::pi);

  // Static background; integer frequencies keep every frame's mean at `background`.
  std::vector<double> bg(static_cast<std::size_t>(H) * W * C);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        bg[(static_cast<std::size_t>(y) * W + x) * C + c] =
            spec.background +
            spec.texture * std::sin(2.0 * std::numbers::pi * (kx * double(x) / W + ky * double(y) / H) + phase[c]);

  std::vector<double> ink(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) ink[c] = glyph_channel_value(spec, appearance, c);
  const double s = spec.glyph_size * std::min(H, W);
  const int reach = static_cast<int>(std::ceil(s)) + 1;
  // One lap per clip: T steps of W/T (or H/T) close the trajectory, so the
  // set of rendered positions is the same whichever way it is traversed.
  const int T = F / 2;
  const double vx = (motion / 2 == 0) ? double(W) / T : 0.0;
  const double vy = (motion / 2 == 0) ? 0.0 : -double(H) / T;
  const std::size_t frame_size = static_cast<std::size_t>(H) * W * C;
  std::vector<float> steps(frame_size * T);
  std::vector<double> cover(static_cast<std::size_t>(H) * W);
  for (int k = 0; k < T; ++k) {
    const double cx = cx0 + vx * k, cy = cy0 + vy * k;
    std::fill(cover.begin(), cover.end(), 0.0);
    const int px0 = static_cast<int>(std::floor(cx)), py0 = static_cast<int>(std::floor(cy));
    for (int oy = -reach; oy <= reach; ++oy)
      for (int ox = -reach; ox <= reach; ++ox) {
        const int x = ((px0 + ox) % W + W) % W, y = ((py0 + oy) % H + H) % H;
        int hits = 0;
        for (int sy = 0; sy < kSupersample; ++sy)
          for (int sx = 0; sx < kSupersample; ++sx) {
            const double dx = wrap(x + (sx + 0.5) / kSupersample - cx, W);
            const double dy = wrap(y + (sy + 0.5) / kSupersample - cy, H);
            hits += inside(appearance, dx, dy, s);
          }
        cover[static_cast<std::size_t>(y) * W + x] = double(hits) / (kSupersample * kSupersample);
      }
    float* out = steps.data() + frame_size * k;
    for (std::size_t p = 0; p < cover.size(); ++p)
      for (int c = 0; c < C; ++c) {
        const std::size_t i = p * C + c;
        const double v = bg[i] * (1.0 - cover[p]) + ink[c] * cover[p] + spec.noise * rng.normal();
        out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  }
  // Frame f shows step ceil(f / 2) mod T: the glyph moves inside every
  // two-frame tube and holds across tube boundaries. Even frames then show
  // each step once, and so do the even frames of the reversed clip.
  std::vector<float> clip(frame_size * F);
  for (int f = 0; f < F; ++f) {
    const int k = ((f + 1) / 2) % T;
    std::copy_n(steps.data() + frame_size * k, frame_size, clip.data() + frame_size * f);
  }
  if (motion % 2 == 1)
    for (int f = 0; f < F / 2; ++f)
      std::swap_ranges(clip.begin() + frame_size * f, clip.begin() + frame_size * (f + 1),
                       clip.begin() + frame_size * (F - 1 - f));
  return clip;
}

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  Dataset d;
  d.frames = spec.frames;
  d.height = spec.height;
  d.width = spec.width;
  d.channels = spec.channels;
  d.appearance_classes = spec.appearance_classes;
  d.motion_classes = spec.motion_classes;
  const auto total = static_cast<std::size_t>(spec.train_count) + spec.val_count;
  d.samples.resize(total);
  parallel_for(total, [&](std::size_t i) {
    const std::size_t local = i < static_cast<std::size_t>(spec.train_count) ? i : i - spec.train_count;
    const auto [a, m] = label_pair(local, spec.appearance_classes, spec.motion_classes);
    const auto clip = render_clip(spec, a, m, mix_seed(spec.seed, i));
    Sample& out = d.samples[i];
    out.appearance = static_cast<std::uint16_t>(a);
    out.motion = static_cast<std::uint16_t>(m);
    out.pixels.resize(clip.size());
    for (std::size_t p = 0; p < clip.size(); ++p)
      out.pixels[p] = static_cast<std::uint8_t>(std::lround(255.0f * clip[p]));
  });
  return d;
}

template <class Scalar>
Tensor<Scalar> Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t n = clip_size();
  Tensor<Scalar> out({static_cast<Index>(indices.size()), frames, height, width, channels});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& px = samples.at(indices[b]).pixels;
    for (std::size_t p = 0; p < n; ++p) out[static_cast<Index>(b * n + p)] = Scalar(px[p]) / Scalar(255);
  }
  return out;
}

template Tensor<float> Dataset::batch<float>(const std::vector<std::size_t>&) const;
template Tensor<double> Dataset::batch<double>(const std::vector<std::size_t>&) const;

void write_dataset(const Dataset& data, const std::string& path) {
  ByteWriter w;
  w.text(kMagic);
  for (int v : {static_cast<int>(data.samples.size()), data.frames, data.height, data.width, data.channels,
                data.appearance_classes, data.motion_classes})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  for (const Sample& s : data.samples) {
    if (s.pixels.size() != data.clip_size())
      throw DimensionError("sample has " + std::to_string(s.pixels.size()) + " pixels, expected " +
                           std::to_string(data.clip_size()));
    w.put<std::uint16_t>(s.appearance);
    w.put<std::uint16_t>(s.motion);
    w.bytes(s.pixels.data(), s.pixels.size());
  }
  w.seal();
  w.save(path);
}

Dataset read_dataset(const std::string& path) {
  ByteReader r(ByteReader::load(path), "dataset '" + path + "'");
  r.open(kMagic);
  Dataset d;
  const std::size_t header = r.offset();
  const auto count = r.get<std::uint32_t>();
  d.frames = static_cast<int>(r.get<std::uint32_t>());
  d.height = static_cast<int>(r.get<std::uint32_t>());
  d.width = static_cast<int>(r.get<std::uint32_t>());
  d.channels = static_cast<int>(r.get<std::uint32_t>());
  d.appearance_classes = static_cast<int>(r.get<std::uint32_t>());
  d.motion_classes = static_cast<int>(r.get<std::uint32_t>());
  if (d.frames <= 0 || d.height <= 0 || d.width <= 0 || d.channels <= 0 || d.appearance_classes <= 0 ||
      d.motion_classes <= 0)
    r.fail("non-positive header field", header);
  const std::size_t record = 4 + d.clip_size();
  if (r.remaining() != record * count) r.fail("payload size does not match header", r.offset());
  d.samples.resize(count);
  for (auto& s : d.samples) {
    const std::size_t at = r.offset();
    s.appearance = r.get<std::uint16_t>();
    s.motion = r.get<std::uint16_t>();
    if (s.appearance >= d.appearance_classes || s.motion >= d.motion_classes) r.fail("label out of range", at);
    s.pixels.resize(d.clip_size());
    r.bytes(s.pixels.data(), s.pixels.size());
  }
  return d;
}

}  // namespace cast

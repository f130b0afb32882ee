#include "distembed/corruption.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "distembed/error.hpp"

namespace distembed {

std::vector<std::size_t> corrupt_labels(std::span<const std::size_t> labels, double fraction, std::size_t num_classes,
                                        std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error(ErrorKind::InvalidConfig, "label-noise fraction must lie in [0,1]");
  std::vector<std::size_t> out(labels.begin(), labels.end());
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(labels.size())));
  if (count == 0) return out;
  if (num_classes < 2) throw Error(ErrorKind::InvalidConfig, "label noise needs at least two classes");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(labels.size());
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first `count` slots are a uniform sample without replacement.
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::uniform_int_distribution<std::size_t> other(0, num_classes - 2);
  for (std::size_t i = 0; i < count; ++i) {
    const auto original = labels[idx[i]];
    if (original >= num_classes) throw Error(ErrorKind::InvalidInput, "label outside [0,K)");
    auto y = other(rng);
    if (y >= original) ++y;
    out[idx[i]] = y;
  }
  return out;
}

std::vector<double> gaussian_kernel_1d(std::size_t k) {
  if (k == 0 || k % 2 == 0) {
    throw Error(ErrorKind::InvalidConfig, "gaussian blur kernel must be odd, got " + std::to_string(k));
  }
  if (k == 1) return {1.0};
  const double sigma = 0.3 * ((static_cast<double>(k) - 1.0) / 2.0 - 1.0) + 0.8;
  const long half = static_cast<long>(k / 2);
  std::vector<double> w(k);
  for (long i = -half; i <= half; ++i) w[i + half] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& x : w) x /= total;
  return w;
}

Kernel2D gaussian_kernel(std::size_t k) {
  const auto w = gaussian_kernel_1d(k);
  Kernel2D out{k, std::vector<double>(k * k)};
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < k; ++c) out.weights[r * k + c] = w[r] * w[c];
  return out;
}

Kernel2D motion_kernel(std::size_t k, MotionOrientation orientation) {
  if (k < 3) throw Error(ErrorKind::InvalidConfig, "motion blur kernel must be at least 3, got " + std::to_string(k));
  Kernel2D out{k, std::vector<double>(k * k, 0.0)};
  const std::size_t centre = k / 2;
  for (std::size_t i = 0; i < k; ++i) {
    if (orientation == MotionOrientation::Horizontal) out.weights[centre * k + i] = 1.0 / static_cast<double>(k);
    else out.weights[i * k + centre] = 1.0 / static_cast<double>(k);
  }
  return out;
}

MotionOrientation motion_orientation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return (rng() >> 63) ? MotionOrientation::Vertical : MotionOrientation::Horizontal;
}

std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * (static_cast<long>(n) - 1);
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < static_cast<long>(n) ? m : period - m);
}

namespace {

void check_image(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) == 0 || image.dim(1) == 0 || image.dim(2) == 0) {
    throw Error(ErrorKind::IncompatibleShape, "expected a non-empty [H,W,C] image, got " + shape_str(image.shape()));
  }
}

Tensor clamped(Shape shape, std::vector<double> v) {
  for (auto& x : v) x = std::clamp(x, 0.0, 1.0);
  return Tensor(std::move(shape), std::move(v));
}

// 1-D correlation along rows (axis 1) or columns (axis 0) with reflect padding;
// `origin` is the tap aligned with the output pixel.
std::vector<double> filter_axis(std::span<const double> in, std::size_t H, std::size_t W, std::size_t C,
                                std::span<const double> taps, std::size_t origin, int axis) {
  std::vector<double> out(in.size(), 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t t = 0; t < taps.size(); ++t) {
        const long off = static_cast<long>(t) - static_cast<long>(origin);
        const std::size_t yy = axis == 0 ? reflect_index(static_cast<long>(y) + off, H) : y;
        const std::size_t xx = axis == 1 ? reflect_index(static_cast<long>(x) + off, W) : x;
        for (std::size_t c = 0; c < C; ++c) out[(y * W + x) * C + c] += taps[t] * in[(yy * W + xx) * C + c];
      }
  return out;
}

}  // namespace

Tensor gaussian_blur(const Tensor& image, std::size_t k) {
  check_image(image);
  const auto w = gaussian_kernel_1d(k);
  if (k == 1) return image.detach();
  const auto H = image.dim(0), W = image.dim(1), C = image.dim(2);
  auto rows = filter_axis(image.data(), H, W, C, w, k / 2, 1);
  return clamped(image.shape(), filter_axis(rows, H, W, C, w, k / 2, 0));
}

Tensor motion_blur(const Tensor& image, std::size_t k, MotionOrientation orientation) {
  check_image(image);
  if (k < 3) throw Error(ErrorKind::InvalidConfig, "motion blur kernel must be at least 3, got " + std::to_string(k));
  const std::vector<double> taps(k, 1.0 / static_cast<double>(k));
  const int axis = orientation == MotionOrientation::Horizontal ? 1 : 0;
  return clamped(image.shape(), filter_axis(image.data(), image.dim(0), image.dim(1), image.dim(2), taps, k / 2, axis));
}

Tensor motion_blur(const Tensor& image, std::size_t k, std::uint64_t seed) {
  return motion_blur(image, k, motion_orientation(seed));
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  check_image(image);
  if (height == 0 || width == 0) throw Error(ErrorKind::InvalidConfig, "resize target must be at least 1x1");
  const auto H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (H == height && W == width) return image.detach();
  struct Tap {
    std::size_t i0, i1;
    double w1;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t d = 0; d < out; ++d) {
      const double src = std::max(0.0, (static_cast<double>(d) + 0.5) * scale - 0.5);
      const auto i0 = std::min(static_cast<std::size_t>(src), in - 1);
      t[d] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(H, height), tx = taps(W, width);
  const auto in = image.data();
  std::vector<double> out(height * width * C);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) { return in[(yy * W + xx) * C + c]; };
        const auto& a = ty[y];
        const auto& b = tx[x];
        const double top = (1.0 - b.w1) * px(a.i0, b.i0) + b.w1 * px(a.i0, b.i1);
        const double bottom = (1.0 - b.w1) * px(a.i1, b.i0) + b.w1 * px(a.i1, b.i1);
        out[(y * width + x) * C + c] = (1.0 - a.w1) * top + a.w1 * bottom;
      }
  return clamped({height, width, C}, std::move(out));
}

Tensor interp_degrade(const Tensor& image, double ratio) {
  check_image(image);
  if (!(ratio > 0.0 && ratio <= 1.0)) throw Error(ErrorKind::InvalidConfig, "interp ratio must lie in (0,1]");
  if (ratio == 1.0) return image.detach();
  const auto h = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(image.dim(0))));
  const auto w = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(image.dim(1))));
  if (h < 1 || w < 1) {
    throw Error(ErrorKind::InvalidConfig, "interp ratio " + std::to_string(ratio) + " shrinks " +
                                              shape_str(image.shape()) + " below one pixel");
  }
  return resize_bilinear(resize_bilinear(image, h, w), image.dim(0), image.dim(1));
}

Tensor random_erase(const Tensor& image, double area_fraction, std::uint64_t seed, std::span<const double> fill) {
  check_image(image);
  if (!(area_fraction >= 0.0 && area_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "erase fraction must lie in [0,1)");
  }
  const auto H = image.dim(0), W = image.dim(1), C = image.dim(2);
  const auto area = static_cast<std::size_t>(std::llround(area_fraction * static_cast<double>(H * W)));
  if (area == 0) return image.detach();
  std::vector<double> colour(fill.begin(), fill.end());
  if (colour.empty()) {
    colour.assign(C, 0.0);
    for (std::size_t i = 0; i < H * W; ++i)
      for (std::size_t c = 0; c < C; ++c) colour[c] += image.data()[i * C + c];
    for (auto& v : colour) v /= static_cast<double>(H * W);
  }
  if (colour.size() != C) throw Error(ErrorKind::IncompatibleShape, "erase fill needs one value per channel");

  std::mt19937_64 rng(seed);
  const double aspect = std::uniform_real_distribution<double>(0.5, 2.0)(rng);  // height / width
  // The shorter side is rounded first and the longer one derived from the
  // area, which keeps the rounding error on the area small.
  const double a = static_cast<double>(area);
  std::size_t h, w;
  if (aspect >= 1.0) {
    w = std::max<std::size_t>(1, std::llround(std::sqrt(a / aspect)));
    h = std::max<std::size_t>(1, std::llround(a / static_cast<double>(w)));
  } else {
    h = std::max<std::size_t>(1, std::llround(std::sqrt(a * aspect)));
    w = std::max<std::size_t>(1, std::llround(a / static_cast<double>(h)));
  }
  h = std::min(h, H);
  w = std::min(w, W);
  const auto y0 = std::uniform_int_distribution<std::size_t>(0, H - h)(rng);
  const auto x0 = std::uniform_int_distribution<std::size_t>(0, W - w)(rng);
  auto out = image.to_vector();
  for (std::size_t y = y0; y < y0 + h; ++y)
    for (std::size_t x = x0; x < x0 + w; ++x)
      for (std::size_t c = 0; c < C; ++c) out[(y * W + x) * C + c] = colour[c];
  return clamped(image.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Specs

namespace {

double parse_number(const std::string& text, const std::string& spec) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw Error(ErrorKind::InvalidConfig, "bad number in corruption '" + spec + "'");
  return v;
}

}  // namespace

CorruptionSpec CorruptionSpec::parse(const std::string& text, std::uint64_t seed) {
  CorruptionSpec spec;
  spec.seed = seed;
  if (text.empty() || text == "none") return spec;
  const auto colon = text.find(':');
  const auto eq = text.find('=', colon);
  if (colon == std::string::npos || eq == std::string::npos) {
    throw Error(ErrorKind::InvalidConfig, "corruption '" + text + "' is not KIND:KEY=VALUE");
  }
  const auto kind = text.substr(0, colon);
  const auto key = text.substr(colon + 1, eq - colon - 1);
  const double value = parse_number(text.substr(eq + 1), text);
  struct Entry {
    const char* name;
    const char* key;
    CorruptionKind kind;
  };
  static const Entry table[] = {{"label-noise", "frac", CorruptionKind::LabelNoise},
                                {"gaussian-blur", "k", CorruptionKind::GaussianBlur},
                                {"motion-blur", "k", CorruptionKind::MotionBlur},
                                {"interp", "ratio", CorruptionKind::Interp},
                                {"erase", "frac", CorruptionKind::Erase}};
  for (const auto& e : table) {
    if (kind != e.name) continue;
    if (key != e.key) throw Error(ErrorKind::InvalidConfig, kind + " takes '" + e.key + "=', got '" + key + "='");
    spec.kind = e.kind;
    spec.value = value;
    spec.validate();
    return spec;
  }
  throw Error(ErrorKind::InvalidConfig,
              "unknown corruption '" + kind + "' (label-noise, gaussian-blur, motion-blur, interp, erase)");
}

std::string CorruptionSpec::to_string() const {
  std::ostringstream os;
  os << value;
  switch (kind) {
    case CorruptionKind::None: return "none";
    case CorruptionKind::LabelNoise: return "label-noise:frac=" + os.str();
    case CorruptionKind::GaussianBlur: return "gaussian-blur:k=" + os.str();
    case CorruptionKind::MotionBlur: return "motion-blur:k=" + os.str();
    case CorruptionKind::Interp: return "interp:ratio=" + os.str();
    case CorruptionKind::Erase: return "erase:frac=" + os.str();
  }
  return "none";
}

void CorruptionSpec::validate() const {
  auto integral = [&] { return value == std::floor(value); };
  switch (kind) {
    case CorruptionKind::None: return;
    case CorruptionKind::LabelNoise:
      if (!(value >= 0.0 && value <= 1.0)) throw Error(ErrorKind::InvalidConfig, "label-noise frac must lie in [0,1]");
      return;
    case CorruptionKind::GaussianBlur:
      if (!integral() || value < 1.0 || static_cast<long>(value) % 2 == 0) {
        throw Error(ErrorKind::InvalidConfig, "gaussian-blur k must be an odd integer");
      }
      return;
    case CorruptionKind::MotionBlur:
      if (!integral() || value < 3.0) throw Error(ErrorKind::InvalidConfig, "motion-blur k must be an integer >= 3");
      return;
    case CorruptionKind::Interp:
      if (!(value > 0.0 && value <= 1.0)) throw Error(ErrorKind::InvalidConfig, "interp ratio must lie in (0,1]");
      return;
    case CorruptionKind::Erase:
      if (!(value >= 0.0 && value < 1.0)) throw Error(ErrorKind::InvalidConfig, "erase frac must lie in [0,1)");
      return;
  }
}

bool CorruptionSpec::is_image_corruption() const {
  return kind != CorruptionKind::None && kind != CorruptionKind::LabelNoise;
}

Tensor corrupt_images(const Tensor& batch, const CorruptionSpec& spec, std::span<const double> fill) {
  spec.validate();
  if (!spec.is_image_corruption()) return batch.detach();
  if (batch.rank() != 4) throw Error(ErrorKind::IncompatibleShape, "expected an [N,H,W,C] batch");
  const Shape image_shape{batch.dim(1), batch.dim(2), batch.dim(3)};
  const std::size_t per = shape_numel(image_shape);
  std::vector<double> out(batch.numel());
  for (std::size_t i = 0; i < batch.dim(0); ++i) {
    const auto src = batch.data().subspan(i * per, per);
    const Tensor image(image_shape, std::vector<double>(src.begin(), src.end()));
    const std::uint64_t seed = spec.seed ^ i;
    const auto k = static_cast<std::size_t>(spec.value);
    Tensor result;
    switch (spec.kind) {
      case CorruptionKind::GaussianBlur: result = gaussian_blur(image, k); break;
      case CorruptionKind::MotionBlur: result = motion_blur(image, k, seed); break;
      case CorruptionKind::Interp: result = interp_degrade(image, spec.value); break;
      case CorruptionKind::Erase: result = random_erase(image, spec.value, seed, fill); break;
      default: result = image; break;
    }
    std::copy(result.data().begin(), result.data().end(), out.begin() + i * per);
  }
  return Tensor(batch.shape(), std::move(out));
}

}  // namespace distembed

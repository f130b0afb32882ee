#include <cmath>
#include <numeric>
#include <random>

#include "distembed/corruption.hpp"
#include "distembed/error.hpp"
#include "doctest.h"

using namespace distembed;

namespace {

Tensor random_image(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(h * w * c);
  for (auto& x : v) x = u(rng);
  return Tensor({h, w, c}, v);
}

// Direct 2-D correlation with reflect padding, one loop per axis.
Tensor naive_filter(const Tensor& img, const Kernel2D& k) {
  const auto H = img.dim(0), W = img.dim(1), C = img.dim(2);
  const long half = static_cast<long>(k.size / 2);
  std::vector<double> out(img.numel(), 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < k.size; ++r)
          for (std::size_t s = 0; s < k.size; ++s) {
            const auto yy = reflect_index(long(y) + long(r) - half, H);
            const auto xx = reflect_index(long(x) + long(s) - half, W);
            acc += k.at(r, s) * img.data()[(yy * W + xx) * C + c];
          }
        out[(y * W + x) * C + c] = std::clamp(acc, 0.0, 1.0);
      }
  return Tensor(img.shape(), out);
}

void check_close(const Tensor& a, const Tensor& b, double tol) {
  REQUIRE(a.shape() == b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.data()[i] - b.data()[i]) <= tol);
}

}  // namespace

TEST_CASE("label noise") {
  std::vector<std::size_t> labels(1000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 7;
  CHECK(corrupt_labels(labels, 0.0, 7, 1) == labels);

  const auto noisy = corrupt_labels(labels, 0.1, 7, 2);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    changed += noisy[i] != labels[i];
    CHECK(noisy[i] < 7);
  }
  CHECK(changed == 100);
  CHECK(corrupt_labels(labels, 0.1, 7, 2) == noisy);

  std::vector<std::size_t> two{0, 1, 1, 0, 1};
  const auto flipped = corrupt_labels(two, 1.0, 2, 3);
  for (std::size_t i = 0; i < two.size(); ++i) CHECK(flipped[i] == 1 - two[i]);
  CHECK_THROWS_AS(corrupt_labels(std::vector<std::size_t>{0, 0}, 0.5, 1, 0), Error);
  CHECK_THROWS_AS(corrupt_labels(two, 1.5, 2, 0), Error);
}

TEST_CASE("label noise picks every wrong class") {
  std::vector<std::size_t> labels(3000, 2);
  const auto noisy = corrupt_labels(labels, 1.0, 4, 5);
  std::vector<int> counts(4, 0);
  for (auto y : noisy) ++counts[y];
  CHECK(counts[2] == 0);
  for (int k : {0, 1, 3}) CHECK(std::abs(counts[k] - 1000) < 100);
}

TEST_CASE("kernels sum to one") {
  for (std::size_t k : {1, 3, 5, 7, 9}) {
    const auto g = gaussian_kernel(k);
    CHECK(std::abs(std::accumulate(g.weights.begin(), g.weights.end(), 0.0) - 1.0) <= 1e-12);
  }
  for (std::size_t k : {3, 5, 10, 15})
    for (auto o : {MotionOrientation::Horizontal, MotionOrientation::Vertical}) {
      const auto m = motion_kernel(k, o);
      CHECK(std::abs(std::accumulate(m.weights.begin(), m.weights.end(), 0.0) - 1.0) <= 1e-12);
    }
  CHECK_THROWS_AS(gaussian_kernel(4), Error);
  CHECK_THROWS_AS(motion_kernel(2, MotionOrientation::Vertical), Error);
  // sigma for k=3 is 0.8
  const auto w = gaussian_kernel_1d(3);
  const double e = std::exp(-0.5 / 0.64);
  CHECK(w[0] == doctest::Approx(e / (1 + 2 * e)).epsilon(1e-14));
}

TEST_CASE("reflect padding") {
  CHECK(reflect_index(-1, 4) == 1);
  CHECK(reflect_index(-2, 4) == 2);
  CHECK(reflect_index(4, 4) == 2);
  CHECK(reflect_index(5, 4) == 1);
  CHECK(reflect_index(-7, 3) == 1);
  CHECK(reflect_index(3, 1) == 0);
}

TEST_CASE("gaussian blur") {
  const auto img = random_image(6, 5, 3, 1);
  CHECK(gaussian_blur(img, 1).to_vector() == img.to_vector());
  for (double v : gaussian_blur(Tensor::full({5, 4, 3}, 0.37), 5).to_vector()) CHECK(v == doctest::Approx(0.37).epsilon(1e-14));

  std::vector<double> impulse(7 * 7, 0.0);
  impulse[3 * 7 + 3] = 1.0;
  const Tensor imp({7, 7, 1}, impulse);
  const auto blurred = gaussian_blur(imp, 3);
  const auto k = gaussian_kernel(3);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(blurred.data()[(2 + r) * 7 + 2 + c] == doctest::Approx(k.at(r, c)).epsilon(1e-14));
  check_close(blurred, naive_filter(imp, k), 1e-14);
  check_close(gaussian_blur(img, 5), naive_filter(img, gaussian_kernel(5)), 1e-13);
  // Kernel wider than the image still reflects cleanly.
  check_close(gaussian_blur(random_image(2, 3, 1, 2), 7), naive_filter(random_image(2, 3, 1, 2), gaussian_kernel(7)), 1e-13);
  CHECK_THROWS_AS(gaussian_blur(img, 4), Error);
}

TEST_CASE("motion blur") {
  for (double v : motion_blur(Tensor::full({6, 6, 3}, 0.6), 5, std::uint64_t{3}).to_vector()) {
    CHECK(v == doctest::Approx(0.6).epsilon(1e-14));
  }
  std::vector<double> line(9 * 9, 0.0);
  for (std::size_t y = 0; y < 9; ++y) line[y * 9 + 4] = 1.0;
  const Tensor img({9, 9, 1}, line);
  const auto h = motion_blur(img, 5, MotionOrientation::Horizontal);
  check_close(h, naive_filter(img, motion_kernel(5, MotionOrientation::Horizontal)), 1e-15);
  for (std::size_t y = 0; y < 9; ++y)
    for (std::size_t x = 0; x < 9; ++x) {
      const double expected = (x >= 2 && x <= 6) ? 0.2 : 0.0;
      CHECK(h.data()[y * 9 + x] == doctest::Approx(expected).epsilon(1e-14));
    }
  // Vertical motion leaves a vertical line alone.
  check_close(motion_blur(img, 5, MotionOrientation::Vertical), img, 1e-15);
  // Even kernels put the centre at floor(k/2).
  const auto ten = motion_blur(img, 10, MotionOrientation::Horizontal);
  check_close(ten, naive_filter(img, motion_kernel(10, MotionOrientation::Horizontal)), 1e-15);

  CHECK(motion_orientation(42) == motion_orientation(42));
  int vertical = 0;
  for (std::uint64_t s = 0; s < 2000; ++s) vertical += motion_orientation(s) == MotionOrientation::Vertical;
  CHECK(std::abs(vertical - 1000) < 100);
  CHECK_THROWS_AS(motion_blur(img, 2, std::uint64_t{0}), Error);
}

TEST_CASE("interpolation degradation") {
  const auto img = random_image(8, 6, 3, 4);
  CHECK(interp_degrade(img, 1.0).to_vector() == img.to_vector());
  for (double r : {0.75, 0.5, 0.25})
    for (double v : interp_degrade(Tensor::full({8, 6, 3}, 0.3), r).to_vector()) CHECK(v == doctest::Approx(0.3).epsilon(1e-14));

  // 4x4 ramp f(y,x) = x/4. Down to 2x2 samples x = 0.5 and 2.5 -> 0.125, 0.625.
  // Up to 4 samples at -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to the last tap).
  std::vector<double> ramp(16);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) ramp[y * 4 + x] = x / 4.0;
  const Tensor r4({4, 4, 1}, ramp);
  const auto small = resize_bilinear(r4, 2, 2);
  CHECK(small.to_vector() == std::vector<double>{0.125, 0.625, 0.125, 0.625});
  const auto back = interp_degrade(r4, 0.5);
  const std::vector<double> row{0.125, 0.25, 0.5, 0.625};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) CHECK(back.data()[y * 4 + x] == row[x]);
  CHECK_THROWS_AS(interp_degrade(random_image(2, 2, 1, 0), 0.1), Error);
  CHECK_THROWS_AS(interp_degrade(img, 0.0), Error);
}

TEST_CASE("random erasing") {
  const auto img = random_image(16, 16, 3, 5);
  CHECK(random_erase(img, 0.0, 1).to_vector() == img.to_vector());
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto out = random_erase(img, 0.25, seed);
    std::size_t changed = 0;
    for (std::size_t p = 0; p < 256; ++p) changed += out.data()[p * 3] != img.data()[p * 3];
    CHECK(std::abs(double(changed) - 64.0) <= 0.05 * 64.0);
  }
  CHECK(random_erase(img, 0.3, 9).to_vector() == random_erase(img, 0.3, 9).to_vector());
  const std::vector<double> fill{0.1, 0.2, 0.3};
  const auto filled = random_erase(img, 0.9, 1, fill);
  std::size_t hits = 0;
  for (std::size_t p = 0; p < 256; ++p) hits += filled.data()[p * 3 + 1] == 0.2;
  CHECK(hits >= 200);
}

TEST_CASE("spec strings") {
  const auto g = CorruptionSpec::parse("gaussian-blur:k=5", 3);
  CHECK(g.kind == CorruptionKind::GaussianBlur);
  CHECK(g.value == 5);
  CHECK(g.seed == 3);
  CHECK(g.to_string() == "gaussian-blur:k=5");
  CHECK(CorruptionSpec::parse("motion-blur:k=10").value == 10);
  CHECK(CorruptionSpec::parse("interp:ratio=0.5").value == 0.5);
  CHECK(CorruptionSpec::parse("erase:frac=0.3").kind == CorruptionKind::Erase);
  CHECK(CorruptionSpec::parse("label-noise:frac=0.1").kind == CorruptionKind::LabelNoise);
  CHECK(CorruptionSpec::parse("none").kind == CorruptionKind::None);
  CHECK_THROWS_AS(CorruptionSpec::parse("gaussian-blur:k=4"), Error);
  CHECK_THROWS_AS(CorruptionSpec::parse("gaussian-blur:ratio=5"), Error);
  CHECK_THROWS_AS(CorruptionSpec::parse("fog:k=3"), Error);
  CHECK_THROWS_AS(CorruptionSpec::parse("interp:ratio=abc"), Error);
  CHECK_THROWS_AS(CorruptionSpec::parse("erase:frac=1"), Error);
}

TEST_CASE("batch corruption is per-image and order independent") {
  std::vector<double> v;
  for (int i = 0; i < 4; ++i) {
    const auto img = random_image(8, 8, 3, 10 + i);
    v.insert(v.end(), img.data().begin(), img.data().end());
  }
  const Tensor batch({4, 8, 8, 3}, v);
  const auto spec = CorruptionSpec::parse("motion-blur:k=5", 77);
  const auto out = corrupt_images(batch, spec);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto single = motion_blur(random_image(8, 8, 3, 10 + i), 5, std::uint64_t{77} ^ i);
    for (std::size_t p = 0; p < single.numel(); ++p) CHECK(out.data()[i * 192 + p] == single.data()[p]);
  }
  for (double x : corrupt_images(batch, CorruptionSpec::parse("erase:frac=0.3", 1)).to_vector()) {
    CHECK(x >= 0.0);
    CHECK(x <= 1.0);
  }
  CHECK(corrupt_images(batch, CorruptionSpec::parse("interp:ratio=1.0")).to_vector() == batch.to_vector());
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>

#include "sa/fft.hpp"
#include "sa/rng.hpp"
#include "sa/tensor.hpp"

using namespace sa;

namespace {

Tensor random_image(Rng& rng, size_t h, size_t w, size_t c = 1) {
  Tensor t = Tensor::zeros({h, w, c});
  for (double& v : t.data) v = rng.uniform();
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("fft2 of constant image is pure DC") {
  Tensor img = Tensor::zeros({8, 8, 1});
  std::fill(img.data.begin(), img.data.end(), 0.37);
  Spectrum s = fft2(img);
  REQUIRE(std::abs(s.bin(0, 0, 0) - cd{0.37 * 64.0, 0.0}) < 1e-10);
  for (size_t u = 0; u < 8; ++u)
    for (size_t v = 0; v < 8; ++v)
      if (u || v) REQUIRE(std::abs(s.bin(0, u, v)) < 1e-10);
}

TEST_CASE("fft2 round trip") {
  Rng rng(5);
  SECTION("power of two size") {
    Tensor img = random_image(rng, 16, 16);
    REQUIRE(max_abs_diff(ifft2(fft2(img)), img) <= 1e-9);
  }
  SECTION("non power of two size uses the direct transform") {
    Tensor img = random_image(rng, 6, 10);
    REQUIRE(max_abs_diff(ifft2(fft2(img)), img) <= 1e-9);
  }
  SECTION("multi channel") {
    Tensor img = random_image(rng, 8, 8, 3);
    REQUIRE(max_abs_diff(ifft2(fft2(img)), img) <= 1e-9);
  }
}

TEST_CASE("single cosine lands on two symmetric bins") {
  const size_t h = 16, w = 16;
  Tensor img = Tensor::zeros({h, w, 1});
  for (size_t y = 0; y < h; ++y)
    for (size_t x = 0; x < w; ++x)
      img.data[y * w + x] =
          std::cos(2.0 * std::numbers::pi * 3.0 * static_cast<double>(y) / 16.0);
  Spectrum s = fft2(img);
  for (size_t u = 0; u < h; ++u)
    for (size_t v = 0; v < w; ++v) {
      const double expect = (v == 0 && (u == 3 || u == 13)) ? 128.0 : 0.0;
      REQUIRE(std::abs(std::abs(s.bin(0, u, v)) - expect) < 1e-8);
    }
}

TEST_CASE("parseval identity") {
  Rng rng(17);
  Tensor img = random_image(rng, 16, 16);
  Spectrum s = fft2(img);
  double pixel_energy = 0.0;
  for (double v : img.data) pixel_energy += v * v;
  double freq_energy = 0.0;
  for (const cd& b : s.planes[0]) freq_energy += std::norm(b);
  freq_energy /= 256.0;
  REQUIRE(std::abs(freq_energy - pixel_energy) <= 1e-8 * pixel_energy);
}

TEST_CASE("real input gives conjugate symmetric spectrum") {
  Rng rng(23);
  Tensor img = random_image(rng, 8, 8);
  Spectrum s = fft2(img);
  for (size_t u = 0; u < 8; ++u)
    for (size_t v = 0; v < 8; ++v) {
      const cd a = s.bin(0, u, v);
      const cd b = s.bin(0, (8 - u) % 8, (8 - v) % 8);
      REQUIRE(std::abs(a - std::conj(b)) < 1e-9);
    }
}

TEST_CASE("hilbert transform of constant is zero") {
  Tensor img = Tensor::zeros({16, 16, 1});
  std::fill(img.data.begin(), img.data.end(), 0.81);
  Tensor ht = hilbert_transform(img);
  for (double v : ht.data) REQUIRE(std::abs(v) < 1e-12);
}

TEST_CASE("hilbert transform is linear") {
  Rng rng(31);
  Tensor a = random_image(rng, 16, 16);
  Tensor b = random_image(rng, 16, 16);
  const double ca = 1.7, cb = -0.4;
  Tensor mix = add(scale(a, ca), scale(b, cb));
  Tensor lhs = hilbert_transform(mix);
  Tensor rhs = add(scale(hilbert_transform(a), ca),
                   scale(hilbert_transform(b), cb));
  REQUIRE(max_abs_diff(lhs, rhs) <= 1e-9);
}

TEST_CASE("applying the multiplier twice negates the sign-masked spectrum") {
  Rng rng(37);
  Tensor img = random_image(rng, 8, 8);
  Spectrum s = fft2(img);
  for (size_t u = 0; u < 8; ++u)
    for (size_t v = 0; v < 8; ++v) {
      const cd m = ht_multiplier(u, v, 8, 8);
      const cd twice = m * m * s.bin(0, u, v);
      const cd expect = frequency_sign(u, v, 8, 8) == 0
                            ? cd{0.0, 0.0}
                            : -s.bin(0, u, v);
      REQUIRE(std::abs(twice - expect) < 1e-12);
    }
}

TEST_CASE("phase swap preserves the amplitude spectrum") {
  Rng rng(41);
  Tensor img = random_image(rng, 16, 16);
  Tensor swapped = ht_phase_swap(img);
  Spectrum sa_in = fft2(img);
  Spectrum sa_out = fft2(swapped);
  for (size_t i = 0; i < sa_in.planes[0].size(); ++i) {
    const double ain = std::abs(sa_in.planes[0][i]);
    const double aout = std::abs(sa_out.planes[0][i]);
    REQUIRE(std::abs(aout - ain) <= 1e-6 * std::max(1.0, ain));
  }
}

TEST_CASE("augmenting a constant image returns it unchanged") {
  Tensor img = Tensor::zeros({16, 16, 1});
  std::fill(img.data.begin(), img.data.end(), 0.5);
  Tensor aug = ht_augment(img);
  REQUIRE(max_abs_diff(aug, img) < 1e-12);
}

TEST_CASE("augmented random image differs from the input") {
  Rng rng(43);
  Tensor img = random_image(rng, 16, 16);
  Tensor swapped = ht_phase_swap(img);
  double l2 = 0.0;
  for (size_t i = 0; i < img.data.size(); ++i) {
    const double d = swapped.data[i] - img.data[i];
    l2 += d * d;
  }
  REQUIRE(l2 > 1e-4);
  Tensor aug = ht_augment(img);
  for (double v : aug.data) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
}

TEST_CASE("signed frequency convention") {
  REQUIRE(signed_frequency(0, 16) == 0);
  REQUIRE(signed_frequency(1, 16) == 1);
  REQUIRE(signed_frequency(8, 16) == 8);   // Nyquist maps to +n/2
  REQUIRE(signed_frequency(9, 16) == -7);
  REQUIRE(signed_frequency(15, 16) == -1);
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "somno/dsp.hpp"

using namespace somno;
using Catch::Approx;

namespace {

SampledSignal make_signal(std::vector<double> v, double fs) {
  SampledSignal s;
  s.samples = std::move(v);
  s.fs = fs;
  return s;
}

SampledSignal sine(double freq, double fs, double seconds, double amp = 1.0, double phase = 0.0) {
  SampledSignal s;
  s.fs = fs;
  const auto n = static_cast<std::size_t>(seconds * fs);
  s.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    s.samples[i] = amp * std::sin(2.0 * std::numbers::pi * freq * i / fs + phase);
  return s;
}

// Steady-state amplitude oracle: peak absolute value over the middle third.
double mid_amplitude(const std::vector<double>& y) {
  double a = 0.0;
  for (std::size_t i = y.size() / 3; i < 2 * y.size() / 3; ++i) a = std::max(a, std::fabs(y[i]));
  return a;
}

}  // namespace

TEST_CASE("butterworth bandpass design hits -3 dB at band edges") {
  const auto sos = dsp::butter_bandpass(4, 0.66, 2.8, 10.0);
  const double target = 1.0 / std::sqrt(2.0);
  CHECK(dsp::sos_magnitude(sos, 0.66, 10.0) == Approx(target).epsilon(0.02));
  CHECK(dsp::sos_magnitude(sos, 2.8, 10.0) == Approx(target).epsilon(0.02));
  // Mid-band is flat.
  CHECK(dsp::sos_magnitude(sos, 1.4, 10.0) == Approx(1.0).epsilon(0.01));
}

TEST_CASE("butterworth bandpass stopband attenuation >= 20 dB at 0.1 and 3.5 Hz") {
  const auto sos = dsp::butter_bandpass(4, 0.66, 2.8, 10.0);
  const double ref = dsp::sos_magnitude(sos, 1.5, 10.0);
  CHECK(20.0 * std::log10(ref / dsp::sos_magnitude(sos, 0.1, 10.0)) >= 20.0);
  CHECK(20.0 * std::log10(ref / dsp::sos_magnitude(sos, 3.5, 10.0)) >= 20.0);
}

TEST_CASE("butterworth lowpass has unit DC gain") {
  for (int order : {1, 2, 3, 4, 5}) {
    const auto sos = dsp::butter_lowpass(order, 2.25, 25.0);
    CHECK(dsp::sos_magnitude(sos, 0.0, 25.0) == Approx(1.0).margin(1e-9));
    CHECK(dsp::sos_magnitude(sos, 2.25, 25.0) == Approx(1.0 / std::sqrt(2.0)).epsilon(0.02));
  }
}

TEST_CASE("bandpass filtering: zero in, zero out") {
  dsp::FilterSpec spec;
  spec.low_hz = 0.66;
  spec.high_hz = 2.8;
  spec.order = 4;
  auto zero = make_signal(std::vector<double>(600, 0.0), 10.0);
  auto out = dsp::butterworth_bandpass(zero, spec);
  REQUIRE(out.samples.size() == 600);
  for (double v : out.samples) CHECK(v == 0.0);
}

TEST_CASE("bandpass passes 1.5 Hz, rejects 0.1 Hz") {
  dsp::FilterSpec spec;
  spec.low_hz = 0.66;
  spec.high_hz = 2.8;
  spec.order = 4;
  auto pass = dsp::butterworth_bandpass(sine(1.5, 10.0, 120.0), spec);
  const double a_pass = mid_amplitude(pass.samples);
  CHECK(a_pass >= 0.9);
  CHECK(a_pass <= 1.0 + 1e-6);

  auto stop = dsp::butterworth_bandpass(sine(0.1, 10.0, 120.0), spec);
  CHECK(mid_amplitude(stop.samples) < 0.1);
}

TEST_CASE("bandpass rejects invalid specs") {
  dsp::FilterSpec spec;
  spec.low_hz = 2.8;
  spec.high_hz = 0.66;
  auto x = sine(1.0, 10.0, 30.0);
  CHECK_THROWS_AS(dsp::butterworth_bandpass(x, spec), std::invalid_argument);
  spec.low_hz = 0.66;
  spec.high_hz = 6.0;  // above Nyquist
  CHECK_THROWS_AS(dsp::butterworth_bandpass(x, spec), std::invalid_argument);
}

TEST_CASE("gaussian smoothing of a unit impulse reproduces a normalized kernel") {
  auto x = make_signal(std::vector<double>(101, 0.0), 10.0);
  x.samples[50] = 1.0;
  auto y = dsp::gaussian_smooth(x, 0.15);
  REQUIRE(y.samples.size() == 101);
  double sum = 0.0;
  for (double v : y.samples) sum += v;
  CHECK(sum == Approx(1.0).margin(1e-6));
  // Closed-form kernel comparison at the center.
  const double sigma = 0.15 * 10.0;
  double norm = 0.0;
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  for (int i = -radius; i <= radius; ++i) norm += std::exp(-0.5 * (i / sigma) * (i / sigma));
  CHECK(y.samples[50] == Approx(1.0 / norm).margin(1e-12));
  CHECK(y.samples[51] == Approx(std::exp(-0.5 / (sigma * sigma)) / norm).margin(1e-12));
}

TEST_CASE("gaussian smoothing preserves constants") {
  auto x = make_signal(std::vector<double>(64, 3.25), 10.0);
  auto y = dsp::gaussian_smooth(x, 0.2);
  for (double v : y.samples) CHECK(v == Approx(3.25).margin(1e-12));
}

TEST_CASE("median filter basics") {
  auto c = dsp::median_filter(make_signal(std::vector<double>(20, 7.0), 5.0), 5);
  for (double v : c.samples) CHECK(v == 7.0);

  auto spike = dsp::median_filter(make_signal({0, 0, 9, 0, 0}, 5.0), 5);
  CHECK(spike.samples[2] == 0.0);

  CHECK_THROWS_AS(dsp::median_filter(make_signal({1, 2}, 5.0), 4), std::invalid_argument);
  CHECK_THROWS_AS(dsp::median_filter(make_signal({1, 2}, 5.0), 5), std::invalid_argument);
  CHECK_THROWS_AS(dsp::median_filter(make_signal({}, 5.0), 1), std::invalid_argument);
}

TEST_CASE("median filter equals direct median at every index") {
  somno::Rng rng(7);
  std::vector<double> v(41);
  for (auto& x : v) x = rng.normal();
  auto y = dsp::median_filter(make_signal(v, 5.0), 5);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(v.size());
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    std::vector<double> w;
    for (std::ptrdiff_t k = i - 2; k <= i + 2; ++k) {
      std::ptrdiff_t j = k;
      if (j < 0) j = -j;
      if (j >= n) j = 2 * n - 2 - j;
      w.push_back(v[static_cast<std::size_t>(j)]);
    }
    std::sort(w.begin(), w.end());
    CHECK(y.samples[static_cast<std::size_t>(i)] == w[2]);
  }
}

TEST_CASE("resample sample-count arithmetic") {
  auto x = make_signal(std::vector<double>(300, 1.0), 10.0);
  auto y = dsp::resample(x, 5.0);
  CHECK(y.samples.size() == 150);
  CHECK(y.fs == 5.0);
  // duration preserved within one output sample
  CHECK(std::fabs(y.duration() - x.duration()) <= 1.0 / 5.0);
}

TEST_CASE("resample preserves a low-frequency sinusoid") {
  auto x = sine(0.25, 25.0, 60.0);
  auto y = dsp::resample(x, 5.0);
  CHECK(mid_amplitude(y.samples) == Approx(1.0).epsilon(0.02));
}

TEST_CASE("zero preservation across every filter") {
  auto zero10 = make_signal(std::vector<double>(400, 0.0), 10.0);
  for (double v : dsp::gaussian_smooth(zero10, 0.15).samples) CHECK(v == 0.0);
  for (double v : dsp::median_filter(zero10, 5).samples) CHECK(v == 0.0);
  for (double v : dsp::resample(zero10, 5.0).samples) CHECK(v == 0.0);
}

TEST_CASE("normalize_patch oracle values") {
  auto out = dsp::normalize_patch({1.0, 2.0, 3.0});
  const double sigma = std::sqrt(2.0 / 3.0);
  CHECK(out[0] == Approx(-1.0 / sigma).margin(1e-12));
  CHECK(out[0] == Approx(-1.224744871391589).margin(1e-9));
  CHECK(out[1] == Approx(0.0).margin(1e-12));
  CHECK(out[2] == Approx(+1.224744871391589).margin(1e-9));

  auto flat = dsp::normalize_patch({5.0, 5.0, 5.0, 5.0});
  for (double v : flat) CHECK(v == 0.0);
}

TEST_CASE("normalize_patch contract: mean 0, population sd 1, idempotent, affine invariant") {
  somno::Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> patch(30);
    for (auto& v : patch) v = rng.normal(2.0, 3.0);
    auto z = dsp::normalize_patch(patch);

    double mean = 0.0;
    for (double v : z) mean += v;
    mean /= static_cast<double>(z.size());
    double var = 0.0;
    for (double v : z) var += (v - mean) * (v - mean);
    var /= static_cast<double>(z.size());
    CHECK(std::fabs(mean) < 1e-9);
    CHECK(std::fabs(std::sqrt(var) - 1.0) < 1e-9);

    auto z2 = dsp::normalize_patch(z);
    const double a = rng.uniform(0.1, 4.0), b = rng.uniform(-5.0, 5.0);
    std::vector<double> scaled(patch.size());
    for (std::size_t i = 0; i < patch.size(); ++i) scaled[i] = a * patch[i] + b;
    auto zs = dsp::normalize_patch(scaled);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(std::fabs(z2[i] - z[i]) < 1e-9);
      CHECK(std::fabs(zs[i] - z[i]) < 1e-9);
    }
  }
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <numbers>

#include "somno/signal.hpp"
#include "somno/waveforms.hpp"

using namespace somno;
using Catch::Approx;

namespace {

// Periodogram oracle: single-bin DFT magnitude over a frequency grid.
double dominant_frequency(const std::vector<double>& x, double fs, double f_lo, double f_hi,
                          double step) {
  double best_f = f_lo, best_p = -1.0;
  const auto n = x.size();
  for (double f = f_lo; f <= f_hi + 1e-12; f += step) {
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double w = 2.0 * std::numbers::pi * f * static_cast<double>(i) / fs;
      re += x[i] * std::cos(w);
      im -= x[i] * std::sin(w);
    }
    const double p = re * re + im * im;
    if (p > best_p) {
      best_p = p;
      best_f = f;
    }
  }
  return best_f;
}

// Fundamental amplitude via projection onto the quadrature pair at f.
double projected_amplitude(const std::vector<double>& x, double fs, double f) {
  double re = 0.0, im = 0.0;
  const auto n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = 2.0 * std::numbers::pi * f * static_cast<double>(i) / fs;
    re += x[i] * std::cos(w);
    im += x[i] * std::sin(w);
  }
  return 2.0 * std::sqrt(re * re + im * im) / static_cast<double>(n);
}

SampledSignal synthetic_ecg(double beat_hz, double fs, double seconds, double noise, Rng& rng) {
  SampledSignal ecg;
  ecg.fs = fs;
  ecg.label = "ecg";
  const auto n = static_cast<std::size_t>(seconds * fs);
  ecg.samples.assign(n, 0.0);
  // Impulse-like QRS: biphasic wavelet repeated at the beat rate.
  const double period = fs / beat_hz;
  for (double at = 0.0; at < static_cast<double>(n); at += period) {
    const auto c = static_cast<std::ptrdiff_t>(at);
    for (std::ptrdiff_t k = -6; k <= 6; ++k) {
      const std::ptrdiff_t i = c + k;
      if (i < 0 || i >= static_cast<std::ptrdiff_t>(n)) continue;
      const double t = static_cast<double>(k) / fs;
      ecg.samples[static_cast<std::size_t>(i)] +=
          -t * std::exp(-t * t / (2.0 * 0.012 * 0.012)) * 120.0;
    }
  }
  for (auto& v : ecg.samples) v += noise * rng.normal();
  return ecg;
}

}  // namespace

TEST_CASE("all-zero ECG maps to all-zero heart waveform") {
  SampledSignal ecg;
  ecg.fs = 125.0;
  ecg.samples.assign(static_cast<std::size_t>(120 * 125), 0.0);
  auto hw = derive_heart_waveform(ecg);
  CHECK(hw.fs == 10.0);
  for (double v : hw.samples) CHECK(v == 0.0);
  // duration preserved within one output sample
  CHECK(std::llabs(static_cast<long long>(hw.samples.size()) - 1200) <= 1);
}

TEST_CASE("heart waveform locks onto the beat rate of an impulse train") {
  Rng rng(3);
  auto ecg = synthetic_ecg(1.2, 125.0, 120.0, 0.5, rng);
  auto hw = derive_heart_waveform(ecg);
  const double peak = dominant_frequency(hw.samples, hw.fs, 0.5, 3.0, 0.01);
  CHECK(std::fabs(peak - 1.2) <= 0.05);
}

TEST_CASE("post-chain bandpass attenuates 3.5 Hz >= 20 dB relative to 1.5 Hz") {
  dsp::FilterSpec spec;
  spec.low_hz = 0.66;
  spec.high_hz = 2.8;
  spec.order = 4;
  SampledSignal in_pass, in_stop;
  in_pass.fs = in_stop.fs = 10.0;
  for (int i = 0; i < 1200; ++i) {
    in_pass.samples.push_back(std::sin(2.0 * std::numbers::pi * 1.5 * i / 10.0));
    in_stop.samples.push_back(std::sin(2.0 * std::numbers::pi * 3.5 * i / 10.0));
  }
  auto a = projected_amplitude(dsp::butterworth_bandpass(in_pass, spec).samples, 10.0, 1.5);
  auto b = projected_amplitude(dsp::butterworth_bandpass(in_stop, spec).samples, 10.0, 3.5);
  CHECK(20.0 * std::log10(a / b) >= 20.0);
}

TEST_CASE("heart waveform rejects unusable inputs") {
  SampledSignal slow;
  slow.fs = 50.0;
  slow.samples.assign(50 * 120, 0.0);
  CHECK_THROWS_AS(derive_heart_waveform(slow), std::invalid_argument);

  SampledSignal brief;
  brief.fs = 125.0;
  brief.samples.assign(125 * 30, 0.0);  // 30 s < warm-up requirement
  CHECK_THROWS_AS(derive_heart_waveform(brief), std::invalid_argument);
}

TEST_CASE("breathing waveform: constants pass through") {
  SampledSignal thor;
  thor.fs = 25.0;
  thor.samples.assign(250, 3.0);
  auto bw = derive_breathing_waveform(thor);
  CHECK(bw.fs == 5.0);
  for (double v : bw.samples) CHECK(v == Approx(3.0).margin(1e-9));
}

TEST_CASE("breathing waveform removes isolated spikes") {
  SampledSignal thor;
  thor.fs = 5.0;
  thor.samples.assign(50, 0.0);
  thor.samples[20] = 9.0;
  auto bw = derive_breathing_waveform(thor);
  CHECK(bw.samples[20] == 0.0);
}

TEST_CASE("breathing waveform preserves a 0.25 Hz sinusoid within 5%") {
  SampledSignal thor;
  thor.fs = 25.0;
  const auto n = static_cast<std::size_t>(25.0 * 120.0);
  for (std::size_t i = 0; i < n; ++i)
    thor.samples.push_back(std::sin(2.0 * std::numbers::pi * 0.25 * i / 25.0));
  auto bw = derive_breathing_waveform(thor);
  CHECK(bw.fs == 5.0);
  CHECK(projected_amplitude(bw.samples, 5.0, 0.25) == Approx(1.0).epsilon(0.05));
}

TEST_CASE("breathing waveform rejects empty and too-slow inputs") {
  SampledSignal empty;
  empty.fs = 25.0;
  CHECK_THROWS_AS(derive_breathing_waveform(empty), std::invalid_argument);
  SampledSignal slow;
  slow.fs = 2.0;
  slow.samples.assign(100, 0.0);
  CHECK_THROWS_AS(derive_breathing_waveform(slow), std::invalid_argument);
}

TEST_CASE("signal files round-trip through both formats") {
  Rng rng(11);
  SampledSignal s;
  s.fs = 10.0;
  s.label = "hw";
  s.t0 = 12.5;
  for (int i = 0; i < 256; ++i) s.samples.push_back(rng.normal());

  const std::string text_path = "roundtrip_sig.txt";
  const std::string bin_path = "roundtrip_sig.bin";
  write_signal_text(text_path, s);
  write_signal_binary(bin_path, s);
  auto t = read_signal(text_path);
  auto b = read_signal(bin_path);
  REQUIRE(t.samples.size() == s.samples.size());
  REQUIRE(b.samples.size() == s.samples.size());
  CHECK(t.fs == s.fs);
  CHECK(b.fs == s.fs);
  CHECK(t.label == s.label);
  CHECK(b.label == s.label);
  CHECK(t.t0 == s.t0);
  for (std::size_t i = 0; i < s.samples.size(); ++i) {
    CHECK(t.samples[i] == s.samples[i]);
    CHECK(b.samples[i] == s.samples[i]);
  }
  // write -> read -> write is byte identical
  write_signal_text("roundtrip_sig2.txt", t);
  std::ifstream f1(text_path, std::ios::binary), f2("roundtrip_sig2.txt", std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(c1 == c2);
  std::remove(text_path.c_str());
  std::remove(bin_path.c_str());
  std::remove("roundtrip_sig2.txt");
}

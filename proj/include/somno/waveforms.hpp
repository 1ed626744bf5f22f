#pragma once

#include "somno/dsp.hpp"

namespace somno {

// Filtering stages of the Pan-Tompkins QRS chain, stopping at the
// moving-window integration output (no beat decision logic): bandpass
// 5-15 Hz, five-point derivative, squaring, 150 ms moving-window integration.
inline SampledSignal pan_tompkins_mwi(const SampledSignal& ecg) {
  validate(ecg, "pan_tompkins_mwi");
  if (ecg.fs < 100.0)
    throw std::invalid_argument("pan_tompkins_mwi: ECG sampling rate must be >= 100 Hz");
  const std::size_t n = ecg.samples.size();

  dsp::FilterSpec bp;
  bp.low_hz = 5.0;
  bp.high_hz = 15.0;
  bp.order = 2;
  const auto sos = dsp::butter_bandpass(bp.order, bp.low_hz, bp.high_hz, ecg.fs);
  std::vector<double> y = dsp::sosfilt(sos, ecg.samples);

  // y[i] = (fs/8) * (2 x[i] + x[i-1] - x[i-3] - 2 x[i-4])
  std::vector<double> d(n, 0.0);
  const double scale = ecg.fs / 8.0;
  auto at = [&](std::ptrdiff_t i) { return i >= 0 ? y[static_cast<std::size_t>(i)] : 0.0; };
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = static_cast<std::ptrdiff_t>(i);
    d[i] = scale * (2.0 * at(s) + at(s - 1) - at(s - 3) - 2.0 * at(s - 4));
  }

  for (double& v : d) v *= v;

  const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.150 * ecg.fs)));
  SampledSignal out;
  out.fs = ecg.fs;
  out.label = "mwi";
  out.t0 = ecg.t0;
  out.samples.resize(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += d[i];
    if (i >= w) acc -= d[i - w];
    out.samples[i] = acc / static_cast<double>(std::min(i + 1, w));
  }
  return out;
}

// Canonical 10 Hz heart waveform: Pan-Tompkins integration output, resampled
// to 10 Hz, zero-phase Butterworth bandpass 0.66-2.8 Hz (40-168 BPM), then
// Gaussian smoothing (sigma 0.15 s).
inline SampledSignal derive_heart_waveform(const SampledSignal& ecg) {
  if (ecg.duration() < 60.0)
    throw std::invalid_argument("derive_heart_waveform: need at least 60 s of ECG");
  SampledSignal hw = pan_tompkins_mwi(ecg);
  hw = dsp::resample(hw, 10.0);
  dsp::FilterSpec spec;
  spec.low_hz = 0.66;
  spec.high_hz = 2.8;
  spec.order = 4;
  hw = dsp::butterworth_bandpass(hw, spec);
  hw = dsp::gaussian_smooth(hw, 0.15);
  hw.label = "hw";
  return hw;
}

// Canonical 5 Hz breathing waveform: thoracic effort resampled to 5 Hz and
// median filtered (kernel 5) to drop isolated artefacts.
inline SampledSignal derive_breathing_waveform(const SampledSignal& thor) {
  validate(thor, "derive_breathing_waveform");
  if (thor.samples.empty())
    throw std::invalid_argument("derive_breathing_waveform: empty signal");
  if (thor.fs < 5.0)
    throw std::invalid_argument("derive_breathing_waveform: sampling rate must be >= 5 Hz");
  SampledSignal bw = thor.fs == 5.0 ? thor : dsp::resample(thor, 5.0);
  bw = dsp::median_filter(bw, 5);
  bw.label = "bw";
  return bw;
}

}  // namespace somno

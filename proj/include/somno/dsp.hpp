#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "somno/signal.hpp"

namespace somno::dsp {

// Second-order section, a0 normalized to 1.
struct Sos {
  double b0, b1, b2, a1, a2;
};

struct FilterSpec {
  enum class Kind { ButterworthBandpass, Gaussian, Median, PanTompkinsChain };
  Kind kind = Kind::ButterworthBandpass;
  double low_hz = 0.0, high_hz = 0.0;
  int order = 4;
  double sigma_s = 0.0;
  int kernel_len = 1;
};

inline void validate_bandpass(const FilterSpec& spec, double fs) {
  if (spec.order < 1) throw std::invalid_argument("bandpass: order must be >= 1");
  if (!(spec.low_hz > 0.0 && spec.low_hz < spec.high_hz && spec.high_hz < fs / 2.0))
    throw std::invalid_argument("bandpass: need 0 < low < high < fs/2");
}

namespace detail {

using cplx = std::complex<double>;

// Analog Butterworth prototype poles, left half plane, cutoff 1 rad/s.
inline std::vector<cplx> prototype_poles(int order) {
  std::vector<cplx> poles;
  poles.reserve(order);
  for (int k = 0; k < order; ++k) {
    const double theta = std::numbers::pi * (2.0 * k + order + 1.0) / (2.0 * order);
    poles.emplace_back(std::cos(theta), std::sin(theta));
  }
  return poles;
}

inline Sos section_from_pole_pair(cplx z) {
  // (1 - z q^-1)(1 - conj(z) q^-1): a1 = -2 Re(z), a2 = |z|^2
  return Sos{1.0, 0.0, 0.0, -2.0 * z.real(), std::norm(z)};
}

// sin(pi) is ~1e-16, not 0; classify real poles with a tolerance.
inline bool is_conjugate_rep(const cplx& p) { return p.imag() > 1e-9; }
inline bool is_real_pole(const cplx& p) { return std::fabs(p.imag()) <= 1e-9; }

}  // namespace detail

// Butterworth bandpass as cascaded biquads via the analog prototype, the
// lowpass->bandpass transform and the bilinear transform with prewarping.
// `order` is the prototype order; the digital filter has 2*order poles.
// Gain is exact: -3 dB lands on the (prewarped) passband edges.
inline std::vector<Sos> butter_bandpass(int order, double low_hz, double high_hz, double fs) {
  if (order < 1) throw std::invalid_argument("butter_bandpass: order must be >= 1");
  if (order % 2 != 0)
    throw std::invalid_argument("butter_bandpass: odd prototype orders are not supported");
  if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0))
    throw std::invalid_argument("butter_bandpass: need 0 < low < high < fs/2");
  using detail::cplx;
  const double k2 = 2.0 * fs;
  const double wl = k2 * std::tan(std::numbers::pi * low_hz / fs);
  const double wh = k2 * std::tan(std::numbers::pi * high_hz / fs);
  const double w0sq = wl * wh;
  const double bw = wh - wl;

  std::vector<Sos> sections;
  double gain = 1.0;
  for (const cplx& p : detail::prototype_poles(order)) {
    if (!detail::is_conjugate_rep(p)) continue;  // conjugates are implicit
    // s^2 - (p*bw) s + w0^2 = 0
    const cplx pb = p * bw;
    const cplx disc = std::sqrt(pb * pb - 4.0 * w0sq);
    const cplx s1 = 0.5 * (pb + disc);
    const cplx s2 = 0.5 * (pb - disc);
    for (const cplx& s : {s1, s2}) {
      const cplx z = (k2 + s) / (k2 - s);
      sections.push_back(detail::section_from_pole_pair(z));
      // |2fs - s|^2 covers this pole and its conjugate; bw * 2fs is the
      // matching slice of the bw^n (2fs)^n numerator gain.
      gain *= bw * k2 / std::norm(k2 - s);
    }
  }
  // Bandpass zeros: order at z=+1 and order at z=-1, one (z^2 - 1) per section.
  for (auto& s : sections) {
    s.b0 = 1.0;
    s.b1 = 0.0;
    s.b2 = -1.0;
  }
  sections.front().b0 *= gain;
  sections.front().b2 *= gain;
  if (!std::isfinite(gain) || gain == 0.0)
    throw std::runtime_error("butter_bandpass: unstable coefficient set");
  return sections;
}

// Butterworth lowpass (any order >= 1); zeros all at z=-1.
inline std::vector<Sos> butter_lowpass(int order, double cutoff_hz, double fs) {
  if (order < 1) throw std::invalid_argument("butter_lowpass: order must be >= 1");
  if (!(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0))
    throw std::invalid_argument("butter_lowpass: need 0 < cutoff < fs/2");
  using detail::cplx;
  const double k2 = 2.0 * fs;
  const double wc = k2 * std::tan(std::numbers::pi * cutoff_hz / fs);

  std::vector<Sos> sections;
  double gain = 1.0;
  const auto protos = detail::prototype_poles(order);
  for (const cplx& p : protos) {
    if (!detail::is_conjugate_rep(p)) continue;
    const cplx s = p * wc;
    const cplx z = (k2 + s) / (k2 - s);
    Sos sec = detail::section_from_pole_pair(z);
    sec.b0 = 1.0;
    sec.b1 = 2.0;
    sec.b2 = 1.0;
    sections.push_back(sec);
    gain *= wc * wc / std::norm(k2 - s);
  }
  if (order % 2 == 1) {
    const cplx s = cplx(-1.0, 0.0) * wc;
    const double zr = ((k2 + s) / (k2 - s)).real();
    sections.push_back(Sos{1.0, 1.0, 0.0, -zr, 0.0});
    gain *= wc / (k2 - s).real();
  }
  sections.front().b0 *= gain;
  sections.front().b1 *= gain;
  sections.front().b2 *= gain;
  return sections;
}

// Magnitude of the cascade at frequency f (single pass).
inline double sos_magnitude(const std::vector<Sos>& sos, double f_hz, double fs) {
  const double w = 2.0 * std::numbers::pi * f_hz / fs;
  const std::complex<double> z1 = std::polar(1.0, -w);
  const std::complex<double> z2 = z1 * z1;
  double mag = 1.0;
  for (const auto& s : sos) {
    const auto num = s.b0 + s.b1 * z1 + s.b2 * z2;
    const auto den = 1.0 + s.a1 * z1 + s.a2 * z2;
    mag *= std::abs(num) / std::abs(den);
  }
  return mag;
}

// Direct form II transposed. With steady_init the section states are seeded
// with the steady-state response to a constant equal to the first sample, so
// constants pass transient-free (the filtfilt convention).
inline std::vector<double> sosfilt(const std::vector<Sos>& sos, const std::vector<double>& x,
                                   bool steady_init = false) {
  std::vector<double> y = x;
  double level = y.empty() ? 0.0 : y.front();
  for (const auto& s : sos) {
    double s1 = 0.0, s2 = 0.0;
    if (steady_init && !y.empty()) {
      const double den = 1.0 + s.a1 + s.a2;
      const double out0 = den != 0.0 ? (s.b0 + s.b1 + s.b2) / den * level : 0.0;
      s1 = (s.b1 + s.b2) * level - (s.a1 + s.a2) * out0;
      s2 = s.b2 * level - s.a2 * out0;
      level = out0;
    }
    for (double& v : y) {
      const double in = v;
      const double out = s.b0 * in + s1;
      s1 = s.b1 * in - s.a1 * out + s2;
      s2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  return y;
}

// Forward-backward filtering with odd-reflection edge padding; zero phase,
// magnitude applied twice.
inline std::vector<double> filtfilt(const std::vector<Sos>& sos, const std::vector<double>& x) {
  if (x.empty()) return {};
  const std::size_t n = x.size();
  std::size_t pad = 3 * (2 * sos.size() + 1);
  if (pad >= n) pad = n - 1;
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 1 - i]);

  ext = sosfilt(sos, ext, true);
  std::reverse(ext.begin(), ext.end());
  ext = sosfilt(sos, ext, true);
  std::reverse(ext.begin(), ext.end());
  return std::vector<double>(ext.begin() + static_cast<std::ptrdiff_t>(pad),
                             ext.begin() + static_cast<std::ptrdiff_t>(pad + n));
}

// Zero-phase Butterworth bandpass of a signal (the waveform-chain workhorse).
inline SampledSignal butterworth_bandpass(const SampledSignal& x, const FilterSpec& spec) {
  validate_bandpass(spec, x.fs);
  const auto sos = butter_bandpass(spec.order, spec.low_hz, spec.high_hz, x.fs);
  SampledSignal out = x;
  out.samples = filtfilt(sos, x.samples);
  return out;
}

// Gaussian FIR smoothing, kernel truncated at 4 sigma and normalized to unit
// sum; reflected edges keep constants constant.
inline SampledSignal gaussian_smooth(const SampledSignal& x, double sigma_s) {
  if (!(sigma_s > 0.0)) throw std::invalid_argument("gaussian_smooth: sigma must be positive");
  if (x.samples.empty()) throw std::invalid_argument("gaussian_smooth: empty signal");
  const double sigma = sigma_s * x.fs;  // in samples
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  const int klen = 2 * radius + 1;
  if (static_cast<std::size_t>(klen) > x.samples.size())
    throw std::invalid_argument("gaussian_smooth: kernel longer than signal");
  std::vector<double> kernel(klen);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
    kernel[i + radius] = v;
    sum += v;
  }
  for (double& v : kernel) v /= sum;

  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.samples.size());
  auto mirrored = [&](std::ptrdiff_t i) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return x.samples[static_cast<std::size_t>(i)];
  };
  SampledSignal out = x;
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * mirrored(i + k);
    out.samples[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

// Sliding median with mirrored edges; removes isolated single-sample spikes.
inline SampledSignal median_filter(const SampledSignal& x, int kernel_len) {
  if (kernel_len < 1 || kernel_len % 2 == 0)
    throw std::invalid_argument("median_filter: kernel length must be odd and >= 1");
  if (x.samples.empty()) throw std::invalid_argument("median_filter: empty signal");
  if (static_cast<std::size_t>(kernel_len) > x.samples.size())
    throw std::invalid_argument("median_filter: kernel longer than signal");
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.samples.size());
  const int radius = kernel_len / 2;
  auto mirrored = [&](std::ptrdiff_t i) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return x.samples[static_cast<std::size_t>(i)];
  };
  SampledSignal out = x;
  std::vector<double> window(static_cast<std::size_t>(kernel_len));
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    for (int k = -radius; k <= radius; ++k) window[static_cast<std::size_t>(k + radius)] = mirrored(i + k);
    auto mid = window.begin() + radius;
    std::nth_element(window.begin(), mid, window.end());
    out.samples[static_cast<std::size_t>(i)] = *mid;
  }
  return out;
}

// Rate conversion: anti-alias lowpass at 0.45*fs_new (zero phase) when
// decimating, then linear interpolation against the source sample grid.
// Duration is preserved to within one output sample.
inline SampledSignal resample(const SampledSignal& x, double fs_new) {
  if (!(fs_new > 0.0)) throw std::invalid_argument("resample: fs_new must be positive");
  if (x.samples.empty()) throw std::invalid_argument("resample: empty signal");
  if (x.fs == fs_new) return x;

  std::vector<double> src = x.samples;
  if (fs_new < x.fs && x.samples.size() > 16) {
    const auto sos = butter_lowpass(4, 0.45 * fs_new, x.fs);
    src = filtfilt(sos, src);
  }
  const std::size_t m = static_cast<std::size_t>(std::llround(x.duration() * fs_new));
  SampledSignal out;
  out.fs = fs_new;
  out.label = x.label;
  out.t0 = x.t0;
  out.samples.resize(m);
  const double step = x.fs / fs_new;
  const std::size_t n = src.size();
  for (std::size_t k = 0; k < m; ++k) {
    const double p = static_cast<double>(k) * step;
    const auto i = static_cast<std::size_t>(p);
    if (i + 1 >= n) {
      out.samples[k] = src[n - 1];
    } else {
      const double frac = p - static_cast<double>(i);
      out.samples[k] = src[i] * (1.0 - frac) + src[i + 1] * frac;
    }
  }
  return out;
}

// Zero mean, unit population variance. Flat patches map to all zeros.
inline std::vector<double> normalize_patch(const std::vector<double>& patch) {
  if (patch.empty()) throw std::invalid_argument("normalize_patch: empty patch");
  const double n = static_cast<double>(patch.size());
  double mean = 0.0;
  for (double v : patch) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : patch) var += (v - mean) * (v - mean);
  var /= n;
  const double denom = std::max(std::sqrt(var), 1e-8);
  std::vector<double> out(patch.size());
  for (std::size_t i = 0; i < patch.size(); ++i) out[i] = (patch[i] - mean) / denom;
  return out;
}

}  // namespace somno::dsp

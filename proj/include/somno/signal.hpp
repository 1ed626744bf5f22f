#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "somno/common.hpp"

namespace somno {

// Uniformly sampled real-valued time series. Carrier for raw sensor channels
// (ECG, thoracic band) and the derived heart/breathing waveforms.
struct SampledSignal {
  std::vector<double> samples;
  double fs = 0.0;  // Hz
  std::string label;
  double t0 = 0.0;  // seconds since recording start

  double duration() const { return fs > 0 ? static_cast<double>(samples.size()) / fs : 0.0; }
  std::size_t size() const { return samples.size(); }
};

inline void validate(const SampledSignal& s, const char* who) {
  if (!(s.fs > 0.0)) throw std::invalid_argument(std::string(who) + ": fs must be positive");
  for (double v : s.samples) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite sample");
  }
}

namespace detail {

// Shortest exact decimal representation; %.17g round-trips IEEE doubles.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // Prefer the shorter form when it round-trips.
  char shortbuf[40];
  for (int prec = 1; prec < 17; ++prec) {
    std::snprintf(shortbuf, sizeof(shortbuf), "%.*g", prec, v);
    if (std::strtod(shortbuf, nullptr) == v) return shortbuf;
  }
  return buf;
}

}  // namespace detail

inline constexpr char kSignalMagic[8] = {'S', 'O', 'M', 'N', 'O', 'S', 'G', '1'};

// Text format: "#fs=<Hz> label=<name> t0=<s>" then one sample per line.
inline void write_signal_text(const std::string& path, const SampledSignal& s) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f << "#fs=" << detail::format_double(s.fs) << " label=" << s.label
    << " t0=" << detail::format_double(s.t0) << "\n";
  for (double v : s.samples) f << detail::format_double(v) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

// Packed binary: 16-byte magic+version header, then count, fs, t0, label and
// little-endian 64-bit float samples.
inline void write_signal_binary(const std::string& path, const SampledSignal& s) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  f.write(kSignalMagic, 8);
  io::write_le<std::uint32_t>(f, 1);  // version
  io::write_le<std::uint32_t>(f, 0);  // reserved
  io::write_le<std::uint64_t>(f, s.samples.size());
  io::write_le<double>(f, s.fs);
  io::write_le<double>(f, s.t0);
  io::write_string(f, s.label);
  for (double v : s.samples) io::write_le<double>(f, v);
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline SampledSignal read_signal(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open signal file: " + path);
  char head[8] = {};
  f.read(head, 8);
  if (f.gcount() == 8 && std::memcmp(head, kSignalMagic, 8) == 0) {
    const auto version = io::read_le<std::uint32_t>(f);
    if (version != 1) throw std::runtime_error("unsupported signal file version in " + path);
    io::read_le<std::uint32_t>(f);  // reserved
    const auto n = io::read_le<std::uint64_t>(f);
    SampledSignal s;
    s.fs = io::read_le<double>(f);
    s.t0 = io::read_le<double>(f);
    s.label = io::read_string(f);
    s.samples.resize(n);
    for (auto& v : s.samples) v = io::read_le<double>(f);
    validate(s, "read_signal");
    return s;
  }
  // Text format.
  f.clear();
  f.seekg(0);
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty signal file: " + path);
  if (line.rfind("#fs=", 0) != 0) throw std::runtime_error("bad signal header in " + path);
  const auto label_at = line.find(" label=");
  const auto t0_at = line.rfind(" t0=");
  if (label_at == std::string::npos || t0_at == std::string::npos || t0_at <= label_at)
    throw std::runtime_error("bad signal header in " + path);
  SampledSignal s;
  s.fs = std::strtod(line.c_str() + 4, nullptr);
  s.label = line.substr(label_at + 7, t0_at - (label_at + 7));
  s.t0 = std::strtod(line.c_str() + t0_at + 4, nullptr);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    s.samples.push_back(std::strtod(line.c_str(), nullptr));
  }
  validate(s, "read_signal");
  return s;
}

}  // namespace somno

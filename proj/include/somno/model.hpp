#pragma once

#include <fstream>
#include <map>
#include <optional>

#include "somno/autodiff.hpp"
#include "somno/dsp.hpp"
#include "somno/signal.hpp"

namespace somno {

enum class InputMode { HW_BW, HR_BR, HW_BR, HR_BW };

inline const char* to_string(InputMode m) {
  switch (m) {
    case InputMode::HW_BW: return "hw+bw";
    case InputMode::HR_BR: return "hr+br";
    case InputMode::HW_BR: return "hw+br";
    case InputMode::HR_BW: return "hr+bw";
  }
  return "?";
}

inline InputMode input_mode_from(const std::string& s) {
  if (s == "hw+bw") return InputMode::HW_BW;
  if (s == "hr+br") return InputMode::HR_BR;
  if (s == "hw+br") return InputMode::HW_BR;
  if (s == "hr+bw") return InputMode::HR_BW;
  throw std::invalid_argument("unknown input mode: " + s);
}

// Waveform patches are 30 s at the stream rate; rate streams are 1 Hz.
inline constexpr int kHwPatchLen = 300;
inline constexpr int kBwPatchLen = 150;
inline constexpr int kRatePatchLen = 30;
inline constexpr double kEpochSeconds = 30.0;

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 8;
  double dropout_p = 0.1;
  int mlp_dim = 512;
  int d_hw = 64;
  int d_bw = 64;
  int seq_len_n = 240;
  int n_classes = 4;
  InputMode input_mode = InputMode::HW_BW;
  int conv_stem_channels = 32;
  int conv_block_channels = 64;
  bool use_positions = true;

  int d_model() const { return d_hw + d_bw; }

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || mlp_dim < 1) throw std::invalid_argument("model config: bad sizes");
    if (d_model() % n_heads != 0)
      throw std::invalid_argument("model config: d_hw + d_bw must be divisible by n_heads");
    if (seq_len_n < 1) throw std::invalid_argument("model config: seq_len_n must be >= 1");
    if (n_classes < 2 || n_classes > 5) throw std::invalid_argument("model config: n_classes in {2..5}");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw std::invalid_argument("model config: dropout in [0,1)");
  }
};

// ---------------------------------------------------------------------------
// Parameter store: named tensors plus AdamW moment slots.
// ---------------------------------------------------------------------------
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value, grad, m, v;
  };

  int add(std::string name, Tensor<T> init) {
    Entry e;
    e.name = std::move(name);
    e.grad = Tensor<T>(init.shape);
    e.m = Tensor<T>(init.shape);
    e.v = Tensor<T>(init.shape);
    e.value = std::move(init);
    entries_.push_back(std::move(e));
    return static_cast<int>(entries_.size()) - 1;
  }

  Entry& operator[](int i) { return entries_[static_cast<std::size_t>(i)]; }
  const Entry& operator[](int i) const { return entries_[static_cast<std::size_t>(i)]; }
  std::size_t size() const { return entries_.size(); }

  void zero_grad() {
    for (auto& e : entries_)
      std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Patchification
// ---------------------------------------------------------------------------
struct PatchedInputs {
  Tensor<double> hw, bw, hr, br;  // [N, patch_len], unset streams stay empty
  std::size_t n = 0;
};

namespace detail {

inline Tensor<double> cut_patches(const SampledSignal& sig, std::size_t n, int patch_len) {
  Tensor<double> out({n, static_cast<std::size_t>(patch_len)});
  for (std::size_t p = 0; p < n; ++p) {
    std::vector<double> patch(sig.samples.begin() + static_cast<std::ptrdiff_t>(p * patch_len),
                              sig.samples.begin() + static_cast<std::ptrdiff_t>((p + 1) * patch_len));
    auto norm = dsp::normalize_patch(patch);
    std::copy(norm.begin(), norm.end(), out.ptr() + p * static_cast<std::size_t>(patch_len));
  }
  return out;
}

}  // namespace detail

// Splits the 10 Hz heart and 5 Hz breathing waveforms into per-epoch patches,
// each normalized to zero mean and unit variance. The tail below a whole
// epoch is discarded.
inline PatchedInputs patchify(const SampledSignal& hw, const SampledSignal& bw) {
  if (hw.fs != 10.0) throw std::invalid_argument("patchify: heart waveform must be 10 Hz");
  if (bw.fs != 5.0) throw std::invalid_argument("patchify: breathing waveform must be 5 Hz");
  const double da = hw.duration(), db = bw.duration();
  if (std::fabs(da - db) > kEpochSeconds)
    throw std::invalid_argument("patchify: stream durations differ by more than one epoch");
  const double dur = std::min(da, db);
  if (dur < kEpochSeconds) throw std::invalid_argument("patchify: need at least 30 s of signal");
  PatchedInputs out;
  out.n = static_cast<std::size_t>(dur / kEpochSeconds);
  out.hw = detail::cut_patches(hw, out.n, kHwPatchLen);
  out.bw = detail::cut_patches(bw, out.n, kBwPatchLen);
  return out;
}

// Rate-series variant: 1 Hz heart / breathing rate streams -> 30-sample patches.
inline PatchedInputs patchify_rates(const SampledSignal& hr, const SampledSignal& br) {
  if (hr.fs != 1.0 || br.fs != 1.0) throw std::invalid_argument("patchify_rates: rates must be 1 Hz");
  const double dur = std::min(hr.duration(), br.duration());
  if (std::fabs(hr.duration() - br.duration()) > kEpochSeconds)
    throw std::invalid_argument("patchify_rates: stream durations differ by more than one epoch");
  if (dur < kEpochSeconds) throw std::invalid_argument("patchify_rates: need at least 30 s");
  PatchedInputs out;
  out.n = static_cast<std::size_t>(dur / kEpochSeconds);
  out.hr = detail::cut_patches(hr, out.n, kRatePatchLen);
  out.br = detail::cut_patches(br, out.n, kRatePatchLen);
  return out;
}

// Interleaved sine/cosine position encoding, [n, d] with d even.
template <class T>
Tensor<T> sinusoidal_positions(std::size_t n, std::size_t d) {
  if (d % 2 != 0) throw std::invalid_argument("sinusoidal_positions: d must be even");
  Tensor<T> pe({n, d});
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t k = 0; k < d / 2; ++k) {
      const double rate = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
      const double angle = static_cast<double>(p) * rate;
      pe.data[p * d + 2 * k] = static_cast<T>(std::sin(angle));
      pe.data[p * d + 2 * k + 1] = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------
template <class T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    build(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  std::vector<std::pair<std::string, Tensor<T>*>> buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& b : buffers_) out.push_back({b.name, &b.value});
    return out;
  }

  struct Output {
    ad::Var<T> features;  // [B*N, D]
    ad::Var<T> logits;    // [B*N, C]
  };

  // a: [B, N, La] patches for the heart stream, b: [B, N, Lb] for breathing.
  Output forward(ad::Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, bool train,
                 Rng* dropout_rng = nullptr, std::vector<Tensor<T>>* attn_out = nullptr) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1))
      throw std::invalid_argument("model forward: batch shape mismatch");
    check_stream_len(a.dim(2), stream_a_len(), "heart");
    check_stream_len(b.dim(2), stream_b_len(), "breathing");
    const std::size_t batch = a.dim(0), n = a.dim(1);
    const auto d = static_cast<std::size_t>(cfg_.d_model());
    if (train && cfg_.dropout_p > 0.0 && dropout_rng == nullptr)
      throw std::invalid_argument("model forward: train mode with dropout needs an rng");
    Rng fallback(0);
    Rng& drop = dropout_rng ? *dropout_rng : fallback;
    const T p = static_cast<T>(cfg_.dropout_p);

    auto za = encode_stream(tape, a, enc_a_, train);  // [B*N, d_hw]
    auto zb = encode_stream(tape, b, enc_b_, train);  // [B*N, d_bw]
    auto x = ad::concat_cols(za, zb);                 // [B*N, D]

    if (cfg_.use_positions) {
      auto pe = sinusoidal_positions<T>(n, d);
      auto pev = tape.leaf(Tensor<T>({n * d}, std::move(pe.data)), false);
      x = ad::reshape(ad::add_rowvec(ad::reshape(x, {batch, n * d}), pev), {batch * n, d});
    }

    const auto heads = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t dk = d / heads;
    for (int layer = 0; layer < cfg_.n_layers; ++layer) {
      const auto& L = layers_[static_cast<std::size_t>(layer)];
      // pre-LN attention sublayer
      auto h = ad::layernorm(x, at(tape, L.ln1_g), at(tape, L.ln1_b));
      auto q = ad::split_heads(ad::linear(h, at(tape, L.wq), at(tape, L.bq)), batch, n, heads, dk);
      auto k = ad::split_heads(ad::linear(h, at(tape, L.wk), at(tape, L.bk)), batch, n, heads, dk);
      auto v = ad::split_heads(ad::linear(h, at(tape, L.wv), at(tape, L.bv)), batch, n, heads, dk);
      auto scores = ad::scale(ad::bmm(q, k, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
      auto probs = ad::softmax_rows(scores);
      if (attn_out) attn_out->push_back(tape.val(probs.id));
      probs = ad::dropout(probs, p, drop, train);
      auto ctx = ad::merge_heads(ad::bmm(probs, v, false), batch, n, heads, dk);
      auto attn = ad::dropout(ad::linear(ctx, at(tape, L.wo), at(tape, L.bo)), p, drop, train);
      x = ad::add(x, attn);

      // pre-LN MLP sublayer
      auto m = ad::layernorm(x, at(tape, L.ln2_g), at(tape, L.ln2_b));
      auto ff = ad::relu(ad::linear(m, at(tape, L.w1), at(tape, L.b1)));
      ff = ad::dropout(ff, p, drop, train);
      ff = ad::dropout(ad::linear(ff, at(tape, L.w2), at(tape, L.b2)), p, drop, train);
      x = ad::add(x, ff);

      ad::check_finite(tape.val(x.id), "transformer layer " + std::to_string(layer));
    }
    auto features = ad::layernorm(x, at(tape, ln_f_g_), at(tape, ln_f_b_));
    auto logits = ad::linear(features, at(tape, head_w_), at(tape, head_b_));
    return {features, logits};
  }

  // Single-recording convenience: eval forward, probabilities via softmax.
  struct EvalResult {
    Tensor<T> features;  // [N, D]
    Tensor<T> probs;     // [N, C]
    std::vector<int> stages;
  };

  EvalResult infer(const Tensor<T>& a_patches, const Tensor<T>& b_patches,
                   std::vector<Tensor<T>>* attn_out = nullptr) {
    const std::size_t n = a_patches.dim(0);
    Tensor<T> a({1, n, a_patches.dim(1)}, a_patches.data);
    Tensor<T> b({1, n, b_patches.dim(1)}, b_patches.data);
    ad::Tape<T> tape;
    auto out = forward(tape, a, b, false, nullptr, attn_out);
    auto probs = ad::softmax_rows(out.logits);
    EvalResult res;
    res.features = tape.val(out.features.id);
    res.probs = tape.val(probs.id);
    const auto c = static_cast<std::size_t>(cfg_.n_classes);
    res.stages.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* row = res.probs.ptr() + i * c;
      int best = 0;
      for (std::size_t j = 1; j < c; ++j)
        if (row[j] > row[best]) best = static_cast<int>(j);
      res.stages[i] = best;
    }
    return res;
  }

  std::size_t stream_a_len() const {
    return uses_hw() ? kHwPatchLen : kRatePatchLen;
  }
  std::size_t stream_b_len() const {
    return uses_bw() ? kBwPatchLen : kRatePatchLen;
  }
  bool uses_hw() const { return cfg_.input_mode == InputMode::HW_BW || cfg_.input_mode == InputMode::HW_BR; }
  bool uses_bw() const { return cfg_.input_mode == InputMode::HW_BW || cfg_.input_mode == InputMode::HR_BW; }

 private:
  struct BnState {
    int gamma = -1, beta = -1;
    std::size_t rm = 0, rv = 0;  // buffer indices
  };
  struct ConvBlock {
    int w = -1, b = -1;
    BnState bn;
    int kernel = 3, stride = 1, pad = 1;
  };
  struct StreamEncoder {
    bool conv = false;
    // conv path
    ConvBlock stem;
    ConvBlock b1c1, b1c2;
    ConvBlock b2c1, b2c2, b2skip;
    int out_w = -1, out_b = -1;
    // linear path
    int lin_w = -1, lin_b = -1;
  };
  struct Layer {
    int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    int ln2_g, ln2_b, w1, b1, w2, b2;
  };
  struct Buffer {
    std::string name;
    Tensor<T> value;
  };

  ad::Var<T> at(ad::Tape<T>& tape, int param) {
    return tape.leaf(store_[param].value, true);
  }

  static void check_stream_len(std::size_t got, std::size_t want, const char* which) {
    if (got != want)
      throw std::invalid_argument(std::string("model forward: ") + which + " patch length " +
                                  std::to_string(got) + ", expected " + std::to_string(want));
  }

  Tensor<T> uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  }

  Tensor<T> bias_init(std::size_t n, std::size_t fan_in, Rng& rng) {
    Tensor<T> t({n});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  }

  int add_const(const std::string& name, std::size_t n, T value) {
    Tensor<T> t({n});
    std::fill(t.data.begin(), t.data.end(), value);
    return store_.add(name, std::move(t));
  }

  BnState add_bn(const std::string& prefix, std::size_t channels) {
    BnState bn;
    bn.gamma = add_const(prefix + ".bn.g", channels, T(1));
    bn.beta = add_const(prefix + ".bn.b", channels, T(0));
    bn.rm = buffers_.size();
    buffers_.push_back({prefix + ".bn.running_mean", Tensor<T>({channels})});
    bn.rv = buffers_.size();
    Tensor<T> ones({channels});
    std::fill(ones.data.begin(), ones.data.end(), T(1));
    buffers_.push_back({prefix + ".bn.running_var", std::move(ones)});
    return bn;
  }

  ConvBlock add_conv(const std::string& prefix, std::size_t cin, std::size_t cout, int kernel,
                     int stride, int pad, Rng& rng) {
    ConvBlock c;
    c.kernel = kernel;
    c.stride = stride;
    c.pad = pad;
    const std::size_t fan_in = cin * static_cast<std::size_t>(kernel);
    c.w = store_.add(prefix + ".conv.w",
                     uniform_init({cout, cin, static_cast<std::size_t>(kernel)}, fan_in, rng));
    c.b = store_.add(prefix + ".conv.b", bias_init(cout, fan_in, rng));
    c.bn = add_bn(prefix, cout);
    return c;
  }

  int add_linear(const std::string& prefix, std::size_t din, std::size_t dout, Rng& rng, int* bias) {
    const int w = store_.add(prefix + ".w", uniform_init({dout, din}, din, rng));
    *bias = store_.add(prefix + ".b", bias_init(dout, din, rng));
    return w;
  }

  void build_conv_encoder(StreamEncoder& enc, const std::string& name, std::size_t d_out, Rng& rng) {
    enc.conv = true;
    const auto cs = static_cast<std::size_t>(cfg_.conv_stem_channels);
    const auto cb = static_cast<std::size_t>(cfg_.conv_block_channels);
    enc.stem = add_conv(name + ".stem", 1, cs, 7, 2, 3, rng);
    enc.b1c1 = add_conv(name + ".block1.c1", cs, cs, 3, 1, 1, rng);
    enc.b1c2 = add_conv(name + ".block1.c2", cs, cs, 3, 1, 1, rng);
    enc.b2c1 = add_conv(name + ".block2.c1", cs, cb, 3, 1, 1, rng);
    enc.b2c2 = add_conv(name + ".block2.c2", cb, cb, 3, 1, 1, rng);
    enc.b2skip = add_conv(name + ".block2.skip", cs, cb, 1, 1, 0, rng);
    enc.out_w = add_linear(name + ".out", cb, d_out, rng, &enc.out_b);
  }

  void build_linear_encoder(StreamEncoder& enc, const std::string& name, std::size_t d_out, Rng& rng) {
    enc.conv = false;
    enc.lin_w = add_linear(name + ".proj", kRatePatchLen, d_out, rng, &enc.lin_b);
  }

  void build(Rng& rng) {
    const auto d_hw = static_cast<std::size_t>(cfg_.d_hw);
    const auto d_bw = static_cast<std::size_t>(cfg_.d_bw);
    if (uses_hw())
      build_conv_encoder(enc_a_, "enc_hw", d_hw, rng);
    else
      build_linear_encoder(enc_a_, "enc_hr", d_hw, rng);
    if (uses_bw())
      build_conv_encoder(enc_b_, "enc_bw", d_bw, rng);
    else
      build_linear_encoder(enc_b_, "enc_br", d_bw, rng);

    const auto d = static_cast<std::size_t>(cfg_.d_model());
    const auto mlp = static_cast<std::size_t>(cfg_.mlp_dim);
    for (int i = 0; i < cfg_.n_layers; ++i) {
      const std::string p = "layer" + std::to_string(i);
      Layer L;
      L.ln1_g = add_const(p + ".ln1.g", d, T(1));
      L.ln1_b = add_const(p + ".ln1.b", d, T(0));
      L.wq = add_linear(p + ".attn.q", d, d, rng, &L.bq);
      L.wk = add_linear(p + ".attn.k", d, d, rng, &L.bk);
      L.wv = add_linear(p + ".attn.v", d, d, rng, &L.bv);
      L.wo = add_linear(p + ".attn.o", d, d, rng, &L.bo);
      L.ln2_g = add_const(p + ".ln2.g", d, T(1));
      L.ln2_b = add_const(p + ".ln2.b", d, T(0));
      L.w1 = add_linear(p + ".mlp.fc1", d, mlp, rng, &L.b1);
      L.w2 = add_linear(p + ".mlp.fc2", mlp, d, rng, &L.b2);
      layers_.push_back(L);
    }
    ln_f_g_ = add_const("final_ln.g", d, T(1));
    ln_f_b_ = add_const("final_ln.b", d, T(0));
    head_w_ = add_linear("head", d, static_cast<std::size_t>(cfg_.n_classes), rng, &head_b_);
  }

  ad::Var<T> conv_bn_relu(ad::Tape<T>& tape, ad::Var<T> x, const ConvBlock& c, bool train,
                          bool with_relu = true) {
    auto y = ad::conv1d(x, at(tape, c.w), at(tape, c.b), c.stride, c.pad);
    y = ad::batchnorm(y, at(tape, c.bn.gamma), at(tape, c.bn.beta), &buffers_[c.bn.rm].value,
                      &buffers_[c.bn.rv].value, train);
    return with_relu ? ad::relu(y) : y;
  }

  // Shallow residual conv encoder followed by pooling and a linear map; each
  // patch is encoded independently of its neighbours.
  ad::Var<T> encode_stream(ad::Tape<T>& tape, const Tensor<T>& patches, StreamEncoder& enc, bool train) {
    const std::size_t batch = patches.dim(0), n = patches.dim(1), len = patches.dim(2);
    if (!enc.conv) {
      ad::Var<T> x = tape.leaf(Tensor<T>({batch * n, len}, patches.data), false);
      return ad::linear(x, at(tape, enc.lin_w), at(tape, enc.lin_b));
    }
    ad::Var<T> x = tape.leaf(Tensor<T>({batch * n, 1, len}, patches.data), false);
    auto h = conv_bn_relu(tape, x, enc.stem, train);
    // residual block, constant width
    auto r = conv_bn_relu(tape, h, enc.b1c1, train);
    r = conv_bn_relu(tape, r, enc.b1c2, train, false);
    h = ad::relu(ad::add(h, r));
    // widening residual block with a 1x1 projection shortcut
    auto r2 = conv_bn_relu(tape, h, enc.b2c1, train);
    r2 = conv_bn_relu(tape, r2, enc.b2c2, train, false);
    auto skip = conv_bn_relu(tape, h, enc.b2skip, train, false);
    h = ad::relu(ad::add(skip, r2));
    auto pooled = ad::global_avg_pool(h);
    return ad::linear(pooled, at(tape, enc.out_w), at(tape, enc.out_b));
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  std::vector<Buffer> buffers_;
  StreamEncoder enc_a_, enc_b_;
  std::vector<Layer> layers_;
  int ln_f_g_ = -1, ln_f_b_ = -1, head_w_ = -1, head_b_ = -1;
};

// ---------------------------------------------------------------------------
// Checkpoint format: versioned header, key/value metadata (the model config),
// a manifest of named tensors, then raw little-endian payloads. Round-trips
// bit-exactly for the build's scalar type.
// ---------------------------------------------------------------------------
inline constexpr char kCheckpointMagic[8] = {'S', 'O', 'M', 'N', 'O', 'C', 'K', '1'};

namespace detail {

template <class T>
constexpr std::uint8_t dtype_code() {
  if constexpr (std::is_same_v<T, float>) return 0;
  else if constexpr (std::is_same_v<T, double>) return 1;
  else static_assert(sizeof(T) == 0, "unsupported scalar type");
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, Model<T>& model,
                     const std::map<std::string, std::string>& extra_meta = {}) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for write: " + path);
  f.write(kCheckpointMagic, 8);
  io::write_le<std::uint32_t>(f, 1);

  const auto& cfg = model.config();
  std::map<std::string, std::string> meta = extra_meta;
  meta["n_layers"] = std::to_string(cfg.n_layers);
  meta["n_heads"] = std::to_string(cfg.n_heads);
  meta["dropout_p"] = std::to_string(cfg.dropout_p);
  meta["mlp_dim"] = std::to_string(cfg.mlp_dim);
  meta["d_hw"] = std::to_string(cfg.d_hw);
  meta["d_bw"] = std::to_string(cfg.d_bw);
  meta["seq_len_n"] = std::to_string(cfg.seq_len_n);
  meta["n_classes"] = std::to_string(cfg.n_classes);
  meta["input_mode"] = to_string(cfg.input_mode);
  meta["conv_stem_channels"] = std::to_string(cfg.conv_stem_channels);
  meta["conv_block_channels"] = std::to_string(cfg.conv_block_channels);
  meta["use_positions"] = cfg.use_positions ? "1" : "0";
  meta["scalar"] = std::is_same_v<T, float> ? "f32" : "f64";
  io::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    io::write_string(f, k);
    io::write_string(f, v);
  }

  std::vector<std::pair<std::string, const Tensor<T>*>> tensors;
  for (const auto& e : model.params().entries()) tensors.push_back({e.name, &e.value});
  for (const auto& [name, t] : model.buffers()) tensors.push_back({name, t});
  io::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    io::write_string(f, name);
    io::write_le<std::uint8_t>(f, detail::dtype_code<T>());
    io::write_le<std::uint32_t>(f, static_cast<std::uint32_t>(t->rank()));
    for (auto d : t->shape) io::write_le<std::uint64_t>(f, d);
  }
  for (const auto& [name, t] : tensors)
    for (const T v : t->data) io::write_le<T>(f, v);
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

template <class T>
Model<T> load_checkpoint(const std::string& path,
                         std::map<std::string, std::string>* meta_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  if (io::read_le<std::uint32_t>(f) != 1) throw std::runtime_error("unsupported checkpoint version");

  std::map<std::string, std::string> meta;
  const auto n_meta = io::read_le<std::uint32_t>(f);
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = io::read_string(f);
    meta[k] = io::read_string(f);
  }
  const std::string want = std::is_same_v<T, float> ? "f32" : "f64";
  if (meta.at("scalar") != want)
    throw std::runtime_error("checkpoint scalar type " + meta.at("scalar") + ", build expects " + want);

  ModelConfig cfg;
  cfg.n_layers = std::stoi(meta.at("n_layers"));
  cfg.n_heads = std::stoi(meta.at("n_heads"));
  cfg.dropout_p = std::stod(meta.at("dropout_p"));
  cfg.mlp_dim = std::stoi(meta.at("mlp_dim"));
  cfg.d_hw = std::stoi(meta.at("d_hw"));
  cfg.d_bw = std::stoi(meta.at("d_bw"));
  cfg.seq_len_n = std::stoi(meta.at("seq_len_n"));
  cfg.n_classes = std::stoi(meta.at("n_classes"));
  cfg.input_mode = input_mode_from(meta.at("input_mode"));
  cfg.conv_stem_channels = std::stoi(meta.at("conv_stem_channels"));
  cfg.conv_block_channels = std::stoi(meta.at("conv_block_channels"));
  cfg.use_positions = meta.at("use_positions") == "1";

  Model<T> model(cfg, 0);

  struct Rec {
    std::string name;
    Shape shape;
  };
  const auto n_tensors = io::read_le<std::uint32_t>(f);
  std::vector<Rec> manifest(n_tensors);
  for (auto& r : manifest) {
    r.name = io::read_string(f);
    if (io::read_le<std::uint8_t>(f) != detail::dtype_code<T>())
      throw std::runtime_error("checkpoint tensor dtype mismatch at " + r.name);
    const auto rank = io::read_le<std::uint32_t>(f);
    r.shape.resize(rank);
    for (auto& d : r.shape) d = io::read_le<std::uint64_t>(f);
  }

  std::map<std::string, Tensor<T>*> targets;
  for (auto& e : model.params().entries()) targets[e.name] = &e.value;
  for (auto [name, t] : model.buffers()) targets[name] = t;
  if (targets.size() != manifest.size())
    throw std::runtime_error("checkpoint tensor count mismatch");
  for (const auto& r : manifest) {
    auto it = targets.find(r.name);
    if (it == targets.end()) throw std::runtime_error("unexpected checkpoint tensor: " + r.name);
    if (it->second->shape != r.shape)
      throw std::runtime_error("checkpoint shape mismatch for " + r.name + ": got " + shape_str(r.shape) +
                               ", expected " + shape_str(it->second->shape));
    for (auto& v : it->second->data) v = io::read_le<T>(f);
  }
  if (meta_out) *meta_out = std::move(meta);
  return model;
}

}  // namespace somno

#pragma once

// Progressive recurrent codec. Each unrolling step encodes the current
// residual into a bottleneck binarized to {-1,+1}; the decoder turns those
// bits into a correction for the running reconstruction:
//
//   r_1 = x,  x̂_0 = 0,  Δ_t = D(B(E(r_t))),  x̂_t = x̂_{t-1} + Δ_t,  r_{t+1} = x - x̂_t
//
// Encoder: 3x3 stride-2 conv, three stride-2 conv-GRUs, 1x1 bottleneck + tanh.
// Decoder: 1x1 expansion, four conv-GRUs each followed by depth_to_space(2),
// 3x3 output conv + tanh. Both stacks keep hidden state across steps.
// The loop runs on normalized, reflect-padded images.

#include "odlc/image.hpp"
#include "odlc/ops.hpp"
#include "odlc/rng.hpp"

namespace odlc {

inline constexpr int kCodecFactor = 16;

struct CodecConfig {
  int bottleneck = 32;                       // C_b
  int encoder_stem = 32;
  std::vector<int> encoder_gru{64, 128, 128};
  int decoder_expand = 128;
  std::vector<int> decoder_gru{128, 128, 64, 32};
  int hidden_kernel = 1;
  int last_hidden_kernel = 3;                // hidden kernel of the final decoder GRU
  double output_scale = 2.0;                 // Δ = output_scale * tanh(conv)
  int max_iterations = 8;                    // T_max
  Normalization norm;

  void validate() const {
    require(bottleneck >= 1 && bottleneck <= 255, "codec: C_b must be in [1,255]");
    require(encoder_stem >= 1, "codec: encoder stem width must be positive");
    require(encoder_gru.size() == 3, "codec: encoder needs exactly 3 GRU layers");
    require(decoder_gru.size() == 4, "codec: decoder needs exactly 4 GRU layers");
    for (int w : encoder_gru) require(w >= 1, "codec: encoder widths must be positive");
    require(decoder_expand >= 1, "codec: decoder expansion width must be positive");
    for (int w : decoder_gru)
      require(w >= 4 && w % 4 == 0, "codec: decoder GRU widths must be positive multiples of 4");
    require(hidden_kernel % 2 == 1 && last_hidden_kernel % 2 == 1, "codec: hidden kernels must be odd");
    require(output_scale > 0, "codec: output scale must be positive");
    require(max_iterations >= 1 && max_iterations <= 255, "codec: T_max must be in [1,255]");
  }

  /// Tiny profile for gradient checks and fast tests.
  static CodecConfig tiny() {
    CodecConfig c;
    c.bottleneck = 4;
    c.encoder_stem = 4;
    c.encoder_gru = {4, 8, 8};
    c.decoder_expand = 8;
    c.decoder_gru = {8, 8, 8, 8};
    return c;
  }
};

template <class T>
struct CodecParams {
  CodecConfig config;
  ParameterSet<T> params;

  static CodecParams init(const CodecConfig& cfg, Rng& rng) {
    cfg.validate();
    CodecParams p{cfg, {}};
    auto kernel = [&](const std::string& name, int cout, int cin, int k) {
      const double bound = std::sqrt(3.0 / (cin * k * k));
      Tensor<T> w({cout, cin, k, k});
      for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
      p.params.add(name, std::move(w));
    };
    auto conv = [&](const std::string& name, int cout, int cin, int k, bool bias) {
      kernel(name + ".w", cout, cin, k);
      if (bias) p.params.add(name + ".b", Tensor<T>({cout}));
    };
    auto gru = [&](const std::string& name, int cin, int hidden, int kh) {
      kernel(name + ".wx", 3 * hidden, cin, 3);
      p.params.add(name + ".bx", Tensor<T>({3 * hidden}));
      kernel(name + ".whg", 2 * hidden, hidden, kh);
      kernel(name + ".whc", hidden, hidden, kh);
    };
    conv("enc.stem", cfg.encoder_stem, 3, 3, true);
    int cin = cfg.encoder_stem;
    for (size_t i = 0; i < cfg.encoder_gru.size(); ++i) {
      gru("enc.gru" + std::to_string(i + 1), cin, cfg.encoder_gru[i], cfg.hidden_kernel);
      cin = cfg.encoder_gru[i];
    }
    conv("enc.bottleneck", cfg.bottleneck, cin, 1, true);
    conv("dec.expand", cfg.decoder_expand, cfg.bottleneck, 1, true);
    cin = cfg.decoder_expand;
    for (size_t i = 0; i < cfg.decoder_gru.size(); ++i) {
      const int kh = i + 1 == cfg.decoder_gru.size() ? cfg.last_hidden_kernel : cfg.hidden_kernel;
      gru("dec.gru" + std::to_string(i + 1), cin, cfg.decoder_gru[i], kh);
      cin = cfg.decoder_gru[i] / 4;
    }
    conv("dec.out", 3, cin, 3, true);
    return p;
  }
};

/// Parameters of one codec bound onto a tape, either trainable or frozen.
template <class T>
struct CodecGraph {
  const CodecConfig* config = nullptr;
  std::map<std::string, Var<T>> vars;

  Var<T> operator()(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw Error("codec: missing parameter '" + name + "'");
    return it->second;
  }
  GruWeights<T> gru(const std::string& n) const {
    return {(*this)(n + ".wx"), (*this)(n + ".bx"), (*this)(n + ".whg"), (*this)(n + ".whc")};
  }
};

template <class T>
CodecGraph<T> bind_trainable(Tape<T>& tape, CodecParams<T>& p) {
  CodecGraph<T> g{&p.config, {}};
  for (size_t i = 0; i < p.params.size(); ++i) g.vars.emplace(p.params[i].name, tape.param(p.params[i]));
  return g;
}

template <class T>
CodecGraph<T> bind_frozen(Tape<T>& tape, const CodecParams<T>& p) {
  CodecGraph<T> g{&p.config, {}};
  for (size_t i = 0; i < p.params.size(); ++i) g.vars.emplace(p.params[i].name, tape.frozen(p.params[i]));
  return g;
}

/// Recurrent hidden state, zero at t = 1.
template <class T>
struct CodecState {
  std::vector<Var<T>> encoder;
  std::vector<Var<T>> decoder;
};

/// Zero state for a padded input of size h x w (multiples of 16).
template <class T>
CodecState<T> initial_state(Tape<T>& tape, const CodecConfig& cfg, int h, int w) {
  CodecState<T> s;
  int hh = h / 2, ww = w / 2;
  for (int width : cfg.encoder_gru) {
    hh /= 2;
    ww /= 2;
    s.encoder.push_back(tape.constant(Tensor<T>({width, hh, ww})));
  }
  for (int width : cfg.decoder_gru) {
    s.decoder.push_back(tape.constant(Tensor<T>({width, hh, ww})));
    hh *= 2;
    ww *= 2;
  }
  return s;
}

enum class QuantMode {
  stochastic,     // +1 with probability (1+z)/2
  deterministic,  // sign(z), sign(0) = +1
  passthrough,    // no quantization; for differentiating the continuous relaxation
};

inline const char* quant_mode_name(QuantMode m) {
  switch (m) {
    case QuantMode::stochastic:
      return "stochastic";
    case QuantMode::deterministic:
      return "deterministic";
    default:
      return "passthrough";
  }
}

/// Binary code of z in {-1,+1}. Stochastic mode draws entries in row-major order.
template <class T>
Tensor<T> binarize(const Tensor<T>& z, QuantMode mode, Rng* rng = nullptr) {
  require(mode != QuantMode::passthrough, "binarize: passthrough mode produces no bits");
  require(mode == QuantMode::deterministic || rng != nullptr, "binarize: stochastic mode needs an rng");
  Tensor<T> b(z.shape());
  for (size_t i = 0; i < z.size(); ++i) {
    const double v = z[i];
    if (!(std::abs(v) <= 1.0)) throw Error("binarize: entry " + std::to_string(v) + " outside [-1,1]");
    const bool one = mode == QuantMode::deterministic ? v >= 0.0 : rng->uniform() < 0.5 * (1.0 + v);
    b[i] = one ? T(1) : T(-1);
  }
  return b;
}

/// Binarization on the tape with the straight-through gradient.
template <class T>
Var<T> quantize(Var<T> z, QuantMode mode, Rng* rng) {
  if (mode == QuantMode::passthrough) return z;
  return straight_through(z, binarize(z.value(), mode, rng));
}

/// E: residual [3,H,W] -> bottleneck activations [C_b,H/16,W/16] in (-1,1).
template <class T>
Var<T> encode_step(Var<T> r, CodecState<T>& s, const CodecGraph<T>& g) {
  const auto& cfg = *g.config;
  Var<T> h = conv2d(r, g("enc.stem.w"), std::optional<Var<T>>(g("enc.stem.b")), 2);
  for (size_t i = 0; i < cfg.encoder_gru.size(); ++i) {
    s.encoder[i] = conv_gru_cell(h, s.encoder[i], g.gru("enc.gru" + std::to_string(i + 1)), 2);
    h = s.encoder[i];
  }
  return tanh(conv2d(h, g("enc.bottleneck.w"), std::optional<Var<T>>(g("enc.bottleneck.b"))));
}

/// D: bits [C_b,H/16,W/16] -> correction Δ [3,H,W].
template <class T>
Var<T> decode_step(Var<T> bits, CodecState<T>& s, const CodecGraph<T>& g) {
  const auto& cfg = *g.config;
  Var<T> h = conv2d(bits, g("dec.expand.w"), std::optional<Var<T>>(g("dec.expand.b")));
  for (size_t i = 0; i < cfg.decoder_gru.size(); ++i) {
    s.decoder[i] = conv_gru_cell(h, s.decoder[i], g.gru("dec.gru" + std::to_string(i + 1)), 1);
    h = depth_to_space(s.decoder[i], 2);
  }
  Var<T> out = tanh(conv2d(h, g("dec.out.w"), std::optional<Var<T>>(g("dec.out.b"))));
  return scale(out, static_cast<T>(cfg.output_scale));
}

template <class T>
struct StepResult {
  Var<T> z;      // pre-binarization activations
  Var<T> bits;   // quantized code (equals z in passthrough mode)
  Var<T> delta;
};

template <class T>
StepResult<T> codec_step(Var<T> r, CodecState<T>& s, const CodecGraph<T>& g, QuantMode mode, Rng* rng) {
  const Tensor<T>& rv = r.value();
  if (rv.rank() != 3 || rv.dim(0) != 3) throw Error("codec_step: expected [3,H,W] residual, got " + shape_str(rv.shape()));
  if (rv.dim(1) < kCodecFactor || rv.dim(2) < kCodecFactor)
    throw Error("codec_step: resolution " + std::to_string(rv.dim(1)) + "x" + std::to_string(rv.dim(2)) +
                " below 16x16");
  if (rv.dim(1) % kCodecFactor || rv.dim(2) % kCodecFactor)
    throw Error("codec_step: spatial dims must be multiples of 16, got " + shape_str(rv.shape()));
  StepResult<T> out;
  out.z = encode_step(r, s, g);
  out.bits = quantize(out.z, mode, rng);
  out.delta = decode_step(out.bits, s, g);
  return out;
}

inline int padded_extent(int n) { return (n + kCodecFactor - 1) / kCodecFactor * kCodecFactor; }

/// Payload bits of a T-step stream: T * C_b * ceil(H/16) * ceil(W/16).
inline uint64_t payload_bits(int height, int width, int iterations, int bottleneck) {
  return static_cast<uint64_t>(iterations) * static_cast<uint64_t>(bottleneck) *
         static_cast<uint64_t>((height + kCodecFactor - 1) / kCodecFactor) *
         static_cast<uint64_t>((width + kCodecFactor - 1) / kCodecFactor);
}

inline void check_iterations(int iterations, const CodecConfig& cfg) {
  if (iterations < 1) throw Error("codec: iteration count must be >= 1");
  if (iterations > cfg.max_iterations)
    throw Error("codec: " + std::to_string(iterations) + " iterations exceed the model's T_max of " +
                std::to_string(cfg.max_iterations));
}

/// Normalized, reflect-padded network input for a [0,1] image.
template <class T>
Tensor<T> codec_input(const Image& x, const CodecConfig& cfg) {
  if (x.rank() != 3 || x.dim(0) != 3) throw Error("codec: expected [3,H,W] image, got " + shape_str(x.shape()));
  if (x.dim(1) < kCodecFactor || x.dim(2) < kCodecFactor)
    throw Error("codec: resolution " + std::to_string(x.dim(1)) + "x" + std::to_string(x.dim(2)) + " below 16x16");
  return Tensor<T>::cast(reflect_pad(normalize(x, cfg.norm), padded_extent(x.dim(1)), padded_extent(x.dim(2))));
}

/// Network-domain reconstruction -> cropped, denormalized, clamped image.
template <class T>
Image codec_output(const Tensor<T>& xhat, const CodecConfig& cfg, int height, int width) {
  Image full = Image::cast(xhat);
  return clamp01(denormalize(crop(full, 0, 0, height, width), cfg.norm));
}

/// Per-channel affine on the tape mapping the network domain back to [0,1] units.
template <class T>
Var<T> denormalize_var(Var<T> v, const Normalization& n) {
  std::vector<T> s(3), b(3);
  for (int c = 0; c < 3; ++c) {
    s[c] = static_cast<T>(n.stddev[c]);
    b[c] = static_cast<T>(n.mean[c]);
  }
  return channel_affine(v, s, b);
}

/// Everything each unrolling step produced, kept in the padded
/// network domain.
template <class T>
struct ReconstructionTrace {
  int height = 0, width = 0;  // true (unpadded) size
  Tensor<T> input;            // normalized padded x
  std::vector<Tensor<T>> reconstructions;
  std::vector<Tensor<T>> residuals;
  std::vector<Tensor<T>> deltas;
  std::vector<Tensor<T>> bits;

  int iterations() const { return static_cast<int>(reconstructions.size()); }
};

/// Runs T steps forward without recording gradients.
template <class T>
ReconstructionTrace<T> reconstruct_progressive(const Image& x, int iterations, const CodecParams<T>& p,
                                               QuantMode mode, Rng* rng = nullptr) {
  p.config.validate();
  check_iterations(iterations, p.config);
  ReconstructionTrace<T> tr;
  tr.height = x.dim(1);
  tr.width = x.dim(2);
  tr.input = codec_input<T>(x, p.config);
  Tape<T> tape(false);
  const CodecGraph<T> g = bind_frozen(tape, p);
  CodecState<T> s = initial_state(tape, p.config, tr.input.dim(1), tr.input.dim(2));
  Var<T> xv = tape.constant_ref(tr.input);
  Var<T> r = xv;
  std::optional<Var<T>> xhat;
  for (int t = 0; t < iterations; ++t) {
    StepResult<T> st = codec_step(r, s, g, mode, rng);
    xhat = xhat ? add(*xhat, st.delta) : st.delta;
    tr.residuals.push_back(r.value());
    tr.deltas.push_back(st.delta.value());
    tr.reconstructions.push_back(xhat->value());
    if (mode != QuantMode::passthrough) tr.bits.push_back(st.bits.value());
    r = sub(xv, *xhat);
  }
  return tr;
}

/// Decoder-only replay of a bit sequence; returns x̂_t for t = 1..bits.size().
template <class T>
std::vector<Tensor<T>> decode_progressive(const std::vector<Tensor<T>>& bits, int padded_h, int padded_w,
                                          const CodecParams<T>& p) {
  Tape<T> tape(false);
  const CodecGraph<T> g = bind_frozen(tape, p);
  CodecState<T> s = initial_state(tape, p.config, padded_h, padded_w);
  const Shape expect{p.config.bottleneck, padded_h / kCodecFactor, padded_w / kCodecFactor};
  std::vector<Tensor<T>> out;
  std::optional<Var<T>> xhat;
  for (const auto& b : bits) {
    if (b.shape() != expect)
      throw Error("decode: bit tensor " + shape_str(b.shape()) + " does not match expected " + shape_str(expect));
    Var<T> delta = decode_step(tape.constant_ref(b), s, g);
    xhat = xhat ? add(*xhat, delta) : delta;
    out.push_back(xhat->value());
  }
  return out;
}

}  // namespace odlc

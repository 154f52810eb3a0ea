#pragma once

// Codec training under the observer distortion. Each step draws a minibatch,
// unrolls T codec steps with stochastic binarization and minimizes
//   L = (1/T) sum_t d_alpha(x, x̂_t)
// averaged over the batch, followed by global-norm clipping and Adam.
// There is no rate term in the objective.

#include <chrono>
#include <functional>

#include "odlc/codec.hpp"
#include "odlc/losses.hpp"
#include "odlc/preprocess.hpp"

namespace odlc {

struct TrainConfig {
  double learning_rate = 4e-4;
  int batch_size = 4;
  int epochs = 3;
  int unroll_steps = 4;  // T
  double beta = 0.0;     // weight of a rate term; only 0 is supported
  uint64_t seed = 0;
  AdamConfig adam{4e-4, 0.9, 0.999, 1e-8};
  int resize_side = 64;
  int crop_size = 56;
  bool augment = true;
  double clip_norm = 5.0;
  long max_steps = 0;  // 0 = run all epochs
  CodecConfig codec;

  void validate() const {
    require(beta == 0.0, "train config: beta must be 0 (no entropy term)");
    require(unroll_steps >= 1, "train config: T must be >= 1");
    require(batch_size >= 1, "train config: batch size must be >= 1");
    require(epochs >= 1, "train config: epochs must be >= 1");
    require(learning_rate > 0, "train config: learning rate must be positive");
    require(crop_size >= kCodecFactor, "train config: crop must be at least 16");
    require(resize_side >= crop_size, "train config: resize side must be >= crop");
    require(clip_norm > 0, "train config: clip norm must be positive");
    codec.validate();
  }
};

/// Reads "key = value" lines into the configs. Blank lines and '#' comments
/// are ignored; unknown keys are rejected.
inline void apply_config_text(const std::string& text, TrainConfig& tc, LossConfig& lc) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    auto num = [&] {
      try {
        size_t used = 0;
        const double v = std::stod(val, &used);
        if (used != val.size()) throw std::invalid_argument(val);
        return v;
      } catch (const std::exception&) {
        throw Error("config line " + std::to_string(lineno) + ": '" + key + "' expects a number, got '" + val + "'");
      }
    };
    auto ints = [&] {
      std::vector<int> out;
      std::istringstream ss(val);
      std::string tok;
      while (std::getline(ss, tok, ',')) out.push_back(std::stoi(trim(tok)));
      return out;
    };
    if (key == "learning_rate" || key == "lr") tc.learning_rate = num();
    else if (key == "batch_size") tc.batch_size = static_cast<int>(num());
    else if (key == "epochs") tc.epochs = static_cast<int>(num());
    else if (key == "unroll_steps" || key == "iterations") tc.unroll_steps = static_cast<int>(num());
    else if (key == "beta") tc.beta = num();
    else if (key == "seed") tc.seed = static_cast<uint64_t>(num());
    else if (key == "adam_beta1") tc.adam.beta1 = num();
    else if (key == "adam_beta2") tc.adam.beta2 = num();
    else if (key == "adam_epsilon") tc.adam.epsilon = num();
    else if (key == "resize_side") tc.resize_side = static_cast<int>(num());
    else if (key == "crop_size") tc.crop_size = static_cast<int>(num());
    else if (key == "augment") tc.augment = num() != 0;
    else if (key == "clip_norm") tc.clip_norm = num();
    else if (key == "max_steps") tc.max_steps = static_cast<long>(num());
    else if (key == "bottleneck") tc.codec.bottleneck = static_cast<int>(num());
    else if (key == "encoder_gru") tc.codec.encoder_gru = ints();
    else if (key == "decoder_gru") tc.codec.decoder_gru = ints();
    else if (key == "alpha") lc.alpha = num();
    else if (key == "lambda_h") lc.lambda_h = num();
    else if (key == "layers") {
      lc.layer_ids.clear();
      std::istringstream ss(val);
      std::string tok;
      while (std::getline(ss, tok, ',')) lc.layer_ids.push_back(trim(tok));
    } else if (key == "msssim_scales") {
      lc.msssim.scales = static_cast<int>(num());
    } else {
      throw Error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  tc.adam.learning_rate = tc.learning_rate;
}

struct TrainLogRow {
  long step = 0;
  double loss = 0;
  std::optional<double> d_h;  // mean over batch and unrolling steps
  std::optional<double> d_c;
  double lr = 0;
  double wall_time = 0;
};

inline std::string train_log_csv(const std::vector<TrainLogRow>& rows) {
  std::ostringstream out;
  out.precision(9);
  out << "step,loss,d_H,d_C,lr,wall_time\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.loss << ',';
    if (r.d_h) out << *r.d_h;
    out << ',';
    if (r.d_c) out << *r.d_c;
    out << ',' << r.lr << ',' << r.wall_time << '\n';
  }
  return out.str();
}

/// Loss of one image on a tape, averaged over the T unrolled reconstructions.
template <class T>
struct UnrolledLoss {
  Var<T> loss;
  std::optional<double> d_h, d_c;
};

/// `x` is a [0,1] image whose sides are the training crop. Distortions are
/// measured on the unpadded region of the denormalized reconstructions.
template <class T>
UnrolledLoss<T> unrolled_loss(Tape<T>& tape, const CodecGraph<T>& g, const Tensor<T>& x_raw, const Tensor<T>& x_net,
                              int iterations, const LossConfig& lc, const ClassifierParams<T>* lossnet,
                              QuantMode mode, Rng* rng) {
  const CodecConfig& cfg = *g.config;
  const int h = x_raw.dim(1), w = x_raw.dim(2);
  CodecState<T> s = initial_state(tape, cfg, x_net.dim(1), x_net.dim(2));
  Var<T> xv = tape.constant_ref(x_net);
  const Reference<T> ref = prepare_reference(tape.constant_ref(x_raw), lc, lossnet);
  Var<T> r = xv;
  std::optional<Var<T>> xhat;
  UnrolledLoss<T> out;
  double dh = 0, dc = 0;
  Var<T> total;
  for (int t = 0; t < iterations; ++t) {
    StepResult<T> st = codec_step(r, s, g, mode, rng);
    xhat = xhat ? add(*xhat, st.delta) : st.delta;
    r = sub(xv, *xhat);
    Var<T> y = spatial_crop(denormalize_var(*xhat, cfg.norm), 0, 0, h, w);
    Distortion<T> d = observer_distortion(ref, y, lc, lossnet);
    if (d.human) dh += *d.human;
    if (d.feature) dc += *d.feature;
    total = t == 0 ? d.value : add(total, d.value);
  }
  out.loss = scale(total, static_cast<T>(1.0 / iterations));
  if (lc.alpha < 1.0) out.d_h = dh / iterations;
  if (lc.alpha > 0.0) out.d_c = dc / iterations;
  return out;
}

/// Raised when the loss or gradients become non-finite; carries the last
/// parameters that produced a finite step.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& msg, CodecParams<float> last_good, long step)
      : Error(msg), last_good_(std::move(last_good)), step_(step) {}
  const CodecParams<float>& last_good() const { return last_good_; }
  long step() const { return step_; }

 private:
  CodecParams<float> last_good_;
  long step_;
};

struct TrainHooks {
  std::function<void(const TrainLogRow&)> on_step;
  long checkpoint_every = 0;
  std::function<void(const CodecParams<float>&, long)> on_checkpoint;
};

struct TrainResult {
  CodecParams<float> params;
  std::vector<TrainLogRow> log;
};

/// Trains a codec from scratch. The normalization statistics are estimated on
/// the training images and stored in the codec config.
inline TrainResult train_codec(const Dataset& train_set, const LossConfig& lc, TrainConfig tc,
                               const ClassifierParams<float>* lossnet, const TrainHooks& hooks = {}) {
  tc.validate();
  lc.validate();
  if (train_set.empty()) throw Error("train_codec: empty training set");
  if (lc.alpha > 0.0) {
    if (!lossnet) throw Error("train_codec: alpha > 0 requires a loss network");
    for (const auto& id : lc.layer_ids) lossnet->arch.parse_layer(id);
  }
  tc.codec.max_iterations = tc.unroll_steps;
  tc.codec.norm = estimate_normalization(images_of(train_set));
  tc.adam.learning_rate = tc.learning_rate;

  Rng init_rng(Rng::mix(tc.seed ^ 0xC0DEC));
  TrainResult result{CodecParams<float>::init(tc.codec, init_rng), {}};
  CodecParams<float>& model = result.params;
  Adam<float> adam(tc.adam);
  const PreprocessConfig pre{tc.resize_side, tc.crop_size, false, {}};

  std::vector<size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng shuffle_rng(Rng::mix(tc.seed ^ 0x5EED));
  const auto start = std::chrono::steady_clock::now();
  long step = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    for (size_t first = 0; first < order.size(); first += tc.batch_size) {
      const size_t last = std::min(order.size(), first + static_cast<size_t>(tc.batch_size));
      const float inv_b = 1.0f / static_cast<float>(last - first);
      model.params.zero_grad();
      TrainLogRow row;
      row.step = step;
      row.lr = tc.learning_rate;
      double dh = 0, dc = 0;
      for (size_t k = first; k < last; ++k) {
        Rng aug = Rng::derive(tc.seed, static_cast<uint64_t>(step) * 65537ull + (k - first) * 2);
        Rng quant = Rng::derive(tc.seed, static_cast<uint64_t>(step) * 65537ull + (k - first) * 2 + 1);
        const Image x = preprocess(train_set[order[k]].image, tc.augment ? Split::train : Split::val, aug, pre);
        const Tensor<float> x_net = codec_input<float>(x, model.config);
        Tape<float> tape;
        const CodecGraph<float> g = bind_trainable(tape, model);
        UnrolledLoss<float> ul =
            unrolled_loss(tape, g, x, x_net, tc.unroll_steps, lc, lossnet, QuantMode::stochastic, &quant);
        Var<float> loss = scale(ul.loss, inv_b);
        row.loss += loss.value()[0];
        if (ul.d_h) dh += *ul.d_h * inv_b;
        if (ul.d_c) dc += *ul.d_c * inv_b;
        tape.backward(loss);
      }
      if (lc.alpha < 1.0) row.d_h = dh;
      if (lc.alpha > 0.0) row.d_c = dc;
      const double norm = global_grad_norm(model.params);
      if (!std::isfinite(row.loss) || !std::isfinite(norm)) {
        // Adam has not touched the parameters yet, so they are the last good state.
        throw DivergenceError("train_codec: non-finite " + std::string(std::isfinite(row.loss) ? "gradient" : "loss") +
                                  " at step " + std::to_string(step),
                              model, step);
      }
      clip_grad_norm(model.params, tc.clip_norm);
      adam.step(model.params);
      row.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      result.log.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
      ++step;
      if (hooks.checkpoint_every && hooks.on_checkpoint && step % hooks.checkpoint_every == 0)
        hooks.on_checkpoint(model, step);
      if (tc.max_steps && step >= tc.max_steps) return result;
    }
  }
  return result;
}

}  // namespace odlc

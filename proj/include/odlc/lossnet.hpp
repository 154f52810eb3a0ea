#pragma once

// VGG-style desk-scale classifier. It serves both as the frozen loss network
// whose activations define the feature distortion and as the evaluation
// classifier. Convolution j of block i is layer "i.j"; taps are taken after
// the ReLU. The first convolution of every block after the first has stride 2,
// so block i runs at ceil(input / 2^(i-1)).

#include <map>
#include <set>

#include "odlc/ops.hpp"
#include "odlc/optim.hpp"
#include "odlc/preprocess.hpp"

namespace odlc {

struct ClassifierArch {
  std::vector<int> widths{16, 32, 64, 64, 64};
  int convs_per_block = 2;
  int num_classes = 10;
  int input_size = 56;
  Normalization norm;

  int blocks() const { return static_cast<int>(widths.size()); }

  std::vector<std::string> layer_ids() const {
    std::vector<std::string> ids;
    for (int i = 1; i <= blocks(); ++i)
      for (int j = 1; j <= convs_per_block; ++j) ids.push_back(std::to_string(i) + "." + std::to_string(j));
    return ids;
  }

  /// (block, conv) of a layer id; throws for unknown ids.
  std::pair<int, int> parse_layer(const std::string& id) const {
    const auto dot = id.find('.');
    int b = 0, c = 0;
    try {
      if (dot == std::string::npos) throw std::invalid_argument(id);
      size_t used = 0;
      b = std::stoi(id.substr(0, dot), &used);
      if (used != dot) throw std::invalid_argument(id);
      c = std::stoi(id.substr(dot + 1), &used);
      if (used != id.size() - dot - 1) throw std::invalid_argument(id);
    } catch (const std::exception&) {
      throw Error("unknown layer id '" + id + "'");
    }
    if (b < 1 || b > blocks() || c < 1 || c > convs_per_block) throw Error("unknown layer id '" + id + "'");
    return {b, c};
  }

  /// Declared [C,H,W] of a tap for an input of size h x w.
  Shape layer_shape(const std::string& id, int h, int w) const {
    const auto [b, c] = parse_layer(id);
    (void)c;
    for (int i = 1; i < b; ++i) {
      h = (h + 1) / 2;
      w = (w + 1) / 2;
    }
    return {widths[b - 1], h, w};
  }
};

template <class T>
struct ClassifierParams {
  ClassifierArch arch;
  ParameterSet<T> params;

  static ClassifierParams init(const ClassifierArch& arch, Rng& rng) {
    require(arch.num_classes >= 2, "classifier: need at least 2 classes");
    require(!arch.widths.empty() && arch.convs_per_block >= 1, "classifier: empty architecture");
    ClassifierParams p{arch, {}};
    int cin = 3;
    for (int b = 1; b <= arch.blocks(); ++b)
      for (int c = 1; c <= arch.convs_per_block; ++c) {
        const int cout = arch.widths[b - 1];
        // He-uniform for ReLU layers.
        const double bound = std::sqrt(6.0 / (cin * 9));
        Tensor<T> w({cout, cin, 3, 3});
        for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        const std::string name = "b" + std::to_string(b) + ".c" + std::to_string(c);
        p.params.add(name + ".w", std::move(w));
        p.params.add(name + ".b", Tensor<T>({cout}));
        cin = cout;
      }
    const double bound = std::sqrt(1.0 / cin);
    Tensor<T> hw({arch.num_classes, cin});
    for (auto& v : hw.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    p.params.add("head.w", std::move(hw));
    p.params.add("head.b", Tensor<T>({arch.num_classes}));
    return p;
  }
};

template <class T>
struct ClassifierOutputs {
  std::map<std::string, Var<T>> taps;
  std::optional<Var<T>> logits;
};

namespace detail {

template <class T, class Bind>
ClassifierOutputs<T> classifier_forward(Tape<T>& tape, Var<T> image, const ClassifierArch& arch,
                                        Bind bind, const std::vector<std::string>& taps,
                                        bool want_logits) {
  if (image.value().rank() != 3 || image.value().dim(0) != 3)
    throw Error("classifier: expected [3,H,W] image, got " + shape_str(image.shape()));
  int deepest = 0;
  std::set<std::string> wanted;
  for (const auto& id : taps) {
    const auto [b, c] = arch.parse_layer(id);
    deepest = std::max(deepest, (b - 1) * arch.convs_per_block + c);
    wanted.insert(id);
  }
  const int total = arch.blocks() * arch.convs_per_block;
  const int stop = want_logits ? total : deepest;

  std::vector<T> scale(3), shift(3);
  for (int c = 0; c < 3; ++c) {
    scale[c] = static_cast<T>(1.0 / arch.norm.stddev[c]);
    shift[c] = static_cast<T>(-static_cast<double>(arch.norm.mean[c]) / arch.norm.stddev[c]);
  }
  Var<T> h = channel_affine(image, scale, shift);
  ClassifierOutputs<T> out;
  int layer = 0;
  for (int b = 1; b <= arch.blocks() && layer < stop; ++b)
    for (int c = 1; c <= arch.convs_per_block && layer < stop; ++c, ++layer) {
      const std::string name = "b" + std::to_string(b) + ".c" + std::to_string(c);
      const int stride = (b > 1 && c == 1) ? 2 : 1;
      h = relu(conv2d(h, bind(name + ".w"), std::optional<Var<T>>(bind(name + ".b")), stride));
      const std::string id = std::to_string(b) + "." + std::to_string(c);
      if (wanted.count(id)) out.taps.emplace(id, h);
    }
  if (want_logits) out.logits = linear(global_avg_pool(h), bind("head.w"), bind("head.b"));
  return out;
}

}  // namespace detail

/// Forward pass with gradients routed into the classifier parameters.
template <class T>
ClassifierOutputs<T> classifier_forward_trainable(Tape<T>& tape, Var<T> image, ClassifierParams<T>& p,
                                                  const std::vector<std::string>& taps, bool want_logits) {
  return detail::classifier_forward(
      tape, image, p.arch, [&](const std::string& n) { return tape.param(p.params.get(n)); }, taps,
      want_logits);
}

/// Forward pass with the classifier held fixed (loss-network use).
template <class T>
ClassifierOutputs<T> classifier_forward_frozen(Tape<T>& tape, Var<T> image, const ClassifierParams<T>& p,
                                               const std::vector<std::string>& taps, bool want_logits) {
  return detail::classifier_forward(
      tape, image, p.arch, [&](const std::string& n) { return tape.frozen(p.params.get(n)); }, taps,
      want_logits);
}

template <class T>
struct FeatureMap {
  std::string layer_id;
  Tensor<T> tensor;
};

/// Post-activation feature maps of a [0,1] image, in the order requested.
template <class T>
std::vector<FeatureMap<T>> forward_features(const Tensor<T>& image, const ClassifierParams<T>& p,
                                            const std::vector<std::string>& layer_ids) {
  Tape<T> tape(false);
  auto out = classifier_forward_frozen(tape, tape.constant_ref(image), p, layer_ids, false);
  std::vector<FeatureMap<T>> maps;
  for (const auto& id : layer_ids) maps.push_back({id, out.taps.at(id).value()});
  return maps;
}

struct Classification {
  int label = 0;
  std::vector<float> logits;
};

/// Label = argmax of logits, ties resolved toward the lowest index.
inline int argmax_label(std::span<const float> logits) {
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

inline Classification classify(const Image& image, const ClassifierParams<float>& p) {
  if (image.rank() != 3 || image.dim(1) != p.arch.input_size || image.dim(2) != p.arch.input_size)
    throw Error("classify: input " + shape_str(image.shape()) + " does not match classifier resolution " +
                std::to_string(p.arch.input_size));
  Tape<float> tape(false);
  auto out = classifier_forward_frozen(tape, tape.constant_ref(image), p, {}, true);
  Classification c;
  c.logits = out.logits->value().vec();
  c.label = argmax_label(c.logits);
  return c;
}

struct ClassifierTrainConfig {
  ClassifierArch arch;
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 1e-3;
  int max_steps = 0;  // 0 = run all epochs
  PreprocessConfig preprocess{64, 56, false, {}};
  bool augment = true;  // random crop + flip; central crop when false
};

struct ClassifierTrainLog {
  std::vector<double> step_loss;
};

struct ClassifierTrainResult {
  ClassifierParams<float> params;
  ClassifierTrainLog log;
};

/// Cross-entropy training with Adam. Sample order and augmentation are pure
/// functions of `seed`.
inline ClassifierTrainResult train_classifier(const Dataset& data, ClassifierTrainConfig cfg, uint64_t seed) {
  if (data.empty()) throw Error("train_classifier: empty dataset");
  std::set<int> labels;
  for (const auto& s : data) {
    if (s.label < 0 || s.label >= cfg.arch.num_classes)
      throw Error("train_classifier: label " + std::to_string(s.label) + " outside [0, " +
                  std::to_string(cfg.arch.num_classes) + ")");
    labels.insert(s.label);
  }
  if (labels.size() < 2 && data.size() > 1)
    throw Error("train_classifier: degenerate labels (only one class present)");
  cfg.arch.input_size = cfg.preprocess.crop;
  cfg.arch.norm = estimate_normalization(images_of(data));
  cfg.preprocess.normalize = false;

  Rng init_rng(Rng::mix(seed ^ 0xC1A55));
  ClassifierTrainResult result{ClassifierParams<float>::init(cfg.arch, init_rng), {}};
  auto& model = result.params;
  Adam<float> adam({cfg.learning_rate, 0.9, 0.999, 1e-8});

  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng shuffle_rng(Rng::mix(seed ^ 0x5EED));
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      model.params.zero_grad();
      double batch_loss = 0;
      for (size_t k = start; k < end; ++k) {
        const auto& sample = data[order[k]];
        Rng aug = Rng::derive(seed, static_cast<uint64_t>(step) * 1315423911ull + k);
        const Image x = preprocess(sample.image, cfg.augment ? Split::train : Split::val, aug, cfg.preprocess);
        Tape<float> tape;
        auto out = classifier_forward_trainable(tape, tape.constant(x), model, {}, true);
        Var<float> loss = scale(softmax_cross_entropy(*out.logits, sample.label),
                                1.0f / static_cast<float>(end - start));
        batch_loss += loss.value()[0];
        tape.backward(loss);
      }
      adam.step(model.params);
      result.log.step_loss.push_back(batch_loss);
      ++step;
      if (cfg.max_steps && step >= cfg.max_steps) return result;
    }
  }
  return result;
}

inline double classifier_accuracy(const Dataset& data, const ClassifierParams<float>& p, int resize_side) {
  require(!data.empty(), "accuracy: empty dataset");
  size_t correct = 0;
  for (const auto& s : data) {
    const Image x = center_crop(resize_smallest_side(s.image, resize_side), p.arch.input_size, p.arch.input_size);
    correct += classify(x, p).label == s.label;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace odlc

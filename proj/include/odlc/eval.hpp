#pragma once

// Evaluation protocols built on one primitive: a codec round trip at a given
// quality level, scored for image quality and for label preservation.
//
// For every quality level (iteration count) each validation image is resized
// (smallest side S_comp), center-cropped to S_comp x S_comp, sent through the
// codec, and then
//   * scored with MS-SSIM against the S_comp crop, and/or
//   * center-cropped to S_inf x S_inf and classified, both decoded and original.
// Per-image results are gathered by index, so aggregation order never depends
// on thread scheduling.

#include <concepts>
#include <ctime>
#include <iomanip>
#include <thread>

#include "odlc/bitstream.hpp"
#include "odlc/lossnet.hpp"
#include "odlc/trainer.hpp"

namespace odlc {

inline constexpr const char* kToolVersion = "odlc 1.0.0";

struct CodecOutput {
  Image decoded;
  double bpp = 0;
};

template <class C>
concept ImageCodec = requires(const C& c, const Image& x, int t) {
  { c.roundtrip(x, t) } -> std::same_as<CodecOutput>;
};

template <class F>
concept ImageClassifier = requires(const F& f, const Image& x) {
  { f.label(x) } -> std::convertible_to<int>;
  { f.input_size() } -> std::convertible_to<int>;
};

/// The trained codec, exercised through its serialized container.
struct LearnedCodec {
  const CodecParams<float>* params;

  CodecOutput roundtrip(const Image& x, int iterations) const {
    const auto bytes = serialize(compress(x, iterations, *params));
    const Bitstream b = parse_bitstream(bytes);
    return {decompress(b, *params), b.bpp()};
  }
};

/// Returns its input unchanged.
struct IdentityCodec {
  double bits_per_pixel = 24.0;
  CodecOutput roundtrip(const Image& x, int) const { return {x, bits_per_pixel}; }
};

/// Returns a constant image of the input's size.
struct ConstantCodec {
  std::array<float, 3> color{0.5f, 0.5f, 0.5f};
  double bits_per_pixel = 1e-3;
  CodecOutput roundtrip(const Image& x, int) const {
    Image out(x.shape());
    const size_t plane = out.size() / 3;
    for (int c = 0; c < 3; ++c)
      for (size_t i = 0; i < plane; ++i) out[c * plane + i] = color[c];
    return {std::move(out), bits_per_pixel};
  }
};

struct NetClassifier {
  const ClassifierParams<float>* params;
  int label(const Image& x) const { return classify(x, *params).label; }
  int input_size() const { return params->arch.input_size; }
};

struct EvalConfig {
  int s_comp = 64;
  int s_inf = 56;
  std::vector<int> iterations{1, 2, 3, 4};
  bool skip_resize = false;  // for constant-resolution sets
  int jobs = 1;

  void validate() const {
    require(s_comp >= s_inf, "eval: S_comp must be >= S_inf");
    require(s_inf >= 1, "eval: S_inf must be positive");
    require(!iterations.empty(), "eval: iteration grid must be non-empty");
    require(jobs >= 1, "eval: jobs must be >= 1");
  }
};

/// Compression crop used for a classifier input size: 224 -> 256 and
/// 299 -> 336 at full scale, 56 -> 64 at desk scale.
inline int compression_crop_for(int s_inf) {
  switch (s_inf) {
    case 224:
      return 256;
    case 299:
      return 336;
    case 56:
      return 64;
    default:
      throw Error("eval: no crop preset for S_inf = " + std::to_string(s_inf) + " (known: 56, 224, 299)");
  }
}

inline EvalConfig eval_preset(int s_inf) {
  EvalConfig c;
  c.s_inf = s_inf;
  c.s_comp = compression_crop_for(s_inf);
  return c;
}

struct CurvePoint {
  int level = 0;
  double bpp = 0;
  double value = 0;
  size_t n = 0;
};

inline std::string curve_csv(const std::vector<CurvePoint>& pts) {
  std::ostringstream out;
  out << std::setprecision(9) << "level,bpp,metric,n\n";
  for (const auto& p : pts) out << p.level << ',' << p.bpp << ',' << p.value << ',' << p.n << '\n';
  return out.str();
}

/// Runs f(i) for i in [0, n) on up to `jobs` threads.
template <class F>
void parallel_for(size_t n, int jobs, F f) {
  if (jobs <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(jobs));
  for (int j = 0; j < jobs; ++j)
    pool.emplace_back([&, j] {
      try {
        for (size_t i = static_cast<size_t>(j); i < n; i += static_cast<size_t>(jobs)) f(i);
      } catch (...) {
        errors[static_cast<size_t>(j)] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline Image comp_crop(const Image& x, const EvalConfig& cfg) {
  const Image r = cfg.skip_resize ? x : resize_smallest_side(x, cfg.s_comp);
  return center_crop(r, cfg.s_comp, cfg.s_comp);
}

struct ImageResult {
  double bpp = 0;
  double msssim = 0;
  int label_original = -1;
  int label_decoded = -1;
  int truth = -1;
};

struct LevelSummary {
  int level = 0;
  size_t n = 0;
  double bpp = 0;
  double msssim = 0;
  double preservation = 0;
  double accuracy = 0;
};

struct LevelOptions {
  bool quality = true;
  bool classify = true;
};

/// One quality level over a labeled set.
template <ImageCodec C, ImageClassifier F>
std::vector<ImageResult> evaluate_level(const C& codec, const F* classifier, const Dataset& data, int iterations,
                                        const EvalConfig& cfg, LevelOptions what = {}) {
  cfg.validate();
  if (data.empty()) throw Error("eval: empty validation set");
  if (what.classify) {
    require(classifier != nullptr, "eval: classification requested without a classifier");
    if (classifier->input_size() != cfg.s_inf)
      throw Error("eval: classifier expects " + std::to_string(classifier->input_size()) + " px but S_inf = " +
                  std::to_string(cfg.s_inf));
  }
  std::vector<ImageResult> out(data.size());
  parallel_for(data.size(), cfg.jobs, [&](size_t i) {
    const Image x = comp_crop(data[i].image, cfg);
    CodecOutput y = codec.roundtrip(x, iterations);
    ImageResult& r = out[i];
    r.bpp = y.bpp;
    r.truth = data[i].label;
    if (what.quality) r.msssim = ms_ssim_rgb(x, y.decoded);
    if (what.classify) {
      r.label_original = classifier->label(center_crop(x, cfg.s_inf, cfg.s_inf));
      r.label_decoded = classifier->label(center_crop(y.decoded, cfg.s_inf, cfg.s_inf));
    }
  });
  return out;
}

inline LevelSummary summarize(int level, const std::vector<ImageResult>& rs) {
  LevelSummary s;
  s.level = level;
  s.n = rs.size();
  size_t kept = 0, correct = 0;
  for (const auto& r : rs) {
    s.bpp += r.bpp;
    s.msssim += r.msssim;
    kept += r.label_original == r.label_decoded;
    correct += r.label_decoded == r.truth;
  }
  const double n = static_cast<double>(rs.size());
  s.bpp /= n;
  s.msssim /= n;
  s.preservation = static_cast<double>(kept) / n;
  s.accuracy = static_cast<double>(correct) / n;
  return s;
}

/// Fraction of images whose predicted label survives compression at T
/// iterations. Images must already be at classifier resolution.
template <ImageCodec C, ImageClassifier F>
double preservation_rate(const C& codec, const F& classifier, const std::vector<Image>& images, int iterations) {
  if (images.empty()) throw Error("preservation_rate: empty image set");
  size_t kept = 0;
  for (const auto& x : images) {
    const CodecOutput y = codec.roundtrip(x, iterations);
    kept += classifier.label(x) == classifier.label(y.decoded);
  }
  return static_cast<double>(kept) / static_cast<double>(images.size());
}

struct AccuracyCurve {
  std::vector<CurvePoint> accuracy;
  std::vector<CurvePoint> preservation;
};

template <ImageCodec C, ImageClassifier F>
AccuracyCurve eval_accuracy_curve(const C& codec, const F& classifier, const Dataset& val, const EvalConfig& cfg) {
  AccuracyCurve curve;
  for (int t : cfg.iterations) {
    const LevelSummary s = summarize(t, evaluate_level(codec, &classifier, val, t, cfg, {false, true}));
    curve.accuracy.push_back({t, s.bpp, s.accuracy, s.n});
    curve.preservation.push_back({t, s.bpp, s.preservation, s.n});
  }
  return curve;
}

template <ImageCodec C>
std::vector<CurvePoint> eval_quality_curve(const C& codec, const Dataset& val, const EvalConfig& cfg) {
  std::vector<CurvePoint> pts;
  for (int t : cfg.iterations) {
    const LevelSummary s =
        summarize(t, evaluate_level<C, NetClassifier>(codec, nullptr, val, t, cfg, {true, false}));
    pts.push_back({t, s.bpp, s.msssim, s.n});
  }
  return pts;
}

struct SweepRow {
  double alpha = 0;
  int iterations = 0;
  double bpp = 0;
  double msssim = 0;
  double preservation = 0;
  double accuracy = 0;
};

struct SweepTable {
  std::vector<SweepRow> rows;
  std::vector<std::string> missing;  // alphas whose checkpoint was unavailable
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(9) << "alpha,iters,bpp,msssim,preservation,accuracy\n";
  for (const auto& r : rows)
    out << r.alpha << ',' << r.iterations << ',' << r.bpp << ',' << r.msssim << ',' << r.preservation << ','
        << r.accuracy << '\n';
  return out.str();
}

/// Cross product of alpha checkpoints and iteration counts. A null entry marks
/// a missing checkpoint: it is reported and its rows are skipped.
inline SweepTable tradeoff_sweep(const std::map<double, const CodecParams<float>*>& checkpoints,
                                 const ClassifierParams<float>& classifier, const Dataset& val,
                                 const EvalConfig& cfg) {
  if (checkpoints.size() < 2) throw Error("sweep: need at least 2 alpha checkpoints");
  SweepTable table;
  const NetClassifier f{&classifier};
  for (const auto& [alpha, params] : checkpoints) {
    if (!params) {
      std::ostringstream a;
      a << alpha;
      table.missing.push_back(a.str());
      continue;
    }
    const LearnedCodec codec{params};
    for (int t : cfg.iterations) {
      const LevelSummary s = summarize(t, evaluate_level(codec, &f, val, t, cfg));
      table.rows.push_back({alpha, t, s.bpp, s.msssim, s.preservation, s.accuracy});
    }
  }
  return table;
}

struct AblationRow {
  std::string layers;
  int iterations = 0;
  double preservation = 0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::map<std::string, std::vector<TrainLogRow>> logs;
};

inline std::string layer_set_name(const std::vector<std::string>& ids) {
  std::string s;
  for (size_t i = 0; i < ids.size(); ++i) s += (i ? "+" : "") + ids[i];
  return s;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << std::setprecision(9) << "layers,iters,preservation\n";
  for (const auto& r : rows) out << r.layers << ',' << r.iterations << ',' << r.preservation << '\n';
  return out.str();
}

/// Layer sets compared by default: first only, last only, first + last, all.
inline std::vector<std::vector<std::string>> default_layer_sets(const ClassifierArch& arch) {
  const auto all = arch.layer_ids();
  const std::string first = "1.1", last = std::to_string(arch.blocks()) + ".1";
  return {{first}, {last}, {first, last}, all};
}

/// Trains one alpha = 1 codec per layer set from scratch and measures
/// preservation with `classifier` at each iteration count.
inline AblationResult ablate_layers(const std::vector<std::vector<std::string>>& layer_sets, const Dataset& train,
                                    const Dataset& val, const LossConfig& base, const TrainConfig& tc,
                                    const ClassifierParams<float>& lossnet, const ClassifierParams<float>& classifier,
                                    const EvalConfig& cfg) {
  require(!layer_sets.empty(), "ablate: no layer sets given");
  for (const auto& set : layer_sets) {
    require(!set.empty(), "ablate: empty layer set");
    for (const auto& id : set) lossnet.arch.parse_layer(id);
  }
  AblationResult out;
  const NetClassifier f{&classifier};
  for (const auto& set : layer_sets) {
    LossConfig lc = base;
    lc.alpha = 1.0;
    lc.layer_ids = set;
    TrainResult tr = train_codec(train, lc, tc, &lossnet);
    const std::string name = layer_set_name(set);
    out.logs[name] = tr.log;
    const LearnedCodec codec{&tr.params};
    for (int t : cfg.iterations) {
      const LevelSummary s = summarize(t, evaluate_level(codec, &f, val, t, cfg, {false, true}));
      out.rows.push_back({name, t, s.preservation});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Run manifest

inline uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>(s.data()), s.size()));
}

inline std::string hex64(uint64_t v) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << v;
  return o.str();
}

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  std::string config;  // canonical text of all settings
  std::optional<uint64_t> seed;
  std::vector<std::pair<std::string, std::string>> inputs;  // (name, digest)
  std::string started = utc_timestamp();
  std::string finished;

  void add_input(const std::string& name, std::span<const uint8_t> bytes) {
    inputs.emplace_back(name, hex64(fnv1a64(bytes)));
  }

  std::string text() const {
    std::ostringstream o;
    o << "command = " << command << '\n';
    o << "tool_version = " << kToolVersion << '\n';
    o << "config_digest = " << hex64(fnv1a64(config)) << '\n';
    if (seed) o << "seed = " << *seed << '\n';
    for (const auto& [n, d] : inputs) o << "input." << n << " = " << d << '\n';
    o << "started = " << started << '\n';
    o << "finished = " << (finished.empty() ? utc_timestamp() : finished) << '\n';
    std::istringstream cfg(config);
    std::string line;
    while (std::getline(cfg, line))
      if (!line.empty()) o << "config." << line << '\n';
    return o.str();
  }
};

}  // namespace odlc

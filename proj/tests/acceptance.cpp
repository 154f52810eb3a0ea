// Acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails.
//
// Trained models and training logs are cached under --workdir in a directory
// named after a digest of every training setting and of the library sources,
// so a cold run trains everything (about an hour on one core) and later runs
// only evaluate.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>

#include <odlc/checkpoint.hpp>
#include <odlc/eval.hpp>
#include <odlc/gradient_suite.hpp>

#include "test_util.hpp"

#ifndef ODLC_SOURCE_DIGEST
#define ODLC_SOURCE_DIGEST "unknown"
#endif

namespace fs = std::filesystem;
using namespace odlc;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& s) {
  std::printf("  .. %s\n", s.c_str());
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// Desk-scale experiment settings

constexpr uint64_t kDataSeed = 2024;
constexpr size_t kTrainImages = 2000;
constexpr size_t kValImages = 200;
constexpr uint64_t kLossNetSeed = 101;
constexpr uint64_t kEvalClassifierSeed = 202;
constexpr uint64_t kCodecSeed = 7;
constexpr int kComparisonT = 2;
const std::vector<double> kAlphas{0.0, 0.5, 1.0};

Dataset train_set() {
  return make_dataset({DatasetSpec::Source::procedural, Split::train, kTrainImages, kDataSeed, {64, 10}});
}
Dataset val_set() {
  return make_dataset({DatasetSpec::Source::procedural, Split::val, kValImages, kDataSeed, {64, 10}});
}

ClassifierTrainConfig classifier_config() { return {}; }

TrainConfig codec_train_config() {
  TrainConfig tc;
  tc.seed = kCodecSeed;
  return tc;
}

LossConfig codec_loss(double alpha) {
  LossConfig lc;
  lc.alpha = alpha;
  return lc;
}

// Overfit run: ten images, fixed center crop, batch of one.
constexpr long kOverfitSteps = 2000;
TrainConfig overfit_config() {
  TrainConfig tc;
  tc.seed = 1;
  tc.batch_size = 1;
  tc.crop_size = 32;
  tc.augment = false;
  tc.epochs = 1000;
  tc.max_steps = kOverfitSteps;
  return tc;
}
Dataset overfit_set() { return make_dataset({DatasetSpec::Source::procedural, Split::train, 10, 7, {64, 10}}); }

std::string settings_text() {
  std::ostringstream o;
  const auto tc = codec_train_config();
  const auto cc = classifier_config();
  const auto oc = overfit_config();
  o << "source=" << ODLC_SOURCE_DIGEST << "\ndata_seed=" << kDataSeed << "\ntrain=" << kTrainImages
    << "\nlossnet_seed=" << kLossNetSeed << "\nclassifier_seed=" << kEvalClassifierSeed << "\nclassifier_epochs="
    << cc.epochs << "\nclassifier_batch=" << cc.batch_size << "\nclassifier_lr=" << cc.learning_rate
    << "\ncodec_seed=" << tc.seed << "\ncodec_epochs=" << tc.epochs << "\ncodec_batch=" << tc.batch_size
    << "\ncodec_T=" << tc.unroll_steps << "\ncodec_lr=" << tc.learning_rate << "\ncodec_crop=" << tc.crop_size
    << "\nlayers=" << layer_set_name(codec_loss(1).layer_ids) << "\noverfit_steps=" << oc.max_steps
    << "\noverfit_crop=" << oc.crop_size << '\n';
  return o.str();
}

// ---------------------------------------------------------------------------
// Cached artifacts

class Workdir {
 public:
  explicit Workdir(const fs::path& root) : dir_(root / hex64(fnv1a64(settings_text()))) {
    fs::create_directories(dir_);
    std::ofstream(dir_ / "settings.txt") << settings_text();
  }

  const ClassifierParams<float>& classifier(const std::string& name, uint64_t seed, const Dataset& train) {
    auto it = classifiers_.find(name);
    if (it != classifiers_.end()) return it->second;
    const fs::path path = dir_ / (name + ".ckpt");
    if (!fs::exists(path)) {
      progress("training " + name + " (seed " + std::to_string(seed) + ")");
      const auto res = train_classifier(train, classifier_config(), seed);
      save_classifier(path.string(), res.params);
      std::ofstream log(dir_ / (name + "_loss.txt"));
      for (double l : res.log.step_loss) log << l << '\n';
    }
    return classifiers_.emplace(name, load_classifier(path.string())).first->second;
  }

  const CodecParams<float>& codec(double alpha, const Dataset& train, const ClassifierParams<float>& lossnet) {
    auto it = codecs_.find(alpha);
    if (it != codecs_.end()) return it->second;
    const std::string name = fmt("codec_alpha_%g", alpha);
    const fs::path path = dir_ / (name + ".ckpt");
    if (!fs::exists(path)) {
      progress("training " + name);
      TrainHooks hooks;
      hooks.on_step = [&](const TrainLogRow& r) {
        if (r.step % 250 == 0) progress(fmt("%s step %ld loss %.4g (%.0f s)", name.c_str(), r.step, r.loss, r.wall_time));
      };
      const auto res = train_codec(train, codec_loss(alpha), codec_train_config(), &lossnet, hooks);
      save_codec(path.string(), res.params);
      std::ofstream(dir_ / (name + "_log.csv")) << train_log_csv(res.log);
    }
    return codecs_.emplace(alpha, load_codec(path.string())).first->second;
  }

  // Loss trajectory of an overfit run, stored exactly as hexadecimal floats.
  std::vector<double> overfit_log(double alpha, const ClassifierParams<float>* lossnet) {
    const fs::path path = dir_ / fmt("overfit_alpha_%g.txt", alpha);
    if (!fs::exists(path)) {
      progress(fmt("overfitting at alpha = %g", alpha));
      const auto res = train_codec(overfit_set(), codec_loss(alpha), overfit_config(), lossnet);
      std::ofstream out(path);
      for (const auto& r : res.log) out << fmt("%a", r.loss) << '\n';
    }
    std::vector<double> losses;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) losses.push_back(std::strtod(line.c_str(), nullptr));
    return losses;
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::map<std::string, ClassifierParams<float>> classifiers_;
  std::map<double, CodecParams<float>> codecs_;
};

// Remembers every round trip so that several classifiers can score the same
// decoded images.
class MemoCodec {
 public:
  explicit MemoCodec(const CodecParams<float>* p) : inner_{p} {}
  CodecOutput roundtrip(const Image& x, int t) const {
    const auto key = std::pair{t, fnv1a64(std::span(reinterpret_cast<const uint8_t*>(x.data().data()),
                                                    x.size() * sizeof(float)))};
    {
      std::lock_guard lock(mu_);
      if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    }
    CodecOutput y = inner_.roundtrip(x, t);
    std::lock_guard lock(mu_);
    return memo_.emplace(key, std::move(y)).first->second;
  }

 private:
  LearnedCodec inner_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<int, uint64_t>, CodecOutput> memo_;
};

// ---------------------------------------------------------------------------
// Criteria

Outcome gradient_suite() {
  const auto f = run_gradient_suite<float>();
  const auto d = run_gradient_suite<double>();
  const double secs = f.seconds + d.seconds;
  if (!f.passed()) std::fputs(format_suite(f).c_str(), stdout);
  if (!d.passed()) std::fputs(format_suite(d).c_str(), stdout);
  return {f.passed() && d.passed() && secs < 120.0,
          fmt("%zu suites; worst rel. error f32 %.2e (< 1e-3), f64 %.2e (< 1e-5); %.1f s", f.ops.size(), f.worst(),
              d.worst(), secs)};
}

Outcome msssim_oracle() {
  Rng rng(77);
  double worst = 0, worst_identity = 0;
  bool symmetric = true;
  for (int i = 0; i < 50; ++i) {
    const int h = 24 + static_cast<int>(rng.below(73)), w = 24 + static_cast<int>(rng.below(73));
    auto [x, y] = testing::correlated_pair(h, w, rng.uniform(0.02, 0.5), rng);
    const auto cfg = fit_scales(MsSsimConfig{}, h, w);
    Tape<double> tape(false);
    const double got = ms_ssim(tape.constant(x), tape.constant(y), cfg).value()[0];
    const double back = ms_ssim(tape.constant(y), tape.constant(x), cfg).value()[0];
    const double self = ms_ssim(tape.constant(x), tape.constant(x), cfg).value()[0];
    const double want = testing::oracle_ms_ssim(testing::plane_of(x), testing::plane_of(y), cfg.weights);
    worst = std::max(worst, std::abs(got - want));
    worst_identity = std::max(worst_identity, std::abs(self - 1.0));
    symmetric = symmetric && got == back;
  }
  return {worst < 1e-5 && worst_identity <= 1e-6 && symmetric,
          fmt("50 pairs: max |lib - oracle| %.2e; max |ms_ssim(x,x) - 1| %.2e; symmetry %s", worst, worst_identity,
              symmetric ? "exact" : "BROKEN")};
}

Outcome distortion_oracles() {
  Rng rng(78);
  ClassifierArch arch;
  arch.widths = {4, 6, 8};
  arch.convs_per_block = 2;
  arch.num_classes = 3;
  arch.input_size = 20;
  arch.norm = {{0.45f, 0.5f, 0.55f}, {0.2f, 0.25f, 0.3f}};
  auto net = ClassifierParams<double>::init(arch, rng);
  for (size_t i = 0; i < net.params.size(); ++i)
    if (net.params[i].name.ends_with(".b"))
      for (auto& v : net.params[i].value.data()) v = rng.uniform(-0.2, 0.2);
  const std::vector<std::string> layers{"1.1", "2.2", "3.1"};
  double feat_err = 0, affine_err = 0;
  bool endpoints = true;
  for (int trial = 0; trial < 10; ++trial) {
    const auto x = testing::random_tensor<double>({3, 20, 20}, rng, 0, 1);
    const auto y = testing::random_tensor<double>({3, 20, 20}, rng, 0, 1);
    const auto fx = testing::feature_taps_oracle(x, net), fy = testing::feature_taps_oracle(y, net);
    double want = 0;
    for (const auto& id : layers) {
      double s = 0;
      for (size_t i = 0; i < fx.at(id).size(); ++i) s += std::pow(fx.at(id)[i] - fy.at(id)[i], 2);
      want += s / static_cast<double>(fx.at(id).size());
    }
    Tape<double> tape(false);
    const auto xv = tape.constant(x), yv = tape.constant(y);
    const double dc = feature_distortion(xv, yv, net, layers).value()[0];
    const double dh = human_distortion(xv, yv, fit_scales(MsSsimConfig{}, 20, 20)).value()[0];
    feat_err = std::max(feat_err, std::abs(dc - want));
    auto d = [&](double a) {
      LossConfig lc = codec_loss(a);
      lc.layer_ids = layers;
      return observer_distortion(xv, yv, lc, &net).value.value()[0];
    };
    const double d0 = d(0.0), d1 = d(1.0);
    endpoints = endpoints && d0 == LossConfig{}.lambda_h * dh && d1 == dc;
    for (double a : {0.25, 0.5, 0.75}) affine_err = std::max(affine_err, std::abs(d(a) - ((1 - a) * d0 + a * d1)));
  }
  return {feat_err < 1e-6 && endpoints && affine_err < 1e-6,
          fmt("feature vs nested loops %.2e; endpoints %s; affinity error %.2e", feat_err,
              endpoints ? "exact" : "INEXACT", affine_err)};
}

Outcome bit_count_law() {
  CodecConfig cfg;
  cfg.max_iterations = 8;
  Rng rng(79);
  const auto p = CodecParams<float>::init(cfg, rng);
  int cases = 0;
  bool ok = true;
  for (int h : {16, 23, 48})
    for (int w : {16, 40, 65})
      for (int t : {1, 3}) {
        const Image x = testing::random_tensor<float>({3, h, w}, rng, 0, 1);
        const auto tr = reconstruct_progressive(x, t, p, QuantMode::deterministic);
        uint64_t bits = 0;
        for (const auto& b : tr.bits) bits += b.size();
        const uint64_t law = static_cast<uint64_t>(t) * 32 * ((h + 15) / 16) * ((w + 15) / 16);
        const auto stream = compress(x, t, p);
        ok = ok && bits == law && stream.header.payload_bits() == law && stream.payload.size() == (law + 7) / 8;
        ++cases;
      }
  const Image big = testing::random_tensor<float>({3, 224, 224}, rng, 0, 1);
  const auto full = compress(big, 8, p);
  const double bpp8 = full.bpp(), bpp1 = truncate_iterations(full, 1).bpp();
  return {ok && bpp8 == 1.0 && bpp1 == 0.125,
          fmt("%d (H,W,T) cases match T*32*ceil(H/16)*ceil(W/16); 224x224: T=8 %.4g bpp, T=1 %.4g bpp", cases, bpp8,
              bpp1)};
}

Outcome quantizer_statistics() {
  Rng rng(80);
  int within = 0, total = 0;
  double worst_ratio = 0;
  for (int k = -9; k <= 9; ++k) {
    const double z = k / 10.0;
    const Tensor<double> zs({10000}, z);
    const auto b = binarize(zs, QuantMode::stochastic, &rng);
    double mean = 0;
    for (double v : b.data()) mean += v;
    mean /= 1e4;
    const double bound = 3.0 / std::sqrt(1e4) * std::sqrt(1 - z * z);
    worst_ratio = std::max(worst_ratio, std::abs(mean - z) / bound);
    within += std::abs(mean - z) <= bound;
    ++total;
  }
  return {within == total, fmt("%d/%d levels within 3 sigma / sqrt(1e4); worst |mean - z| = %.2f of bound", within,
                               total, worst_ratio)};
}

Outcome roundtrip(const CodecParams<float>& p, const Dataset& val) {
  bool identical = true, truncation = true;
  const int tmax = p.config.max_iterations;
  for (size_t i = 0; i < 8; ++i) {
    const Image& x = val[i].image;
    const auto a = serialize(compress(x, tmax, p)), b = serialize(compress(x, tmax, p));
    const Image da = decompress(a, p), db = decompress(b, p);
    identical = identical && a == b && da == db;
    const auto tr = reconstruct_progressive(x, tmax, p, QuantMode::deterministic);
    const Bitstream full = parse_bitstream(a);
    for (int t = 1; t <= tmax; ++t)
      truncation = truncation && decompress(serialize(truncate_iterations(full, t)), p) ==
                                     codec_output(tr.reconstructions[t - 1], p.config, x.dim(1), x.dim(2));
  }
  return {identical && truncation, fmt("trained alpha=0 codec, 8 held-out images, T=1..%d: repeat runs %s, "
                                       "truncated decodes %s the trace",
                                       tmax, identical ? "bit-identical" : "DIFFER", truncation ? "equal" : "DIFFER from")};
}

Outcome overfit(Workdir& wd, const ClassifierParams<float>& lossnet) {
  std::string detail;
  bool ok = true;
  for (double alpha : {0.0, 1.0}) {
    const auto* net = alpha > 0 ? &lossnet : nullptr;
    const auto log = wd.overfit_log(alpha, net);
    if (log.size() < 60) return {false, "overfit log too short"};
    double first = 0, last = 0;
    for (size_t i = 0; i < 10; ++i) first += log[i] / 10;
    for (size_t i = log.size() - 50; i < log.size(); ++i) last += log[i] / 50;
    const double reduction = 1.0 - last / first;
    // A fresh short run with the same seed must retrace the stored trajectory.
    auto tc = overfit_config();
    tc.max_steps = 20;
    const auto again = train_codec(overfit_set(), codec_loss(alpha), tc, net);
    bool same = true;
    for (size_t i = 0; i < again.log.size(); ++i) same = same && again.log[i].loss == log[i];
    ok = ok && reduction >= 0.9 && same && static_cast<long>(log.size()) <= kOverfitSteps;
    detail += fmt("%salpha=%g: loss %.4g -> %.4g (%.1f%% reduction in %zu steps, %s)", detail.empty() ? "" : "; ",
                  alpha, first, last, 100 * reduction, log.size(), same ? "reproducible" : "NOT reproducible");
  }
  return {ok, detail};
}

struct ModelScores {
  std::map<int, LevelSummary> loss_net;  // MS-SSIM and preservation under the loss network
  std::map<int, LevelSummary> other;     // preservation under the seed-disjoint classifier
};

ModelScores score(const CodecParams<float>& p, const Dataset& val, const ClassifierParams<float>& f_l,
                  const ClassifierParams<float>& f) {
  const MemoCodec codec(&p);
  const NetClassifier a{&f_l}, b{&f};
  EvalConfig cfg = eval_preset(56);
  ModelScores s;
  for (int t = 1; t <= p.config.max_iterations; ++t) {
    s.loss_net[t] = summarize(t, evaluate_level(codec, &a, val, t, cfg));
    s.other[t] = summarize(t, evaluate_level(codec, &b, val, t, cfg, {false, true}));
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"odlc acceptance run"};
  std::string workdir = "acceptance_work";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Directory for cached models and logs");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  auto wanted = [&](int c) { return only.empty() || std::find(only.begin(), only.end(), c) != only.end(); };

  std::map<int, Outcome> results;
  auto report = [&](int c, const std::string& title, Outcome o) {
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", c, title.c_str(), o.detail.c_str());
    std::fflush(stdout);
    results[c] = std::move(o);
  };
  auto guarded = [&](int c, const std::string& title, auto&& run) {
    if (!wanted(c)) return;
    try {
      report(c, title, run());
    } catch (const std::exception& e) {
      report(c, title, {false, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "gradient suite", gradient_suite);
  guarded(2, "MS-SSIM oracle", msssim_oracle);
  guarded(3, "feature and observer distortion oracles", distortion_oracles);
  guarded(4, "bit-count law", bit_count_law);
  guarded(5, "quantizer statistics", quantizer_statistics);

  const bool need_models = wanted(6) || wanted(7) || wanted(8) || wanted(9) || wanted(10);
  if (need_models) {
    Workdir wd(workdir);
    progress("model cache: " + wd.dir().string());
    const Dataset train = train_set(), val = val_set();
    const auto& f_l = wd.classifier("lossnet", kLossNetSeed, train);
    const auto& f = wd.classifier("classifier", kEvalClassifierSeed, train);
    const double acc_l = classifier_accuracy(val, f_l, 64), acc_f = classifier_accuracy(val, f, 64);
    std::printf("%s classifiers: held-out accuracy loss network %.3f, evaluation classifier %.3f (>= 0.60)\n",
                acc_l >= 0.6 && acc_f >= 0.6 ? "PASS" : "FAIL", acc_l, acc_f);
    const bool classifiers_ok = acc_l >= 0.6 && acc_f >= 0.6;

    std::map<double, ModelScores> scores;
    if (wanted(6) || wanted(8) || wanted(9) || wanted(10)) {
      for (double a : kAlphas) {
        if (a != 0.0 && !(wanted(8) || wanted(9))) continue;
        const auto& p = wd.codec(a, train, f_l);
        if (wanted(8) || wanted(9) || wanted(10)) {
          progress(fmt("evaluating alpha = %g on %zu held-out images", a, val.size()));
          scores[a] = score(p, val, f_l, f);
        }
      }
      if (!scores.empty()) {
        std::printf("  alpha  T    bpp  MS-SSIM  pres(f_L)  pres(f)  acc(f)\n");
        for (const auto& [a, s] : scores)
          for (const auto& [t, l] : s.loss_net)
            std::printf("  %5.2f  %d  %5.3f  %7.4f  %9.3f  %7.3f  %6.3f\n", a, t, l.bpp, l.msssim, l.preservation,
                        s.other.at(t).preservation, s.other.at(t).accuracy);
      }
    }
    guarded(6, "round trip and truncation", [&] { return roundtrip(wd.codec(0.0, train, f_l), val); });
    guarded(7, "overfit", [&] { return overfit(wd, f_l); });
    const int t = kComparisonT;
    guarded(8, "trade-off direction", [&] {
      const auto& s0 = scores.at(0.0).loss_net.at(t);
      const auto& sh = scores.at(0.5).loss_net.at(t);
      const auto& s1 = scores.at(1.0).loss_net.at(t);
      auto between = [](double lo, double mid, double hi) { return std::min(lo, hi) <= mid && mid <= std::max(lo, hi); };
      const bool quality = s0.msssim > s1.msssim, preserved = s1.preservation > s0.preservation;
      const bool middle = between(s0.msssim, sh.msssim, s1.msssim) || between(s0.preservation, sh.preservation, s1.preservation);
      return Outcome{quality && preserved && middle,
                     fmt("T=%d: MS-SSIM %.4f / %.4f / %.4f, preservation under f_L %.3f / %.3f / %.3f "
                         "(alpha 0 / 0.5 / 1)",
                         t, s0.msssim, sh.msssim, s1.msssim, s0.preservation, sh.preservation, s1.preservation)};
    });
    guarded(9, "seed-disjoint classifier", [&] {
      const double p0 = scores.at(0.0).other.at(t).preservation, p1 = scores.at(1.0).other.at(t).preservation;
      return Outcome{p1 > p0, fmt("T=%d: preservation under f %.3f (alpha 1) vs %.3f (alpha 0)", t, p1, p0)};
    });
    guarded(10, "rate monotonicity", [&] {
      const auto& s = scores.at(0.0).loss_net;
      bool mono = true;
      std::string seq;
      double prev = -1;
      for (const auto& [lvl, l] : s) {
        mono = mono && l.msssim >= prev;
        prev = l.msssim;
        seq += fmt("%s%.4f", seq.empty() ? "" : ", ", l.msssim);
      }
      return Outcome{mono, "alpha=0 held-out MS-SSIM for T=1.." + std::to_string(s.size()) + ": " + seq};
    });
    if (!classifiers_ok) results[0] = {false, "classifier accuracy"};
  }

  const bool all = std::all_of(results.begin(), results.end(), [](const auto& r) { return r.second.pass; });
  std::printf("%s: %zu checks, %zu failed\n", all ? "ACCEPTED" : "NOT ACCEPTED", results.size(),
              static_cast<size_t>(std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second.pass; })));
  return all ? 0 : 1;
}

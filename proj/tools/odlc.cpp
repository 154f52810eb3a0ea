// odlc command-line tool.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "odlc/checkpoint.hpp"
#include "odlc/eval.hpp"
#include "odlc/gradient_suite.hpp"

namespace fs = std::filesystem;
using namespace odlc;

namespace {

struct DataOptions {
  std::string dir;
  std::string labels = "labels.txt";
  size_t size = 0;
  uint64_t data_seed = 1;
  int resolution = 64;
  int classes = 10;

  void attach(CLI::App* app, const std::string& prefix, const std::string& what, size_t default_size) {
    size = default_size;
    app->add_option("--" + prefix + "dir", dir, what + " image directory (PPM files + labels file)");
    app->add_option("--" + prefix + "labels", labels, "labels file inside the directory")->capture_default_str();
    app->add_option("--" + prefix + "size", size, what + " size (procedural set, or a cap for directories)")
        ->capture_default_str();
    if (prefix.empty() || prefix == "train-") {
      app->add_option("--data-seed", data_seed, "seed of the procedural shapes generator")->capture_default_str();
      app->add_option("--resolution", resolution, "procedural image side")->capture_default_str();
      app->add_option("--classes", classes, "procedural class count")->capture_default_str();
    }
  }

  Dataset load(Split split, const DataOptions& shared) const {
    DatasetSpec spec;
    spec.split = split;
    spec.size = size;
    spec.seed = shared.data_seed;
    spec.shapes = {shared.resolution, shared.classes};
    if (!dir.empty()) {
      spec.source = DatasetSpec::Source::directory;
      spec.directory = dir;
      spec.labels_file = labels;
    }
    return make_dataset(spec);
  }

  std::string describe(Split split, const DataOptions& shared) const {
    std::ostringstream o;
    if (!dir.empty())
      o << "dir:" << dir << "/" << labels << " cap=" << size;
    else
      o << "shapes:" << split_name(split) << " n=" << size << " seed=" << shared.data_seed
        << " res=" << shared.resolution << " classes=" << shared.classes;
    return o.str();
  }
};

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) out.push_back(std::stoi(tok));
  if (out.empty()) throw Error("empty integer list '" + s + "'");
  return out;
}

std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) out.push_back(std::stod(tok));
  if (out.empty()) throw Error("empty number list '" + s + "'");
  return out;
}

std::vector<std::string> parse_layers(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ','))
    if (!tok.empty()) out.push_back(tok);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  write_file(path, std::vector<uint8_t>(text.begin(), text.end()));
}

void write_manifest(const std::string& out_path, RunManifest& m) {
  m.finished = utc_timestamp();
  const std::string path = (out_path.empty() || out_path == "-") ? "" : out_path + ".manifest";
  if (!path.empty()) write_text(path, m.text());
}

void add_file_input(RunManifest& m, const std::string& name, const std::string& path) {
  m.add_input(name, read_file(path));
}

std::string alpha_tag(double a) {
  std::ostringstream o;
  o << a;
  return o.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"odlc: observer-dependent learned image codec"};
  app.require_subcommand(1);

  // gen-data ---------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "write the procedural shapes dataset to disk");
  std::string gen_out, gen_split = "train";
  size_t gen_count = 100;
  uint64_t gen_seed = 0;
  int gen_res = 64, gen_classes = 10;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--count", gen_count, "number of images")->capture_default_str();
  gen->add_option("--split", gen_split, "train or val")->check(CLI::IsMember({"train", "val"}))->capture_default_str();
  gen->add_option("--seed", gen_seed, "generator seed")->required();
  gen->add_option("--resolution", gen_res)->capture_default_str();
  gen->add_option("--classes", gen_classes)->capture_default_str();

  // train-classifier -------------------------------------------------------
  auto* tcls = app.add_subcommand("train-classifier", "train the loss network or an evaluation classifier");
  std::string tcls_out, tcls_log;
  uint64_t tcls_seed = 0;
  DataOptions tcls_data;
  ClassifierTrainConfig tcls_cfg;
  tcls->add_option("--out", tcls_out, "checkpoint path")->required();
  tcls->add_option("--seed", tcls_seed, "initialization and sampling seed")->required();
  tcls->add_option("--log", tcls_log, "per-step loss CSV");
  tcls->add_option("--epochs", tcls_cfg.epochs)->capture_default_str();
  tcls->add_option("--batch", tcls_cfg.batch_size)->capture_default_str();
  tcls->add_option("--lr", tcls_cfg.learning_rate)->capture_default_str();
  tcls->add_option("--max-steps", tcls_cfg.max_steps)->capture_default_str();
  tcls->add_option("--crop", tcls_cfg.preprocess.crop, "classifier input size")->capture_default_str();
  tcls->add_option("--resize", tcls_cfg.preprocess.resize_side)->capture_default_str();
  tcls_data.attach(tcls, "", "training", 2000);

  // train-codec ------------------------------------------------------------
  auto* tcod = app.add_subcommand("train-codec", "train a codec under the observer distortion");
  std::string tcod_out, tcod_log, tcod_lossnet, tcod_config, tcod_layers;
  uint64_t tcod_seed = 0;
  long tcod_ckpt_every = 0;
  DataOptions tcod_data;
  TrainConfig tcod_cfg;
  LossConfig tcod_loss;
  tcod->add_option("--out", tcod_out, "checkpoint path")->required();
  tcod->add_option("--seed", tcod_seed)->required();
  tcod->add_option("--config", tcod_config, "key = value file applied before the flags below");
  tcod->add_option("--alpha", tcod_loss.alpha, "0 = human loss, 1 = feature loss")->capture_default_str();
  tcod->add_option("--lambda-h", tcod_loss.lambda_h)->capture_default_str();
  tcod->add_option("--layers", tcod_layers, "loss-network layers, e.g. 1.1,5.1");
  tcod->add_option("--lossnet", tcod_lossnet, "loss-network checkpoint (needed when alpha > 0)");
  tcod->add_option("--iters", tcod_cfg.unroll_steps, "unrolling steps T")->capture_default_str();
  tcod->add_option("--epochs", tcod_cfg.epochs)->capture_default_str();
  tcod->add_option("--batch", tcod_cfg.batch_size)->capture_default_str();
  tcod->add_option("--lr", tcod_cfg.learning_rate)->capture_default_str();
  tcod->add_option("--max-steps", tcod_cfg.max_steps)->capture_default_str();
  tcod->add_option("--crop", tcod_cfg.crop_size)->capture_default_str();
  tcod->add_option("--resize", tcod_cfg.resize_side)->capture_default_str();
  tcod->add_option("--log", tcod_log, "training log CSV");
  tcod->add_option("--checkpoint-every", tcod_ckpt_every, "write the checkpoint every N steps");
  tcod_data.attach(tcod, "", "training", 2000);

  // compress / decompress --------------------------------------------------
  auto* comp = app.add_subcommand("compress", "encode a P6 image");
  std::string comp_in, comp_out, comp_model;
  int comp_iters = 1;
  comp->add_option("--in", comp_in)->required();
  comp->add_option("--out", comp_out)->required();
  comp->add_option("--model", comp_model)->required();
  comp->add_option("--iters", comp_iters)->required();

  auto* decomp = app.add_subcommand("decompress", "decode a stream to P6");
  std::string dec_in, dec_out, dec_model;
  int dec_iters = 0;
  decomp->add_option("--in", dec_in)->required();
  decomp->add_option("--out", dec_out)->required();
  decomp->add_option("--model", dec_model)->required();
  decomp->add_option("--iters", dec_iters, "decode only the first N iterations");

  // eval-quality / eval-accuracy -------------------------------------------
  EvalConfig ev;
  std::string ev_iters = "1,2,3,4";
  auto add_eval_opts = [&](CLI::App* a) {
    a->add_option("--iters", ev_iters, "comma-separated iteration grid")->capture_default_str();
    a->add_option("--s-comp", ev.s_comp, "compression crop")->capture_default_str();
    a->add_option("--s-inf", ev.s_inf, "classifier crop")->capture_default_str();
    a->add_flag("--skip-resize", ev.skip_resize, "constant-resolution set: only center-crop");
    a->add_option("--jobs", ev.jobs, "parallel images")->capture_default_str();
  };
  auto* evq = app.add_subcommand("eval-quality", "rate vs MS-SSIM curve");
  std::string evq_model, evq_out;
  DataOptions evq_data;
  evq->add_option("--model", evq_model)->required();
  evq->add_option("--out", evq_out, "curve CSV (default stdout)");
  add_eval_opts(evq);
  evq_data.attach(evq, "", "validation", 200);

  auto* eva = app.add_subcommand("eval-accuracy", "rate vs accuracy and preservation curves");
  std::string eva_model, eva_cls, eva_out, eva_pres_out;
  DataOptions eva_data;
  eva->add_option("--model", eva_model)->required();
  eva->add_option("--classifier", eva_cls)->required();
  eva->add_option("--out", eva_out, "accuracy curve CSV (default stdout)");
  eva->add_option("--preservation-out", eva_pres_out, "preservation curve CSV");
  add_eval_opts(eva);
  eva_data.attach(eva, "", "validation", 200);

  // sweep ------------------------------------------------------------------
  auto* sweep = app.add_subcommand("sweep", "alpha trade-off table (trains missing models with --train)");
  std::string sw_alphas = "0,0.25,0.5,0.75,1", sw_models, sw_cls, sw_lossnet, sw_out;
  uint64_t sw_seed = 0;
  bool sw_train = false;
  DataOptions sw_train_data, sw_val_data;
  TrainConfig sw_cfg;
  sweep->add_option("--alphas", sw_alphas)->capture_default_str();
  sweep->add_option("--models", sw_models, "directory of codec_alpha_<a>.ckpt files")->required();
  sweep->add_option("--classifier", sw_cls)->required();
  sweep->add_option("--lossnet", sw_lossnet, "loss network for training");
  sweep->add_option("--seed", sw_seed)->required();
  sweep->add_flag("--train", sw_train, "train models that are missing");
  sweep->add_option("--epochs", sw_cfg.epochs)->capture_default_str();
  sweep->add_option("--max-steps", sw_cfg.max_steps)->capture_default_str();
  sweep->add_option("--train-iters", sw_cfg.unroll_steps)->capture_default_str();
  sweep->add_option("--out", sw_out, "sweep CSV (default stdout)");
  add_eval_opts(sweep);
  sw_train_data.attach(sweep, "train-", "training", 2000);
  sw_val_data.attach(sweep, "val-", "validation", 200);

  // ablate-layers ----------------------------------------------------------
  auto* abl = app.add_subcommand("ablate-layers", "train alpha = 1 codecs per loss-layer set");
  std::string ab_sets, ab_cls, ab_lossnet, ab_out;
  uint64_t ab_seed = 0;
  DataOptions ab_train_data, ab_val_data;
  TrainConfig ab_cfg;
  abl->add_option("--layer-sets", ab_sets, "';'-separated sets, e.g. '1.1;5.1;1.1,5.1;all' (default)");
  abl->add_option("--classifier", ab_cls)->required();
  abl->add_option("--lossnet", ab_lossnet)->required();
  abl->add_option("--seed", ab_seed)->required();
  abl->add_option("--epochs", ab_cfg.epochs)->capture_default_str();
  abl->add_option("--max-steps", ab_cfg.max_steps)->capture_default_str();
  abl->add_option("--train-iters", ab_cfg.unroll_steps)->capture_default_str();
  abl->add_option("--out", ab_out, "ablation CSV (default stdout)");
  add_eval_opts(abl);
  ab_train_data.attach(abl, "train-", "training", 2000);
  ab_val_data.attach(abl, "val-", "validation", 200);

  // gradcheck --------------------------------------------------------------
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  std::string gc_dtype = "both";
  int gc_instances = 20;
  uint64_t gc_seed = 1;
  gc->add_option("--dtype", gc_dtype)->check(CLI::IsMember({"f32", "f64", "both"}))->capture_default_str();
  gc->add_option("--instances", gc_instances, "random instances per op")->capture_default_str();
  gc->add_option("--seed", gc_seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) {
      fs::create_directories(gen_out);
      DatasetSpec spec;
      spec.split = gen_split == "train" ? Split::train : Split::val;
      spec.size = gen_count;
      spec.seed = gen_seed;
      spec.shapes = {gen_res, gen_classes};
      const Dataset d = make_dataset(spec);
      std::ostringstream labels;
      RunManifest m;
      m.command = "gen-data";
      m.seed = gen_seed;
      m.config = "split=" + gen_split + "\ncount=" + std::to_string(gen_count) + "\nresolution=" +
                 std::to_string(gen_res) + "\nclasses=" + std::to_string(gen_classes) + "\n";
      for (size_t i = 0; i < d.size(); ++i) {
        std::ostringstream name;
        name << gen_split << "_" << std::setw(6) << std::setfill('0') << i << ".ppm";
        const auto bytes = encode_ppm(d[i].image);
        write_file((fs::path(gen_out) / name.str()).string(), bytes);
        labels << name.str() << ' ' << d[i].label << '\n';
      }
      write_text((fs::path(gen_out) / "labels.txt").string(), labels.str());
      m.add_input("labels", read_file((fs::path(gen_out) / "labels.txt").string()));
      m.finished = utc_timestamp();
      write_text((fs::path(gen_out) / "manifest.txt").string(), m.text());
      std::cout << "wrote " << d.size() << " images to " << gen_out << "\n";
      return 0;
    }

    if (*tcls) {
      const Dataset data = tcls_data.load(Split::train, tcls_data);
      const auto res = train_classifier(data, tcls_cfg, tcls_seed);
      save_classifier(tcls_out, res.params);
      if (!tcls_log.empty()) {
        std::ostringstream o;
        o << "step,loss\n";
        for (size_t i = 0; i < res.log.step_loss.size(); ++i) o << i << ',' << res.log.step_loss[i] << '\n';
        write_text(tcls_log, o.str());
      }
      DatasetSpec val_spec{DatasetSpec::Source::procedural, Split::val, 200, tcls_data.data_seed,
                           {tcls_data.resolution, tcls_data.classes}};
      const double acc = tcls_data.dir.empty()
                             ? classifier_accuracy(make_dataset(val_spec), res.params, tcls_cfg.preprocess.resize_side)
                             : classifier_accuracy(data, res.params, tcls_cfg.preprocess.resize_side);
      RunManifest m;
      m.command = "train-classifier";
      m.seed = tcls_seed;
      m.config = "data=" + tcls_data.describe(Split::train, tcls_data) + "\nepochs=" +
                 std::to_string(tcls_cfg.epochs) + "\nbatch=" + std::to_string(tcls_cfg.batch_size) +
                 "\nlr=" + std::to_string(tcls_cfg.learning_rate) + "\n";
      add_file_input(m, "checkpoint", tcls_out);
      write_manifest(tcls_out, m);
      std::cout << "steps " << res.log.step_loss.size() << ", final loss " << res.log.step_loss.back()
                << ", " << (tcls_data.dir.empty() ? "held-out" : "training") << " accuracy " << acc << "\n";
      return 0;
    }

    if (*tcod) {
      if (!tcod_config.empty()) {
        const auto bytes = read_file(tcod_config);
        TrainConfig from_file;
        LossConfig loss_file = tcod_loss;
        apply_config_text(std::string(bytes.begin(), bytes.end()), from_file, loss_file);
        // Flags given explicitly win over the file.
        auto given = [&](const char* flag) { return tcod->count(flag) > 0; };
        if (!given("--iters")) tcod_cfg.unroll_steps = from_file.unroll_steps;
        if (!given("--epochs")) tcod_cfg.epochs = from_file.epochs;
        if (!given("--batch")) tcod_cfg.batch_size = from_file.batch_size;
        if (!given("--lr")) tcod_cfg.learning_rate = from_file.learning_rate;
        if (!given("--max-steps")) tcod_cfg.max_steps = from_file.max_steps;
        if (!given("--crop")) tcod_cfg.crop_size = from_file.crop_size;
        if (!given("--resize")) tcod_cfg.resize_side = from_file.resize_side;
        tcod_cfg.beta = from_file.beta;
        tcod_cfg.adam = from_file.adam;
        tcod_cfg.clip_norm = from_file.clip_norm;
        tcod_cfg.augment = from_file.augment;
        tcod_cfg.codec = from_file.codec;
        if (!given("--alpha")) tcod_loss.alpha = loss_file.alpha;
        if (!given("--lambda-h")) tcod_loss.lambda_h = loss_file.lambda_h;
        if (!given("--layers")) tcod_loss.layer_ids = loss_file.layer_ids;
        tcod_loss.msssim = loss_file.msssim;
      }
      if (!tcod_layers.empty()) tcod_loss.layer_ids = parse_layers(tcod_layers);
      tcod_cfg.seed = tcod_seed;
      std::optional<ClassifierParams<float>> lossnet;
      if (tcod_loss.alpha > 0) {
        if (tcod_lossnet.empty()) throw Error("train-codec: --lossnet is required when alpha > 0");
        lossnet = load_classifier(tcod_lossnet);
      }
      const Dataset data = tcod_data.load(Split::train, tcod_data);
      TrainHooks hooks;
      hooks.on_step = [](const TrainLogRow& r) {
        if (r.step % 50 == 0)
          std::cerr << "step " << r.step << " loss " << r.loss << " t=" << r.wall_time << "s\n";
      };
      if (tcod_ckpt_every > 0) {
        hooks.checkpoint_every = tcod_ckpt_every;
        hooks.on_checkpoint = [&](const CodecParams<float>& p, long) { save_codec(tcod_out, p); };
      }
      TrainResult res;
      try {
        res = train_codec(data, tcod_loss, tcod_cfg, lossnet ? &*lossnet : nullptr, hooks);
      } catch (const DivergenceError& e) {
        save_codec(tcod_out, e.last_good());
        std::cerr << "odlc: " << e.what() << "; last good checkpoint written to " << tcod_out << "\n";
        return 1;
      }
      save_codec(tcod_out, res.params);
      if (!tcod_log.empty()) write_text(tcod_log, train_log_csv(res.log));
      RunManifest m;
      m.command = "train-codec";
      m.seed = tcod_seed;
      std::ostringstream cfg;
      cfg << "data=" << tcod_data.describe(Split::train, tcod_data) << "\nalpha=" << tcod_loss.alpha
          << "\nlambda_h=" << tcod_loss.lambda_h << "\nlayers=" << layer_set_name(tcod_loss.layer_ids)
          << "\niterations=" << tcod_cfg.unroll_steps << "\nepochs=" << tcod_cfg.epochs
          << "\nbatch=" << tcod_cfg.batch_size << "\nlr=" << tcod_cfg.learning_rate << "\ncrop=" << tcod_cfg.crop_size
          << "\nmax_steps=" << tcod_cfg.max_steps << "\n";
      m.config = cfg.str();
      if (lossnet) add_file_input(m, "lossnet", tcod_lossnet);
      add_file_input(m, "checkpoint", tcod_out);
      write_manifest(tcod_out, m);
      std::cout << "steps " << res.log.size() << ", final loss " << res.log.back().loss << "\n";
      return 0;
    }

    if (*comp) {
      const auto model = load_codec(comp_model);
      const Image x = read_ppm(comp_in);
      const Bitstream b = compress(x, comp_iters, model);
      write_file(comp_out, serialize(b));
      std::cout << "bits " << b.header.payload_bits() << " bpp " << std::setprecision(9) << b.bpp() << "\n";
      return 0;
    }

    if (*decomp) {
      const auto model = load_codec(dec_model);
      Bitstream b = parse_bitstream(read_file(dec_in));
      if (dec_iters > 0) b = truncate_iterations(b, dec_iters);
      write_ppm(dec_out, decompress(b, model));
      return 0;
    }

    if (*evq) {
      ev.iterations = parse_int_list(ev_iters);
      const auto model = load_codec(evq_model);
      const Dataset val = evq_data.load(Split::val, evq_data);
      const auto pts = eval_quality_curve(LearnedCodec{&model}, val, ev);
      write_text(evq_out, curve_csv(pts));
      RunManifest m;
      m.command = "eval-quality";
      m.config = "data=" + evq_data.describe(Split::val, evq_data) + "\niters=" + ev_iters + "\ns_comp=" +
                 std::to_string(ev.s_comp) + "\n";
      add_file_input(m, "model", evq_model);
      write_manifest(evq_out, m);
      return 0;
    }

    if (*eva) {
      ev.iterations = parse_int_list(ev_iters);
      const auto model = load_codec(eva_model);
      const auto cls = load_classifier(eva_cls);
      const Dataset val = eva_data.load(Split::val, eva_data);
      const auto curve = eval_accuracy_curve(LearnedCodec{&model}, NetClassifier{&cls}, val, ev);
      write_text(eva_out, curve_csv(curve.accuracy));
      if (!eva_pres_out.empty()) write_text(eva_pres_out, curve_csv(curve.preservation));
      RunManifest m;
      m.command = "eval-accuracy";
      m.config = "data=" + eva_data.describe(Split::val, eva_data) + "\niters=" + ev_iters + "\ns_comp=" +
                 std::to_string(ev.s_comp) + "\ns_inf=" + std::to_string(ev.s_inf) + "\n";
      add_file_input(m, "model", eva_model);
      add_file_input(m, "classifier", eva_cls);
      write_manifest(eva_out, m);
      return 0;
    }

    if (*sweep) {
      ev.iterations = parse_int_list(ev_iters);
      const auto alphas = parse_double_list(sw_alphas);
      const auto cls = load_classifier(sw_cls);
      fs::create_directories(sw_models);
      std::vector<std::unique_ptr<CodecParams<float>>> owned;
      std::map<double, const CodecParams<float>*> ckpts;
      std::optional<Dataset> train;
      RunManifest m;
      m.command = "sweep";
      m.seed = sw_seed;
      for (double a : alphas) {
        const std::string path = (fs::path(sw_models) / ("codec_alpha_" + alpha_tag(a) + ".ckpt")).string();
        if (!fs::exists(path) && sw_train) {
          if (a > 0 && sw_lossnet.empty()) throw Error("sweep: --lossnet is required to train alpha > 0");
          if (!train) train = sw_train_data.load(Split::train, sw_train_data);
          std::optional<ClassifierParams<float>> ln;
          if (a > 0) ln = load_classifier(sw_lossnet);
          LossConfig lc;
          lc.alpha = a;
          TrainConfig tc = sw_cfg;
          tc.seed = sw_seed;
          std::cerr << "training alpha " << a << "\n";
          save_codec(path, train_codec(*train, lc, tc, ln ? &*ln : nullptr).params);
        }
        if (fs::exists(path)) {
          owned.push_back(std::make_unique<CodecParams<float>>(load_codec(path)));
          ckpts[a] = owned.back().get();
          add_file_input(m, "alpha_" + alpha_tag(a), path);
        } else {
          ckpts[a] = nullptr;
        }
      }
      const Dataset val = sw_val_data.load(Split::val, sw_train_data);
      const SweepTable table = tradeoff_sweep(ckpts, cls, val, ev);
      for (const auto& a : table.missing) std::cerr << "odlc: missing checkpoint for alpha " << a << ", skipped\n";
      write_text(sw_out, sweep_csv(table.rows));
      m.config = "alphas=" + sw_alphas + "\niters=" + ev_iters + "\nval=" +
                 sw_val_data.describe(Split::val, sw_train_data) + "\n";
      add_file_input(m, "classifier", sw_cls);
      write_manifest(sw_out, m);
      return 0;
    }

    if (*abl) {
      ev.iterations = parse_int_list(ev_iters);
      const auto cls = load_classifier(ab_cls);
      const auto lossnet = load_classifier(ab_lossnet);
      std::vector<std::vector<std::string>> sets;
      if (ab_sets.empty()) {
        sets = default_layer_sets(lossnet.arch);
      } else {
        std::istringstream in(ab_sets);
        std::string tok;
        while (std::getline(in, tok, ';'))
          sets.push_back(tok == "all" ? lossnet.arch.layer_ids() : parse_layers(tok));
      }
      ab_cfg.seed = ab_seed;
      const Dataset train = ab_train_data.load(Split::train, ab_train_data);
      const Dataset val = ab_val_data.load(Split::val, ab_train_data);
      const auto res = ablate_layers(sets, train, val, LossConfig{}, ab_cfg, lossnet, cls, ev);
      write_text(ab_out, ablation_csv(res.rows));
      RunManifest m;
      m.command = "ablate-layers";
      m.seed = ab_seed;
      m.config = "sets=" + (ab_sets.empty() ? std::string("default") : ab_sets) + "\niters=" + ev_iters + "\n";
      add_file_input(m, "classifier", ab_cls);
      add_file_input(m, "lossnet", ab_lossnet);
      write_manifest(ab_out, m);
      return 0;
    }

    if (*gc) {
      bool ok = true;
      if (gc_dtype == "f32" || gc_dtype == "both") {
        const auto r = run_gradient_suite<float>(gc_instances, gc_seed);
        std::cout << format_suite(r);
        ok = ok && r.passed();
      }
      if (gc_dtype == "f64" || gc_dtype == "both") {
        const auto r = run_gradient_suite<double>(gc_instances, gc_seed);
        std::cout << format_suite(r);
        ok = ok && r.passed();
      }
      return ok ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "odlc: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

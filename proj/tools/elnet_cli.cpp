// elnet: command-line entry point for data generation, training, label
// generation and filtering, evaluation and the gradient check suite.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "CLI11.hpp"

#include "elnet/config.hpp"
#include "elnet/gradcheck_suite.hpp"
#include "elnet/lqe.hpp"
#include "elnet/pipeline.hpp"
#include "elnet/synth.hpp"
#include "elnet/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace elnet;

namespace {

struct ConfigFlags {
  std::string path;
  std::vector<std::string> sets;
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("--config", f.path, "TOML or JSON configuration file")->check(CLI::ExistingFile);
  app->add_option("--set", f.sets, "Override a config key, e.g. --set train.epochs=20 (repeatable)");
}

config::ResolvedConfig resolve(const ConfigFlags& f, std::vector<std::string> extra, json* tree_out = nullptr) {
  auto sets = f.sets;
  sets.insert(sets.end(), extra.begin(), extra.end());
  std::optional<fs::path> p;
  if (!f.path.empty()) p = f.path;
  auto tree = config::load_tree(p, sets);
  if (tree_out) *tree_out = tree;
  return config::apply(tree);
}

void print_effective(const config::ResolvedConfig& c, const std::string& command) {
  json j = c.to_json();
  const char* threads = std::getenv("ELNET_THREADS");
  j["runtime"] = {{"command", command}, {"threads", Eigen::nbThreads()}, {"ELNET_THREADS", threads ? threads : ""}};
  std::cerr << "effective config:\n" << j.dump(2) << '\n';
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  std::ofstream f(out, std::ios::binary);
  if (!f) throw Error("cannot write " + out);
  f << text;
}

std::string seed_set(const std::string& key, std::uint64_t seed) { return key + "=" + std::to_string(seed); }

// Mask files below a directory keyed by relative path.
std::map<std::string, fs::path> mask_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension().string();
    if (ext == ".png" || ext == ".pgm") out.emplace(e.path().lexically_relative(dir).generic_string(), e.path());
  }
  return out;
}

void apply_threads() {
  const char* t = std::getenv("ELNET_THREADS");
  if (!t || !*t) return;
  char* end = nullptr;
  const long n = std::strtol(t, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("ELNET_THREADS: expected a positive integer, got '" + std::string(t) + "'");
  Eigen::setNbThreads(static_cast<int>(n));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"elnet: label enhancement and automatic annotation for binary segmentation"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // synth gen
  auto* synth = app.add_subcommand("synth", "Synthetic benchmark tools");
  synth->require_subcommand(1);
  auto* gen = synth->add_subcommand("gen", "Generate images, exact masks, coarse labels and a manifest");
  ConfigFlags gen_cfg;
  std::size_t gen_n = 50;
  std::uint64_t gen_seed = 0;
  double gen_test = 0.2;
  std::string gen_out;
  gen->add_option("--n", gen_n, "Number of scenes")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Scene and corruption seed")->required();
  gen->add_option("--test-fraction", gen_test, "Fraction of scenes in the test split")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();
  add_config_flags(gen, gen_cfg);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Denoising pretraining of the backbone");
  ConfigFlags pre_cfg;
  std::string pre_manifest, pre_out;
  std::uint64_t pre_seed = 0;
  std::optional<std::size_t> pre_epochs;
  double pre_sigma = 0.1;
  pre->add_option("--manifest", pre_manifest, "Dataset manifest (training split images are used)")->required();
  pre->add_option("--out", pre_out, "Backbone checkpoint path")->required();
  pre->add_option("--seed", pre_seed, "Training seed")->required();
  pre->add_option("--epochs", pre_epochs, "Epochs (default: pipeline.pretrain_epochs)");
  pre->add_option("--noise-sigma", pre_sigma, "Input noise standard deviation")->capture_default_str();
  add_config_flags(pre, pre_cfg);

  // finetune
  auto* ft = app.add_subcommand("finetune", "Fine-tune adapters, receptive field blocks and decoder");
  ConfigFlags ft_cfg;
  std::string ft_manifest, ft_backbone, ft_out, ft_log;
  std::uint64_t ft_seed = 0;
  ft->add_option("--manifest", ft_manifest, "Dataset manifest (labeled training records are used)")->required();
  ft->add_option("--backbone", ft_backbone, "Backbone checkpoint")->required()->check(CLI::ExistingFile);
  ft->add_option("--out", ft_out, "Output checkpoint path")->required();
  ft->add_option("--seed", ft_seed, "Training seed")->required();
  ft->add_option("--log", ft_log, "Training log (JSON Lines of epoch, mean_loss, lr)");
  add_config_flags(ft, ft_cfg);

  // annotate / enhance
  struct ModeFlags {
    ConfigFlags cfg;
    std::string manifest, out, backbone;
    std::uint64_t seed = 0;
    std::optional<std::size_t> loops;
  };
  ModeFlags ann, enh;
  auto add_mode = [&](const char* name, const char* help, ModeFlags& f) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("--manifest", f.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    c->add_option("--out", f.out, "Output directory")->required();
    c->add_option("--seed", f.seed, "Pipeline seed")->required();
    c->add_option("--backbone", f.backbone, "Backbone checkpoint (pretrained on the manifest when omitted)");
    c->add_option("--loops", f.loops, "Generate-filter-refine iterations");
    add_config_flags(c, f.cfg);
    return c;
  };
  auto* annotate = add_mode("annotate", "Fine-tune on the manual subset and label the unlabeled records", ann);
  auto* enhance = add_mode("enhance", "Replace coarse labels with filtered model predictions", enh);

  // lqe
  auto* lq = app.add_subcommand("lqe", "Score label quality from three aligned predictions per image");
  ConfigFlags lq_cfg;
  std::vector<std::string> lq_pred;
  std::string lq_manifest, lq_out;
  std::vector<std::string> lq_ckpts;
  std::optional<std::uint64_t> lq_seed;
  lq->add_option("--pred", lq_pred, "Three directories of aligned predictions with matching file names");
  lq->add_option("--manifest", lq_manifest, "Manifest whose images are perturbed and predicted");
  lq->add_option("--checkpoint", lq_ckpts, "One or three model checkpoints (with --manifest)");
  lq->add_option("--seed", lq_seed, "Perturbation seed (with --manifest)");
  lq->add_option("--out", lq_out, "Report path (JSON Lines); stdout when omitted");
  add_config_flags(lq, lq_cfg);

  // metrics
  auto* met = app.add_subcommand("metrics", "Pixel accuracy and mIoU of predictions against ground truth");
  std::string met_pred, met_gt, met_out;
  met->add_option("--pred", met_pred, "Prediction mask directory")->required();
  met->add_option("--gt", met_gt, "Ground truth mask directory")->required();
  met->add_option("--out", met_out, "Report path; stdout when omitted");

  // evalprotocol
  auto* ep = app.add_subcommand("evalprotocol", "Reference-network evaluation on Test-HQ, Test-Orig and Test-Enh");
  ConfigFlags ep_cfg;
  std::string ep_train, ep_hq, ep_orig, ep_enh, ep_out;
  std::uint64_t ep_seed = 0;
  ep->add_option("--train", ep_train, "Training manifest")->required()->check(CLI::ExistingFile);
  ep->add_option("--test-hq", ep_hq, "Manifest with high-quality test labels")->required()->check(CLI::ExistingFile);
  ep->add_option("--test-orig", ep_orig, "Manifest with original test labels")->required()->check(CLI::ExistingFile);
  ep->add_option("--test-enh", ep_enh, "Manifest with enhanced test labels")->required()->check(CLI::ExistingFile);
  ep->add_option("--seed", ep_seed, "Reference network seed")->required();
  ep->add_option("--out", ep_out, "Report path; stdout when omitted");
  add_config_flags(ep, ep_cfg);

  // pipeline run / ablate
  auto* pl = app.add_subcommand("pipeline", "Full iterative pipeline driven by a config file");
  pl->require_subcommand(1);
  struct PipeFlags {
    ConfigFlags cfg;
    std::string manifest, out, backbone;
    std::optional<std::uint64_t> seed;
  };
  PipeFlags prun, pabl;
  auto add_pipe = [&](const char* name, const char* help, PipeFlags& f) {
    auto* c = pl->add_subcommand(name, help);
    c->add_option("--config", f.cfg.path, "TOML or JSON configuration file")->required()->check(CLI::ExistingFile);
    c->add_option("--set", f.cfg.sets, "Override a config key (repeatable)");
    c->add_option("--manifest", f.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
    c->add_option("--out", f.out, "Output directory (overrides pipeline.out_dir)");
    c->add_option("--backbone", f.backbone, "Backbone checkpoint (overrides pipeline.backbone_checkpoint)");
    c->add_option("--seed", f.seed, "Pipeline seed; required unless the config sets pipeline.seed");
    return c;
  };
  auto* prun_cmd = add_pipe("run", "Run stages 1-5", prun);
  auto* pabl_cmd = add_pipe("ablate", "Run with and without edge attention and compare label quality", pabl);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks of all blocks and losses");
  bool gc_quick = false;
  std::uint64_t gc_seed = 0;
  gc->add_flag("--quick", gc_quick, "Skip the whole-model check");
  gc->add_option("--seed", gc_seed, "Instance seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    apply_threads();

    if (gen->parsed()) {
      auto c = resolve(gen_cfg, {seed_set("scene.seed", gen_seed), seed_set("corruption.seed", gen_seed)});
      print_effective(c, "synth gen");
      auto m = synth::gen_dataset(gen_n, c.scene, c.corruption, gen_out, gen_test);
      std::size_t test = 0;
      for (const auto& r : m.records) test += r.split == maskio::Split::kTest;
      json j{{"manifest", (fs::path(gen_out) / "manifest.jsonl").string()},
             {"records", m.records.size()},
             {"train", m.records.size() - test},
             {"test", test}};
      std::cout << j.dump(2) << '\n';
      return 0;
    }

    if (pre->parsed()) {
      std::vector<std::string> extra{seed_set("train.seed", pre_seed)};
      if (pre_epochs) extra.push_back("pipeline.pretrain_epochs=" + std::to_string(*pre_epochs));
      auto c = resolve(pre_cfg, extra);
      print_effective(c, "pretrain");
      auto m = maskio::read_manifest(pre_manifest);
      std::vector<maskio::GrayImage> imgs;
      for (const auto& r : m.records)
        if (r.split == maskio::Split::kTrain) imgs.push_back(maskio::load_image(m.resolve(r.image_path)));
      auto tc = c.pipeline.train;
      tc.epochs = c.pipeline.pretrain_epochs;
      tc.checkpoint_epochs.clear();
      auto res = train::pretrain_backbone(imgs, tc, c.pipeline.model, pre_sigma, [](const train::EpochLog& e) {
        std::cerr << "epoch " << e.epoch << " loss " << e.mean_loss << '\n';
      });
      train::Checkpoint ck;
      ck.model = c.pipeline.model;
      ck.store = std::move(res.backbone);
      ck.epoch = tc.epochs;
      ck.meta = {{"kind", "backbone"}, {"epoch_losses", res.epoch_losses}};
      train::save_checkpoint(ck, pre_out);
      std::cout << json{{"checkpoint", pre_out}, {"final_loss", res.epoch_losses.back()}}.dump(2) << '\n';
      return 0;
    }

    if (ft->parsed()) {
      auto c = resolve(ft_cfg, {seed_set("train.seed", ft_seed)});
      print_effective(c, "finetune");
      auto m = maskio::read_manifest(ft_manifest);
      auto samples = train::load_samples(m);
      auto bb = train::load_checkpoint(ft_backbone);
      auto init = train::init_from_backbone(c.pipeline.model, bb, ft_seed);
      std::ofstream log;
      if (!ft_log.empty()) log.open(ft_log, std::ios::binary);
      auto res = train::finetune(samples, init, c.pipeline.train, c.pipeline.loss, c.pipeline.model,
                                 [&](const train::EpochLog& e) {
                                   json j{{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"lr", e.lr}};
                                   std::cerr << j.dump() << '\n';
                                   if (log) log << j.dump() << '\n';
                                 });
      train::Checkpoint ck;
      ck.model = c.pipeline.model;
      ck.store = std::move(res.store);
      ck.optimizer = std::move(res.optimizer);
      ck.epoch = c.pipeline.train.epochs;
      ck.rng_state = res.rng_state;
      train::save_checkpoint(ck, ft_out);
      for (const auto& [ep, snap] : res.snapshots) {
        train::Checkpoint sc;
        sc.model = c.pipeline.model;
        sc.store = snap.clone();
        sc.epoch = ep;
        auto p = fs::path(ft_out);
        train::save_checkpoint(sc, p.parent_path() / (p.stem().string() + ".epoch" + std::to_string(ep) + p.extension().string()));
      }
      std::cout << json{{"checkpoint", ft_out}, {"final_loss", res.epochs.back().mean_loss}}.dump(2) << '\n';
      return 0;
    }

    auto run_mode = [&](ModeFlags& f, const char* mode) {
      std::vector<std::string> extra{std::string("pipeline.mode=") + mode, seed_set("pipeline.seed", f.seed),
                                     "pipeline.out_dir=\"" + f.out + "\""};
      if (f.loops) extra.push_back("pipeline.loop_count=" + std::to_string(*f.loops));
      if (!f.backbone.empty()) extra.push_back("pipeline.backbone_checkpoint=\"" + f.backbone + "\"");
      auto c = resolve(f.cfg, extra);
      print_effective(c, mode);
      auto res = pipeline::run(c.pipeline, maskio::read_manifest(f.manifest), &std::cerr);
      json stats = json::array();
      for (const auto& s : res.stats) stats.push_back(s.to_json());
      std::cout << json{{"manifest", (fs::path(f.out) / "manifest.jsonl").string()}, {"stats", stats}}.dump(2) << '\n';
      return 0;
    };
    if (annotate->parsed()) return run_mode(ann, "annotate");
    if (enhance->parsed()) return run_mode(enh, "enhance");

    auto run_pipe = [&](PipeFlags& f, bool ablate) {
      std::vector<std::string> extra;
      if (f.seed) extra.push_back(seed_set("pipeline.seed", *f.seed));
      if (!f.out.empty()) extra.push_back("pipeline.out_dir=\"" + f.out + "\"");
      if (!f.backbone.empty()) extra.push_back("pipeline.backbone_checkpoint=\"" + f.backbone + "\"");
      json tree;
      auto c = resolve(f.cfg, extra, &tree);
      if (!tree.contains("pipeline") || !tree["pipeline"].contains("seed"))
        throw CLI::RequiredError("--seed (or pipeline.seed in the config)");
      print_effective(c, ablate ? "pipeline ablate" : "pipeline run");
      auto m = maskio::read_manifest(f.manifest);
      if (!ablate) {
        auto res = pipeline::run(c.pipeline, m, &std::cerr);
        json stats = json::array();
        for (const auto& s : res.stats) stats.push_back(s.to_json());
        std::cout << stats.dump(2) << '\n';
        return 0;
      }
      auto bb = pipeline::obtain_backbone(c.pipeline, m, &std::cerr);
      auto rep = pipeline::ablate_eam(c.pipeline, m, bb, c.refnet, &std::cerr);
      const auto text = rep.to_json().dump(2) + "\n";
      if (!c.pipeline.out_dir.empty()) emit((fs::path(c.pipeline.out_dir) / "ablation.json").string(), text);
      std::cout << text;
      return 0;
    };
    if (prun_cmd->parsed()) return run_pipe(prun, false);
    if (pabl_cmd->parsed()) return run_pipe(pabl, true);

    if (lq->parsed()) {
      auto c = resolve(lq_cfg, {});
      print_effective(c, "lqe");
      std::string out;
      if (!lq_pred.empty()) {
        if (lq_pred.size() != 3 || !lq_manifest.empty()) throw CLI::ValidationError("--pred", "expects exactly three directories and no --manifest");
        std::array<std::map<std::string, fs::path>, 3> files;
        for (std::size_t k = 0; k < 3; ++k) files[k] = mask_files(lq_pred[k]);
        for (const auto& [rel, p0] : files[0]) {
          lqe::PredictionEnsemble e;
          e.predictions[0] = maskio::load_mask(p0);
          for (std::size_t k = 1; k < 3; ++k) {
            auto it = files[k].find(rel);
            if (it == files[k].end()) throw Error("lqe: " + rel + " missing from " + lq_pred[k]);
            e.predictions[k] = maskio::load_mask(it->second);
          }
          out += lqe::report_to_json(rel, lqe::evaluate(e, c.pipeline.lqe)).dump() + "\n";
        }
      } else {
        if (lq_manifest.empty() || (lq_ckpts.size() != 1 && lq_ckpts.size() != 3) || !lq_seed)
          throw CLI::ValidationError("lqe", "needs --pred x3, or --manifest with one or three --checkpoint and --seed");
        auto m = maskio::read_manifest(lq_manifest);
        std::vector<pipeline::Snapshot> cks;
        model::ModelConfig mcfg;
        for (const auto& p : lq_ckpts) {
          auto ck = train::load_checkpoint(p);
          mcfg = ck.model;
          cks.push_back({fs::path(p).filename().string(), std::move(ck.store)});
        }
        std::vector<maskio::GrayImage> imgs;
        std::vector<std::uint64_t> seeds;
        for (std::size_t i = 0; i < m.records.size(); ++i) {
          imgs.push_back(maskio::load_image(m.resolve(m.records[i].image_path)));
          seeds.push_back(perturb::mix_seed(*lq_seed + i));
        }
        auto ens = pipeline::generate_ensembles(imgs, seeds, cks, mcfg, c.pipeline.noise_sigma);
        for (std::size_t i = 0; i < ens.size(); ++i)
          out += lqe::report_to_json(m.records[i].image_path, lqe::evaluate(ens[i], c.pipeline.lqe), &ens[i]).dump() + "\n";
      }
      emit(lq_out, out);
      return 0;
    }

    if (met->parsed()) {
      auto pred = mask_files(met_pred), gt = mask_files(met_gt);
      std::vector<std::pair<std::string, std::pair<maskio::Mask, maskio::Mask>>> pairs;
      for (const auto& [rel, gp] : gt) {
        auto it = pred.find(rel);
        if (it == pred.end()) throw Error("metrics: no prediction for " + rel);
        pairs.push_back({rel, {maskio::load_mask(it->second), maskio::load_mask(gp)}});
      }
      for (const auto& [rel, pp] : pred)
        if (!gt.count(rel)) throw Error("metrics: no ground truth for " + rel);
      if (pairs.empty()) throw Error("metrics: no masks found");
      emit(met_out, maskio::evaluate_pairs(pairs).to_json().dump(2) + "\n");
      return 0;
    }

    if (ep->parsed()) {
      auto c = resolve(ep_cfg, {seed_set("refnet.seed", ep_seed)});
      print_effective(c, "evalprotocol");
      auto rep = synth::eval_protocol(maskio::read_manifest(ep_train), maskio::read_manifest(ep_hq),
                                      maskio::read_manifest(ep_orig), maskio::read_manifest(ep_enh), c.refnet);
      emit(ep_out, rep.to_json().dump(2) + "\n");
      return 0;
    }

    if (gc->parsed()) {
      gradsuite::SuiteOptions o;
      o.include_model = !gc_quick;
      o.seed = gc_seed;
      bool all = true;
      for (const auto& r : gradsuite::run_suite(o)) {
        std::cout << (r.report.pass ? "PASS " : "FAIL ") << r.name << " max_rel_err=" << r.report.max_rel_err
                  << " checked=" << r.report.checked << " worst=" << r.report.worst << " (analytic " << r.report.worst_analytic
                  << ", numeric " << r.report.worst_numeric << ")" << " time=" << r.seconds << "s\n";
        all = all && r.report.pass;
      }
      return all ? 0 : 1;
    }
  } catch (const CLI::Error& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

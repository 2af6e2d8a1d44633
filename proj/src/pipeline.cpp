#include "elnet/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace elnet::pipeline {

using maskio::Provenance;
using maskio::Split;

std::string to_string(Mode m) { return m == Mode::kEnhance ? "enhance" : "annotate"; }

Mode parse_mode(const std::string& s) {
  if (s == "enhance") return Mode::kEnhance;
  if (s == "annotate") return Mode::kAnnotate;
  throw ConfigError("pipeline.mode: expected enhance or annotate, got '" + s + "'");
}

void PipelineConfig::validate() const {
  if (loop_count > 10) throw ConfigError("pipeline.loop_count: must lie in [0,10]");
  lqe.validate();
  train.validate();
  loss.validate();
  model.validate();
  if (ensemble_checkpoints.size() != 1 && ensemble_checkpoints.size() != 3)
    throw ConfigError("pipeline.ensemble_checkpoints: expected 1 or 3 selectors");
  const std::size_t last = *std::max_element(ensemble_checkpoints.begin(), ensemble_checkpoints.end());
  if (last >= train.epochs)
    throw ConfigError("pipeline.ensemble_checkpoints: selector " + std::to_string(last) +
                      " is not resolvable with train.epochs = " + std::to_string(train.epochs));
  if (last >= effective_refine_epochs())
    throw ConfigError("pipeline.ensemble_checkpoints: selector " + std::to_string(last) +
                      " is not resolvable with refine_epochs = " + std::to_string(effective_refine_epochs()));
  if (!(noise_sigma >= 0)) throw ConfigError("pipeline.noise_sigma: must be non-negative");
  if (backbone_checkpoint.empty() && pretrain_epochs == 0)
    throw ConfigError("pipeline.pretrain_epochs: must be positive when no backbone_checkpoint is given");
}

std::size_t PipelineConfig::effective_refine_epochs() const {
  return refine_epochs ? refine_epochs : std::max<std::size_t>(1, train.epochs / 4);
}

nlohmann::ordered_json PipelineConfig::to_json() const {
  nlohmann::ordered_json j;
  j["mode"] = to_string(mode);
  j["loop_count"] = loop_count;
  j["ensemble_checkpoints"] = ensemble_checkpoints;
  j["refine_epochs"] = effective_refine_epochs();
  j["cold_start"] = cold_start;
  j["noise_sigma"] = noise_sigma;
  j["pretrain_epochs"] = pretrain_epochs;
  j["backbone_checkpoint"] = backbone_checkpoint;
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  return j;
}

nlohmann::ordered_json IterationStats::to_json() const {
  return {{"iteration", iteration},
          {"evaluated", evaluated},
          {"retained", retained},
          {"flagged", flagged},
          {"cumulative_retained", cumulative_retained},
          {"mean_q", mean_q},
          {"mean_q_retained", mean_q_retained},
          {"train_size", train_size},
          {"refined", refined}};
}

namespace {

void say(std::ostream* log, const std::string& s) {
  if (log) *log << s << '\n';
}

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t salt) { return perturb::mix_seed(seed ^ perturb::mix_seed(salt)); }

std::vector<train::Sample> training_set(const PipelineConfig& cfg, const PipelineState& st) {
  std::vector<train::Sample> out;
  for (std::size_t i = 0; i < st.manifest.records.size(); ++i) {
    const auto& r = st.manifest.records[i];
    if (r.split != Split::kTrain || st.ever_flagged_only.count(r.image_path)) continue;
    const bool labeled = std::find(st.labeled_pool.begin(), st.labeled_pool.end(), i) != st.labeled_pool.end();
    const bool accepted = st.generated.count(r.image_path) > 0;
    if (cfg.mode == Mode::kEnhance ? labeled : (labeled || accepted))
      out.push_back({st.images.at(r.image_path), st.labels.at(r.image_path)});
  }
  return out;
}

// Fine-tunes and keeps the selected snapshots as the ensemble checkpoints.
void fit(const PipelineConfig& cfg, PipelineState& st, const model::ParamStore<float>& init, std::size_t epochs,
         std::uint64_t seed, std::ostream* log) {
  auto samples = training_set(cfg, st);
  if (samples.empty()) throw Error("pipeline: empty training set");
  train::TrainConfig tc = cfg.train;
  tc.epochs = epochs;
  tc.seed = seed;
  tc.checkpoint_epochs.clear();
  for (auto off : cfg.ensemble_checkpoints) tc.checkpoint_epochs.push_back(epochs - off);
  auto res = train::finetune(samples, init, tc, cfg.loss, cfg.model, [&](const train::EpochLog& e) {
    if (log) *log << "  epoch " << e.epoch << "/" << epochs << " loss " << e.mean_loss << '\n';
  });
  st.checkpoints.clear();
  for (auto off : cfg.ensemble_checkpoints) {
    const std::size_t ep = epochs - off;
    st.checkpoints.push_back({"fit" + std::to_string(st.fit_runs) + ".epoch" + std::to_string(ep),
                              res.snapshots.at(ep).clone()});
  }
  st.current = std::move(res.store);
  st.last_train_size = samples.size();
  ++st.fit_runs;
}

fs::path mask_rel_path(const std::string& image_path) {
  fs::path p = fs::path("masks") / fs::path(image_path).relative_path();
  p.replace_extension(".png");
  return p;
}

std::string rebase(const DatasetManifest& m, const std::string& p, const fs::path& out_dir) {
  return fs::absolute(m.resolve(p)).lexically_normal().lexically_relative(fs::absolute(out_dir)).generic_string();
}

}  // namespace

// --- stages -----------------------------------------------------------------------

PipelineState stage1_prepare(const PipelineConfig& cfg, const DatasetManifest& manifest,
                             const train::Checkpoint& backbone, std::ostream* log) {
  cfg.validate();
  manifest.validate();
  PipelineState st;
  st.manifest = manifest;
  for (std::size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& r = manifest.records[i];
    auto img = maskio::load_image(manifest.resolve(r.image_path));
    if (r.label_path) {
      auto lab = maskio::load_mask(manifest.resolve(*r.label_path));
      if (lab.height() != img.height() || lab.width() != img.width())
        throw ShapeError("pipeline: label shape does not match image " + r.image_path);
      st.labels.emplace(r.image_path, std::move(lab));
    }
    st.images.emplace(r.image_path, std::move(img));

    const bool has_label = r.label_path.has_value() && r.provenance != Provenance::kFlagged;
    if (cfg.mode == Mode::kEnhance) {
      if (!r.label_path) throw Error("pipeline: enhance mode needs a label for every record; " + r.image_path + " has none");
      if (r.split == Split::kTrain) (has_label ? st.labeled_pool : st.unlabeled_pool).push_back(i);
      // Manual labels are never overwritten.
      if (r.provenance != Provenance::kManual) st.targets.push_back(i);
    } else {
      if (r.split != Split::kTrain) continue;
      if (has_label && r.provenance == Provenance::kManual) {
        st.labeled_pool.push_back(i);
      } else {
        st.unlabeled_pool.push_back(i);
        if (!r.label_path) st.targets.push_back(i);
      }
    }
  }
  if (st.labeled_pool.empty()) throw Error("pipeline: no labeled records");
  st.backbone = backbone.store.clone();
  say(log, "stage1: " + std::to_string(manifest.records.size()) + " records, labeled " +
               std::to_string(st.labeled_pool.size()) + ", unlabeled " + std::to_string(st.unlabeled_pool.size()) +
               ", targets " + std::to_string(st.targets.size()));
  return st;
}

void stage2_finetune(const PipelineConfig& cfg, PipelineState& st, std::ostream* log) {
  if (st.labeled_pool.empty()) throw Error("stage2: labeled pool is empty");
  train::Checkpoint bb;
  bb.model = cfg.model;
  bb.store = st.backbone.clone();
  auto init = train::init_from_backbone(cfg.model, bb, stage_seed(cfg.seed, 0x1417));
  say(log, "stage2: fine-tuning for " + std::to_string(cfg.train.epochs) + " epochs");
  fit(cfg, st, init, cfg.train.epochs, stage_seed(cfg.seed, cfg.train.seed), log);
}

Mask majority(const lqe::PredictionEnsemble& e) {
  const auto& p = e.predictions;
  std::vector<std::uint8_t> bits(p[0].size());
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (p[0][i] + p[1][i] + p[2][i]) >= 2;
  return Mask(p[0].height(), p[0].width(), std::move(bits));
}

std::vector<lqe::PredictionEnsemble> generate_ensembles(const std::vector<GrayImage>& images,
                                                        const std::vector<std::uint64_t>& seeds,
                                                        std::vector<Snapshot>& checkpoints,
                                                        const model::ModelConfig& mcfg, double noise_sigma) {
  if (checkpoints.empty()) throw Error("stage3: no checkpoints");
  if (seeds.size() != images.size()) throw Error("generate_ensembles: one seed per image required");
  std::vector<lqe::PredictionEnsemble> out(images.size());
  std::vector<std::array<perturb::PerturbSpec, 3>> specs;
  for (auto s : seeds) specs.push_back(perturb::make_ensemble_specs(s, noise_sigma));
  constexpr std::size_t kChunk = 16;
  for (std::size_t j = 0; j < 3; ++j) {
    auto& ck = checkpoints[j % checkpoints.size()];
    // Group by perturbed shape so every batch is rectangular.
    std::map<std::pair<std::size_t, std::size_t>, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < images.size(); ++i)
      groups[perturb::transformed_shape(images[i].height(), images[i].width(), specs[i][j])].push_back(i);
    for (const auto& [shape, idx] : groups)
      for (std::size_t b = 0; b < idx.size(); b += kChunk) {
        std::vector<GrayImage> batch;
        const std::size_t e = std::min(idx.size(), b + kChunk);
        for (std::size_t k = b; k < e; ++k) batch.push_back(perturb::apply_image(images[idx[k]], specs[idx[k]][j]));
        auto preds = model::predict_batch(batch, ck.params, mcfg);
        for (std::size_t k = b; k < e; ++k) {
          auto& en = out[idx[k]];
          en.predictions[j] = perturb::align_prediction(preds[k - b], specs[idx[k]][j]);
          en.checkpoint_ids[j] = ck.id;
          en.specs[j] = specs[idx[k]][j];
        }
      }
  }
  return out;
}

void stage3_generate_and_filter(const PipelineConfig& cfg, PipelineState& st, std::ostream* log) {
  if (st.checkpoints.empty()) throw Error("stage3: missing checkpoint");
  const auto retained_as = cfg.mode == Mode::kEnhance ? Provenance::kEnhanced : Provenance::kAuto;
  std::vector<GrayImage> imgs;
  std::vector<std::uint64_t> seeds;
  DatasetManifest subset;
  subset.base_dir = st.manifest.base_dir;
  for (auto i : st.targets) {
    const auto& r = st.manifest.records[i];
    imgs.push_back(st.images.at(r.image_path));
    seeds.push_back(stage_seed(cfg.seed, 0x5eed0000ULL + i));
    subset.records.push_back(r);
  }
  auto ensembles = generate_ensembles(imgs, seeds, st.checkpoints, cfg.model, cfg.noise_sigma);
  std::map<std::string, lqe::PredictionEnsemble> by_path;
  for (std::size_t k = 0; k < st.targets.size(); ++k) by_path.emplace(subset.records[k].image_path, ensembles[k]);
  auto fr = lqe::filter_dataset(subset, by_path, cfg.lqe, retained_as);

  IterationStats s;
  s.iteration = st.iteration;
  s.evaluated = st.targets.size();
  s.retained = fr.retained.records.size();
  s.flagged = fr.flagged.records.size();
  s.train_size = st.last_train_size;
  double qsum = 0, qret = 0;
  for (std::size_t k = 0; k < st.targets.size(); ++k) {
    const auto& [path, rep] = fr.reports[k];
    auto& rec = st.manifest.records[st.targets[k]];
    qsum += rep.q;
    auto j = lqe::report_to_json(path, rep, &by_path.at(path));
    j["iteration"] = st.iteration;
    st.reports.push_back(std::move(j));
    if (rep.verdict == lqe::Verdict::kRetain) {
      qret += rep.q;
      auto label = majority(by_path.at(path));
      st.labels[path] = label;
      st.generated[path] = std::move(label);
      st.ever_flagged_only.erase(path);
      rec.provenance = retained_as;
      rec.quality = rep.q;
    } else if (!st.generated.count(path)) {
      // Never accepted: awaits external re-annotation. An earlier accepted
      // label survives a later flag.
      st.ever_flagged_only.insert(path);
      rec.provenance = Provenance::kFlagged;
      rec.quality = rep.q;
    }
  }
  s.mean_q = s.evaluated ? qsum / static_cast<double>(s.evaluated) : 0.0;
  s.mean_q_retained = s.retained ? qret / static_cast<double>(s.retained) : 0.0;
  s.cumulative_retained = st.generated.size();
  st.stats.push_back(s);
  ++st.iteration;
  say(log, "stage3[" + std::to_string(s.iteration) + "]: evaluated " + std::to_string(s.evaluated) + ", retained " +
               std::to_string(s.retained) + ", flagged " + std::to_string(s.flagged) + ", mean Q " +
               std::to_string(s.mean_q));
}

void stage4_refine(const PipelineConfig& cfg, PipelineState& st, std::ostream* log) {
  if (st.stats.empty() || st.stats.back().retained == 0) {
    say(log, "stage4: no retained labels, skipping refinement");
    return;
  }
  const std::size_t epochs = cfg.effective_refine_epochs();
  model::ParamStore<float> init;
  if (cfg.cold_start) {
    train::Checkpoint bb;
    bb.model = cfg.model;
    bb.store = st.backbone.clone();
    init = train::init_from_backbone(cfg.model, bb, stage_seed(cfg.seed, 0x1417));
  } else {
    init = st.current.clone();
  }
  say(log, "stage4: refining for " + std::to_string(epochs) + " epochs");
  fit(cfg, st, init, epochs, stage_seed(cfg.seed, cfg.train.seed ^ (0x4ef1000ULL + st.iteration)), log);
  st.stats.back().refined = true;
}

// --- driver ------------------------------------------------------------------------

train::Checkpoint obtain_backbone(const PipelineConfig& cfg, const DatasetManifest& manifest, std::ostream* log) {
  if (!cfg.backbone_checkpoint.empty()) return train::load_checkpoint(cfg.backbone_checkpoint);
  std::vector<GrayImage> imgs;
  for (const auto& r : manifest.records)
    if (r.split == Split::kTrain) imgs.push_back(maskio::load_image(manifest.resolve(r.image_path)));
  train::TrainConfig tc = cfg.train;
  tc.epochs = cfg.pretrain_epochs;
  tc.seed = stage_seed(cfg.seed, 0x9e7a);
  tc.checkpoint_epochs.clear();
  say(log, "pretraining backbone for " + std::to_string(tc.epochs) + " epochs");
  auto pr = train::pretrain_backbone(imgs, tc, cfg.model, 0.1, [&](const train::EpochLog& e) {
    if (log) *log << "  pretrain epoch " << e.epoch << " loss " << e.mean_loss << '\n';
  });
  train::Checkpoint ck;
  ck.model = cfg.model;
  ck.store = std::move(pr.backbone);
  ck.epoch = tc.epochs;
  return ck;
}

void write_outputs(const PipelineConfig& cfg, const PipelineState& st, bool finished) {
  if (cfg.out_dir.empty()) return;
  const fs::path out = cfg.out_dir;
  fs::create_directories(out);
  DatasetManifest final_m, flagged;
  final_m.base_dir = flagged.base_dir = out;
  for (const auto& r : st.manifest.records) {
    auto c = r;
    if (st.generated.count(r.image_path)) {
      const auto rel = mask_rel_path(r.image_path);
      fs::create_directories((out / rel).parent_path());
      maskio::save_mask(st.generated.at(r.image_path), out / rel);
      c.label_path = rel.generic_string();
    } else if (c.label_path) {
      c.label_path = rebase(st.manifest, *c.label_path, out);
    }
    c.image_path = rebase(st.manifest, r.image_path, out);
    for (auto& [k, v] : c.extra.items())
      if (v.is_string() && k.ends_with("_path")) v = rebase(st.manifest, v.get<std::string>(), out);
    if (c.provenance == Provenance::kFlagged) flagged.records.push_back(c);
    final_m.records.push_back(std::move(c));
  }
  maskio::write_manifest(final_m, out / "manifest.jsonl");
  maskio::write_manifest(flagged, out / "flagged.jsonl");

  auto stats = nlohmann::ordered_json::array();
  for (const auto& s : st.stats) stats.push_back(s.to_json());
  std::ofstream(out / "stats.json") << stats.dump(2) << '\n';
  {
    std::ofstream rep(out / "lqe_report.jsonl");
    for (const auto& j : st.reports) rep << j.dump() << '\n';
  }
  nlohmann::ordered_json progress{{"completed_stage3", st.iteration},
                                  {"planned_stage3", cfg.loop_count + 1},
                                  {"finished", finished}};
  std::ofstream(out / "progress.json") << progress.dump(2) << '\n';
  if (finished) {
    train::Checkpoint ck;
    ck.model = cfg.model;
    ck.store = st.current.clone();
    ck.epoch = st.fit_runs;
    auto pj = cfg.to_json();
    pj.erase("out_dir");  // reruns into another directory stay byte-identical
    ck.meta = {{"pipeline", pj}};
    train::save_checkpoint(ck, out / "model_final.eln");
  }
}

namespace {

PipelineResult to_result(const PipelineConfig& cfg, PipelineState& st) {
  PipelineResult res;
  res.manifest = st.manifest;
  res.flagged.base_dir = st.manifest.base_dir;
  for (const auto& r : st.manifest.records)
    if (r.provenance == Provenance::kFlagged) res.flagged.records.push_back(r);
  if (!cfg.out_dir.empty()) {
    res.manifest = maskio::read_manifest(fs::path(cfg.out_dir) / "manifest.jsonl");
    res.flagged = maskio::read_manifest(fs::path(cfg.out_dir) / "flagged.jsonl");
  }
  res.stats = st.stats;
  res.reports = st.reports;
  res.labels = st.labels;
  res.final_params = st.current.clone();
  res.checkpoints = st.checkpoints;
  return res;
}

}  // namespace

PipelineResult run(const PipelineConfig& cfg, const DatasetManifest& manifest, const train::Checkpoint& backbone,
                   std::ostream* log) {
  cfg.validate();
  auto st = stage1_prepare(cfg, manifest, backbone, log);
  stage2_finetune(cfg, st, log);
  for (std::size_t loop = 0; loop < cfg.loop_count; ++loop) {
    stage3_generate_and_filter(cfg, st, log);
    write_outputs(cfg, st, false);
    stage4_refine(cfg, st, log);
  }
  stage3_generate_and_filter(cfg, st, log);
  write_outputs(cfg, st, true);
  return to_result(cfg, st);
}

PipelineResult run(const PipelineConfig& cfg, const DatasetManifest& manifest, std::ostream* log) {
  cfg.validate();
  return run(cfg, manifest, obtain_backbone(cfg, manifest, log), log);
}

// --- protocol -----------------------------------------------------------------------

synth::ProtocolReport enhancement_protocol(const DatasetManifest& input, const PipelineResult& result,
                                           const synth::RefNetConfig& rcfg) {
  std::vector<train::Sample> tr;
  std::vector<GrayImage> imgs;
  std::vector<Mask> hq, orig, enh;
  for (const auto& r : input.records) {
    if (!r.label_path) throw Error("protocol: record " + r.image_path + " has no input label");
    if (r.split == Split::kTrain) {
      tr.push_back({maskio::load_image(input.resolve(r.image_path)), maskio::load_mask(input.resolve(*r.label_path))});
      continue;
    }
    if (!r.extra.contains("gt_path")) throw Error("protocol: record " + r.image_path + " has no gt_path");
    imgs.push_back(maskio::load_image(input.resolve(r.image_path)));
    hq.push_back(maskio::load_mask(input.resolve(r.extra.at("gt_path").get<std::string>())));
    orig.push_back(maskio::load_mask(input.resolve(*r.label_path)));
    auto it = result.labels.find(r.image_path);
    enh.push_back(it != result.labels.end() ? it->second : orig.back());
  }
  return synth::eval_protocol(tr, imgs, hq, orig, enh, rcfg);
}

nlohmann::ordered_json AblationReport::to_json() const {
  nlohmann::ordered_json j;
  j["with_eam"] = with_eam.to_json();
  j["without_eam"] = without_eam.to_json();
  j["paired"] = {{"delta_miou_enh_with_eam", with_eam.row("Test-Enh").delta_miou},
                 {"delta_miou_enh_without_eam", without_eam.row("Test-Enh").delta_miou},
                 {"delta_acc_enh_with_eam", with_eam.row("Test-Enh").delta_acc},
                 {"delta_acc_enh_without_eam", without_eam.row("Test-Enh").delta_acc}};
  j["differing_pixels"] = differing_pixels;
  j["eam_closer_to_hq"] = eam_closer_to_hq;
  return j;
}

AblationReport ablate_eam(const PipelineConfig& cfg, const DatasetManifest& manifest, const train::Checkpoint& backbone,
                          const synth::RefNetConfig& rcfg, std::ostream* log) {
  AblationReport rep;
  std::vector<GrayImage> test_imgs;
  for (const auto& r : manifest.records)
    if (r.split == Split::kTest) test_imgs.push_back(maskio::load_image(manifest.resolve(r.image_path)));
  std::array<std::vector<Mask>, 2> preds;
  for (int on = 1; on >= 0; --on) {
    auto c = cfg;
    c.model.eam_enabled = on != 0;
    if (!cfg.out_dir.empty()) c.out_dir = (fs::path(cfg.out_dir) / (on ? "eam_on" : "eam_off")).string();
    say(log, std::string("ablation: eam ") + (on ? "on" : "off"));
    auto res = run(c, manifest, backbone, log);
    (on ? rep.with_eam : rep.without_eam) = enhancement_protocol(manifest, res, rcfg);
    if (!test_imgs.empty()) preds[on] = model::predict_batch(test_imgs, res.final_params, c.model);
  }
  for (std::size_t i = 0; i < preds[0].size(); ++i)
    for (std::size_t p = 0; p < preds[0][i].size(); ++p) rep.differing_pixels += preds[0][i][p] != preds[1][i][p];
  rep.eam_closer_to_hq = std::abs(rep.with_eam.row("Test-Enh").delta_miou) <
                         std::abs(rep.without_eam.row("Test-Enh").delta_miou);
  return rep;
}

}  // namespace elnet::pipeline

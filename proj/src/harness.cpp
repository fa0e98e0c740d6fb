#include "prodet/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "prodet/nn.hpp"
#include "prodet/rng.hpp"

namespace prodet {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

// Substream lane bases; each arm adds its own lane so runs are pure
// functions of (seed, arm) regardless of execution order.
constexpr std::uint64_t kInitLane = 1000;
constexpr std::uint64_t kBatchLane = 2000;

// arm lanes
constexpr std::uint64_t kLanePassive = 0;
constexpr std::uint64_t kLanePassive2x = 1;
constexpr std::uint64_t kLaneImageDependent = 2;
constexpr std::uint64_t kLaneFixed = 3;
constexpr std::uint64_t kLaneUniversal = 4;
constexpr std::uint64_t kLaneNoDecoder = 5;
constexpr std::uint64_t kLaneAdditive = 6;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::string out_path(const ExperimentConfig& cfg, const std::string& name) {
  return (fs::path(cfg.output_dir) / name).string();
}

TemplateMode parse_template_mode(const std::string& v, const std::string& k) {
  if (v == "image_dependent") return TemplateMode::ImageDependent;
  if (v == "universal_learnable") return TemplateMode::UniversalLearnable;
  if (v == "fixed") return TemplateMode::Fixed;
  throw CliError(exit_code::kConfig, k + ": unknown template mode '" + v + "'");
}

TransformMode parse_transform_mode(const std::string& v, const std::string& k) {
  if (v == "multiply") return TransformMode::Multiply;
  if (v == "add") return TransformMode::Add;
  throw CliError(exit_code::kConfig, k + ": unknown transform '" + v + "'");
}

DetectorHead parse_head(const std::string& v, const std::string& k) {
  if (v == "boxes") return DetectorHead::Boxes;
  if (v == "segmentation") return DetectorHead::Segmentation;
  throw CliError(exit_code::kConfig, k + ": unknown head '" + v + "'");
}

RunMode parse_mode(const std::string& v, const std::string& k) {
  if (v == "theory") return RunMode::Theory;
  if (v == "train_passive") return RunMode::TrainPassive;
  if (v == "train_proactive") return RunMode::TrainProactive;
  if (v == "ablate") return RunMode::Ablation;
  if (v == "eval") return RunMode::Eval;
  throw CliError(exit_code::kConfig, k + ": unknown mode '" + v + "'");
}

std::vector<std::string> wrapper_echo(const WrapperConfig& w) {
  std::vector<std::string> out;
  out.push_back("wrapper.encoder_widths=" + join_sizes(w.encoder_widths));
  out.push_back("wrapper.decoder_widths=" + join_sizes(w.decoder_widths));
  out.push_back(std::string("wrapper.template_mode=") +
                template_mode_name(w.template_mode));
  out.push_back(std::string("wrapper.transform_mode=") +
                transform_mode_name(w.transform_mode));
  out.push_back(std::string("wrapper.use_decoder=") +
                (w.use_decoder ? "true" : "false"));
  out.push_back("wrapper.lambda_obj=" + fmt_double(w.lambda_obj));
  out.push_back("wrapper.lambda_e=" + fmt_double(w.lambda_e));
  out.push_back("wrapper.lambda_d=" + fmt_double(w.lambda_d));
  out.push_back("wrapper.final_bias_offset=" + fmt_double(w.final_bias_offset));
  out.push_back("wrapper.fixed_value=" + fmt_double(w.fixed_value));
  return out;
}

ordered_json metrics_json(const EvalMetrics& m) {
  ordered_json j;
  j["head"] = head_name(m.head);
  if (m.head == DetectorHead::Boxes) {
    j["ap"] = m.ap;
    j["ap50"] = m.ap50;
    j["ap75"] = m.ap75;
  } else {
    j["mae"] = m.mae;
    j["f_beta"] = m.f_beta;
  }
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  write_file_bytes(path, text);
}

void write_report_files(const ExperimentConfig& cfg, const RunReport& rep) {
  write_text(out_path(cfg, rep.arm + ".report.json"), run_report_json(rep));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.3f s\n", rep.wall_seconds);
  // wall clock lives in a sidecar so reports stay byte-identical across runs
  write_text(out_path(cfg, rep.arm + ".time.txt"), buf);
}

}  // namespace

const char* run_mode_name(RunMode m) {
  switch (m) {
    case RunMode::Theory: return "theory";
    case RunMode::TrainPassive: return "train_passive";
    case RunMode::TrainProactive: return "train_proactive";
    case RunMode::Ablation: return "ablate";
    case RunMode::Eval: return "eval";
  }
  return "?";
}

ExperimentConfig parse_experiment_config(const IniFile& ini) {
  ExperimentConfig cfg;
  cfg.use_wrapper = ini.has_section("wrapper");
  for (const auto& e : ini.entries) {
    const std::string full = e.section + "." + e.key;
    const std::string& v = e.value;
    if (e.section == "experiment") {
      if (e.key == "mode") cfg.mode = parse_mode(v, full);
      else if (e.key == "train_dataset") cfg.train_dataset = v;
      else if (e.key == "eval_dataset") cfg.eval_dataset = v;
      else if (e.key == "init_checkpoint") cfg.init_checkpoint = v;
      else if (e.key == "output_dir") cfg.output_dir = v;
      else if (e.key == "detector_lr") cfg.detector_lr = parse_real(v, full);
      else if (e.key == "coder_lr") cfg.coder_lr = parse_real(v, full);
      else if (e.key == "batch_size") cfg.batch_size = parse_uint(v, full);
      else if (e.key == "iteration_budget")
        cfg.iteration_budget = parse_uint(v, full);
      else if (e.key == "log_every") cfg.log_every = parse_uint(v, full);
      else if (e.key == "checkpoint_every")
        cfg.checkpoint_every = parse_uint(v, full);
      else if (e.key == "pretrain_fraction")
        cfg.pretrain_fraction = parse_real(v, full);
      else
        throw CliError(exit_code::kConfig, "unknown config key: " + full);
    } else if (e.section == "dataset") {
      if (e.key == "image_size") cfg.dataset.image_size = parse_uint(v, full);
      else if (e.key == "channels") cfg.dataset.channels = parse_uint(v, full);
      else if (e.key == "num_classes")
        cfg.dataset.num_classes = parse_uint(v, full);
      else if (e.key == "objects_min")
        cfg.dataset.objects_min = parse_uint(v, full);
      else if (e.key == "objects_max")
        cfg.dataset.objects_max = parse_uint(v, full);
      else if (e.key == "camouflage_level")
        cfg.dataset.camouflage_level = parse_real(v, full);
      else if (e.key == "background_noise_sigma")
        cfg.dataset.background_noise_sigma = parse_real(v, full);
      else if (e.key == "count") cfg.dataset.count = parse_uint(v, full);
      else if (e.key == "seed") cfg.dataset.seed = parse_uint(v, full);
      else
        throw CliError(exit_code::kConfig, "unknown config key: " + full);
    } else if (e.section == "wrapper") {
      if (e.key == "encoder_widths")
        cfg.wrapper.encoder_widths = parse_size_list(v, full);
      else if (e.key == "decoder_widths")
        cfg.wrapper.decoder_widths = parse_size_list(v, full);
      else if (e.key == "template_mode")
        cfg.wrapper.template_mode = parse_template_mode(v, full);
      else if (e.key == "transform_mode")
        cfg.wrapper.transform_mode = parse_transform_mode(v, full);
      else if (e.key == "use_decoder")
        cfg.wrapper.use_decoder = parse_bool(v, full);
      else if (e.key == "lambda_obj")
        cfg.wrapper.lambda_obj = parse_real(v, full);
      else if (e.key == "lambda_e") cfg.wrapper.lambda_e = parse_real(v, full);
      else if (e.key == "lambda_d") cfg.wrapper.lambda_d = parse_real(v, full);
      else if (e.key == "final_bias_offset")
        cfg.wrapper.final_bias_offset = parse_real(v, full);
      else if (e.key == "fixed_value")
        cfg.wrapper.fixed_value = parse_real(v, full);
      else
        throw CliError(exit_code::kConfig, "unknown config key: " + full);
    } else if (e.section == "detector") {
      if (e.key == "head") cfg.detector.head = parse_head(v, full);
      else if (e.key == "image_size")
        cfg.detector.image_size = parse_uint(v, full);
      else if (e.key == "grid") cfg.detector.grid = parse_uint(v, full);
      else if (e.key == "num_classes")
        cfg.detector.num_classes = parse_uint(v, full);
      else if (e.key == "trunk_widths")
        cfg.detector.trunk_widths = parse_size_list(v, full);
      else if (e.key == "score_threshold")
        cfg.detector.score_threshold = parse_real(v, full);
      else if (e.key == "nms_iou")
        cfg.detector.nms_iou = parse_real(v, full);
      else
        throw CliError(exit_code::kConfig, "unknown config key: " + full);
    } else if (e.section == "theory") {
      if (e.key == "dim") cfg.regression.dim = parse_uint(v, full);
      else if (e.key == "sigma") cfg.regression.sigma = parse_real(v, full);
      else if (e.key == "step_base")
        cfg.regression.step_base = parse_real(v, full);
      else if (e.key == "max_steps")
        cfg.regression.max_steps = parse_uint(v, full);
      else if (e.key == "trials") cfg.regression.trials = parse_uint(v, full);
      else if (e.key == "template_scalar")
        cfg.regression.template_scalar = parse_real(v, full);
      else if (e.key == "test_boxes")
        cfg.box_task.test_boxes = parse_uint(v, full);
      else if (e.key == "coord_scale")
        cfg.box_task.coord_scale = parse_real(v, full);
      else
        throw CliError(exit_code::kConfig, "unknown config key: " + full);
    } else {
      throw CliError(exit_code::kConfig, "unknown config section: " + e.section);
    }
  }
  return cfg;
}

void validate(const ExperimentConfig& cfg) {
  validate(cfg.dataset);
  validate(cfg.wrapper);
  validate(cfg.detector);
  theory::validate(cfg.regression);
  if (cfg.detector.image_size != cfg.dataset.image_size)
    throw CliError(exit_code::kConfig,
                   "detector.image_size must match dataset.image_size");
  if (cfg.detector.head == DetectorHead::Boxes &&
      cfg.detector.num_classes != cfg.dataset.num_classes)
    throw CliError(exit_code::kConfig,
                   "detector.num_classes must match dataset.num_classes");
  if (cfg.batch_size == 0)
    throw CliError(exit_code::kConfig, "batch_size must be positive");
  if (cfg.iteration_budget == 0)
    throw CliError(exit_code::kConfig, "iteration_budget must be positive");
  if (cfg.log_every == 0)
    throw CliError(exit_code::kConfig, "log_every must be positive");
  if (!(cfg.detector_lr > 0) || !(cfg.coder_lr > 0))
    throw CliError(exit_code::kConfig, "learning rates must be positive");
  if (!(cfg.pretrain_fraction > 0.0) || !(cfg.pretrain_fraction < 1.0))
    throw CliError(exit_code::kConfig, "pretrain_fraction must be in (0, 1)");
  if (cfg.box_task.test_boxes == 0 || !(cfg.box_task.coord_scale > 0))
    throw CliError(exit_code::kConfig, "bad theory box-task settings");
}

std::string architecture_hash(const ExperimentConfig& cfg) {
  // only shape-determining fields: a checkpoint is loadable exactly when
  // these match the consuming config
  std::string s;
  s += std::string("detector.head=") + head_name(cfg.detector.head) + "\n";
  s += "detector.image_size=" + std::to_string(cfg.detector.image_size) + "\n";
  s += "detector.grid=" + std::to_string(cfg.detector.grid) + "\n";
  s += "detector.num_classes=" + std::to_string(cfg.detector.num_classes) + "\n";
  s += "detector.trunk_widths=" + join_sizes(cfg.detector.trunk_widths) + "\n";
  return sha256_hex(s);
}

std::vector<std::string> config_echo(const ExperimentConfig& cfg) {
  std::vector<std::string> out;
  out.push_back(std::string("experiment.mode=") + run_mode_name(cfg.mode));
  out.push_back("experiment.detector_lr=" + fmt_double(cfg.detector_lr));
  out.push_back("experiment.coder_lr=" + fmt_double(cfg.coder_lr));
  out.push_back("experiment.batch_size=" + std::to_string(cfg.batch_size));
  out.push_back("experiment.iteration_budget=" +
                std::to_string(cfg.iteration_budget));
  out.push_back("experiment.log_every=" + std::to_string(cfg.log_every));
  out.push_back("experiment.checkpoint_every=" +
                std::to_string(cfg.checkpoint_every));
  out.push_back("experiment.pretrain_fraction=" +
                fmt_double(cfg.pretrain_fraction));
  out.push_back("dataset.image_size=" + std::to_string(cfg.dataset.image_size));
  out.push_back("dataset.channels=" + std::to_string(cfg.dataset.channels));
  out.push_back("dataset.num_classes=" +
                std::to_string(cfg.dataset.num_classes));
  out.push_back("dataset.objects_min=" +
                std::to_string(cfg.dataset.objects_min));
  out.push_back("dataset.objects_max=" +
                std::to_string(cfg.dataset.objects_max));
  out.push_back("dataset.camouflage_level=" +
                fmt_double(cfg.dataset.camouflage_level));
  out.push_back("dataset.background_noise_sigma=" +
                fmt_double(cfg.dataset.background_noise_sigma));
  out.push_back("dataset.count=" + std::to_string(cfg.dataset.count));
  out.push_back("dataset.seed=" + std::to_string(cfg.dataset.seed));
  out.push_back(std::string("detector.head=") + head_name(cfg.detector.head));
  out.push_back("detector.image_size=" +
                std::to_string(cfg.detector.image_size));
  out.push_back("detector.grid=" + std::to_string(cfg.detector.grid));
  out.push_back("detector.num_classes=" +
                std::to_string(cfg.detector.num_classes));
  out.push_back("detector.trunk_widths=" +
                join_sizes(cfg.detector.trunk_widths));
  out.push_back("detector.score_threshold=" +
                fmt_double(cfg.detector.score_threshold));
  out.push_back("detector.nms_iou=" + fmt_double(cfg.detector.nms_iou));
  if (cfg.mode == RunMode::Theory) {
    out.push_back("theory.dim=" + std::to_string(cfg.regression.dim));
    out.push_back("theory.sigma=" + fmt_double(cfg.regression.sigma));
    out.push_back("theory.step_base=" + fmt_double(cfg.regression.step_base));
    out.push_back("theory.max_steps=" +
                  std::to_string(cfg.regression.max_steps));
    out.push_back("theory.trials=" + std::to_string(cfg.regression.trials));
    out.push_back("theory.template_scalar=" +
                  fmt_double(cfg.regression.template_scalar));
    out.push_back("theory.test_boxes=" +
                  std::to_string(cfg.box_task.test_boxes));
    out.push_back("theory.coord_scale=" + fmt_double(cfg.box_task.coord_scale));
  }
  return out;
}

Checkpoint stores_to_checkpoint(const std::vector<const StoreF*>& stores,
                                const std::string& config_hash) {
  Checkpoint ck;
  ck.config_hash = config_hash.empty() ? "-" : config_hash;
  for (const StoreF* store : stores) {
    for (std::size_t i = 0; i < store->size(); ++i) {
      const auto& p = store->entry(i).param;
      CheckpointEntry e;
      e.name = p.name;
      e.shape = p.value.shape;
      e.data.assign(p.value.ptr(), p.value.ptr() + p.value.numel());
      ck.entries.push_back(std::move(e));
    }
  }
  return ck;
}

void load_stores(const std::vector<StoreF*>& stores, const Checkpoint& ckpt,
                 bool require_trainable) {
  std::map<std::string, const CheckpointEntry*> byname;
  for (const auto& e : ckpt.entries) byname[e.name] = &e;
  for (StoreF* store : stores) {
    for (std::size_t i = 0; i < store->size(); ++i) {
      auto& entry = store->entry(i);
      auto it = byname.find(entry.param.name);
      if (it == byname.end()) {
        if (entry.trainable && require_trainable)
          throw CliError(exit_code::kIntegrity,
                         "checkpoint missing parameter: " + entry.param.name);
        continue;
      }
      const CheckpointEntry& ce = *it->second;
      if (ce.shape != entry.param.value.shape)
        throw CliError(exit_code::kIntegrity,
                       "checkpoint shape mismatch for: " + entry.param.name);
      std::copy(ce.data.begin(), ce.data.end(), entry.param.value.ptr());
    }
  }
}

std::string run_report_json(const RunReport& rep) {
  ordered_json doc;
  doc["arm"] = rep.arm;
  doc["seed"] = rep.seed;
  doc["iterations"] = rep.iterations;
  doc["pretrain_iterations"] = rep.pretrain_iterations;
  doc["config_hash"] = rep.config_hash;
  doc["train_dataset_hash"] = rep.train_dataset_hash;
  doc["eval_dataset_hash"] = rep.eval_dataset_hash;
  doc["init_checkpoint_hash"] = rep.init_checkpoint_hash;
  doc["checkpoint_hash"] = rep.checkpoint_hash;
  doc["config"] = rep.config;
  ordered_json curve = ordered_json::array();
  for (const auto& p : rep.curve) {
    ordered_json row;
    row["iteration"] = p.iteration;
    row["j"] = p.j;
    row["j_obj"] = p.j_obj;
    row["j_e"] = p.j_e;
    row["j_d"] = p.j_d;
    curve.push_back(std::move(row));
  }
  doc["curve"] = std::move(curve);
  if (rep.has_metrics) doc["metrics"] = metrics_json(rep.metrics);
  return doc.dump(2) + "\n";
}

std::vector<ArmSpec> ablation_arms(const ExperimentConfig& cfg,
                                   const std::string& pretrain_ckpt,
                                   std::size_t pretrain_iters,
                                   std::size_t arm_iters) {
  std::vector<ArmSpec> arms;
  auto push = [&](const char* name, std::uint64_t lane, bool passive,
                  auto tweak) {
    ArmSpec a;
    a.name = name;
    a.rng_lane = lane;
    a.passive = passive;
    a.wrapper = cfg.wrapper;
    a.wrapper.template_mode = TemplateMode::ImageDependent;
    a.wrapper.transform_mode = TransformMode::Multiply;
    a.wrapper.use_decoder = true;
    tweak(a.wrapper);
    a.iterations = arm_iters;
    a.pretrain_iterations = pretrain_iters;
    a.init_checkpoint = pretrain_ckpt;
    arms.push_back(std::move(a));
  };
  push("image_dependent", kLaneImageDependent, false, [](WrapperConfig&) {});
  push("fixed", kLaneFixed, false,
       [](WrapperConfig& w) { w.template_mode = TemplateMode::Fixed; });
  push("universal_learnable", kLaneUniversal, false, [](WrapperConfig& w) {
    w.template_mode = TemplateMode::UniversalLearnable;
  });
  push("no_decoder", kLaneNoDecoder, false,
       [](WrapperConfig& w) { w.use_decoder = false; });
  push("additive", kLaneAdditive, false,
       [](WrapperConfig& w) { w.transform_mode = TransformMode::Add; });
  push("passive2x", kLanePassive2x, true, [](WrapperConfig&) {});
  return arms;
}

ArmSpec classify_single_arm(const ExperimentConfig& cfg) {
  ArmSpec a;
  a.wrapper = cfg.wrapper;
  a.iterations = cfg.iteration_budget;
  a.init_checkpoint = cfg.init_checkpoint;
  if (cfg.mode == RunMode::TrainPassive) {
    a.name = "passive";
    a.rng_lane = kLanePassive;
    a.passive = true;
    return a;
  }
  const WrapperConfig& w = cfg.wrapper;
  if (w.template_mode == TemplateMode::UniversalLearnable) {
    a.name = "universal_learnable";
    a.rng_lane = kLaneUniversal;
  } else if (w.template_mode == TemplateMode::Fixed) {
    a.name = "fixed";
    a.rng_lane = kLaneFixed;
  } else if (!w.use_decoder) {
    a.name = "no_decoder";
    a.rng_lane = kLaneNoDecoder;
  } else if (w.transform_mode == TransformMode::Add) {
    a.name = "additive";
    a.rng_lane = kLaneAdditive;
  } else {
    a.name = "image_dependent";
    a.rng_lane = kLaneImageDependent;
  }
  return a;
}

RunReport run_training(const ExperimentConfig& cfg, const ArmSpec& arm,
                       const SynthDataset& train,
                       const std::string& train_hash,
                       const SynthDataset& test,
                       const std::string& test_hash) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t S = cfg.detector.image_size;
  if (train.spec.image_size != S || test.spec.image_size != S)
    throw CliError(exit_code::kConfig,
                   "dataset image size does not match detector.image_size");
  if (train.scenes.empty() || test.scenes.empty())
    throw CliError(exit_code::kConfig, "empty dataset");
  if (arm.iterations == 0)
    throw CliError(exit_code::kConfig, "arm iteration budget must be positive");
  const bool boxes = cfg.detector.head == DetectorHead::Boxes;

  StoreF enc_store, dec_store, det_store;
  Rng init_rng = Rng::substream(cfg.seed, kInitLane + arm.rng_lane, 0);
  std::unique_ptr<TemplateProvider> provider;
  std::unique_ptr<CoderNet> decoder;
  if (!arm.passive) {
    validate(arm.wrapper);
    provider =
        std::make_unique<TemplateProvider>(enc_store, arm.wrapper, S, init_rng);
    if (arm.wrapper.use_decoder)
      decoder = std::make_unique<CoderNet>(dec_store, "decoder",
                                           arm.wrapper.decoder_widths, 3,
                                           arm.wrapper.final_bias_offset,
                                           init_rng);
  }
  DetectorNet det(det_store, cfg.detector, init_rng);

  RunReport rep;
  rep.arm = arm.name;
  rep.seed = cfg.seed;
  rep.iterations = arm.iterations;
  rep.pretrain_iterations = arm.pretrain_iterations;
  rep.config_hash = architecture_hash(cfg);
  rep.train_dataset_hash = train_hash;
  rep.eval_dataset_hash = test_hash;
  rep.config = config_echo(cfg);
  if (!arm.passive) {
    auto wl = wrapper_echo(arm.wrapper);
    rep.config.insert(rep.config.end(), wl.begin(), wl.end());
  }

  if (!arm.init_checkpoint.empty()) {
    const std::string bytes = read_file_bytes(arm.init_checkpoint);
    rep.init_checkpoint_hash = sha256_hex(bytes);
    const Checkpoint ck = parse_checkpoint(bytes);
    if (ck.config_hash != rep.config_hash)
      throw CliError(exit_code::kIntegrity,
                     "init checkpoint was produced by a different detector "
                     "architecture");
    // arms must start from the full pretrained detector; any wrapper
    // parameters present are warm starts, missing ones stay fresh
    load_stores({&det_store}, ck, /*require_trainable=*/true);
    load_stores({&enc_store, &dec_store}, ck, /*require_trainable=*/false);
  }

  SgdT<float> det_opt(static_cast<float>(cfg.detector_lr));
  AdamT<float> coder_opt(static_cast<float>(cfg.coder_lr));

  const std::size_t bs = cfg.batch_size;
  const std::size_t plane = 3 * S * S;
  Tensor images({bs, 3, S, S});
  Tensor gtmaps({bs, 1, S, S});
  std::vector<AssignResult> targets(bs);

  for (std::size_t it = 0; it < arm.iterations; ++it) {
    Rng brng = Rng::substream(cfg.seed, kBatchLane + arm.rng_lane, it);
    for (std::size_t b = 0; b < bs; ++b) {
      const std::size_t id = static_cast<std::size_t>(brng.uniform_int(
          0, static_cast<std::int64_t>(train.scenes.size()) - 1));
      const Scene& scene = train.scenes[id];
      std::memcpy(images.ptr() + b * plane, scene.image.ptr(),
                  plane * sizeof(float));
      float* gm = gtmaps.ptr() + b * S * S;
      for (std::size_t p = 0; p < S * S; ++p)
        gm[p] = static_cast<float>(scene.seg_map[p]);
      if (boxes) targets[b] = assign_targets(scene.annotations, S,
                                             cfg.detector.grid);
    }

    enc_store.zero_grad();
    dec_store.zero_grad();
    det_store.zero_grad();
    TapeF t;
    auto x = t.leaf(images);
    Var det_in = x;
    Var j_e, j_d;
    if (!arm.passive) {
      auto tmpl = provider->forward(t, x, /*training=*/true);
      auto encrypted = encrypt(t, x, tmpl, arm.wrapper.transform_mode);
      j_e = encoder_loss(t, tmpl, gtmaps);
      if (decoder) {
        auto recovered = decoder->forward(t, encrypted, /*training=*/true);
        j_d = decoder_loss(t, recovered, tmpl);
      }
      det_in = encrypted;
    }
    auto pred = det.forward(t, det_in, /*training=*/true);
    Var j_obj;
    if (boxes)
      j_obj = detection_loss(t, pred, targets, cfg.detector).total;
    else
      j_obj = segmentation_loss(t, pred, gtmaps);

    Var total;
    if (arm.passive) {
      total = j_obj;
    } else {
      try {
        total = total_loss(t, j_obj, j_e, j_d, arm.wrapper);
      } catch (const std::runtime_error& err) {
        throw CliError(exit_code::kNonFinite,
                       std::string(err.what()) + " at iteration " +
                           std::to_string(it + 1));
      }
    }
    const double total_now = static_cast<double>(t.val(total)[0]);
    if (!std::isfinite(total_now))
      throw CliError(exit_code::kNonFinite,
                     "non-finite loss at iteration " + std::to_string(it + 1));

    t.backward(total);
    det_opt.step(det_store);
    if (!arm.passive) {
      // Linear decay to zero: the wrapper converges early, then freezes so
      // the detector finishes against a stationary input distribution.
      coder_opt.lr = static_cast<float>(
          cfg.coder_lr * (1.0 - double(it) / double(arm.iterations)));
      coder_opt.step(enc_store);
      if (decoder) coder_opt.step(dec_store);
    }

    if ((it + 1) % cfg.log_every == 0 || it + 1 == arm.iterations) {
      LossPoint p;
      p.iteration = it + 1;
      p.j = total_now;
      p.j_obj = static_cast<double>(t.val(j_obj)[0]);
      p.j_e = j_e.valid() ? static_cast<double>(t.val(j_e)[0]) : 0.0;
      p.j_d = j_d.valid() ? static_cast<double>(t.val(j_d)[0]) : 0.0;
      rep.curve.push_back(p);
    }
    if (cfg.checkpoint_every != 0 && (it + 1) % cfg.checkpoint_every == 0 &&
        it + 1 != arm.iterations) {
      const Checkpoint ck = stores_to_checkpoint(
          {&enc_store, &dec_store, &det_store}, rep.config_hash);
      save_checkpoint(ck, out_path(cfg, arm.name + ".it" +
                                            std::to_string(it + 1) + ".ckpt"));
    }
  }

  const Checkpoint final_ck = stores_to_checkpoint(
      {&enc_store, &dec_store, &det_store}, rep.config_hash);
  const std::string ck_bytes = serialize_checkpoint(final_ck);
  rep.checkpoint_hash = sha256_hex(ck_bytes);
  write_file_bytes(out_path(cfg, arm.name + ".ckpt"), ck_bytes);

  if (arm.run_eval) {
    const std::uint64_t decoder_access = dec_store.total_access_count();
    rep.metrics = evaluate_detector(
        cfg.detector, det, provider.get(),
        arm.passive ? TransformMode::Multiply : arm.wrapper.transform_mode,
        test, cfg.batch_size);
    rep.has_metrics = true;
    if (dec_store.total_access_count() != decoder_access)
      throw std::logic_error("evaluation touched decoder parameters");
  }

  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return rep;
}

EvalMetrics evaluate_detector(const DetectorConfig& det_cfg, DetectorNet& det,
                              TemplateProvider* provider,
                              TransformMode transform,
                              const SynthDataset& test,
                              std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("eval: zero batch size");
  EvalMetrics m;
  m.head = det_cfg.head;
  const std::size_t S = det_cfg.image_size;
  const std::size_t plane = 3 * S * S;
  const bool boxes = det_cfg.head == DetectorHead::Boxes;
  std::vector<Detection> dets;
  std::vector<GroundTruth> gts;
  double mae_sum = 0.0, fb_sum = 0.0;

  for (std::size_t start = 0; start < test.scenes.size();
       start += batch_size) {
    const std::size_t n = std::min(batch_size, test.scenes.size() - start);
    Tensor images({n, 3, S, S});
    for (std::size_t b = 0; b < n; ++b)
      std::memcpy(images.ptr() + b * plane, test.scenes[start + b].image.ptr(),
                  plane * sizeof(float));

    TapeF t;
    auto x = t.leaf(images);
    Var det_in = x;
    if (provider) {
      auto tmpl = provider->forward(t, x, /*training=*/false);
      det_in = encrypt(t, x, tmpl, transform);
    }
    auto pred = det.forward(t, det_in, /*training=*/false);
    const Tensor& pv = t.val(pred);

    if (boxes) {
      const std::size_t ch = det_cfg.pred_channels();
      const std::size_t g = det_cfg.grid;
      const std::size_t cells = ch * g * g;
      for (std::size_t b = 0; b < n; ++b) {
        Tensor one({ch, g, g});
        std::memcpy(one.ptr(), pv.ptr() + b * cells, cells * sizeof(float));
        auto found = decode_predictions(one, det_cfg, det_cfg.score_threshold,
                                        det_cfg.nms_iou);
        const int scene_id = static_cast<int>(start + b);
        for (auto& d : found) {
          d.image_id = scene_id;
          dets.push_back(d);
        }
        for (const auto& a : test.scenes[start + b].annotations)
          gts.push_back({a.box, a.class_id, scene_id});
      }
    } else {
      for (std::size_t b = 0; b < n; ++b) {
        const float* pm = pv.ptr() + b * S * S;
        const auto& seg = test.scenes[start + b].seg_map;
        std::vector<double> pd(S * S), gd(S * S);
        for (std::size_t p = 0; p < S * S; ++p) {
          pd[p] = static_cast<double>(pm[p]);
          gd[p] = static_cast<double>(seg[p]);
        }
        mae_sum += mae(pd, gd);
        fb_sum += f_beta(pd, gd);
      }
    }
  }

  if (boxes) {
    const ApSummary s = mean_ap(dets, gts);
    m.ap = s.ap;
    m.ap50 = s.ap50;
    m.ap75 = s.ap75;
  } else {
    const double count = static_cast<double>(test.scenes.size());
    m.mae = mae_sum / count;
    m.f_beta = fb_sum / count;
  }
  return m;
}

void cmd_theory(const ExperimentConfig& cfg) {
  theory::RegressionConfig rc = cfg.regression;
  rc.seed = cfg.seed;
  theory::validate(rc);
  const auto convergence = theory::lemma1_compare(rc);
  const auto box = theory::theorem1_check(rc, cfg.box_task);

  fs::create_directories(cfg.output_dir);
  ordered_json doc;
  doc["convergence"] =
      ordered_json::parse(theory::report_to_json(convergence, rc));
  doc["box_task"] =
      ordered_json::parse(theory::theorem1_to_json(box, rc, cfg.box_task));
  write_text(out_path(cfg, "theory.report.json"), doc.dump(2) + "\n");
  write_text(out_path(cfg, "theory.trials.csv"),
             theory::report_to_csv(convergence));

  std::printf("verdict=%s\n", doc["convergence"]["report"]["verdict"]
                                  .get<std::string>()
                                  .c_str());
  std::printf("passive_mean_distance=%s\n",
              fmt_double(convergence.passive_mean_distance).c_str());
  std::printf("proactive_mean_distance=%s\n",
              fmt_double(convergence.proactive_mean_distance).c_str());
  std::printf("box_ap50_passive=%s box_ap50_proactive=%s\n",
              fmt_double(box.ap50_passive).c_str(),
              fmt_double(box.ap50_proactive).c_str());
}

void cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_file) {
  if (out_file.empty())
    throw CliError(exit_code::kConfig, "gen-data: output path required");
  const fs::path parent = fs::path(out_file).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_dataset(cfg.dataset, out_file);
  std::printf("scenes=%zu sha256=%s\n", cfg.dataset.count,
              sha256_file(out_file).c_str());
}

namespace {

struct LoadedData {
  SynthDataset train, test;
  std::string train_hash, test_hash;
};

LoadedData load_train_eval(const ExperimentConfig& cfg) {
  if (cfg.train_dataset.empty())
    throw CliError(exit_code::kConfig, "experiment.train_dataset is required");
  if (cfg.eval_dataset.empty())
    throw CliError(exit_code::kConfig, "experiment.eval_dataset is required");
  LoadedData d;
  d.train = read_dataset(cfg.train_dataset);
  d.test = read_dataset(cfg.eval_dataset);
  d.train_hash = sha256_file(cfg.train_dataset);
  d.test_hash = sha256_file(cfg.eval_dataset);
  return d;
}

void print_arm_line(const RunReport& rep) {
  if (!rep.has_metrics) {
    std::printf("%s: iterations=%zu checkpoint=%s\n", rep.arm.c_str(),
                rep.iterations, rep.checkpoint_hash.substr(0, 12).c_str());
    return;
  }
  if (rep.metrics.head == DetectorHead::Boxes)
    std::printf("%s: ap=%.4f ap50=%.4f ap75=%.4f (%.1f s)\n", rep.arm.c_str(),
                rep.metrics.ap, rep.metrics.ap50, rep.metrics.ap75,
                rep.wall_seconds);
  else
    std::printf("%s: mae=%.4f f_beta=%.4f (%.1f s)\n", rep.arm.c_str(),
                rep.metrics.mae, rep.metrics.f_beta, rep.wall_seconds);
}

}  // namespace

void cmd_train(const ExperimentConfig& cfg) {
  if (cfg.mode != RunMode::TrainPassive && cfg.mode != RunMode::TrainProactive)
    throw CliError(exit_code::kConfig,
                   "train expects mode train_passive or train_proactive");
  const LoadedData d = load_train_eval(cfg);
  fs::create_directories(cfg.output_dir);
  const ArmSpec arm = classify_single_arm(cfg);
  const RunReport rep =
      run_training(cfg, arm, d.train, d.train_hash, d.test, d.test_hash);
  write_report_files(cfg, rep);
  print_arm_line(rep);
}

void cmd_ablate(const ExperimentConfig& cfg) {
  const LoadedData d = load_train_eval(cfg);
  fs::create_directories(cfg.output_dir);

  const auto pretrain_iters = static_cast<std::size_t>(std::llround(
      cfg.pretrain_fraction * static_cast<double>(cfg.iteration_budget)));
  if (pretrain_iters == 0 || pretrain_iters >= cfg.iteration_budget)
    throw CliError(exit_code::kConfig,
                   "pretrain_fraction leaves an empty training phase");
  const std::size_t arm_iters = cfg.iteration_budget - pretrain_iters;

  ArmSpec pretrain;
  pretrain.name = "pretrain";
  pretrain.rng_lane = kLanePassive;
  pretrain.passive = true;
  pretrain.iterations = pretrain_iters;
  pretrain.init_checkpoint = cfg.init_checkpoint;
  pretrain.run_eval = false;
  const RunReport pre =
      run_training(cfg, pretrain, d.train, d.train_hash, d.test, d.test_hash);
  print_arm_line(pre);

  const std::string pre_ckpt = out_path(cfg, "pretrain.ckpt");
  for (const ArmSpec& arm :
       ablation_arms(cfg, pre_ckpt, pretrain_iters, arm_iters)) {
    const RunReport rep =
        run_training(cfg, arm, d.train, d.train_hash, d.test, d.test_hash);
    write_report_files(cfg, rep);
    print_arm_line(rep);
  }
}

void cmd_eval(const ExperimentConfig& cfg,
              const std::string& checkpoint_path) {
  if (cfg.eval_dataset.empty())
    throw CliError(exit_code::kConfig, "experiment.eval_dataset is required");
  if (checkpoint_path.empty())
    throw CliError(exit_code::kConfig, "eval: --checkpoint is required");
  const SynthDataset test = read_dataset(cfg.eval_dataset);
  const std::string bytes = read_file_bytes(checkpoint_path);
  const Checkpoint ck = parse_checkpoint(bytes);
  if (ck.config_hash != architecture_hash(cfg))
    throw CliError(exit_code::kIntegrity,
                   "checkpoint/config architecture hash mismatch");

  StoreF enc_store, det_store;
  Rng rng = Rng::substream(cfg.seed, kInitLane, 0);
  std::unique_ptr<TemplateProvider> provider;
  if (cfg.use_wrapper)
    provider = std::make_unique<TemplateProvider>(
        enc_store, cfg.wrapper, cfg.detector.image_size, rng);
  DetectorNet det(det_store, cfg.detector, rng);
  load_stores({&det_store, &enc_store}, ck, /*require_trainable=*/true);

  const EvalMetrics metrics = evaluate_detector(
      cfg.detector, det, provider.get(), cfg.wrapper.transform_mode, test,
      cfg.batch_size);

  ordered_json doc;
  doc["checkpoint_hash"] = sha256_hex(bytes);
  doc["config_hash"] = architecture_hash(cfg);
  doc["eval_dataset_hash"] = sha256_file(cfg.eval_dataset);
  std::vector<std::string> echo = config_echo(cfg);
  if (cfg.use_wrapper) {
    auto wl = wrapper_echo(cfg.wrapper);
    echo.insert(echo.end(), wl.begin(), wl.end());
  }
  doc["config"] = echo;
  doc["metrics"] = metrics_json(metrics);
  const std::string text = doc.dump(2) + "\n";
  fs::create_directories(cfg.output_dir);
  write_text(out_path(cfg, "eval.report.json"), text);
  std::fputs(text.c_str(), stdout);
}

void cmd_report(const std::vector<std::string>& report_paths,
                const std::string& out_dir) {
  if (report_paths.empty())
    throw CliError(exit_code::kConfig, "report: no input reports given");
  fs::create_directories(out_dir);

  ordered_json rows = ordered_json::array();
  ordered_json series;
  std::string csv =
      "arm,seed,head,iterations,pretrain_iterations,ap,ap50,ap75,mae,f_beta,"
      "final_j,final_j_obj,train_dataset_hash,checkpoint_hash\n";

  for (const auto& path : report_paths) {
    ordered_json rep;
    try {
      rep = ordered_json::parse(read_file_bytes(path));
    } catch (const nlohmann::json::exception& e) {
      throw CliError(exit_code::kIntegrity,
                     path + ": malformed report: " + e.what());
    }
    ordered_json row;
    const std::string arm = rep.value("arm", std::string("?"));
    const std::uint64_t seed = rep.value("seed", std::uint64_t{0});
    row["arm"] = arm;
    row["seed"] = seed;
    row["iterations"] = rep.value("iterations", std::uint64_t{0});
    row["pretrain_iterations"] =
        rep.value("pretrain_iterations", std::uint64_t{0});
    row["train_dataset_hash"] =
        rep.value("train_dataset_hash", std::string());
    row["checkpoint_hash"] = rep.value("checkpoint_hash", std::string());

    std::string head, ap, ap50, ap75, mae_s, fb;
    if (rep.contains("metrics")) {
      const auto& m = rep["metrics"];
      head = m.value("head", std::string());
      row["metrics"] = m;
      if (m.contains("ap")) ap = fmt_double(m["ap"].get<double>());
      if (m.contains("ap50")) ap50 = fmt_double(m["ap50"].get<double>());
      if (m.contains("ap75")) ap75 = fmt_double(m["ap75"].get<double>());
      if (m.contains("mae")) mae_s = fmt_double(m["mae"].get<double>());
      if (m.contains("f_beta")) fb = fmt_double(m["f_beta"].get<double>());
    }

    std::string final_j, final_j_obj;
    ordered_json iter_series = ordered_json::array();
    ordered_json j_series = ordered_json::array();
    ordered_json j_obj_series = ordered_json::array();
    if (rep.contains("curve") && !rep["curve"].empty()) {
      for (const auto& p : rep["curve"]) {
        iter_series.push_back(p.value("iteration", std::uint64_t{0}));
        j_series.push_back(p.value("j", 0.0));
        j_obj_series.push_back(p.value("j_obj", 0.0));
      }
      final_j = fmt_double(rep["curve"].back().value("j", 0.0));
      final_j_obj = fmt_double(rep["curve"].back().value("j_obj", 0.0));
    }
    rows.push_back(std::move(row));

    ordered_json s;
    s["iteration"] = std::move(iter_series);
    s["j"] = std::move(j_series);
    s["j_obj"] = std::move(j_obj_series);
    series[arm + ".seed" + std::to_string(seed)] = std::move(s);

    csv += arm + "," + std::to_string(seed) + "," + head + "," +
           std::to_string(rep.value("iterations", std::uint64_t{0})) + "," +
           std::to_string(rep.value("pretrain_iterations", std::uint64_t{0})) +
           "," + ap + "," + ap50 + "," + ap75 + "," + mae_s + "," + fb + "," +
           final_j + "," + final_j_obj + "," +
           rep.value("train_dataset_hash", std::string()) + "," +
           rep.value("checkpoint_hash", std::string()) + "\n";
  }

  ordered_json doc;
  doc["rows"] = std::move(rows);
  doc["series"] = std::move(series);
  write_text((fs::path(out_dir) / "comparison.json").string(),
             doc.dump(2) + "\n");
  write_text((fs::path(out_dir) / "comparison.csv").string(), csv);
  std::fputs(csv.c_str(), stdout);
}

}  // namespace prodet

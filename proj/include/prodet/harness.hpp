#pragma once

// Experiment orchestration: strict config parsing, the alternating training
// loop for plain and wrapped detectors, deterministic evaluation, the six-arm
// ablation protocol, and canonical JSON run reports. Reports and checkpoints
// are byte-identical across runs with equal configs and seeds.

#include <cstdint>
#include <string>
#include <vector>

#include "prodet/checkpoint.hpp"
#include "prodet/config.hpp"
#include "prodet/detector.hpp"
#include "prodet/synth.hpp"
#include "prodet/theory.hpp"
#include "prodet/wrapper.hpp"

namespace prodet {

enum class RunMode { Theory, TrainPassive, TrainProactive, Ablation, Eval };
const char* run_mode_name(RunMode m);

struct ExperimentConfig {
  RunMode mode = RunMode::TrainPassive;
  std::string train_dataset;
  std::string eval_dataset;
  std::string init_checkpoint;  // optional warm start for train/ablate
  std::string output_dir = "out";
  DatasetSpec dataset;
  WrapperConfig wrapper;
  bool use_wrapper = false;  // [wrapper] section present (drives eval path)
  DetectorConfig detector;
  theory::RegressionConfig regression;
  theory::BoxTaskSpec box_task;
  double detector_lr = 1e-3;  // SGD on detector params
  double coder_lr = 1e-5;     // Adam on encoder/decoder params
  std::size_t batch_size = 16;
  std::size_t iteration_budget = 5000;
  std::size_t log_every = 100;
  std::size_t checkpoint_every = 0;  // 0 = final checkpoint only
  // Share of the ablation budget spent pretraining the plain detector the
  // arms start from; the remainder is each arm's fine-tuning budget.
  double pretrain_fraction = 0.5;
  std::uint64_t seed = 0;  // from --seed
};

// Strict parse: every key present in `ini` must be recognized, every value
// well formed; anything else raises CliError(exit_code::kConfig).
ExperimentConfig parse_experiment_config(const IniFile& ini);
void validate(const ExperimentConfig& cfg);  // cross-field consistency

// sha256 over the canonical echo of the shape-determining detector fields;
// stored in checkpoints and required to match at eval time.
std::string architecture_hash(const ExperimentConfig& cfg);

// Canonical "section.key=value" lines for reports. Path-valued keys are
// excluded so reports do not depend on where artifacts live; content hashes
// identify the inputs instead.
std::vector<std::string> config_echo(const ExperimentConfig& cfg);

// ---- parameter container adapters ----

// All entries of all stores, in store order; names are already prefixed
// (encoder. / decoder. / detector.).
Checkpoint stores_to_checkpoint(const std::vector<const StoreF*>& stores,
                                const std::string& config_hash);

// Copies checkpoint entries into matching store entries by name. Shape
// mismatches raise CliError(kIntegrity). Missing trainable entries raise
// CliError(kIntegrity) when require_trainable is set; missing non-trainable
// entries always keep their constructed values.
void load_stores(const std::vector<StoreF*>& stores, const Checkpoint& ckpt,
                 bool require_trainable);

// ---- run reports ----

struct LossPoint {
  std::size_t iteration = 0;  // 1-based, logged every log_every steps
  double j = 0.0;             // weighted total
  double j_obj = 0.0;         // detection / segmentation term
  double j_e = 0.0;           // template-vs-ground-truth cosine term
  double j_d = 0.0;           // recovery cosine term
};

struct EvalMetrics {
  DetectorHead head = DetectorHead::Boxes;
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0;  // Boxes
  double mae = 0.0, f_beta = 0.0;           // Segmentation
};

struct RunReport {
  std::string arm;
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  std::size_t pretrain_iterations = 0;
  std::string config_hash;
  std::string train_dataset_hash;
  std::string eval_dataset_hash;
  std::string init_checkpoint_hash;  // "" when training from scratch
  std::string checkpoint_hash;
  std::vector<std::string> config;  // canonical echo lines
  std::vector<LossPoint> curve;
  bool has_metrics = false;
  EvalMetrics metrics;
  double wall_seconds = 0.0;  // sidecar only, never serialized
};

std::string run_report_json(const RunReport& rep);

// ---- arms ----

struct ArmSpec {
  std::string name;
  std::uint64_t rng_lane = 0;  // distinct init/batch substream lane
  bool passive = false;        // plain detector, no wrapper
  WrapperConfig wrapper;       // ignored when passive
  std::size_t iterations = 0;
  std::size_t pretrain_iterations = 0;  // echoed in the report
  std::string init_checkpoint;          // "" = fresh detector
  bool run_eval = true;
};

// Canonical six-arm ablation schedule, all fine-tuning from the shared
// pretrained detector checkpoint: image_dependent, fixed,
// universal_learnable, no_decoder, additive, passive2x.
std::vector<ArmSpec> ablation_arms(const ExperimentConfig& cfg,
                                   const std::string& pretrain_ckpt,
                                   std::size_t pretrain_iters,
                                   std::size_t arm_iters);

// Name and lane for a single proactive training run derived from the wrapper
// config, matching the ablation arm with the same settings.
ArmSpec classify_single_arm(const ExperimentConfig& cfg);

// ---- engine ----

// Trains one arm, evaluates it on `test` unless arm.run_eval is false, and
// writes <name>.ckpt (plus periodic <name>.it<K>.ckpt) into cfg.output_dir.
// Evaluation never touches decoder parameters (asserted via parameter access
// counters). Non-finite losses raise CliError(kNonFinite) with the iteration.
RunReport run_training(const ExperimentConfig& cfg, const ArmSpec& arm,
                       const SynthDataset& train,
                       const std::string& train_hash,
                       const SynthDataset& test,
                       const std::string& test_hash);

// Shared by post-training evaluation and the eval subcommand. `provider` is
// null for plain evaluation; BN runs in inference mode throughout.
EvalMetrics evaluate_detector(const DetectorConfig& det_cfg, DetectorNet& det,
                              TemplateProvider* provider,
                              TransformMode transform,
                              const SynthDataset& test,
                              std::size_t batch_size);

// ---- subcommand drivers (shared by the CLI and tests) ----

void cmd_theory(const ExperimentConfig& cfg);
void cmd_gen_data(const ExperimentConfig& cfg, const std::string& out_path);
void cmd_train(const ExperimentConfig& cfg);
void cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path);
void cmd_ablate(const ExperimentConfig& cfg);
void cmd_report(const std::vector<std::string>& report_paths,
                const std::string& out_dir);

}  // namespace prodet

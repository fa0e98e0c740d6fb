#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "prodet/harness.hpp"

namespace {

using namespace prodet;

void apply_overrides(IniFile& ini, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    const auto dot = s.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot == 0 ||
        dot + 1 >= eq)
      throw CliError(exit_code::kConfig,
                     "--set expects section.key=value, got '" + s + "'");
    const std::string section = s.substr(0, dot);
    const std::string key = s.substr(dot + 1, eq - dot - 1);
    const std::string value = s.substr(eq + 1);
    bool replaced = false;
    for (auto& e : ini.entries) {
      if (e.section == section && e.key == key) {
        e.value = value;
        replaced = true;
        break;
      }
    }
    if (!replaced) ini.entries.push_back({section, key, value});
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"synthetic testbed for wrapper-based proactive detection"};
  app.require_subcommand(1);

  std::string config_path, out_arg, checkpoint_path;
  std::vector<std::string> overrides, report_inputs;
  std::uint64_t seed = 0;

  struct Cmd {
    CLI::App* sub = nullptr;
    CLI::Option* seed_opt = nullptr;
  };
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "INI config file");
    sub->add_option("--set", overrides,
                    "override a config entry (section.key=value)");
    sub->add_option("--out", out_arg, "output location override");
    return Cmd{sub, sub->add_option("--seed", seed, "master seed")};
  };

  Cmd theory_cmd = add_common(app.add_subcommand(
      "theory", "run the stochastic-approximation verification suite"));
  Cmd gen_cmd = add_common(
      app.add_subcommand("gen-data", "generate a synthetic scene dataset"));
  Cmd train_cmd =
      add_common(app.add_subcommand("train", "train one detector arm"));
  Cmd eval_cmd = add_common(
      app.add_subcommand("eval", "evaluate a checkpoint on a dataset"));
  eval_cmd.sub
      ->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")
      ->required();
  Cmd ablate_cmd = add_common(app.add_subcommand(
      "ablate", "run the six-arm ablation from a shared pretrained detector"));
  CLI::App* report_cmd = app.add_subcommand(
      "report", "aggregate run reports into comparison tables");
  report_cmd->add_option("reports", report_inputs, "report JSON files")
      ->required();
  report_cmd->add_option("--out", out_arg, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code::kConfig;
  }

  try {
    if (report_cmd->parsed()) {
      cmd_report(report_inputs, out_arg);
      return 0;
    }

    IniFile ini;
    if (!config_path.empty()) ini = read_ini_file(config_path);
    apply_overrides(ini, overrides);
    ExperimentConfig cfg = parse_experiment_config(ini);
    const bool mode_given = ini.find("experiment", "mode") != nullptr;

    auto reconcile_mode = [&](RunMode want, const char* sub) {
      if (mode_given && cfg.mode != want)
        throw CliError(exit_code::kConfig,
                       std::string("config experiment.mode conflicts with '") +
                           sub + "'");
      cfg.mode = want;
    };
    auto require_seed = [&](const Cmd& c, const char* sub) {
      if (c.seed_opt->count() == 0)
        throw CliError(exit_code::kConfig,
                       std::string(sub) + ": --seed is required");
      cfg.seed = seed;
    };

    if (theory_cmd.sub->parsed()) {
      reconcile_mode(RunMode::Theory, "theory");
      require_seed(theory_cmd, "theory");
      if (!out_arg.empty()) cfg.output_dir = out_arg;
      validate(cfg);
      cmd_theory(cfg);
    } else if (gen_cmd.sub->parsed()) {
      if (gen_cmd.seed_opt->count() != 0) cfg.dataset.seed = seed;
      if (out_arg.empty())
        throw CliError(exit_code::kConfig,
                       "gen-data: --out dataset path is required");
      validate(cfg.dataset);
      cmd_gen_data(cfg, out_arg);
    } else if (train_cmd.sub->parsed()) {
      if (mode_given && cfg.mode != RunMode::TrainPassive &&
          cfg.mode != RunMode::TrainProactive)
        throw CliError(exit_code::kConfig,
                       "config experiment.mode conflicts with 'train'");
      if (!mode_given) cfg.mode = RunMode::TrainPassive;
      require_seed(train_cmd, "train");
      if (!out_arg.empty()) cfg.output_dir = out_arg;
      validate(cfg);
      cmd_train(cfg);
    } else if (eval_cmd.sub->parsed()) {
      reconcile_mode(RunMode::Eval, "eval");
      if (eval_cmd.seed_opt->count() != 0) cfg.seed = seed;
      if (!out_arg.empty()) cfg.output_dir = out_arg;
      validate(cfg);
      cmd_eval(cfg, checkpoint_path);
    } else if (ablate_cmd.sub->parsed()) {
      reconcile_mode(RunMode::Ablation, "ablate");
      require_seed(ablate_cmd, "ablate");
      if (!out_arg.empty()) cfg.output_dir = out_arg;
      validate(cfg);
      cmd_ablate(cfg);
    }
    return 0;
  } catch (const CliError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code;
  } catch (const ContainerError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.kind == ContainerError::Kind::Io ? exit_code::kMissing
                                              : exit_code::kIntegrity;
  } catch (const SamplingError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code::kRetry;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code::kConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

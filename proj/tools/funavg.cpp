// funavg: generate | train | infer | evaluate | reproduce

#include <funavg/commands.hpp>
#include <funavg/config.hpp>
#include <funavg/errors.hpp>
#include <funavg/parallel.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

namespace {

enum Exit { ok = 0, config_error = 2, data_error = 3, divergence = 4, io_error = 5 };

void print_records(const std::vector<funavg::StageRecord>& records) {
  for (const auto& r : records)
    std::printf("%-40s %s %8.2fs%s\n", r.name.c_str(), r.hash.substr(0, 16).c_str(), r.seconds,
                r.skipped ? " (skipped)" : "");
}

}  // namespace

int main(int argc, char** argv) {
  funavg::tune_allocator();
  CLI::App app{"Federated multi-head segmentation with uncertainty-weighted ensembling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", funavg::version_string());

  std::string config_path, out, mode;
  std::optional<std::uint64_t> seed;
  bool resume = false;

  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "INI run configuration (built-in defaults when omitted)");
    cmd->add_option("--out", out, "Run directory (defaults to [eval] output_dir)");
    cmd->add_option("--seed", seed, "Seed override");
    cmd->add_flag("--resume", resume, "Reuse completed stages whose inputs are unchanged");
  };
  auto* generate = app.add_subcommand("generate", "Write the synthetic federation to <out>/data");
  auto* train = app.add_subcommand("train", "Train checkpoints under <out>/train/<mode>");
  auto* infer = app.add_subcommand("infer", "Predict every test image into <out>/predictions");
  auto* evaluate = app.add_subcommand("evaluate", "Score predictions into <out>/report");
  auto* reproduce = app.add_subcommand("reproduce", "Full pipeline for every seed plus aggregate/");
  for (auto* cmd : {generate, train, infer, evaluate, reproduce}) add_common(cmd);
  train->add_option("--mode", mode, "federated | centralized | local")->default_str("federated");
  infer->add_option("--mode", mode, "vanilla | funavg | all")->default_str("all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Exit::ok : Exit::config_error;
  }

  try {
    const auto config = config_path.empty() ? funavg::RunConfig{} : funavg::load_config(config_path);
    const std::filesystem::path run_dir = out.empty() ? config.output_dir : out;
    const funavg::CommandOptions options{seed.value_or(config.seeds.front()), resume};
    std::vector<funavg::StageRecord> records;
    if (generate->parsed()) {
      records = funavg::cmd_generate(config, run_dir, options);
    } else if (train->parsed()) {
      records = funavg::cmd_train(config, run_dir, funavg::parse_train_mode(mode.empty() ? "federated" : mode), options);
    } else if (infer->parsed()) {
      records = funavg::cmd_infer(config, run_dir, funavg::parse_infer_mode(mode.empty() ? "all" : mode), options);
    } else if (evaluate->parsed()) {
      records = funavg::cmd_evaluate(config, run_dir, options);
    } else {
      auto cfg = config;
      if (seed) cfg.seeds = {*seed};
      records = funavg::cmd_reproduce(cfg, run_dir, resume);
    }
    print_records(records);
    return Exit::ok;
  } catch (const funavg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return Exit::config_error;
  } catch (const funavg::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return Exit::data_error;
  } catch (const funavg::DivergenceError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return Exit::divergence;
  } catch (const funavg::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return Exit::io_error;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return Exit::io_error;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return Exit::config_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return Exit::data_error;
  }
}

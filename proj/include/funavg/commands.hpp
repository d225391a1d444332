#pragma once

// Experiment driver. A run directory holds one stage per subdirectory:
//
//   data/                          generate
//   train/{federated,centralized}  train --mode federated|centralized
//   train/local/<client>/          train --mode local
//   predictions/<kind>/<fusion>/   infer (kind: federated|centralized)
//   predictions/local/<model>/     infer (when local checkpoints exist)
//   report/                        evaluate
//
// Each finished stage carries a .done stamp with its input key and content
// hash. reproduce lays out one run directory per seed plus aggregate/.

#include <funavg/config.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace funavg {

/// Version string baked in at configure time (git describe when available).
const char* version_string();

/// SHA-256 hex digest.
std::string sha256_hex(const std::string& bytes);
/// Digest over sorted relative paths and file contents; .done stamps and
/// `exclude` names are skipped.
std::string directory_hash(const std::filesystem::path& dir, const std::vector<std::string>& exclude = {});

enum class TrainMode { federated, centralized, local };
TrainMode parse_train_mode(const std::string& name);
const char* train_mode_name(TrainMode mode);

enum class InferMode { vanilla, funavg, all };
InferMode parse_infer_mode(const std::string& name);

struct CommandOptions {
  std::uint64_t seed = 0;
  bool resume = false;
};

struct StageRecord {
  std::string name;
  std::string hash;
  double seconds = 0.0;
  bool skipped = false;
};

std::vector<StageRecord> cmd_generate(const RunConfig& config, const std::filesystem::path& run_dir,
                                      const CommandOptions& options);
std::vector<StageRecord> cmd_train(const RunConfig& config, const std::filesystem::path& run_dir, TrainMode mode,
                                   const CommandOptions& options);
std::vector<StageRecord> cmd_infer(const RunConfig& config, const std::filesystem::path& run_dir, InferMode mode,
                                   const CommandOptions& options);
std::vector<StageRecord> cmd_evaluate(const RunConfig& config, const std::filesystem::path& run_dir,
                                      const CommandOptions& options);

/// generate → train ×{local, centralized, federated} → infer → evaluate for
/// every seed, then aggregate/ and run_manifest.txt under `out_dir`.
std::vector<StageRecord> cmd_reproduce(const RunConfig& config, const std::filesystem::path& out_dir, bool resume);

/// Method rows in table order.
const std::vector<std::string>& method_order();

}  // namespace funavg

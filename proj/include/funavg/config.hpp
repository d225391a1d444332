#pragma once

// Run configuration: INI-style sections of key = value lines, '#' comments.
// Every error names the source and line.

#include <funavg/ensemble.hpp>
#include <funavg/federation.hpp>
#include <funavg/metrics.hpp>
#include <funavg/synth.hpp>
#include <funavg/uncertainty.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace funavg {

struct RunConfig {
  // [data]
  int image_size = 64;
  std::vector<std::string> labels{"L1", "L2", "L3", "L4", "L5"};
  std::vector<std::string> clients{"A", "B", "C", "D"};
  std::map<std::string, std::vector<std::string>> label_sets{
      {"A", {"L1", "L3", "L4"}}, {"B", {"L2", "L3", "L5"}}, {"C", {"L2", "L4", "L5"}}, {"D", {"L3", "L4", "L5"}}};
  std::vector<int> n_per_client{25, 35, 45, 55};
  std::uint64_t world_seed = 1;
  double split_fraction = 0.8;
  std::vector<int> annotation_offsets{0, 0, 0, 0};
  double noise_sigma = 0.05;

  // [model]
  std::vector<int> widths{16, 32, 32};
  double dropout_p = 0.25;
  DType dtype = DType::f32;

  // [federation]
  int rounds = 20;
  int epochs = 2;
  double lr = 0.3;
  int batch = 4;

  // [uq]
  int T = 8;
  int ece_bins = 10;
  UNorm u_norm = UNorm::trace_norm;
  UAgg u_agg = UAgg::mean;

  // [eval]
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "runs/default";
  EmptyDice empty_dice = EmptyDice::one;
  Aggregation aggregation = Aggregation::per_dataset;

  LabelRegistry registry() const;
  /// World for one seed; annotation offsets and sizes come from [data].
  WorldSpec world_spec(std::uint64_t seed) const;
  FedConfig fed_config(std::uint64_t seed) const;

  /// Normalized text form; parse_config(canonical()) == *this.
  std::string canonical() const;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

/// Throws ConfigError "<source>:<line>: ..." for syntax errors, unknown
/// sections or keys, duplicates, bad values and unresolved cross-references.
RunConfig parse_config(const std::string& text, const std::string& source = "config");
RunConfig load_config(const std::filesystem::path& path);

}  // namespace funavg

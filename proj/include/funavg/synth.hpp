#pragma once

// Synthetic "anatomies": every image shows one geometric structure per global
// label; each client only annotates its own label subset.

#include <funavg/tensor.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace funavg {

/// Global label set and per-client subsets. Channel 0 is the implicit
/// background; global label i occupies channel i + 1.
struct LabelRegistry {
  std::vector<std::string> global_labels;
  std::map<std::string, std::vector<std::string>> client_label_sets;  // keyed (and ordered) by client id

  /// Throws std::invalid_argument on empty or unknown sets and on labels
  /// that no client annotates.
  void validate() const;

  int num_labels() const { return static_cast<int>(global_labels.size()); }
  int num_channels() const { return num_labels() + 1; }
  std::vector<std::string> clients() const;
  int client_index(const std::string& client) const;

  /// Global channel of a label name; throws for unknown labels.
  int channel_of(const std::string& label) const;

  /// k vector: k[c − 1] = number of clients annotating global channel c.
  std::vector<int> presence_counts() const;

  /// Global channels of a client's labels in ascending order, which is also
  /// the local channel order of that client's head (local channel j + 1).
  std::vector<int> client_channels(const std::string& client) const;
};

struct Sample {
  std::string id;
  Tensor<float> image;  // 1×H×W in [0, 1]
  LabelMap full_labels;
  LabelMap client_labels;
};

struct ClientDataset {
  std::string client_id;
  std::vector<Sample> train;
  std::vector<Sample> test;

  std::size_t n_train() const { return train.size(); }
};

enum class Shape { disk, rectangle, ellipse, ring, bar, cross, diamond, triangle };

struct WorldOptions {
  double noise_sigma = 0.05;
  double background_intensity = 0.1;
  double jitter_fraction = 0.08;  // of image size, per axis
  int min_gap = 3;                // pixels between distinct structures
  int max_attempts = 100;
};

Shape shape_of_label(int label_index);
const char* shape_name(Shape shape);
double label_intensity(int label_index, int num_labels);

/// n_images fully labeled samples; sample i draws only from
/// RngState{seed}.derive(i), so generation order does not matter.
std::vector<Sample> make_world(std::uint64_t seed, int n_images, int image_size, const LabelRegistry& registry,
                               const WorldOptions& options = {});

/// Dilates (offset > 0) or erodes (offset < 0) every structure by |offset|
/// pixels, mimicking a client-specific annotation protocol.
LabelMap apply_annotation_offset(const LabelMap& labels, int offset);

/// Collapses every label outside `client_set` to background.
Sample mask_labels(const Sample& sample, const std::vector<std::string>& client_set, const LabelRegistry& registry);

/// Deterministic shuffled split with |train| = floor(fraction·n).
std::pair<std::vector<Sample>, std::vector<Sample>> split_train_test(std::vector<Sample> samples, double fraction,
                                                                     std::uint64_t seed);

/// Per-client generation parameters.
struct WorldSpec {
  int image_size = 64;
  std::uint64_t seed = 0;
  double split_fraction = 0.8;
  std::map<std::string, int> n_per_client;        // total images before the split
  std::map<std::string, int> annotation_offsets;  // missing entries mean 0
  WorldOptions options;
};

/// Generates, annotates, masks and splits every client's data.
std::vector<ClientDataset> make_federation(const LabelRegistry& registry, const WorldSpec& spec);

struct DatasetBundle {
  LabelRegistry registry;
  WorldSpec spec;
  std::vector<ClientDataset> clients;  // ordered by client id

  const ClientDataset& client(const std::string& id) const;
};

/// manifest.txt + images/, labels_full/, labels_client/ as FUNT files.
void write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle);
DatasetBundle read_dataset(const std::filesystem::path& dir);

}  // namespace funavg

#pragma once

#include <funavg/nn.hpp>
#include <funavg/synth.hpp>

#include <filesystem>
#include <random>
#include <string>

namespace testing {

inline funavg::Tensor<double> random_tensor(std::vector<int> dims, std::mt19937_64& gen, double lo = -1.0,
                                            double hi = 1.0) {
  funavg::Tensor<double> t(std::move(dims));
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = lo + (hi - lo) * funavg::uniform01(gen);
  return t;
}

inline funavg::LabelMap random_labels(int h, int w, int channels, std::mt19937_64& gen) {
  funavg::LabelMap m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::int32_t(gen() % std::uint64_t(channels));
  return m;
}

inline funavg::LabelRegistry two_client_registry() {
  funavg::LabelRegistry r;
  r.global_labels = {"L1", "L2", "L3"};
  r.client_label_sets = {{"A", {"L1", "L2"}}, {"B", {"L2", "L3"}}};
  return r;
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("funavg_test_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace testing

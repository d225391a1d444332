#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace funavg {

/// Dense row-major tensor with an Eigen vector as storage.
///
/// A C×H×W activation maps onto an (H·W)×C column-major matrix without a
/// copy, which is how the convolution code hands work to Eigen's GEMM.
template <typename Scalar>
class Tensor {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using PixelMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  Tensor() = default;

  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    for (int d : dims_)
      if (d <= 0) throw std::invalid_argument("Tensor: extents must be positive");
    data_ = Vector::Zero(count(dims_));
  }

  Tensor(std::initializer_list<int> dims) : Tensor(std::vector<int>(dims)) {}

  Tensor(std::vector<int> dims, Vector data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != count(dims_))
      throw std::invalid_argument("Tensor: data length does not match extents");
  }

  static Tensor constant(std::vector<int> dims, Scalar value) {
    Tensor t(std::move(dims));
    t.data_.setConstant(value);
    return t;
  }

  static Eigen::Index count(const std::vector<int>& dims) {
    return std::accumulate(dims.begin(), dims.end(), Eigen::Index{1},
                           [](Eigen::Index a, int b) { return a * b; });
  }

  const std::vector<int>& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_.at(static_cast<std::size_t>(i)); }
  Eigen::Index size() const { return data_.size(); }
  bool empty() const { return dims_.empty(); }

  Vector& data() { return data_; }
  const Vector& data() const { return data_; }

  Scalar& operator[](Eigen::Index i) { return data_[i]; }
  Scalar operator[](Eigen::Index i) const { return data_[i]; }

  Scalar& at(int c, int y, int x) { return data_[(Eigen::Index(c) * dims_[1] + y) * dims_[2] + x]; }
  Scalar at(int c, int y, int x) const { return data_[(Eigen::Index(c) * dims_[1] + y) * dims_[2] + x]; }

  /// View of a C×H×W tensor as an (H·W)×C matrix.
  Eigen::Map<PixelMatrix> pixels() {
    require_rank3();
    return {data_.data(), Eigen::Index(dims_[1]) * dims_[2], dims_[0]};
  }
  Eigen::Map<const PixelMatrix> pixels() const {
    require_rank3();
    return {data_.data(), Eigen::Index(dims_[1]) * dims_[2], dims_[0]};
  }

  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(dims_, data_.template cast<Other>());
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void require_rank3() const {
    if (dims_.size() != 3) throw std::invalid_argument("Tensor: expected C×H×W");
  }

  std::vector<int> dims_;
  Vector data_;
};

/// H×W integer label map; 0 is background.
using LabelMap = Eigen::Array<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// H×W real-valued map (uncertainty and similar per-pixel scalars).
using PixelMap = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// FNV-1a; stable across platforms, unlike std::hash.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

/// Explicit random state. Identical (seed, stream) pairs reproduce identical
/// draws; `derive` names a child stream without consuming anything.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;

  RngState derive(std::uint64_t tag) const { return {seed, mix64(stream ^ mix64(tag + 0x632be59bd9b4e019ULL))}; }

  template <typename... Tags>
  RngState derive(std::uint64_t tag, Tags... rest) const {
    if constexpr (sizeof...(rest) == 0) {
      return derive(tag);
    } else {
      return derive(tag).derive(static_cast<std::uint64_t>(rest)...);
    }
  }

  std::mt19937_64 engine() const { return std::mt19937_64(mix64(seed) ^ mix64(~stream)); }

  friend bool operator==(const RngState&, const RngState&) = default;
};

/// Uniform double in [0, 1) from the top 53 bits of one engine draw.
inline double uniform01(std::mt19937_64& gen) { return double(gen() >> 11) * 0x1.0p-53; }

}  // namespace funavg

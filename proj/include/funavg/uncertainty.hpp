#pragma once

// MC-dropout posterior samples, the aleatoric/epistemic decomposition of the
// predictive covariance, and expected calibration error.

#include <funavg/nn.hpp>

#include <string>
#include <vector>

namespace funavg {

/// T softmax samples, stored T×C×H×W in double precision.
struct PosteriorStack {
  Tensor<double> samples;

  int num_samples() const { return samples.dim(0); }
  int channels() const { return samples.dim(1); }
  int height() const { return samples.dim(2); }
  int width() const { return samples.dim(3); }
  Eigen::Index pixels() const { return Eigen::Index(height()) * width(); }

  /// Sample t as an (H·W)×C matrix.
  Eigen::Map<const Eigen::MatrixXd> sample(int t) const {
    return {samples.data().data() + Eigen::Index(t) * channels() * pixels(), pixels(), channels()};
  }
};

/// Builds a stack from per-sample C×H×W probability tensors.
PosteriorStack stack_samples(const std::vector<Tensor<double>>& probs);

/// T stochastic forwards with dropout active; sample t uses rng.derive(t).
template <typename Scalar>
PosteriorStack mc_sample(const ModelParams<Scalar>& params, const std::string& head_id, const Tensor<Scalar>& image,
                         int T, const RngState& rng) {
  if (T < 1) throw std::invalid_argument("mc_sample: T must be >= 1");
  std::vector<Tensor<double>> probs;
  probs.reserve(std::size_t(T));
  for (int t = 0; t < T; ++t)
    probs.push_back(
        softmax_channels(forward(params, head_id, image, Mode::mc_test, rng.derive(std::uint64_t(t)))).template cast<double>());
  return stack_samples(probs);
}

/// mc_sample for several heads of one model; each sample t shares its
/// backbone dropout masks across heads, so every head's stack equals what
/// mc_sample would return for it alone.
template <typename Scalar>
std::vector<PosteriorStack> mc_sample_heads(const ModelParams<Scalar>& params, const std::vector<std::string>& head_ids,
                                            const Tensor<Scalar>& image, int T, const RngState& rng) {
  if (T < 1) throw std::invalid_argument("mc_sample: T must be >= 1");
  std::vector<std::vector<Tensor<double>>> probs(head_ids.size());
  for (int t = 0; t < T; ++t) {
    const auto feats = features(params, image, Mode::mc_test, rng.derive(std::uint64_t(t)));
    for (std::size_t h = 0; h < head_ids.size(); ++h)
      probs[h].push_back(softmax_channels(head_logits(params, head_ids[h], feats)).template cast<double>());
  }
  std::vector<PosteriorStack> out;
  for (const auto& p : probs) out.push_back(stack_samples(p));
  return out;
}

/// p̄ = (1/T) Σ_t p̂_t, C×H×W.
Tensor<double> mean_prob(const PosteriorStack& stack);

struct UncertaintyMaps {
  PixelMap aleatoric_trace;
  PixelMap epistemic_trace;
  PixelMap total_trace;
  PixelMap scalar_u;
};

/// Full C×C matrices for one pixel:
///   aleatoric = (1/T) Σ_t [diag(p̂_t) − p̂_t p̂_tᵀ]
///   epistemic = (1/T) Σ_t (p̂_t − p̄)(p̂_t − p̄)ᵀ
struct PixelCovariance {
  Eigen::MatrixXd aleatoric;
  Eigen::MatrixXd epistemic;
};

PixelCovariance pixel_covariance(const PosteriorStack& stack, Eigen::Index pixel);

enum class UNorm { trace_norm, per_image_minmax };

UNorm parse_unorm(const std::string& name);
const char* unorm_name(UNorm norm);

/// Traces of both terms per pixel (requires T >= 2); scalar_u is filled with
/// the trace-normalized value.
UncertaintyMaps uncertainty_decompose(const PosteriorStack& stack);

/// trace_norm: total_trace / (1 − 1/C) clamped to [0, 1].
/// per_image_minmax: total_trace rescaled so the image spans [0, 1].
PixelMap scalar_uncertainty(const UncertaintyMaps& maps, int channels, UNorm norm = UNorm::trace_norm);

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double conf = 0.0;  // mean confidence, 0 for empty bins
  double acc = 0.0;   // fraction correct, 0 for empty bins
};

struct CalibrationReport {
  int bins_count = 0;
  std::size_t n = 0;
  std::vector<CalibrationBin> bins;
  double ece = 0.0;

  /// Columns bin_lo, bin_hi, count, conf, acc.
  std::string to_csv() const;
};

/// M equal-width bins over (0, 1], right-closed, with confidence 0 placed in
/// the first bin. ECE = Σ_m (|B_m| / n) |acc(B_m) − conf(B_m)|.
CalibrationReport ece(const Eigen::ArrayXd& confidences, const Eigen::Array<bool, Eigen::Dynamic, 1>& correct, int M);

/// Index of the bin holding `confidence` under the rule above.
int calibration_bin(double confidence, int M);

}  // namespace funavg

#include <funavg/text.hpp>
#include <funavg/uncertainty.hpp>

#include <algorithm>
#include <cmath>

namespace funavg {

PosteriorStack stack_samples(const std::vector<Tensor<double>>& probs) {
  if (probs.empty()) throw std::invalid_argument("posterior stack: no samples");
  const auto& d = probs.front().dims();
  if (d.size() != 3) throw std::invalid_argument("posterior stack: samples must be C×H×W");
  PosteriorStack stack{Tensor<double>({int(probs.size()), d[0], d[1], d[2]})};
  const Eigen::Index block = probs.front().size();
  for (std::size_t t = 0; t < probs.size(); ++t) {
    if (probs[t].dims() != d) throw std::invalid_argument("posterior stack: samples differ in shape");
    stack.samples.data().segment(Eigen::Index(t) * block, block) = probs[t].data();
  }
  return stack;
}

Tensor<double> mean_prob(const PosteriorStack& stack) {
  Tensor<double> mean({stack.channels(), stack.height(), stack.width()});
  auto m = mean.pixels();
  for (int t = 0; t < stack.num_samples(); ++t) m += stack.sample(t);
  m /= double(stack.num_samples());
  return mean;
}

PixelCovariance pixel_covariance(const PosteriorStack& stack, Eigen::Index pixel) {
  const int C = stack.channels(), T = stack.num_samples();
  PixelCovariance cov{Eigen::MatrixXd::Zero(C, C), Eigen::MatrixXd::Zero(C, C)};
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(C);
  for (int t = 0; t < T; ++t) mean += stack.sample(t).row(pixel).transpose();
  mean /= double(T);
  for (int t = 0; t < T; ++t) {
    const Eigen::VectorXd p = stack.sample(t).row(pixel).transpose();
    cov.aleatoric += Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();
    const Eigen::VectorXd d = p - mean;
    cov.epistemic += d * d.transpose();
  }
  cov.aleatoric /= double(T);
  cov.epistemic /= double(T);
  return cov;
}

UNorm parse_unorm(const std::string& name) {
  if (name == "trace_norm") return UNorm::trace_norm;
  if (name == "per_image_minmax") return UNorm::per_image_minmax;
  throw std::invalid_argument("unknown u_norm '" + name + "' (expected trace_norm or per_image_minmax)");
}

const char* unorm_name(UNorm norm) { return norm == UNorm::trace_norm ? "trace_norm" : "per_image_minmax"; }

UncertaintyMaps uncertainty_decompose(const PosteriorStack& stack) {
  const int T = stack.num_samples(), C = stack.channels();
  if (T < 2) throw std::invalid_argument("uncertainty_decompose: T must be >= 2");
  const int h = stack.height(), w = stack.width();
  const Tensor<double> mean = mean_prob(stack);
  const auto m = mean.pixels();
  UncertaintyMaps maps;
  maps.aleatoric_trace = PixelMap::Zero(h, w);
  maps.epistemic_trace = PixelMap::Zero(h, w);
  for (int t = 0; t < T; ++t) {
    const auto p = stack.sample(t);
    for (Eigen::Index i = 0; i < stack.pixels(); ++i) {
      double alea = 0.0, epi = 0.0;
      for (int c = 0; c < C; ++c) {
        const double v = p(i, c), d = v - m(i, c);
        alea += v - v * v;
        epi += d * d;
      }
      maps.aleatoric_trace.data()[i] += alea;
      maps.epistemic_trace.data()[i] += epi;
    }
  }
  maps.aleatoric_trace /= double(T);
  maps.epistemic_trace /= double(T);
  maps.total_trace = maps.aleatoric_trace + maps.epistemic_trace;
  maps.scalar_u = scalar_uncertainty(maps, C);
  return maps;
}

PixelMap scalar_uncertainty(const UncertaintyMaps& maps, int channels, UNorm norm) {
  if (channels < 2) throw std::invalid_argument("scalar_uncertainty: need at least 2 channels");
  if (norm == UNorm::trace_norm)
    return (maps.total_trace / (1.0 - 1.0 / double(channels))).cwiseMax(0.0).cwiseMin(1.0);
  const double lo = maps.total_trace.minCoeff(), hi = maps.total_trace.maxCoeff();
  if (hi - lo <= 0.0) return PixelMap::Zero(maps.total_trace.rows(), maps.total_trace.cols());
  return ((maps.total_trace - lo) / (hi - lo)).cwiseMax(0.0).cwiseMin(1.0);
}

int calibration_bin(double confidence, int M) {
  int m = std::clamp(int(std::ceil(confidence * M)) - 1, 0, M - 1);
  while (m > 0 && confidence <= double(m) / M) --m;
  while (m < M - 1 && confidence > double(m + 1) / M) ++m;
  return m;
}

CalibrationReport ece(const Eigen::ArrayXd& confidences, const Eigen::Array<bool, Eigen::Dynamic, 1>& correct, int M) {
  if (M < 1) throw std::invalid_argument("ece: need at least one bin");
  if (confidences.size() != correct.size()) throw std::invalid_argument("ece: length mismatch");
  if (confidences.size() == 0) throw std::invalid_argument("ece: no inputs");
  CalibrationReport report;
  report.bins_count = M;
  report.n = std::size_t(confidences.size());
  std::vector<double> conf_sum(std::size_t(M), 0.0);
  std::vector<std::size_t> hits(std::size_t(M), 0);
  report.bins.resize(std::size_t(M));
  for (Eigen::Index i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("ece: confidence outside [0, 1]");
    const auto m = std::size_t(calibration_bin(c, M));
    ++report.bins[m].count;
    conf_sum[m] += c;
    hits[m] += correct[i] ? 1 : 0;
  }
  for (std::size_t m = 0; m < std::size_t(M); ++m) {
    auto& b = report.bins[m];
    b.lo = double(m) / M;
    b.hi = double(m + 1) / M;
    if (b.count == 0) continue;
    b.conf = conf_sum[m] / double(b.count);
    b.acc = double(hits[m]) / double(b.count);
    report.ece += double(b.count) / double(report.n) * std::abs(b.acc - b.conf);
  }
  return report;
}

std::string CalibrationReport::to_csv() const {
  std::string csv = "bin_lo,bin_hi,count,conf,acc\n";
  for (const auto& b : bins)
    csv += format_g6(b.lo) + "," + format_g6(b.hi) + "," + std::to_string(b.count) + "," + format_g6(b.conf) + "," +
           format_g6(b.acc) + "\n";
  return csv;
}

}  // namespace funavg

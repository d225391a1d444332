#include <funavg/ensemble.hpp>

#include <algorithm>
#include <stdexcept>

namespace funavg {

FusionMode parse_fusion_mode(const std::string& name) {
  if (name == "vanilla") return FusionMode::vanilla;
  if (name == "funavg") return FusionMode::funavg;
  throw std::invalid_argument("unknown fusion mode '" + name + "' (expected vanilla or funavg)");
}

const char* fusion_mode_name(FusionMode mode) { return mode == FusionMode::vanilla ? "vanilla" : "funavg"; }

UAgg parse_uagg(const std::string& name) {
  if (name == "mean") return UAgg::mean;
  if (name == "max") return UAgg::max;
  throw std::invalid_argument("unknown u_agg '" + name + "' (expected mean or max)");
}

const char* uagg_name(UAgg agg) { return agg == UAgg::mean ? "mean" : "max"; }

Tensor<double> align_channels(const HeadPrediction& head, const LabelRegistry& registry) {
  const auto channels = registry.client_channels(head.client_id);
  const auto& p = head.mean_probs;
  if (p.rank() != 3 || p.dim(0) != int(channels.size()) + 1)
    throw std::invalid_argument("align_channels: head '" + head.client_id + "' channel count does not match registry");
  Tensor<double> global({registry.num_channels(), p.dim(1), p.dim(2)});
  auto g = global.pixels();
  const auto local = p.pixels();
  g.col(0) = local.col(0);
  for (std::size_t j = 0; j < channels.size(); ++j) g.col(channels[j]) = local.col(Eigen::Index(j) + 1);
  return global;
}

Tensor<double> gather_channels(const Tensor<double>& global, const std::string& client, const LabelRegistry& registry) {
  const auto channels = registry.client_channels(client);
  if (global.rank() != 3 || global.dim(0) != registry.num_channels())
    throw std::invalid_argument("gather_channels: expected a global-channel tensor");
  Tensor<double> local({int(channels.size()) + 1, global.dim(1), global.dim(2)});
  auto l = local.pixels();
  const auto g = global.pixels();
  l.col(0) = g.col(0);
  for (std::size_t j = 0; j < channels.size(); ++j) l.col(Eigen::Index(j) + 1) = g.col(channels[j]);
  return local;
}

LabelMap predict(const Tensor<double>& probs) {
  const auto p = probs.pixels();
  LabelMap labels(probs.dim(1), probs.dim(2));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    int best = 0;
    for (Eigen::Index c = 1; c < p.cols(); ++c)
      if (p(i, c) > p(i, best)) best = int(c);
    labels.data()[i] = best;
  }
  return labels;
}

GlobalPrediction ensemble_average(const std::vector<HeadPrediction>& heads, const LabelRegistry& registry, UAgg agg) {
  if (heads.empty()) throw std::invalid_argument("ensemble_average: no heads");
  std::vector<const HeadPrediction*> ordered;
  for (const auto& h : heads) ordered.push_back(&h);
  std::sort(ordered.begin(), ordered.end(),
            [](const HeadPrediction* a, const HeadPrediction* b) { return a->client_id < b->client_id; });
  const int height = heads.front().mean_probs.dim(1), width = heads.front().mean_probs.dim(2);

  GlobalPrediction out;
  out.probs = Tensor<double>({registry.num_channels(), height, width});
  out.ensemble_u = PixelMap::Zero(height, width);
  std::vector<int> k(std::size_t(registry.num_channels()), 0);
  for (const auto* h : ordered) {
    if (h->mean_probs.dim(1) != height || h->mean_probs.dim(2) != width)
      throw std::invalid_argument("ensemble_average: heads disagree on image size");
    if (h->scalar_u.rows() != height || h->scalar_u.cols() != width)
      throw std::invalid_argument("ensemble_average: uncertainty map size mismatch");
    out.probs.data() += align_channels(*h, registry).data();
    ++k[0];
    for (int c : registry.client_channels(h->client_id)) ++k[std::size_t(c)];
    if (agg == UAgg::mean)
      out.ensemble_u += h->scalar_u;
    else
      out.ensemble_u = out.ensemble_u.max(h->scalar_u);
  }
  auto p = out.probs.pixels();
  for (std::size_t c = 0; c < k.size(); ++c) {
    if (k[c] == 0)
      throw std::invalid_argument("ensemble_average: no head annotates '" + registry.global_labels[c - 1] + "'");
    p.col(Eigen::Index(c)) /= double(k[c]);
  }
  if (agg == UAgg::mean) out.ensemble_u /= double(ordered.size());
  out.labels = predict(out.probs);
  out.mode = FusionMode::vanilla;
  return out;
}

GlobalPrediction funavg_reweight(const GlobalPrediction& global, const PixelMap& u) {
  const auto& probs = global.probs;
  if (u.rows() != probs.dim(1) || u.cols() != probs.dim(2))
    throw std::invalid_argument("funavg_reweight: uncertainty map size mismatch");
  if ((u < 0.0).any() || (u > 1.0).any() || !u.allFinite())
    throw std::invalid_argument("funavg_reweight: uncertainty outside [0, 1]");
  GlobalPrediction out = global;
  auto bg = out.probs.pixels().col(0);
  for (Eigen::Index i = 0; i < bg.size(); ++i) bg[i] *= 1.0 - u.data()[i];
  out.ensemble_u = u;
  out.labels = predict(out.probs);
  out.mode = FusionMode::funavg;
  return out;
}

}  // namespace funavg

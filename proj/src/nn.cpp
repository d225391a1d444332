#include <funavg/nn.hpp>

namespace funavg {

std::vector<LayerSpec> make_backbone(const std::vector<int>& widths, double dropout_p, int in_channels) {
  std::vector<LayerSpec> spec;
  int in = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    spec.push_back({LayerKind::conv3x3, in, widths[i], 0.0});
    spec.push_back({LayerKind::relu, widths[i], widths[i], 0.0});
    if (i + 1 < widths.size()) spec.push_back({LayerKind::dropout, widths[i], widths[i], dropout_p});
    in = widths[i];
  }
  validate_backbone(spec);
  return spec;
}

void validate_backbone(const std::vector<LayerSpec>& spec) {
  int channels = spec.empty() ? 0 : spec.front().in_channels;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const auto& layer = spec[i];
    if (layer.in_channels <= 0 || layer.out_channels <= 0)
      throw std::invalid_argument("layer " + std::to_string(i) + ": channel counts must be positive");
    if (layer.in_channels != channels)
      throw std::invalid_argument("layer " + std::to_string(i) + ": expects " + std::to_string(layer.in_channels) +
                                  " channels, previous layer produces " + std::to_string(channels));
    if (!layer.is_conv() && layer.out_channels != layer.in_channels)
      throw std::invalid_argument("layer " + std::to_string(i) + ": elementwise layer changes channel count");
    if (layer.kind == LayerKind::dropout && !(layer.dropout_p >= 0.0 && layer.dropout_p < 1.0))
      throw std::invalid_argument("layer " + std::to_string(i) + ": dropout p must lie in [0, 1)");
    channels = layer.out_channels;
  }
}

int feature_channels(const std::vector<LayerSpec>& spec) {
  if (spec.empty()) throw std::invalid_argument("empty backbone has no defined feature width");
  return spec.back().out_channels;
}

namespace {

double instance_loss(const ModelParams<double>& params, const GradCheckInstance& inst) {
  return loss(params, inst.head_id, inst.input, inst.target, Mode::train, inst.rng);
}

double relative_error(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
}

template <typename Visit>
void for_each_parameter(ModelParams<double>& params, const std::string& head_id, const Gradients<double>& grads,
                        Visit&& visit) {
  for (std::size_t l = 0; l < params.backbone.size(); ++l) {
    for (Eigen::Index i = 0; i < params.backbone[l].weight.size(); ++i)
      visit(params.backbone[l].weight[i], grads.backbone[l].weight[i]);
    for (Eigen::Index i = 0; i < params.backbone[l].bias.size(); ++i)
      visit(params.backbone[l].bias[i], grads.backbone[l].bias[i]);
  }
  auto& head = params.heads.at(head_id);
  for (Eigen::Index i = 0; i < head.weight.size(); ++i) visit(head.weight[i], grads.head.weight[i]);
  for (Eigen::Index i = 0; i < head.bias.size(); ++i) visit(head.bias[i], grads.head.bias[i]);
}

}  // namespace

double grad_check(const ModelParams<double>& params, const GradCheckInstance& instance, double eps,
                  const Gradients<double>* analytic) {
  Gradients<double> computed;
  if (!analytic) {
    computed = backward(params, instance.head_id, instance.input, instance.target, instance.rng).grads;
    analytic = &computed;
  }
  ModelParams<double> probe = params;
  double worst = 0.0;
  for_each_parameter(probe, instance.head_id, *analytic, [&](double& value, double grad) {
    const double saved = value;
    value = saved + eps;
    const double up = instance_loss(probe, instance);
    value = saved - eps;
    const double down = instance_loss(probe, instance);
    value = saved;
    worst = std::max(worst, relative_error(grad, (up - down) / (2.0 * eps)));
  });
  return worst;
}

double relu_margin(const ModelParams<double>& params, const GradCheckInstance& instance) {
  ForwardTrace<double> trace;
  forward(params, instance.head_id, instance.input, Mode::train, instance.rng, &trace);
  return trace.min_relu_margin;
}

}  // namespace funavg

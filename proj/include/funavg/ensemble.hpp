#pragma once

// Fusion of per-head MC-mean probabilities into a global prediction:
// per-channel sums divided by the number of heads that annotate the label,
// optional (1 − u) reweighting of the background channel, argmax.

#include <funavg/synth.hpp>
#include <funavg/tensor.hpp>

#include <string>
#include <vector>

namespace funavg {

struct HeadPrediction {
  std::string client_id;
  Tensor<double> mean_probs;  // (1 + |labels_c|)×H×W, local channel order
  PixelMap scalar_u;
};

enum class FusionMode { vanilla, funavg };
enum class UAgg { mean, max };

FusionMode parse_fusion_mode(const std::string& name);
const char* fusion_mode_name(FusionMode mode);
UAgg parse_uagg(const std::string& name);
const char* uagg_name(UAgg agg);

struct GlobalPrediction {
  Tensor<double> probs;  // (1 + C_global)×H×W, not normalized per pixel
  PixelMap ensemble_u;
  LabelMap labels;
  FusionMode mode = FusionMode::vanilla;
};

/// Scatters a head's local channels into global channel positions; global
/// labels the head does not own are 0.
Tensor<double> align_channels(const HeadPrediction& head, const LabelRegistry& registry);

/// Inverse of align_channels for the given client.
Tensor<double> gather_channels(const Tensor<double>& global, const std::string& client, const LabelRegistry& registry);

/// Channel c = Σ over heads owning c, divided by the number of such heads;
/// background is divided by the number of heads. Heads are summed in
/// client-id order. ensemble_u aggregates the heads' scalar_u.
GlobalPrediction ensemble_average(const std::vector<HeadPrediction>& heads, const LabelRegistry& registry,
                                  UAgg agg = UAgg::mean);

/// Background channel × (1 − u); structure channels untouched; labels redone.
GlobalPrediction funavg_reweight(const GlobalPrediction& global, const PixelMap& u);

/// Per-pixel argmax; exact ties go to the lowest channel index.
LabelMap predict(const Tensor<double>& probs);

}  // namespace funavg

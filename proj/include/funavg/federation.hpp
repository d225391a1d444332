#pragma once

// Federated training of a shared backbone with client-owned heads, plus the
// centralized and local-only baselines. All randomness flows from
// (seed, round, client, epoch, position), so the three modes draw identical
// masks and batch orders for a client and results never depend on scheduling.

#include <funavg/errors.hpp>
#include <funavg/funt_io.hpp>
#include <funavg/nn.hpp>
#include <funavg/parallel.hpp>
#include <funavg/synth.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace funavg {

struct FedConfig {
  int rounds = 20;
  int local_epochs = 2;
  double lr = 0.3;
  int batch = 4;
  double dropout_p = 0.25;
  std::uint64_t seed = 0;
  DType dtype = DType::f32;
  std::vector<int> widths{16, 32, 32};

  void validate() const;
  std::vector<LayerSpec> backbone_spec() const { return make_backbone(widths, dropout_p); }
};

template <typename Scalar>
using Backbone = std::vector<ConvParams<Scalar>>;

/// A client's training data with targets remapped to local head channels.
template <typename Scalar>
struct TrainingSet {
  std::string client_id;
  int channels = 0;  // 1 + |client labels|
  std::vector<Tensor<Scalar>> images;
  std::vector<LabelMap> targets;

  std::size_t size() const { return images.size(); }
};

/// Maps global label values onto the local channel order of a head.
LabelMap to_local_targets(const LabelMap& client_labels, const std::vector<int>& client_channels);

template <typename Scalar>
TrainingSet<Scalar> make_training_set(const ClientDataset& data, const LabelRegistry& registry) {
  TrainingSet<Scalar> set;
  set.client_id = data.client_id;
  const auto channels = registry.client_channels(data.client_id);
  set.channels = int(channels.size()) + 1;
  for (const auto& s : data.train) {
    set.images.push_back(s.image.template cast<Scalar>());
    set.targets.push_back(to_local_targets(s.client_labels, channels));
  }
  return set;
}

struct LossRecord {
  std::string client;
  int round = 0;
  int epoch = 0;
  double loss = 0.0;
};

template <typename Scalar>
struct FedState {
  std::vector<LayerSpec> spec;
  Backbone<Scalar> global_backbone;
  std::map<std::string, ConvParams<Scalar>> heads;
  int round_index = 0;
  std::vector<LossRecord> loss_log;

  ModelParams<Scalar> model() const { return {spec, global_backbone, heads}; }
};

template <typename Scalar>
struct LocalResult {
  Backbone<Scalar> backbone;
  ConvParams<Scalar> head;
  std::vector<double> epoch_losses;
};

namespace train_tags {
inline constexpr std::uint64_t round = 0x726f756e64ULL;
inline constexpr std::uint64_t shuffle = 0x73687566ULL;
inline constexpr std::uint64_t dropout = 0x64726f70ULL;
}  // namespace train_tags

/// Stream owned by one client for one round.
inline RngState client_round_rng(std::uint64_t seed, int round, const std::string& client) {
  return RngState{seed, 0}.derive(train_tags::round, std::uint64_t(round), stable_hash(client));
}

/// Shuffled mini-batches of sample indices for epoch `epoch`.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, const RngState& rng, int epoch);

/// One optimizer step on the mean gradient of `batch`. `first_position` is
/// the batch's offset in the epoch order and keys each sample's dropout
/// stream. Returns the summed per-sample loss.
template <typename Scalar>
double batch_step(ModelParams<Scalar>& model, const std::string& head_id, const TrainingSet<Scalar>& set,
                  const std::vector<std::size_t>& batch, std::size_t first_position, const RngState& rng, int epoch,
                  Scalar lr) {
  std::vector<BackwardResult<Scalar>> parts(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    const auto drop_rng = rng.derive(train_tags::dropout, std::uint64_t(epoch), first_position + i);
    parts[i] = backward(model, head_id, set.images[batch[i]], set.targets[batch[i]], drop_rng);
  });
  Gradients<Scalar> total = std::move(parts.front().grads);
  double loss = parts.front().loss;
  for (std::size_t i = 1; i < parts.size(); ++i) {
    accumulate(total, parts[i].grads);
    loss += parts[i].loss;
  }
  if (!std::isfinite(loss))
    throw DivergenceError("loss diverged for client '" + head_id + "' (epoch " + std::to_string(epoch) + ")");
  const Scalar inv = Scalar(1) / Scalar(batch.size());
  for (auto& g : total.backbone) {
    g.weight.data() *= inv;
    g.bias.data() *= inv;
  }
  total.head.weight.data() *= inv;
  total.head.bias.data() *= inv;
  sgd_step(model, total, lr);
  return loss;
}

/// E epochs of mini-batch SGD on one client's data. Deterministic given rng.
template <typename Scalar>
LocalResult<Scalar> local_train(const std::vector<LayerSpec>& spec, Backbone<Scalar> backbone, ConvParams<Scalar> head,
                                const TrainingSet<Scalar>& set, int epochs, Scalar lr, int batch, const RngState& rng) {
  if (set.size() == 0) throw DataError("local_train: client '" + set.client_id + "' has no training data");
  if (head.out_channels() != set.channels)
    throw std::invalid_argument("local_train: head for '" + set.client_id + "' has " +
                                std::to_string(head.out_channels()) + " channels, expected " +
                                std::to_string(set.channels));
  ModelParams<Scalar> model{spec, std::move(backbone), {}};
  model.heads.emplace(set.client_id, std::move(head));
  LocalResult<Scalar> result;
  for (int e = 0; e < epochs; ++e) {
    double sum = 0.0;
    std::size_t position = 0;
    for (const auto& b : epoch_batches(set.size(), batch, rng, e)) {
      sum += batch_step(model, set.client_id, set, b, position, rng, e, lr);
      position += b.size();
    }
    result.epoch_losses.push_back(sum / double(set.size()));
  }
  result.backbone = std::move(model.backbone);
  result.head = std::move(model.heads.begin()->second);
  return result;
}

/// θ̄ = Σ_i (n_i / n) θ_i, summed in list order in double precision.
template <typename Scalar>
Backbone<Scalar> fedavg_aggregate(const std::vector<std::pair<const Backbone<Scalar>*, std::size_t>>& clients) {
  if (clients.empty()) throw std::invalid_argument("fedavg_aggregate: no clients");
  double total = 0.0;
  for (const auto& [bb, n] : clients) {
    if (n == 0) throw std::invalid_argument("fedavg_aggregate: client with zero samples");
    if (bb->size() != clients.front().first->size()) throw std::invalid_argument("fedavg_aggregate: layer count mismatch");
    for (std::size_t l = 0; l < bb->size(); ++l) check_same_shape((*bb)[l], (*clients.front().first)[l]);
    total += double(n);
  }
  Backbone<Scalar> out = *clients.front().first;
  for (std::size_t l = 0; l < out.size(); ++l) {
    for (auto member : {&ConvParams<Scalar>::weight, &ConvParams<Scalar>::bias}) {
      Eigen::VectorXd acc = Eigen::VectorXd::Zero((out[l].*member).size());
      for (const auto& [bb, n] : clients)
        acc += (double(n) / total) * ((*bb)[l].*member).data().template cast<double>();
      (out[l].*member).data() = acc.template cast<Scalar>();
    }
  }
  return out;
}

template <typename Scalar>
std::map<std::string, int> head_channels(const std::vector<TrainingSet<Scalar>>& sets) {
  std::map<std::string, int> channels;
  for (const auto& s : sets) channels[s.client_id] = s.channels;
  return channels;
}

/// R rounds of broadcast → local_train on every client → fedavg of the
/// backbones in client-id order. Heads stay with their clients across rounds.
template <typename Scalar>
FedState<Scalar> run_federation(const FedConfig& config, const std::vector<TrainingSet<Scalar>>& sets) {
  config.validate();
  if (sets.empty()) throw std::invalid_argument("run_federation: no clients");
  const auto spec = config.backbone_spec();
  auto init = init_model<Scalar>(spec, head_channels(sets), RngState{config.seed, 0});
  FedState<Scalar> state{spec, std::move(init.backbone), std::move(init.heads), 0, {}};
  for (int r = 0; r < config.rounds; ++r) {
    std::vector<LocalResult<Scalar>> results(sets.size());
    parallel_for(sets.size(), [&](std::size_t i) {
      const auto& set = sets[i];
      results[i] = local_train(spec, state.global_backbone, state.heads.at(set.client_id), set, config.local_epochs,
                               Scalar(config.lr), config.batch,
                               client_round_rng(config.seed, r, set.client_id));
    });
    std::vector<std::size_t> order(sets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sets[a].client_id < sets[b].client_id; });
    std::vector<std::pair<const Backbone<Scalar>*, std::size_t>> weighted;
    for (std::size_t i : order) weighted.emplace_back(&results[i].backbone, sets[i].size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
      state.heads[sets[i].client_id] = std::move(results[i].head);
      for (int e = 0; e < config.local_epochs; ++e)
        state.loss_log.push_back({sets[i].client_id, r, e, results[i].epoch_losses[std::size_t(e)]});
    }
    state.global_backbone = fedavg_aggregate(weighted);
    state.round_index = r + 1;
  }
  return state;
}

/// One backbone, all heads; every step takes one client's batch and updates
/// the backbone plus that client's head. Batches of different clients are
/// interleaved round-robin within each (round, epoch).
template <typename Scalar>
FedState<Scalar> run_centralized(const FedConfig& config, const std::vector<TrainingSet<Scalar>>& sets,
                                 std::size_t* step_count = nullptr) {
  config.validate();
  if (sets.empty()) throw std::invalid_argument("run_centralized: no clients");
  for (const auto& s : sets)
    if (s.size() == 0) throw DataError("run_centralized: client '" + s.client_id + "' has no training data");
  const auto spec = config.backbone_spec();
  auto model = init_model<Scalar>(spec, head_channels(sets), RngState{config.seed, 0});
  FedState<Scalar> state{spec, {}, {}, 0, {}};
  std::size_t steps = 0;
  for (int r = 0; r < config.rounds; ++r) {
    for (int e = 0; e < config.local_epochs; ++e) {
      struct Cursor {
        RngState rng;
        std::vector<std::vector<std::size_t>> batches;
        std::size_t next = 0, position = 0;
        double loss = 0.0;
      };
      std::vector<Cursor> cursors;
      for (const auto& s : sets) {
        const auto rng = client_round_rng(config.seed, r, s.client_id);
        cursors.push_back({rng, epoch_batches(s.size(), config.batch, rng, e)});
      }
      for (bool progressed = true; progressed;) {
        progressed = false;
        for (std::size_t c = 0; c < sets.size(); ++c) {
          auto& cur = cursors[c];
          if (cur.next == cur.batches.size()) continue;
          const auto& b = cur.batches[cur.next++];
          cur.loss += batch_step(model, sets[c].client_id, sets[c], b, cur.position, cur.rng, e, Scalar(config.lr));
          cur.position += b.size();
          ++steps;
          progressed = true;
        }
      }
      for (std::size_t c = 0; c < sets.size(); ++c)
        state.loss_log.push_back({sets[c].client_id, r, e, cursors[c].loss / double(sets[c].size())});
    }
    state.round_index = r + 1;
  }
  state.global_backbone = std::move(model.backbone);
  state.heads = std::move(model.heads);
  if (step_count) *step_count = steps;
  return state;
}

/// Independent backbone + own head per client, R·E epochs each, no
/// communication.
template <typename Scalar>
std::map<std::string, FedState<Scalar>> run_local_only(const FedConfig& config,
                                                       const std::vector<TrainingSet<Scalar>>& sets) {
  config.validate();
  const auto spec = config.backbone_spec();
  std::vector<FedState<Scalar>> states(sets.size());
  parallel_for(sets.size(), [&](std::size_t i) {
    const auto& set = sets[i];
    auto init = init_model<Scalar>(spec, {{set.client_id, set.channels}}, RngState{config.seed, 0});
    FedState<Scalar> st{spec, std::move(init.backbone), std::move(init.heads), 0, {}};
    for (int r = 0; r < config.rounds; ++r) {
      auto res = local_train(spec, std::move(st.global_backbone), std::move(st.heads.at(set.client_id)), set,
                             config.local_epochs, Scalar(config.lr), config.batch,
                             client_round_rng(config.seed, r, set.client_id));
      st.global_backbone = std::move(res.backbone);
      st.heads[set.client_id] = std::move(res.head);
      for (int e = 0; e < config.local_epochs; ++e)
        st.loss_log.push_back({set.client_id, r, e, res.epoch_losses[std::size_t(e)]});
      st.round_index = r + 1;
    }
    states[i] = std::move(st);
  });
  std::map<std::string, FedState<Scalar>> out;
  for (std::size_t i = 0; i < sets.size(); ++i) out.emplace(sets[i].client_id, std::move(states[i]));
  return out;
}

// Checkpoints: backbone.funt (all backbone tensors concatenated), layout.txt
// (layer list and tensor shapes), head_<client>.funt, state.txt.

struct CheckpointInfo {
  std::string kind;  // federated | centralized | local
  DType dtype = DType::f32;
  int round_index = 0;
  std::vector<std::string> clients;
  std::map<std::string, std::string> extra;  // config echo
};

template <typename Scalar>
void write_checkpoint(const std::filesystem::path& dir, const FedState<Scalar>& state, const CheckpointInfo& info);

template <typename Scalar>
FedState<Scalar> read_checkpoint(const std::filesystem::path& dir, const std::vector<std::string>& expected_clients);

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& log);

}  // namespace funavg

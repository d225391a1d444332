#include <funavg/federation.hpp>
#include <funavg/text.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace funavg {

void FedConfig::validate() const {
  if (rounds < 1) throw std::invalid_argument("federation: rounds must be >= 1");
  if (local_epochs < 1) throw std::invalid_argument("federation: epochs must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("federation: lr must be finite and >= 0");
  if (batch < 1) throw std::invalid_argument("federation: batch must be >= 1");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw std::invalid_argument("model: dropout_p must lie in [0, 1)");
  if (widths.empty()) throw std::invalid_argument("model: at least one hidden layer is required");
}

LabelMap to_local_targets(const LabelMap& client_labels, const std::vector<int>& client_channels) {
  const int max_global = client_channels.empty() ? 0 : client_channels.back();
  std::vector<int> lut(std::size_t(max_global) + 1, -1);
  lut[0] = 0;
  for (std::size_t j = 0; j < client_channels.size(); ++j) lut[std::size_t(client_channels[j])] = int(j) + 1;
  LabelMap out(client_labels.rows(), client_labels.cols());
  for (Eigen::Index i = 0; i < client_labels.size(); ++i) {
    const int g = client_labels.data()[i];
    const int local = (g >= 0 && g <= max_global) ? lut[std::size_t(g)] : -1;
    if (local < 0) throw DataError("client label map holds label " + std::to_string(g) + " outside its label set");
    out.data()[i] = local;
  }
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch, const RngState& rng, int epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  auto gen = rng.derive(train_tags::shuffle, std::uint64_t(epoch)).engine();
  for (std::size_t i = n; i-- > 1;) {
    const auto j = std::min(i, static_cast<std::size_t>(uniform01(gen) * double(i + 1)));
    std::swap(order[i], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += std::size_t(batch))
    batches.emplace_back(order.begin() + std::ptrdiff_t(start),
                         order.begin() + std::ptrdiff_t(std::min(n, start + std::size_t(batch))));
  return batches;
}

namespace {

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv3x3: return "conv3x3";
    case LayerKind::conv1x1: return "conv1x1";
    case LayerKind::relu: return "relu";
    case LayerKind::dropout: return "dropout";
  }
  return "?";
}

LayerKind parse_kind(const std::string& s) {
  if (s == "conv3x3") return LayerKind::conv3x3;
  if (s == "conv1x1") return LayerKind::conv1x1;
  if (s == "relu") return LayerKind::relu;
  if (s == "dropout") return LayerKind::dropout;
  throw DataError("layout: unknown layer kind '" + s + "'");
}

std::string shape_string(const std::vector<int>& dims) {
  std::vector<std::string> parts;
  for (int d : dims) parts.push_back(std::to_string(d));
  return join(parts, "x");
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<const Tensor<Scalar>*>& parts) {
  Eigen::Index n = 0;
  for (const auto* t : parts) n += t->size();
  Tensor<Scalar> out({int(n)});
  Eigen::Index at = 0;
  for (const auto* t : parts) {
    out.data().segment(at, t->size()) = t->data();
    at += t->size();
  }
  return out;
}

template <typename Scalar>
void unpack(const Tensor<Scalar>& flat, const std::vector<Tensor<Scalar>*>& parts, const std::string& what) {
  Eigen::Index need = 0;
  for (const auto* t : parts) need += t->size();
  if (flat.rank() != 1 || flat.size() != need) throw DataError(what + ": size does not match layout.txt");
  Eigen::Index at = 0;
  for (auto* t : parts) {
    t->data() = flat.data().segment(at, t->size());
    at += t->size();
  }
}

}  // namespace

template <typename Scalar>
void write_checkpoint(const std::filesystem::path& dir, const FedState<Scalar>& state, const CheckpointInfo& info) {
  std::filesystem::create_directories(dir);
  std::ostringstream layout;
  layout << "# funavg layout v1\n";
  char p_buf[40];
  for (const auto& l : state.spec) {
    std::snprintf(p_buf, sizeof p_buf, "%.17g", l.dropout_p);
    layout << "layer " << kind_name(l.kind) << ' ' << l.in_channels << ' ' << l.out_channels << ' ' << p_buf << '\n';
  }
  std::vector<const Tensor<Scalar>*> parts;
  for (std::size_t i = 0; i < state.global_backbone.size(); ++i) {
    const auto& conv = state.global_backbone[i];
    layout << "tensor backbone." << i << ".weight " << shape_string(conv.weight.dims()) << '\n';
    layout << "tensor backbone." << i << ".bias " << shape_string(conv.bias.dims()) << '\n';
    parts.push_back(&conv.weight);
    parts.push_back(&conv.bias);
  }
  for (const auto& [id, head] : state.heads)
    layout << "head " << id << ' ' << head.in_channels() << ' ' << head.out_channels() << '\n';
  write_text_file(dir / "layout.txt", layout.str());
  write_funt(dir / "backbone.funt", concat(parts));
  for (const auto& [id, head] : state.heads) write_funt(dir / ("head_" + id + ".funt"), concat<Scalar>({&head.weight, &head.bias}));

  std::string text = "kind=" + info.kind + "\n";
  text += "dtype=" + std::string(dtype_name(dtype_of<Scalar>())) + "\n";
  text += "round_index=" + std::to_string(state.round_index) + "\n";
  std::vector<std::string> clients;
  for (const auto& entry : state.heads) clients.push_back(entry.first);
  text += "clients=" + join(clients) + "\n";
  for (const auto& [k, v] : info.extra) text += "config." + k + "=" + v + "\n";
  write_text_file(dir / "state.txt", text);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir) {
  const auto path = dir / "state.txt";
  if (!std::filesystem::exists(path)) throw DataError("no checkpoint at '" + dir.string() + "' (state.txt missing)");
  try {
    const auto kv = parse_key_values(read_text_file(path));
    CheckpointInfo info;
    info.kind = require_key(kv, "kind");
    info.dtype = parse_dtype(require_key(kv, "dtype"));
    info.round_index = parse_int(require_key(kv, "round_index"), "round_index");
    info.clients = split_list(require_key(kv, "clients"));
    for (const auto& [k, v] : kv)
      if (k.rfind("config.", 0) == 0) info.extra[k.substr(7)] = v;
    return info;
  } catch (const std::invalid_argument& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

template <typename Scalar>
FedState<Scalar> read_checkpoint(const std::filesystem::path& dir, const std::vector<std::string>& expected_clients) {
  const auto info = read_checkpoint_info(dir);
  std::vector<std::string> missing;
  for (const auto& c : expected_clients)
    if (!std::filesystem::exists(dir / ("head_" + c + ".funt"))) missing.push_back(c);
  if (!missing.empty())
    throw DataError("checkpoint '" + dir.string() + "' lacks head files for client(s): " + join(missing, ", "));

  FedState<Scalar> state;
  state.round_index = info.round_index;
  std::istringstream layout(read_text_file(dir / "layout.txt"));
  std::map<std::string, std::pair<int, int>> head_shapes;
  for (std::string line; std::getline(layout, line);) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "layer") {
      std::string kind;
      LayerSpec l;
      ls >> kind >> l.in_channels >> l.out_channels >> l.dropout_p;
      if (!ls) throw DataError("layout.txt: malformed layer line '" + line + "'");
      l.kind = parse_kind(kind);
      state.spec.push_back(l);
    } else if (tag == "head") {
      std::string id;
      int in = 0, out = 0;
      ls >> id >> in >> out;
      if (!ls) throw DataError("layout.txt: malformed head line '" + line + "'");
      head_shapes[id] = {in, out};
    }
  }
  try {
    validate_backbone(state.spec);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("layout.txt: ") + e.what());
  }
  std::vector<Tensor<Scalar>*> parts;
  for (const auto& l : state.spec)
    if (l.is_conv())
      state.global_backbone.push_back(
          {Tensor<Scalar>({l.out_channels, l.in_channels, l.kernel(), l.kernel()}), Tensor<Scalar>({l.out_channels})});
  for (auto& conv : state.global_backbone) {
    parts.push_back(&conv.weight);
    parts.push_back(&conv.bias);
  }
  unpack(read_funt<Scalar>(dir / "backbone.funt"), parts, "backbone.funt");
  for (const auto& [id, shape] : head_shapes) {
    if (shape.first != feature_channels(state.spec)) throw DataError("head '" + id + "' does not match backbone width");
    ConvParams<Scalar> head{Tensor<Scalar>({shape.second, shape.first, 1, 1}), Tensor<Scalar>({shape.second})};
    unpack(read_funt<Scalar>(dir / ("head_" + id + ".funt")), {&head.weight, &head.bias}, "head_" + id + ".funt");
    state.heads.emplace(id, std::move(head));
  }
  return state;
}

template void write_checkpoint<float>(const std::filesystem::path&, const FedState<float>&, const CheckpointInfo&);
template void write_checkpoint<double>(const std::filesystem::path&, const FedState<double>&, const CheckpointInfo&);
template FedState<float> read_checkpoint<float>(const std::filesystem::path&, const std::vector<std::string>&);
template FedState<double> read_checkpoint<double>(const std::filesystem::path&, const std::vector<std::string>&);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& log) {
  std::string csv = "client,round,epoch,loss\n";
  for (const auto& r : log)
    csv += r.client + "," + std::to_string(r.round) + "," + std::to_string(r.epoch) + "," + format_g6(r.loss) + "\n";
  write_text_file(path, csv);
}

}  // namespace funavg

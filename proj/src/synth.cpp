#include <funavg/errors.hpp>
#include <funavg/funt_io.hpp>
#include <funavg/parallel.hpp>
#include <funavg/synth.hpp>
#include <funavg/text.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>
#include <stdexcept>

namespace funavg {

void LabelRegistry::validate() const {
  if (global_labels.empty()) throw std::invalid_argument("registry: no global labels");
  if (global_labels.size() > 8) throw std::invalid_argument("registry: at most 8 global labels are supported");
  std::set<std::string> seen;
  for (const auto& label : global_labels) {
    if (label.empty() || label == "background") throw std::invalid_argument("registry: invalid label name '" + label + "'");
    if (!seen.insert(label).second) throw std::invalid_argument("registry: duplicate label '" + label + "'");
  }
  if (client_label_sets.empty()) throw std::invalid_argument("registry: no clients");
  for (const auto& [client, set] : client_label_sets) {
    if (set.empty()) throw std::invalid_argument("registry: client '" + client + "' has an empty label set");
    std::set<std::string> local;
    for (const auto& label : set) {
      if (!seen.count(label))
        throw std::invalid_argument("registry: client '" + client + "' lists unknown label '" + label + "'");
      if (!local.insert(label).second)
        throw std::invalid_argument("registry: client '" + client + "' lists '" + label + "' twice");
    }
  }
  const auto k = presence_counts();
  for (std::size_t c = 0; c < k.size(); ++c)
    if (k[c] == 0) throw std::invalid_argument("registry: label '" + global_labels[c] + "' is annotated by no client");
}

std::vector<std::string> LabelRegistry::clients() const {
  std::vector<std::string> ids;
  for (const auto& entry : client_label_sets) ids.push_back(entry.first);
  return ids;
}

int LabelRegistry::client_index(const std::string& client) const {
  int i = 0;
  for (const auto& entry : client_label_sets) {
    if (entry.first == client) return i;
    ++i;
  }
  throw std::invalid_argument("registry: unknown client '" + client + "'");
}

int LabelRegistry::channel_of(const std::string& label) const {
  auto it = std::find(global_labels.begin(), global_labels.end(), label);
  if (it == global_labels.end()) throw std::invalid_argument("registry: unknown label '" + label + "'");
  return static_cast<int>(it - global_labels.begin()) + 1;
}

std::vector<int> LabelRegistry::presence_counts() const {
  std::vector<int> k(global_labels.size(), 0);
  for (const auto& entry : client_label_sets)
    for (const auto& label : entry.second) {
      auto it = std::find(global_labels.begin(), global_labels.end(), label);
      if (it != global_labels.end()) ++k[std::size_t(it - global_labels.begin())];
    }
  return k;
}

std::vector<int> LabelRegistry::client_channels(const std::string& client) const {
  auto it = client_label_sets.find(client);
  if (it == client_label_sets.end()) throw std::invalid_argument("registry: unknown client '" + client + "'");
  std::vector<int> channels;
  for (const auto& label : it->second) channels.push_back(channel_of(label));
  std::sort(channels.begin(), channels.end());
  return channels;
}

Shape shape_of_label(int label_index) { return static_cast<Shape>(label_index % 8); }

const char* shape_name(Shape shape) {
  switch (shape) {
    case Shape::disk: return "disk";
    case Shape::rectangle: return "rectangle";
    case Shape::ellipse: return "ellipse";
    case Shape::ring: return "ring";
    case Shape::bar: return "bar";
    case Shape::cross: return "cross";
    case Shape::diamond: return "diamond";
    case Shape::triangle: return "triangle";
  }
  return "?";
}

double label_intensity(int label_index, int num_labels) {
  if (num_labels <= 1) return 0.7;
  return 0.45 + 0.45 * double(label_index) / double(num_labels - 1);
}

namespace {

// Cells of a 3×3 grid, centre excluded, in label order.
constexpr int kCells[8][2] = {{0, 0}, {2, 0}, {0, 2}, {2, 2}, {1, 0}, {1, 2}, {0, 1}, {2, 1}};

/// Whether offset (dx, dy) from the structure centre lies inside the shape of
/// nominal area `area`.
bool inside(Shape shape, double dx, double dy, double area) {
  using std::abs, std::sqrt;
  constexpr double pi = std::numbers::pi;
  switch (shape) {
    case Shape::disk: {
      const double r = sqrt(area / pi);
      return dx * dx + dy * dy <= r * r;
    }
    case Shape::rectangle: {
      const double h = sqrt(area) / 2;
      return abs(dx) <= h && abs(dy) <= h;
    }
    case Shape::ellipse: {
      const double b = sqrt(area / (2 * pi)), a = 2 * b;
      return (dx * dx) / (a * a) + (dy * dy) / (b * b) <= 1.0;
    }
    case Shape::ring: {
      const double outer = sqrt(area / (0.64 * pi)), inner = 0.6 * outer;
      const double d2 = dx * dx + dy * dy;
      return d2 <= outer * outer && d2 >= inner * inner;
    }
    case Shape::bar: {
      const double w = sqrt(area / 4);
      return abs(dx) <= 2 * w && abs(dy) <= w / 2;
    }
    case Shape::cross: {
      const double len = sqrt(9 * area / 5), t = len / 6;
      return (abs(dx) <= len / 2 && abs(dy) <= t) || (abs(dy) <= len / 2 && abs(dx) <= t);
    }
    case Shape::diamond: {
      const double d = sqrt(area / 2);
      return abs(dx) + abs(dy) <= d;
    }
    case Shape::triangle: {
      const double b = sqrt(2 * area);
      return dy >= -b / 2 && dy <= b / 2 && abs(dx) <= (dy + b / 2) / 2;
    }
  }
  return false;
}

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mask dilate(const Mask& m, int steps) {
  Mask out = m;
  for (int s = 0; s < steps; ++s) {
    Mask next = out;
    for (Eigen::Index y = 0; y < out.rows(); ++y)
      for (Eigen::Index x = 0; x < out.cols(); ++x) {
        if (out(y, x)) continue;
        next(y, x) = (y > 0 && out(y - 1, x)) || (y + 1 < out.rows() && out(y + 1, x)) ||
                     (x > 0 && out(y, x - 1)) || (x + 1 < out.cols() && out(y, x + 1));
      }
    out = std::move(next);
  }
  return out;
}

Mask erode(const Mask& m, int steps) {
  Mask out = m;
  for (int s = 0; s < steps; ++s) {
    Mask next = out;
    for (Eigen::Index y = 0; y < out.rows(); ++y)
      for (Eigen::Index x = 0; x < out.cols(); ++x) {
        if (!out(y, x)) continue;
        next(y, x) = y > 0 && out(y - 1, x) && y + 1 < out.rows() && out(y + 1, x) && x > 0 && out(y, x - 1) &&
                     x + 1 < out.cols() && out(y, x + 1);
      }
    out = std::move(next);
  }
  return out;
}

/// One attempt at placing every structure; false when any two come closer
/// than `min_gap` or a structure touches the image border.
bool try_place(int size, int num_labels, const WorldOptions& opt, std::mt19937_64& gen, LabelMap& labels) {
  labels = LabelMap::Zero(size, size);
  Mask reserved = Mask::Constant(size, size, false);
  const double area = 0.025 * size * size;
  const double cell = size / 3.0;
  const double jitter = opt.jitter_fraction * size;
  for (int l = 0; l < num_labels; ++l) {
    const double cx = (kCells[l][0] + 0.5) * cell + (2 * uniform01(gen) - 1) * jitter;
    const double cy = (kCells[l][1] + 0.5) * cell + (2 * uniform01(gen) - 1) * jitter;
    Mask mask = Mask::Constant(size, size, false);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) mask(y, x) = inside(shape_of_label(l), x + 0.5 - cx, y + 0.5 - cy, area);
    if (mask.row(0).any() || mask.row(size - 1).any() || mask.col(0).any() || mask.col(size - 1).any()) return false;
    if ((mask && reserved).any()) return false;
    reserved = reserved || dilate(mask, opt.min_gap);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (mask(y, x)) labels(y, x) = l + 1;
  }
  return true;
}

Sample render_sample(std::uint64_t seed, int index, int size, int num_labels, const WorldOptions& opt) {
  auto gen = RngState{seed, 0}.derive(std::uint64_t(index)).engine();
  Sample sample;
  char id[32];
  std::snprintf(id, sizeof id, "img%04d", index);
  sample.id = id;
  bool placed = false;
  for (int attempt = 0; attempt < opt.max_attempts && !placed; ++attempt)
    placed = try_place(size, num_labels, opt, gen, sample.full_labels);
  if (!placed)
    throw DataError("make_world: could not place structures without overlap after " +
                    std::to_string(opt.max_attempts) + " resamples");
  sample.image = Tensor<float>({1, size, size});
  std::normal_distribution<double> noise(0.0, opt.noise_sigma);
  for (Eigen::Index i = 0; i < sample.full_labels.size(); ++i) {
    const int l = sample.full_labels.data()[i];
    const double mean = l == 0 ? opt.background_intensity : label_intensity(l - 1, num_labels);
    sample.image[i] = float(std::clamp(mean + noise(gen), 0.0, 1.0));
  }
  sample.client_labels = sample.full_labels;
  return sample;
}

}  // namespace

std::vector<Sample> make_world(std::uint64_t seed, int n_images, int image_size, const LabelRegistry& registry,
                               const WorldOptions& options) {
  if (image_size < 32) throw std::invalid_argument("make_world: image_size must be at least 32");
  if (registry.num_labels() < 1 || registry.num_labels() > 8)
    throw std::invalid_argument("make_world: between 1 and 8 global labels are supported");
  if (n_images < 0) throw std::invalid_argument("make_world: negative image count");
  std::vector<Sample> samples(static_cast<std::size_t>(n_images));
  parallel_for(samples.size(), [&](std::size_t i) {
    samples[i] = render_sample(seed, int(i), image_size, registry.num_labels(), options);
  });
  return samples;
}

LabelMap apply_annotation_offset(const LabelMap& labels, int offset) {
  if (offset == 0) return labels;
  LabelMap out = LabelMap::Zero(labels.rows(), labels.cols());
  const int max_label = labels.size() ? labels.maxCoeff() : 0;
  for (int l = 1; l <= max_label; ++l) {
    Mask m = labels == l;
    if (!m.any()) continue;
    m = offset > 0 ? dilate(m, offset) : erode(m, -offset);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      if (m.data()[i] && out.data()[i] == 0) out.data()[i] = l;
  }
  return out;
}

Sample mask_labels(const Sample& sample, const std::vector<std::string>& client_set, const LabelRegistry& registry) {
  if (client_set.empty()) throw std::invalid_argument("mask_labels: client label set must not be empty");
  std::vector<bool> keep(std::size_t(registry.num_channels()), false);
  for (const auto& label : client_set) keep[std::size_t(registry.channel_of(label))] = true;
  Sample out = sample;
  for (Eigen::Index i = 0; i < out.client_labels.size(); ++i) {
    const int l = sample.full_labels.data()[i];
    out.client_labels.data()[i] = keep.at(std::size_t(l)) ? l : 0;
  }
  return out;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split_train_test(std::vector<Sample> samples, double fraction,
                                                                     std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split_train_test: fraction must lie in (0, 1)");
  const std::size_t n = samples.size();
  if (n < 2) throw std::invalid_argument("split_train_test: need at least 2 samples");
  auto gen = RngState{seed, 0}.derive(0x73706c6974ULL).engine();
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(uniform01(gen) * double(i + 1));
    std::swap(samples[i], samples[std::min(j, i)]);
  }
  const auto n_train = static_cast<std::size_t>(std::floor(fraction * double(n) + 1e-9));
  std::vector<Sample> train(std::make_move_iterator(samples.begin()),
                            std::make_move_iterator(samples.begin() + std::ptrdiff_t(n_train)));
  std::vector<Sample> test(std::make_move_iterator(samples.begin() + std::ptrdiff_t(n_train)),
                           std::make_move_iterator(samples.end()));
  return {std::move(train), std::move(test)};
}

std::vector<ClientDataset> make_federation(const LabelRegistry& registry, const WorldSpec& spec) {
  registry.validate();
  std::vector<ClientDataset> out;
  for (const auto& client : registry.clients()) {
    auto n_it = spec.n_per_client.find(client);
    if (n_it == spec.n_per_client.end()) throw std::invalid_argument("no image count for client '" + client + "'");
    const auto client_seed = mix64(spec.seed ^ stable_hash(client));
    auto samples = make_world(client_seed, n_it->second, spec.image_size, registry, spec.options);
    const auto off_it = spec.annotation_offsets.find(client);
    const int offset = off_it == spec.annotation_offsets.end() ? 0 : off_it->second;
    for (auto& s : samples) {
      s.full_labels = apply_annotation_offset(s.full_labels, offset);
      s = mask_labels(s, registry.client_label_sets.at(client), registry);
    }
    auto [train, test] = split_train_test(std::move(samples), spec.split_fraction, client_seed);
    char id[64];
    for (std::size_t i = 0; i < train.size(); ++i) {
      std::snprintf(id, sizeof id, "%s_train_%04zu", client.c_str(), i);
      train[i].id = id;
    }
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::snprintf(id, sizeof id, "%s_test_%04zu", client.c_str(), i);
      test[i].id = id;
    }
    out.push_back({client, std::move(train), std::move(test)});
  }
  return out;
}

const ClientDataset& DatasetBundle::client(const std::string& id) const {
  for (const auto& c : clients)
    if (c.client_id == id) return c;
  throw DataError("dataset has no client '" + id + "'");
}

void write_dataset(const std::filesystem::path& dir, const DatasetBundle& bundle) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "labels_full");
  fs::create_directories(dir / "labels_client");
  const auto& reg = bundle.registry;
  std::string manifest = "format=funavg-dataset/1\n";
  manifest += "image_size=" + std::to_string(bundle.spec.image_size) + "\n";
  manifest += "seed=" + std::to_string(bundle.spec.seed) + "\n";
  manifest += "split_fraction=" + format_g6(bundle.spec.split_fraction) + "\n";
  manifest += "labels=" + join(reg.global_labels) + "\n";
  manifest += "presence_counts=" + join_numbers(reg.presence_counts()) + "\n";
  manifest += "clients=" + join(reg.clients()) + "\n";
  for (const auto& c : bundle.clients) {
    const std::string key = "client." + c.client_id + ".";
    const auto off = bundle.spec.annotation_offsets.find(c.client_id);
    manifest += key + "labels=" + join(reg.client_label_sets.at(c.client_id)) + "\n";
    manifest += key + "n_train=" + std::to_string(c.train.size()) + "\n";
    manifest += key + "n_test=" + std::to_string(c.test.size()) + "\n";
    manifest += key + "annotation_offset=" +
                std::to_string(off == bundle.spec.annotation_offsets.end() ? 0 : off->second) + "\n";
  }
  write_text_file(dir / "manifest.txt", manifest);
  for (const auto& c : bundle.clients)
    for (const auto* split : {&c.train, &c.test})
      for (const auto& s : *split) {
        write_funt(dir / "images" / (s.id + ".funt"), s.image);
        write_label_map(dir / "labels_full" / (s.id + ".funt"), s.full_labels);
        write_label_map(dir / "labels_client" / (s.id + ".funt"), s.client_labels);
      }
}

DatasetBundle read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.txt";
  if (!std::filesystem::exists(manifest_path)) throw DataError("no dataset at '" + dir.string() + "' (manifest.txt missing)");
  DatasetBundle bundle;
  try {
    const auto kv = parse_key_values(read_text_file(manifest_path));
    if (require_key(kv, "format") != "funavg-dataset/1") throw DataError("unsupported dataset format");
    bundle.spec.image_size = parse_int(require_key(kv, "image_size"), "image_size");
    bundle.spec.seed = std::stoull(require_key(kv, "seed"));
    bundle.spec.split_fraction = parse_double(require_key(kv, "split_fraction"), "split_fraction");
    bundle.registry.global_labels = split_list(require_key(kv, "labels"));
    for (const auto& client : split_list(require_key(kv, "clients"))) {
      const std::string key = "client." + client + ".";
      bundle.registry.client_label_sets[client] = split_list(require_key(kv, key + "labels"));
      bundle.spec.annotation_offsets[client] = parse_int(require_key(kv, key + "annotation_offset"), key);
      ClientDataset ds{client, {}, {}};
      const int n_train = parse_int(require_key(kv, key + "n_train"), key + "n_train");
      const int n_test = parse_int(require_key(kv, key + "n_test"), key + "n_test");
      bundle.spec.n_per_client[client] = n_train + n_test;
      auto load = [&](const char* split, int n, std::vector<Sample>& into) {
        into.resize(std::size_t(n));
        parallel_for(into.size(), [&](std::size_t i) {
          char id[64];
          std::snprintf(id, sizeof id, "%s_%s_%04zu", client.c_str(), split, i);
          Sample s;
          s.id = id;
          s.image = read_funt<float>(dir / "images" / (s.id + ".funt"));
          s.full_labels = read_label_map(dir / "labels_full" / (s.id + ".funt"));
          s.client_labels = read_label_map(dir / "labels_client" / (s.id + ".funt"));
          into[i] = std::move(s);
        });
      };
      load("train", n_train, ds.train);
      load("test", n_test, ds.test);
      bundle.clients.push_back(std::move(ds));
    }
    bundle.registry.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(manifest_path.string() + ": " + e.what());
  }
  std::sort(bundle.clients.begin(), bundle.clients.end(),
            [](const ClientDataset& a, const ClientDataset& b) { return a.client_id < b.client_id; });
  return bundle;
}

}  // namespace funavg

#include <funavg/config.hpp>
#include <funavg/errors.hpp>
#include <funavg/funt_io.hpp>
#include <funavg/text.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <set>

namespace funavg {

namespace {

struct Entry {
  std::string value;
  int line = 0;
};

using Sections = std::map<std::string, std::map<std::string, Entry>>;

bool valid_identifier(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

class Parser {
 public:
  Parser(const std::string& source) : source_(source) {}

  [[noreturn]] void fail(int line, const std::string& message) const {
    throw ConfigError(source_ + ":" + std::to_string(line) + ": " + message);
  }

  Sections split(const std::string& text) const {
    Sections sections;
    std::string current;
    int line_no = 0;
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto end = text.find('\n', start);
      std::string line = text.substr(start, end == std::string::npos ? std::string::npos : end - start);
      ++line_no;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (!line.empty()) {
        if (line.front() == '[') {
          if (line.back() != ']') fail(line_no, "malformed section header '" + line + "'");
          current = trim(std::string_view(line).substr(1, line.size() - 2));
          static const std::set<std::string> known{"data", "model", "federation", "uq", "eval"};
          if (!known.count(current)) fail(line_no, "unknown section [" + current + "]");
          sections[current];
        } else {
          const auto eq = line.find('=');
          if (eq == std::string::npos) fail(line_no, "expected key = value");
          if (current.empty()) fail(line_no, "key outside of any section");
          const auto key = trim(std::string_view(line).substr(0, eq));
          if (key.empty()) fail(line_no, "empty key");
          auto [it, inserted] = sections[current].try_emplace(key, Entry{trim(std::string_view(line).substr(eq + 1)), line_no});
          if (!inserted)
            fail(line_no, "duplicate key '" + key + "' in [" + current + "] (first set on line " +
                              std::to_string(it->second.line) + ")");
        }
      }
      if (end == std::string::npos) break;
      start = end + 1;
    }
    return sections;
  }

  template <typename T, typename F>
  void read(const Sections& s, const std::string& section, const std::string& key, T& out, F&& convert) const {
    auto sec = s.find(section);
    if (sec == s.end()) return;
    auto it = sec->second.find(key);
    if (it == sec->second.end()) return;
    try {
      out = convert(it->second.value);
    } catch (const std::exception& e) {
      fail(it->second.line, "[" + section + "] " + key + ": " + e.what());
    }
  }

  int line_of(const Sections& s, const std::string& section, const std::string& key) const {
    auto sec = s.find(section);
    if (sec == s.end()) return 0;
    auto it = sec->second.find(key);
    return it == sec->second.end() ? 0 : it->second.line;
  }

 private:
  std::string source_;
};

std::vector<int> parse_int_list(const std::string& v) {
  std::vector<int> out;
  for (const auto& part : split_list(v)) out.push_back(parse_int(part, "list element"));
  if (out.empty()) throw std::invalid_argument("empty list");
  return out;
}

std::vector<std::string> parse_name_list(const std::string& v) {
  auto out = split_list(v);
  if (out.empty()) throw std::invalid_argument("empty list");
  std::set<std::string> seen;
  for (const auto& name : out) {
    if (!valid_identifier(name)) throw std::invalid_argument("invalid name '" + name + "' (use letters, digits, _ or -)");
    if (!seen.insert(name).second) throw std::invalid_argument("duplicate name '" + name + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& v) {
  std::size_t pos = 0;
  std::uint64_t out = 0;
  try {
    if (!v.empty() && v.front() != '-') out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  return out;
}

}  // namespace

LabelRegistry RunConfig::registry() const {
  LabelRegistry r;
  r.global_labels = labels;
  r.client_label_sets = label_sets;
  return r;
}

WorldSpec RunConfig::world_spec(std::uint64_t seed) const {
  WorldSpec spec;
  spec.image_size = image_size;
  spec.seed = mix64(world_seed ^ mix64(seed));
  spec.split_fraction = split_fraction;
  for (std::size_t i = 0; i < clients.size(); ++i) {
    spec.n_per_client[clients[i]] = n_per_client[i];
    if (annotation_offsets[i] != 0) spec.annotation_offsets[clients[i]] = annotation_offsets[i];
  }
  spec.options.noise_sigma = noise_sigma;
  return spec;
}

FedConfig RunConfig::fed_config(std::uint64_t seed) const {
  FedConfig f;
  f.rounds = rounds;
  f.local_epochs = epochs;
  f.lr = lr;
  f.batch = batch;
  f.dropout_p = dropout_p;
  f.seed = seed;
  f.dtype = dtype;
  f.widths = widths;
  return f;
}

std::string RunConfig::canonical() const {
  std::string s = "[data]\n";
  s += "image_size = " + std::to_string(image_size) + "\n";
  s += "labels = " + join(labels) + "\n";
  s += "clients = " + join(clients) + "\n";
  for (const auto& c : clients) s += "labels." + c + " = " + join(label_sets.at(c)) + "\n";
  s += "n_per_client = " + join_numbers(n_per_client) + "\n";
  s += "world_seed = " + std::to_string(world_seed) + "\n";
  s += "split_fraction = " + format_g6(split_fraction) + "\n";
  s += "annotation_offsets = " + join_numbers(annotation_offsets) + "\n";
  s += "noise_sigma = " + format_g6(noise_sigma) + "\n";
  s += "\n[model]\n";
  s += "widths = " + join_numbers(widths) + "\n";
  s += "dropout_p = " + format_g6(dropout_p) + "\n";
  s += std::string("dtype = ") + dtype_name(dtype) + "\n";
  s += "\n[federation]\n";
  s += "rounds = " + std::to_string(rounds) + "\n";
  s += "epochs = " + std::to_string(epochs) + "\n";
  s += "lr = " + format_g6(lr) + "\n";
  s += "batch = " + std::to_string(batch) + "\n";
  s += "\n[uq]\n";
  s += "T = " + std::to_string(T) + "\n";
  s += "ece_bins = " + std::to_string(ece_bins) + "\n";
  s += std::string("u_norm = ") + unorm_name(u_norm) + "\n";
  s += std::string("u_agg = ") + uagg_name(u_agg) + "\n";
  s += "\n[eval]\n";
  s += "seeds = " + join_numbers(seeds) + "\n";
  s += "output_dir = " + output_dir + "\n";
  s += std::string("empty_dice = ") + (empty_dice == EmptyDice::one ? "one" : "skip") + "\n";
  s += std::string("aggregation = ") + (aggregation == Aggregation::per_dataset ? "per_dataset" : "per_case") + "\n";
  return s;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  Parser p(source);
  const Sections s = p.split(text);
  RunConfig cfg;

  static const std::map<std::string, std::set<std::string>> allowed{
      {"data",
       {"image_size", "labels", "clients", "n_per_client", "world_seed", "split_fraction", "annotation_offsets",
        "noise_sigma"}},
      {"model", {"widths", "dropout_p", "dtype"}},
      {"federation", {"rounds", "epochs", "lr", "batch"}},
      {"uq", {"T", "ece_bins", "u_norm", "u_agg"}},
      {"eval", {"seeds", "output_dir", "empty_dice", "aggregation"}}};

  const auto as_int = [](const std::string& v) { return parse_int(v, "value"); };
  const auto as_double = [](const std::string& v) { return parse_double(v, "value"); };

  p.read(s, "data", "image_size", cfg.image_size, as_int);
  p.read(s, "data", "labels", cfg.labels, parse_name_list);
  p.read(s, "data", "clients", cfg.clients, parse_name_list);
  p.read(s, "data", "n_per_client", cfg.n_per_client, parse_int_list);
  p.read(s, "data", "world_seed", cfg.world_seed, parse_u64);
  p.read(s, "data", "split_fraction", cfg.split_fraction, as_double);
  p.read(s, "data", "noise_sigma", cfg.noise_sigma, as_double);
  p.read(s, "model", "widths", cfg.widths, parse_int_list);
  p.read(s, "model", "dropout_p", cfg.dropout_p, as_double);
  p.read(s, "model", "dtype", cfg.dtype, [](const std::string& v) { return parse_dtype(v); });
  p.read(s, "federation", "rounds", cfg.rounds, as_int);
  p.read(s, "federation", "epochs", cfg.epochs, as_int);
  p.read(s, "federation", "lr", cfg.lr, as_double);
  p.read(s, "federation", "batch", cfg.batch, as_int);
  p.read(s, "uq", "T", cfg.T, as_int);
  p.read(s, "uq", "ece_bins", cfg.ece_bins, as_int);
  p.read(s, "uq", "u_norm", cfg.u_norm, parse_unorm);
  p.read(s, "uq", "u_agg", cfg.u_agg, parse_uagg);
  p.read(s, "eval", "seeds", cfg.seeds, [](const std::string& v) {
    std::vector<std::uint64_t> out;
    for (const auto& part : split_list(v)) out.push_back(parse_u64(part));
    if (out.empty()) throw std::invalid_argument("empty list");
    return out;
  });
  p.read(s, "eval", "output_dir", cfg.output_dir, [](const std::string& v) {
    if (v.empty()) throw std::invalid_argument("must not be empty");
    return v;
  });
  p.read(s, "eval", "empty_dice", cfg.empty_dice, [](const std::string& v) {
    if (v == "one") return EmptyDice::one;
    if (v == "skip") return EmptyDice::skip;
    throw std::invalid_argument("expected one or skip, got '" + v + "'");
  });
  p.read(s, "eval", "aggregation", cfg.aggregation, [](const std::string& v) {
    if (v == "per_dataset") return Aggregation::per_dataset;
    if (v == "per_case") return Aggregation::per_case;
    throw std::invalid_argument("expected per_dataset or per_case, got '" + v + "'");
  });

  // Per-client label sets ("labels.<client>") must cover exactly the client list
  // when either is given; otherwise the defaults stay consistent.
  const bool clients_given = p.line_of(s, "data", "clients") != 0;
  std::map<std::string, std::vector<std::string>> sets;
  if (auto data = s.find("data"); data != s.end()) {
    for (const auto& [key, entry] : data->second) {
      if (allowed.at("data").count(key)) continue;
      if (key.rfind("labels.", 0) != 0) p.fail(entry.line, "unknown key '" + key + "' in [data]");
      const auto client = key.substr(7);
      if (std::find(cfg.clients.begin(), cfg.clients.end(), client) == cfg.clients.end())
        p.fail(entry.line, "'" + key + "' names client '" + client + "', which is not in clients");
      try {
        sets[client] = parse_name_list(entry.value);
      } catch (const std::exception& e) {
        p.fail(entry.line, "[data] " + key + ": " + e.what());
      }
    }
  }
  for (const auto& [section, entries] : s)
    if (section != "data")
      for (const auto& [key, entry] : entries)
        if (!allowed.at(section).count(key)) p.fail(entry.line, "unknown key '" + key + "' in [" + section + "]");

  if (clients_given || !sets.empty()) {
    for (const auto& c : cfg.clients)
      if (!sets.count(c))
        p.fail(p.line_of(s, "data", "clients"), "client '" + c + "' has no 'labels." + c + "' entry in [data]");
    cfg.label_sets = sets;
  }

  const auto data_line = [&](const std::string& key) { return p.line_of(s, "data", key); };
  if (cfg.n_per_client.size() != cfg.clients.size())
    p.fail(data_line("n_per_client"), "n_per_client has " + std::to_string(cfg.n_per_client.size()) +
                                          " entries but there are " + std::to_string(cfg.clients.size()) + " clients");
  if (p.line_of(s, "data", "annotation_offsets") != 0) {
    p.read(s, "data", "annotation_offsets", cfg.annotation_offsets, parse_int_list);
    if (cfg.annotation_offsets.size() != cfg.clients.size())
      p.fail(data_line("annotation_offsets"), "annotation_offsets has " +
                                                  std::to_string(cfg.annotation_offsets.size()) +
                                                  " entries but there are " + std::to_string(cfg.clients.size()) +
                                                  " clients");
  } else {
    cfg.annotation_offsets.assign(cfg.clients.size(), 0);
  }

  const auto check = [&](bool ok, const std::string& section, const std::string& key, const std::string& message) {
    if (!ok) p.fail(p.line_of(s, section, key), "[" + section + "] " + key + ": " + message);
  };
  check(cfg.image_size >= 32 && cfg.image_size <= 512, "data", "image_size", "must lie in [32, 512]");
  for (int n : cfg.n_per_client) check(n >= 2, "data", "n_per_client", "every client needs at least 2 images");
  check(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0, "data", "split_fraction", "must lie in (0, 1)");
  for (int o : cfg.annotation_offsets) check(o >= -3 && o <= 3, "data", "annotation_offsets", "offsets must lie in [-3, 3]");
  check(cfg.noise_sigma >= 0.0 && cfg.noise_sigma <= 1.0, "data", "noise_sigma", "must lie in [0, 1]");
  for (int w : cfg.widths) check(w >= 1 && w <= 1024, "model", "widths", "widths must lie in [1, 1024]");
  check(cfg.dropout_p >= 0.0 && cfg.dropout_p < 1.0, "model", "dropout_p", "must lie in [0, 1)");
  check(cfg.rounds >= 1, "federation", "rounds", "must be >= 1");
  check(cfg.epochs >= 1, "federation", "epochs", "must be >= 1");
  check(cfg.lr > 0.0 && std::isfinite(cfg.lr), "federation", "lr", "must be finite and > 0");
  check(cfg.batch >= 1, "federation", "batch", "must be >= 1");
  check(cfg.T >= 1, "uq", "T", "must be >= 1");
  check(cfg.ece_bins >= 1, "uq", "ece_bins", "must be >= 1");
  try {
    cfg.registry().validate();
  } catch (const std::invalid_argument& e) {
    p.fail(data_line("labels"), e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return parse_config(text, path.string());
}

}  // namespace funavg

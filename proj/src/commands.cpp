#include <funavg/commands.hpp>
#include <funavg/ensemble.hpp>
#include <funavg/errors.hpp>
#include <funavg/federation.hpp>
#include <funavg/funt_io.hpp>
#include <funavg/metrics.hpp>
#include <funavg/parallel.hpp>
#include <funavg/text.hpp>
#include <funavg/uncertainty.hpp>

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#ifndef FUNAVG_VERSION
#define FUNAVG_VERSION "0.1.0-unknown"
#endif

namespace funavg {

namespace fs = std::filesystem;

const char* version_string() { return FUNAVG_VERSION; }

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

std::string directory_hash(const fs::path& dir, const std::vector<std::string>& exclude) {
  if (!fs::is_directory(dir)) throw DataError("no directory '" + dir.string() + "'");
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    if (name == ".done" || std::find(exclude.begin(), exclude.end(), name) != exclude.end()) continue;
    files.push_back(fs::relative(entry.path(), dir).generic_string());
  }
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += f + " " + sha256_hex(read_text_file(dir / f)) + "\n";
  return sha256_hex(listing);
}

TrainMode parse_train_mode(const std::string& name) {
  if (name == "federated") return TrainMode::federated;
  if (name == "centralized") return TrainMode::centralized;
  if (name == "local") return TrainMode::local;
  throw ConfigError("unknown train mode '" + name + "' (expected federated, centralized or local)");
}

const char* train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::federated: return "federated";
    case TrainMode::centralized: return "centralized";
    case TrainMode::local: return "local";
  }
  return "?";
}

InferMode parse_infer_mode(const std::string& name) {
  if (name == "vanilla") return InferMode::vanilla;
  if (name == "funavg") return InferMode::funavg;
  if (name == "all") return InferMode::all;
  throw ConfigError("unknown infer mode '" + name + "' (expected vanilla, funavg or all)");
}

const std::vector<std::string>& method_order() {
  static const std::vector<std::string> order{"Same", "Others", "CenAvg", "CUNAvg", "FedAvg", "FUNAvg"};
  return order;
}

namespace {

using Clock = std::chrono::steady_clock;

struct EnsembleSource {
  const char* kind;
  const char* fusion;
  const char* method;
};

constexpr EnsembleSource kEnsembles[] = {{"centralized", "vanilla", "CenAvg"},
                                         {"centralized", "funavg", "CUNAvg"},
                                         {"federated", "vanilla", "FedAvg"},
                                         {"federated", "funavg", "FUNAvg"}};

bool stage_done(const fs::path& dir) { return fs::exists(dir / ".done"); }

/// Content hash recorded by a finished stage.
std::string stage_hash(const fs::path& dir) {
  if (!stage_done(dir)) throw DataError("stage '" + dir.string() + "' has not been completed");
  const auto kv = parse_key_values(read_text_file(dir / ".done"));
  return require_key(kv, "content");
}

std::string stage_key(const std::string& name, const RunConfig& config, std::uint64_t seed,
                      const std::vector<std::string>& inputs) {
  std::string text = name + "\nseed=" + std::to_string(seed) + "\n" + config.canonical();
  for (const auto& h : inputs) text += "input=" + h + "\n";
  return sha256_hex(text);
}

/// Creates the stage directory, or decides it can be skipped on resume.
bool prepare_stage(const fs::path& dir, const std::string& key, bool resume, StageRecord& record) {
  std::error_code ec;
  if (fs::exists(dir)) {
    if (!resume)
      throw IoError("output '" + dir.string() + "' already exists; pass --resume or choose a fresh --out");
    if (stage_done(dir)) {
      const auto kv = parse_key_values(read_text_file(dir / ".done"));
      auto k = kv.find("key"), c = kv.find("content");
      if (k != kv.end() && c != kv.end() && k->second == key && c->second == directory_hash(dir)) {
        record.hash = c->second;
        record.skipped = true;
        return true;
      }
    }
    fs::remove_all(dir, ec);
    if (ec) throw IoError("cannot clear '" + dir.string() + "': " + ec.message());
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  return false;
}

void finish_stage(const fs::path& dir, const std::string& key, StageRecord& record) {
  record.hash = directory_hash(dir);
  write_text_file(dir / ".done", "key=" + key + "\ncontent=" + record.hash + "\n");
}

template <typename Body>
StageRecord run_stage(const std::string& name, const fs::path& dir, const std::string& key, bool resume, Body&& body) {
  StageRecord record;
  record.name = name;
  const auto t0 = Clock::now();
  if (!prepare_stage(dir, key, resume, record)) {
    body();
    finish_stage(dir, key, record);
  }
  record.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return record;
}

fs::path data_dir(const fs::path& run) { return run / "data"; }
fs::path train_dir(const fs::path& run, const std::string& kind) { return run / "train" / kind; }
fs::path predictions_dir(const fs::path& run, const std::string& kind) { return run / "predictions" / kind; }

DatasetBundle load_data(const fs::path& run) {
  if (!stage_done(data_dir(run))) throw DataError("no generated dataset under '" + run.string() + "' (run generate first)");
  return read_dataset(data_dir(run));
}

std::map<std::string, std::string> checkpoint_echo(const RunConfig& config, std::uint64_t seed) {
  return {{"seed", std::to_string(seed)},
          {"config_sha256", sha256_hex(config.canonical())},
          {"rounds", std::to_string(config.rounds)},
          {"epochs", std::to_string(config.epochs)},
          {"lr", format_g6(config.lr)},
          {"batch", std::to_string(config.batch)},
          {"dropout_p", format_g6(config.dropout_p)},
          {"widths", join_numbers(config.widths)}};
}

template <typename S>
void train_impl(const RunConfig& config, const DatasetBundle& data, TrainMode mode, std::uint64_t seed,
                const fs::path& dir) {
  std::vector<TrainingSet<S>> sets;
  for (const auto& c : data.clients) sets.push_back(make_training_set<S>(c, data.registry));
  const auto fed = config.fed_config(seed);
  CheckpointInfo info;
  info.kind = train_mode_name(mode);
  info.dtype = dtype_of<S>();
  info.extra = checkpoint_echo(config, seed);
  if (mode == TrainMode::local) {
    std::vector<LossRecord> log;
    for (auto& [client, state] : run_local_only(fed, sets)) {
      info.round_index = state.round_index;
      info.clients = {client};
      write_checkpoint(dir / client, state, info);
      log.insert(log.end(), state.loss_log.begin(), state.loss_log.end());
    }
    write_loss_csv(dir / "losses.csv", log);
    return;
  }
  const auto state = mode == TrainMode::federated ? run_federation(fed, sets) : run_centralized(fed, sets);
  info.round_index = state.round_index;
  info.clients = data.registry.clients();
  write_checkpoint(dir, state, info);
  write_loss_csv(dir / "losses.csv", state.loss_log);
}

/// Per-head scalar u; a single sample has no epistemic part, so the total
/// trace reduces to 1 − ‖p‖².
PixelMap head_uncertainty(const PosteriorStack& stack, UNorm norm) {
  if (stack.num_samples() >= 2) {
    auto maps = uncertainty_decompose(stack);
    return norm == UNorm::trace_norm ? maps.scalar_u : scalar_uncertainty(maps, stack.channels(), norm);
  }
  UncertaintyMaps maps;
  const auto p = stack.sample(0);
  maps.total_trace = PixelMap(stack.height(), stack.width());
  for (Eigen::Index i = 0; i < stack.pixels(); ++i) maps.total_trace.data()[i] = 1.0 - p.row(i).squaredNorm();
  maps.aleatoric_trace = maps.total_trace;
  maps.epistemic_trace = PixelMap::Zero(stack.height(), stack.width());
  return scalar_uncertainty(maps, stack.channels(), norm);
}

std::vector<const Sample*> test_samples(const DatasetBundle& data) {
  std::vector<const Sample*> out;
  for (const auto& c : data.clients)
    for (const auto& s : c.test) out.push_back(&s);
  return out;
}

RngState inference_rng(std::uint64_t seed, const std::string& image_id) {
  return RngState{seed, 1}.derive(stable_hash(image_id));
}

void write_global(const fs::path& dir, const std::string& id, const GlobalPrediction& g, int max_label,
                  const std::vector<std::pair<std::string, PixelMap>>& head_u) {
  write_funt(dir / (id + ".probs.funt"), g.probs);
  write_label_map(dir / (id + ".labels.funt"), g.labels);
  write_pgm(dir / (id + ".labels.pgm"), g.labels, max_label);
  write_pixel_map(dir / (id + ".u.funt"), g.ensemble_u);
  for (const auto& [client, u] : head_u) write_pixel_map(dir / (id + ".u." + client + ".funt"), u);
}

template <typename S>
void infer_ensemble(const RunConfig& config, const DatasetBundle& data, const fs::path& checkpoint,
                    const std::vector<std::pair<FusionMode, fs::path>>& targets, std::uint64_t seed) {
  const auto clients = data.registry.clients();
  const auto state = read_checkpoint<S>(checkpoint, clients);
  const auto model = state.model();
  const auto samples = test_samples(data);
  parallel_for(samples.size(), [&](std::size_t i) {
    const Sample& s = *samples[i];
    const auto stacks = mc_sample_heads(model, clients, s.image.template cast<S>(), config.T, inference_rng(seed, s.id));
    std::vector<HeadPrediction> heads;
    std::vector<std::pair<std::string, PixelMap>> head_u;
    for (std::size_t h = 0; h < clients.size(); ++h) {
      heads.push_back({clients[h], mean_prob(stacks[h]), head_uncertainty(stacks[h], config.u_norm)});
      head_u.emplace_back(clients[h], heads.back().scalar_u);
    }
    const auto vanilla = ensemble_average(heads, data.registry, config.u_agg);
    for (const auto& [fusion, dir] : targets) {
      const auto out = fusion == FusionMode::vanilla ? vanilla : funavg_reweight(vanilla, vanilla.ensemble_u);
      write_global(dir, s.id, out, data.registry.num_labels(), head_u);
    }
  });
  for (const auto& [fusion, dir] : targets)
    write_text_file(dir / "prediction.txt",
                    std::string("fusion=") + fusion_mode_name(fusion) + "\nT=" + std::to_string(config.T) +
                        "\nu_norm=" + unorm_name(config.u_norm) + "\nu_agg=" + uagg_name(config.u_agg) +
                        "\nheads=" + join(clients) + "\nimages=" + std::to_string(samples.size()) + "\n");
}

template <typename S>
void infer_local_model(const RunConfig& config, const DatasetBundle& data, const fs::path& checkpoint,
                       const std::string& client, const fs::path& out, std::uint64_t seed) {
  const auto state = read_checkpoint<S>(checkpoint, {client});
  const auto model = state.model();
  const auto channels = data.registry.client_channels(client);
  const auto samples = test_samples(data);
  fs::create_directories(out);
  parallel_for(samples.size(), [&](std::size_t i) {
    const Sample& s = *samples[i];
    const auto stack = mc_sample(model, client, s.image.template cast<S>(), config.T, inference_rng(seed, s.id));
    const LabelMap local = predict(mean_prob(stack));
    LabelMap global = local.unaryExpr([&](int v) { return v == 0 ? 0 : channels[std::size_t(v - 1)]; });
    write_label_map(out / (s.id + ".labels.funt"), global);
    write_pgm(out / (s.id + ".labels.pgm"), global, data.registry.num_labels());
  });
}

template <typename Fn>
void dispatch_dtype(DType dtype, Fn&& fn) {
  if (dtype == DType::f32)
    fn(float{});
  else
    fn(double{});
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(split_list(line));
  return rows;
}

double sample_sd(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / double(v.size() - 1));
}

template <typename F>
auto with_context(const std::string& context, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(context + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(context + ": " + e.what());
  } catch (const DivergenceError& e) {
    throw DivergenceError(context + ": " + e.what());
  } catch (const IoError& e) {
    throw IoError(context + ": " + e.what());
  } catch (const fs::filesystem_error& e) {
    throw IoError(context + ": " + e.what());
  }
}

}  // namespace

std::vector<StageRecord> cmd_generate(const RunConfig& config, const fs::path& run_dir, const CommandOptions& options) {
  const auto dir = data_dir(run_dir);
  const auto key = stage_key("generate", config, options.seed, {});
  return {run_stage("data", dir, key, options.resume, [&] {
    DatasetBundle bundle;
    bundle.registry = config.registry();
    bundle.spec = config.world_spec(options.seed);
    bundle.clients = make_federation(bundle.registry, bundle.spec);
    write_dataset(dir, bundle);
  })};
}

std::vector<StageRecord> cmd_train(const RunConfig& config, const fs::path& run_dir, TrainMode mode,
                                   const CommandOptions& options) {
  const auto data = load_data(run_dir);
  const std::string kind = train_mode_name(mode);
  const auto dir = train_dir(run_dir, kind);
  const auto key = stage_key("train/" + kind, config, options.seed, {stage_hash(data_dir(run_dir))});
  return {run_stage("train/" + kind, dir, key, options.resume, [&] {
    dispatch_dtype(config.dtype, [&](auto tag) { train_impl<decltype(tag)>(config, data, mode, options.seed, dir); });
  })};
}

std::vector<StageRecord> cmd_infer(const RunConfig& config, const fs::path& run_dir, InferMode mode,
                                   const CommandOptions& options) {
  const auto data = load_data(run_dir);
  const auto data_hash = stage_hash(data_dir(run_dir));
  std::vector<StageRecord> records;
  bool any = false;
  for (const std::string kind : {"centralized", "federated"}) {
    const auto checkpoint = train_dir(run_dir, kind);
    if (!stage_done(checkpoint)) continue;
    any = true;
    const auto inputs = std::vector<std::string>{data_hash, stage_hash(checkpoint)};
    std::vector<std::pair<FusionMode, fs::path>> targets;
    std::vector<std::string> keys;
    for (auto fusion : {FusionMode::vanilla, FusionMode::funavg}) {
      if (mode != InferMode::all && (fusion == FusionMode::vanilla) != (mode == InferMode::vanilla)) continue;
      const std::string name = "predictions/" + kind + "/" + fusion_mode_name(fusion);
      const auto dir = predictions_dir(run_dir, kind) / fusion_mode_name(fusion);
      const auto key = stage_key(name, config, options.seed, inputs);
      StageRecord record;
      record.name = name;
      if (prepare_stage(dir, key, options.resume, record)) {
        records.push_back(record);
        continue;
      }
      targets.emplace_back(fusion, dir);
      keys.push_back(key);
    }
    if (targets.empty()) continue;
    const auto t0 = Clock::now();
    dispatch_dtype(read_checkpoint_info(checkpoint).dtype, [&](auto tag) {
      infer_ensemble<decltype(tag)>(config, data, checkpoint, targets, options.seed);
    });
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      StageRecord record;
      record.name = "predictions/" + std::string(kind) + "/" + fusion_mode_name(targets[i].first);
      record.seconds = seconds / double(targets.size());
      finish_stage(targets[i].second, keys[i], record);
      records.push_back(record);
    }
  }
  const auto local = train_dir(run_dir, "local");
  if (stage_done(local)) {
    any = true;
    const auto dir = predictions_dir(run_dir, "local");
    const auto key = stage_key("predictions/local", config, options.seed, {data_hash, stage_hash(local)});
    records.push_back(run_stage("predictions/local", dir, key, options.resume, [&] {
      for (const auto& client : data.registry.clients()) {
        const auto checkpoint = local / client;
        dispatch_dtype(read_checkpoint_info(checkpoint).dtype, [&](auto tag) {
          infer_local_model<decltype(tag)>(config, data, checkpoint, client, dir / client, options.seed);
        });
      }
    }));
  }
  if (!any) throw DataError("no trained checkpoints under '" + (run_dir / "train").string() + "' (run train first)");
  return records;
}

std::vector<StageRecord> cmd_evaluate(const RunConfig& config, const fs::path& run_dir, const CommandOptions& options) {
  const auto data = load_data(run_dir);
  std::vector<std::string> inputs{stage_hash(data_dir(run_dir))};
  std::vector<const EnsembleSource*> ensembles;
  for (const auto& src : kEnsembles) {
    const auto dir = predictions_dir(run_dir, src.kind) / src.fusion;
    if (!stage_done(dir)) continue;
    ensembles.push_back(&src);
    inputs.push_back(stage_hash(dir));
  }
  const auto local_dir = predictions_dir(run_dir, "local");
  const bool have_local = stage_done(local_dir);
  if (have_local) inputs.push_back(stage_hash(local_dir));
  if (ensembles.empty() && !have_local)
    throw DataError("no predictions under '" + (run_dir / "predictions").string() + "' (run infer first)");

  const auto dir = run_dir / "report";
  const auto key = stage_key("report", config, options.seed, inputs);
  return {run_stage("report", dir, key, options.resume, [&] {
    const auto samples = test_samples(data);
    std::vector<CaseDice> cases;
    std::string ece_csv = "method,n,ece\n";
    std::vector<std::string> present;
    for (const auto* src : ensembles) {
      const auto pdir = predictions_dir(run_dir, src->kind) / src->fusion;
      EnsemblePredictions preds;
      std::vector<Eigen::ArrayXd> conf(samples.size());
      std::vector<Eigen::Array<bool, Eigen::Dynamic, 1>> correct(samples.size());
      std::vector<LabelMap> labels(samples.size());
      parallel_for(samples.size(), [&](std::size_t i) {
        const Sample& s = *samples[i];
        labels[i] = read_label_map(pdir / (s.id + ".labels.funt"));
        const auto probs = read_funt<double>(pdir / (s.id + ".probs.funt"));
        if (probs.rank() != 3 || probs.dim(0) != data.registry.num_channels() || probs.dim(1) != s.full_labels.rows() ||
            probs.dim(2) != s.full_labels.cols() || labels[i].rows() != s.full_labels.rows() ||
            labels[i].cols() != s.full_labels.cols())
          throw DataError("prediction/ground-truth shape mismatch for '" + s.id + "' in " + pdir.string());
        conf[i] = probs.pixels().rowwise().maxCoeff().array().min(1.0).max(0.0);
        correct[i] = Eigen::Map<const Eigen::ArrayXi>(labels[i].data(), labels[i].size()) ==
                     Eigen::Map<const Eigen::ArrayXi>(s.full_labels.data(), s.full_labels.size());
      });
      Eigen::Index n = 0;
      for (const auto& c : conf) n += c.size();
      Eigen::ArrayXd all_conf(n);
      Eigen::Array<bool, Eigen::Dynamic, 1> all_correct(n);
      Eigen::Index offset = 0;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        all_conf.segment(offset, conf[i].size()) = conf[i];
        all_correct.segment(offset, conf[i].size()) = correct[i];
        offset += conf[i].size();
        preds.emplace(samples[i]->id, std::move(labels[i]));
      }
      const auto report = ece(all_conf, all_correct, config.ece_bins);
      write_text_file(dir / ("reliability_" + std::string(src->method) + ".csv"), report.to_csv());
      ece_csv += std::string(src->method) + "," + std::to_string(report.n) + "," + format_g6(report.ece) + "\n";
      auto scored = score_ensemble(src->method, data, preds, config.empty_dice);
      cases.insert(cases.end(), scored.begin(), scored.end());
      present.push_back(src->method);
    }
    if (have_local) {
      LocalPredictions preds;
      for (const auto& model : data.registry.clients()) {
        auto& m = preds[model];
        std::vector<LabelMap> labels(samples.size());
        parallel_for(samples.size(), [&](std::size_t i) {
          labels[i] = read_label_map(local_dir / model / (samples[i]->id + ".labels.funt"));
        });
        for (std::size_t i = 0; i < samples.size(); ++i) m.emplace(samples[i]->id, std::move(labels[i]));
      }
      auto scored = score_local(data, preds, config.empty_dice);
      cases.insert(cases.end(), scored.begin(), scored.end());
      present.push_back("Same");
      present.push_back("Others");
    }

    const auto table = evaluate_run(cases, method_order(), config.aggregation);
    write_text_file(dir / "dice_table.csv", table.cells_csv());
    write_text_file(dir / "summary.csv", table.summary_csv());
    std::string cases_csv = "method,dataset,model,image,label,dice\n";
    for (const auto& c : cases)
      cases_csv += c.method + "," + c.dataset + "," + c.model + "," + c.image_id + "," + c.label + "," +
                   format_g6(c.dice) + "\n";
    write_text_file(dir / "cases.csv", cases_csv);
    if (!ensembles.empty()) write_text_file(dir / "ece.csv", ece_csv);

    const auto has = [&](const std::string& m) { return std::find(present.begin(), present.end(), m) != present.end(); };
    std::vector<WilcoxonRow> wilcoxon;
    for (const auto& [a, b] : std::vector<std::pair<std::string, std::string>>{{"FedAvg", "FUNAvg"}, {"CenAvg", "CUNAvg"}}) {
      if (!has(a) || !has(b)) continue;
      auto datasets = data.registry.clients();
      datasets.push_back("all");
      for (const auto& ds : datasets) {
        const auto filter = ds == "all" ? std::string{} : ds;
        const auto ma = per_case_means(cases, a, filter), mb = per_case_means(cases, b, filter);
        std::vector<double> va, vb;
        for (const auto& [id, v] : ma)
          if (auto it = mb.find(id); it != mb.end()) {
            va.push_back(v);
            vb.push_back(it->second);
          }
        WilcoxonRow row{ds, a, b, {}, false};
        try {
          row.test = wilcoxon_signed_rank(va, vb);
        } catch (const std::domain_error&) {
          row.degenerate = true;
          row.test.n = 0;
        }
        wilcoxon.push_back(row);
      }
    }
    if (!wilcoxon.empty()) write_text_file(dir / "wilcoxon.csv", wilcoxon_csv(wilcoxon));

    const auto improvement = [&](const std::string& fed, const std::string& fun, const std::string& file,
                                 const std::string& plot) {
      if (!has(fed) || !has(fun)) return;
      const auto rows = improvement_report(table.label_means(fun), table.label_means(fed), data.registry);
      write_text_file(dir / file, improvement_csv(rows));
      std::string scatter = "label,k,delta\n";
      for (const auto& r : rows) scatter += r.label + "," + std::to_string(r.k) + "," + format_g6(r.delta) + "\n";
      write_text_file(dir / plot, scatter);
    };
    improvement("FedAvg", "FUNAvg", "improvement.csv", "delta_vs_k.csv");
    improvement("CenAvg", "CUNAvg", "improvement_centralized.csv", "delta_vs_k_centralized.csv");

    write_text_file(dir / "report_meta.txt",
                    "ground_truth=full\n"
                    "same_rows=own_test_split_only\n"
                    "others_rows=exclude_training_client\n"
                    "local_labels=trained_labels_only\n"
                    "ensemble_labels=all_global_labels\n"
                    "wilcoxon_pairing=per_test_case_mean_dice\n"
                    "ece_confidence=max_assembled_channel\n"
                    "empty_dice=" +
                        std::string(config.empty_dice == EmptyDice::one ? "one" : "skip") +
                        "\naggregation=" + (config.aggregation == Aggregation::per_dataset ? "per_dataset" : "per_case") +
                        "\nmethods=" + join(present) + "\n");
  })};
}

std::vector<StageRecord> cmd_reproduce(const RunConfig& config, const fs::path& out_dir, bool resume) {
  if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !resume)
    throw IoError("output '" + out_dir.string() + "' is not empty; pass --resume or choose a fresh --out");
  fs::create_directories(out_dir);
  std::vector<StageRecord> records;
  const auto add = [&](const std::string& prefix, std::vector<StageRecord> rs) {
    for (auto& r : rs) {
      r.name = prefix + "/" + r.name;
      records.push_back(r);
    }
  };
  for (const auto seed : config.seeds) {
    const auto run = out_dir / ("seed_" + std::to_string(seed));
    const CommandOptions options{seed, resume};
    const auto prefix = "seed_" + std::to_string(seed);
    const auto ctx = [&](const std::string& stage) { return "stage " + stage + " (seed " + std::to_string(seed) + ")"; };
    add(prefix, with_context(ctx("generate"), [&] { return cmd_generate(config, run, options); }));
    for (auto mode : {TrainMode::local, TrainMode::centralized, TrainMode::federated})
      add(prefix, with_context(ctx(std::string("train/") + train_mode_name(mode)),
                               [&] { return cmd_train(config, run, mode, options); }));
    add(prefix, with_context(ctx("infer"), [&] { return cmd_infer(config, run, InferMode::all, options); }));
    add(prefix, with_context(ctx("evaluate"), [&] { return cmd_evaluate(config, run, options); }));
  }

  const auto t0 = Clock::now();
  const auto agg = out_dir / "aggregate";
  fs::create_directories(agg);
  with_context("stage aggregate", [&] {
    // Per-cell mean ± sd over seeds, read back from the per-seed CSVs.
    std::vector<std::pair<std::string, std::string>> cells;
    std::map<std::pair<std::string, std::string>, std::vector<double>> values;
    std::string by_seed = "seed,method,column,mean\n";
    std::string gap_csv = "seed,same,others,gap\n";
    std::string improvement_rows = "seed,label,k,dice_fed,dice_fun,delta\n";
    std::vector<std::pair<std::string, std::string>> labels;  // (label, k)
    std::map<std::string, std::vector<double>> deltas;
    for (const auto seed : config.seeds) {
      const auto report = out_dir / ("seed_" + std::to_string(seed)) / "report";
      std::map<std::string, std::string> m_values;
      for (const auto& row : read_csv(report / "summary.csv")) {
        if (row.size() != 3) throw DataError("malformed summary.csv in " + report.string());
        const auto key = std::make_pair(row[0], row[1]);
        auto [it, inserted] = values.try_emplace(key);
        if (inserted) cells.push_back(key);
        it->second.push_back(parse_double(row[2], "summary.csv mean"));
        by_seed += std::to_string(seed) + "," + row[0] + "," + row[1] + "," + row[2] + "\n";
        if (row[1] == "M") m_values[row[0]] = row[2];
      }
      if (m_values.count("Same") && m_values.count("Others")) {
        const double same = parse_double(m_values["Same"], "Same M"), others = parse_double(m_values["Others"], "Others M");
        gap_csv += std::to_string(seed) + "," + m_values["Same"] + "," + m_values["Others"] + "," +
                   format_g6(same - others) + "\n";
      }
      if (fs::exists(report / "improvement.csv"))
        for (const auto& row : read_csv(report / "improvement.csv")) {
          if (row.size() != 5) throw DataError("malformed improvement.csv in " + report.string());
          improvement_rows += std::to_string(seed) + "," + join(row) + "\n";
          if (!deltas.count(row[0])) labels.emplace_back(row[0], row[1]);
          deltas[row[0]].push_back(parse_double(row[4], "improvement delta"));
        }
    }
    std::string mean_sd = "method,column,mean,sd,n_seeds\n";
    for (const auto& key : cells) {
      const auto& v = values[key];
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= double(v.size());
      mean_sd += key.first + "," + key.second + "," + format_g6(mean) + "," + format_g6(sample_sd(v, mean)) + "," +
                 std::to_string(v.size()) + "\n";
    }
    std::string improvement_mean = "label,k,mean_delta,sd_delta,positive_seeds,n_seeds\n";
    for (const auto& [label, k] : labels) {
      const auto& v = deltas[label];
      double mean = 0.0;
      int positive = 0;
      for (double x : v) {
        mean += x;
        positive += x > 0.0 ? 1 : 0;
      }
      mean /= double(v.size());
      improvement_mean += label + "," + k + "," + format_g6(mean) + "," + format_g6(sample_sd(v, mean)) + "," +
                          std::to_string(positive) + "," + std::to_string(v.size()) + "\n";
    }
    write_text_file(agg / "summary_mean_sd.csv", mean_sd);
    write_text_file(agg / "summary_by_seed.csv", by_seed);
    write_text_file(agg / "same_vs_others.csv", gap_csv);
    write_text_file(agg / "improvement_by_seed.csv", improvement_rows);
    write_text_file(agg / "improvement_mean.csv", improvement_mean);
  });
  StageRecord aggregate{"aggregate", directory_hash(agg), std::chrono::duration<double>(Clock::now() - t0).count(), false};
  records.push_back(aggregate);

  std::string manifest = "version=" + std::string(version_string()) + "\n";
  manifest += "threads=" + std::to_string(max_threads()) + "\n";
  manifest += "config_sha256=" + sha256_hex(config.canonical()) + "\n";
  for (const auto& r : records) {
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.3f", r.seconds);
    manifest += "stage " + r.name + " hash=" + r.hash + " seconds=" + secs + (r.skipped ? " skipped" : "") + "\n";
  }
  manifest += "\n# config\n" + config.canonical();
  write_text_file(out_dir / "run_manifest.txt", manifest);
  return records;
}

}  // namespace funavg

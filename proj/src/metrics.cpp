#include <funavg/errors.hpp>
#include <funavg/metrics.hpp>
#include <funavg/text.hpp>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace funavg {

double dice(const LabelMap& pred, const LabelMap& gt, int label, EmptyDice empty) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw DataError("dice: prediction/ground-truth shape mismatch");
  const auto p = (pred == label);
  const auto g = (gt == label);
  const double sp = double(p.count()), sg = double(g.count());
  if (sp + sg == 0.0) return empty == EmptyDice::one ? 1.0 : std::numeric_limits<double>::quiet_NaN();
  return 2.0 * double((p && g).count()) / (sp + sg);
}

namespace {

const LabelMap& find_prediction(const std::map<std::string, LabelMap>& preds, const std::string& id,
                                const std::string& what) {
  auto it = preds.find(id);
  if (it == preds.end()) throw DataError(what + ": no prediction for test image '" + id + "'");
  return it->second;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / double(v.size());
}

}  // namespace

std::vector<CaseDice> score_ensemble(const std::string& method, const DatasetBundle& data,
                                     const EnsemblePredictions& predictions, EmptyDice empty) {
  std::vector<CaseDice> out;
  for (const auto& client : data.clients)
    for (const auto& s : client.test) {
      const auto& pred = find_prediction(predictions, s.id, method);
      for (int c = 1; c < data.registry.num_channels(); ++c)
        out.push_back({method, client.client_id, "", s.id, data.registry.global_labels[std::size_t(c - 1)],
                       dice(pred, s.full_labels, c, empty)});
    }
  return out;
}

std::vector<CaseDice> score_local(const DatasetBundle& data, const LocalPredictions& predictions, EmptyDice empty) {
  std::vector<CaseDice> out;
  for (const auto& model : data.registry.clients()) {
    auto it = predictions.find(model);
    if (it == predictions.end()) throw DataError("local predictions missing for model '" + model + "'");
    const auto channels = data.registry.client_channels(model);
    for (const auto& client : data.clients) {
      const std::string method = client.client_id == model ? "Same" : "Others";
      for (const auto& s : client.test) {
        const auto& pred = find_prediction(it->second, s.id, "local model " + model);
        for (int c : channels)
          out.push_back({method, client.client_id, model, s.id, data.registry.global_labels[std::size_t(c - 1)],
                         dice(pred, s.full_labels, c, empty)});
      }
    }
  }
  return out;
}

double DiceTable::value(const std::string& method, const std::string& column) const {
  auto it = summary.find(method);
  if (it != summary.end())
    for (const auto& [col, v] : it->second)
      if (col == column) return v;
  throw std::out_of_range("dice table has no cell (" + method + ", " + column + ")");
}

std::map<std::string, double> DiceTable::label_means(const std::string& method) const {
  std::map<std::string, double> out;
  auto it = summary.find(method);
  if (it == summary.end()) throw std::out_of_range("dice table has no method '" + method + "'");
  for (const auto& [col, v] : it->second)
    if (col.rfind("label:", 0) == 0) out[col.substr(6)] = v;
  return out;
}

std::string DiceTable::cells_csv() const {
  std::string csv = "method,client,label,dice\n";
  for (const auto& c : cells) csv += c.method + "," + c.client + "," + c.label + "," + format_g6(c.dice) + "\n";
  return csv;
}

std::string DiceTable::summary_csv() const {
  std::string csv = "method,column,mean\n";
  for (const auto& m : methods) {
    auto it = summary.find(m);
    if (it == summary.end()) continue;
    for (const auto& [col, v] : it->second) csv += m + "," + col + "," + format_g6(v) + "\n";
  }
  return csv;
}

DiceTable evaluate_run(const std::vector<CaseDice>& cases, const std::vector<std::string>& method_order,
                       Aggregation aggregation) {
  DiceTable table;
  table.methods = method_order;
  for (const auto& method : method_order) {
    // (client, label) → values, in first-seen order for stable output.
    std::vector<std::pair<std::string, std::string>> keys;
    std::map<std::pair<std::string, std::string>, std::vector<double>> values;
    std::vector<double> all;
    for (const auto& c : cases) {
      if (c.method != method || std::isnan(c.dice)) continue;
      all.push_back(c.dice);
      const auto key = std::make_pair(c.dataset, c.label);
      auto [it, inserted] = values.try_emplace(key);
      if (inserted) keys.push_back(key);
      it->second.push_back(c.dice);
    }
    if (keys.empty()) continue;
    std::vector<std::string> clients, labels;
    std::map<std::string, std::vector<double>> by_client, by_label;
    for (const auto& key : keys) {
      const double cell = mean_of(values[key]);
      table.cells.push_back({method, key.first, key.second, cell});
      if (!by_client.count(key.first)) clients.push_back(key.first);
      if (!by_label.count(key.second)) labels.push_back(key.second);
      by_client[key.first].push_back(cell);
      by_label[key.second].push_back(cell);
    }
    std::sort(clients.begin(), clients.end());
    auto& row = table.summary[method];
    std::vector<double> client_means, label_means;
    for (const auto& c : clients) {
      client_means.push_back(mean_of(by_client[c]));
      row.emplace_back("client:" + c, client_means.back());
    }
    row.emplace_back("M", aggregation == Aggregation::per_dataset ? mean_of(client_means) : mean_of(all));
    for (const auto& l : labels) {
      label_means.push_back(mean_of(by_label[l]));
      row.emplace_back("label:" + l, label_means.back());
    }
    row.emplace_back("M_label", mean_of(label_means));
  }
  return table;
}

std::map<std::string, double> per_case_means(const std::vector<CaseDice>& cases, const std::string& method,
                                             const std::string& dataset) {
  std::map<std::string, std::vector<double>> grouped;
  for (const auto& c : cases)
    if (c.method == method && (dataset.empty() || c.dataset == dataset) && !std::isnan(c.dice))
      grouped[c.image_id].push_back(c.dice);
  std::map<std::string, double> out;
  for (const auto& [id, v] : grouped) out[id] = mean_of(v);
  return out;
}

const char* paired_method_name(PairedTest::Method m) {
  return m == PairedTest::Method::exact ? "exact" : "normal_approx";
}

PairedTest wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("wilcoxon: samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] - b[i] != 0.0) d.push_back(a[i] - b[i]);
  if (d.empty()) throw std::domain_error("wilcoxon: all differences are zero");
  const std::size_t n = d.size();

  // Average ranks of |d|, kept doubled so they stay integral.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const long doubled = long(i + 1 + j + 1);  // 2 × mean of ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = doubled;
    const double t = double(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  PairedTest out;
  out.n = n;
  long plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) plus2 += rank2[i];
  }
  out.w_plus = plus2 / 2.0;
  out.w_minus = (total2 - plus2) / 2.0;
  const long w2 = std::min(plus2, total2 - plus2);
  out.statistic = w2 / 2.0;

  if (n <= 25) {
    out.method = PairedTest::Method::exact;
    // Gray-code walk: each step flips the sign of one rank.
    const std::uint64_t patterns = std::uint64_t{1} << n;
    std::uint64_t extreme = 0, gray = 0;
    long t_plus = 0;
    for (std::uint64_t step = 0; step < patterns; ++step) {
      if (step > 0) {
        const int bit = std::countr_zero(step);
        gray ^= std::uint64_t{1} << bit;
        t_plus += (gray >> bit & 1) ? rank2[std::size_t(bit)] : -rank2[std::size_t(bit)];
      }
      if (std::min(t_plus, total2 - t_plus) <= w2) ++extreme;
    }
    out.p_value = double(extreme) / double(patterns);
  } else {
    out.method = PairedTest::Method::normal_approx;
    const double nn = double(n);
    const double mean = nn * (nn + 1) / 4.0;
    const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) {
      out.p_value = 1.0;
    } else {
      const double z = std::max(0.0, std::abs(out.statistic - mean) - 0.5) / std::sqrt(var);
      out.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
    }
  }
  return out;
}

std::vector<ImprovementRow> improvement_report(const std::map<std::string, double>& fun,
                                               const std::map<std::string, double>& fed, const LabelRegistry& registry) {
  if (fun.size() != fed.size()) throw std::invalid_argument("improvement_report: tables cover different labels");
  const auto k = registry.presence_counts();
  std::vector<ImprovementRow> rows;
  for (std::size_t c = 0; c < registry.global_labels.size(); ++c) {
    const auto& label = registry.global_labels[c];
    auto f = fun.find(label), g = fed.find(label);
    if (f == fun.end() && g == fed.end()) continue;
    if (f == fun.end() || g == fed.end())
      throw std::invalid_argument("improvement_report: label '" + label + "' missing from one table");
    rows.push_back({label, k[c], g->second, f->second, f->second - g->second});
  }
  if (rows.size() != fun.size()) throw std::invalid_argument("improvement_report: table has labels unknown to registry");
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.k < b.k; });
  return rows;
}

std::string improvement_csv(const std::vector<ImprovementRow>& rows) {
  std::string csv = "label,k,dice_fed,dice_fun,delta\n";
  for (const auto& r : rows)
    csv += r.label + "," + std::to_string(r.k) + "," + format_g6(r.dice_fed) + "," + format_g6(r.dice_fun) + "," +
           format_g6(r.delta) + "\n";
  return csv;
}

std::string wilcoxon_csv(const std::vector<WilcoxonRow>& rows) {
  std::string csv = "dataset,method_a,method_b,n,W,p,method\n";
  for (const auto& r : rows) {
    csv += r.dataset + "," + r.method_a + "," + r.method_b + "," + std::to_string(r.test.n) + ",";
    if (r.degenerate)
      csv += "nan,nan,degenerate\n";
    else
      csv += format_g6(r.test.statistic) + "," + format_g6(r.test.p_value) + "," + paired_method_name(r.test.method) +
             "\n";
  }
  return csv;
}

}  // namespace funavg

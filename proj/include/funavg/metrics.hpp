#pragma once

// Dice scoring, method tables, Wilcoxon signed-rank tests and the per-label
// improvement report.

#include <funavg/synth.hpp>
#include <funavg/tensor.hpp>

#include <map>
#include <string>
#include <vector>

namespace funavg {

enum class EmptyDice { one, skip };

/// 2|P∩G| / (|P| + |G|) for one label. Both masks empty gives 1.0, or NaN
/// under EmptyDice::skip (such cases are then left out of every mean).
double dice(const LabelMap& pred, const LabelMap& gt, int label, EmptyDice empty = EmptyDice::one);

/// Dice of one predicted case against the full ground truth of one label.
struct CaseDice {
  std::string method;
  std::string dataset;  // client whose test split the image comes from
  std::string model;    // client that trained the scoring model; empty for ensembles
  std::string image_id;
  std::string label;
  double dice = 0.0;
};

/// Method name → (image id → predicted global label map).
using EnsemblePredictions = std::map<std::string, LabelMap>;
/// Model (training client) → (image id → predicted global label map).
using LocalPredictions = std::map<std::string, std::map<std::string, LabelMap>>;

/// Every global label on every test image.
std::vector<CaseDice> score_ensemble(const std::string& method, const DatasetBundle& data,
                                     const EnsemblePredictions& predictions, EmptyDice empty = EmptyDice::one);

/// "Same": each model on its own client's test split; "Others": on every
/// other client's test split. Both only over labels the model was trained on.
std::vector<CaseDice> score_local(const DatasetBundle& data, const LocalPredictions& predictions,
                                  EmptyDice empty = EmptyDice::one);

struct DiceCell {
  std::string method, client, label;
  double dice = 0.0;
};

/// per_dataset: M is the mean of the per-client columns. per_case: M is the
/// mean over every scored (case, label) pair of the method.
enum class Aggregation { per_dataset, per_case };

/// Cells are means over cases per (method, test client, label). Summary
/// columns per method: "client:<id>" (mean over that client's cells),
/// "M", "label:<name>" (mean over clients) and "M_label" (mean of label
/// columns).
struct DiceTable {
  std::vector<std::string> methods;
  std::vector<DiceCell> cells;
  std::map<std::string, std::vector<std::pair<std::string, double>>> summary;

  double value(const std::string& method, const std::string& column) const;
  std::map<std::string, double> label_means(const std::string& method) const;

  std::string cells_csv() const;    // method,client,label,dice
  std::string summary_csv() const;  // method,column,mean
};

DiceTable evaluate_run(const std::vector<CaseDice>& cases, const std::vector<std::string>& method_order,
                       Aggregation aggregation = Aggregation::per_dataset);

/// Per-case mean Dice (over labels) for one method and test client, keyed by
/// image id.
std::map<std::string, double> per_case_means(const std::vector<CaseDice>& cases, const std::string& method,
                                             const std::string& dataset = {});

struct PairedTest {
  enum class Method { exact, normal_approx };
  std::size_t n = 0;  // pairs with non-zero difference
  double w_plus = 0.0, w_minus = 0.0;
  double statistic = 0.0;  // min(W+, W−)
  double p_value = 1.0;
  Method method = Method::exact;
};

const char* paired_method_name(PairedTest::Method m);

/// Two-sided Wilcoxon signed-rank test. Zero differences are dropped, |d|
/// ties share average ranks. n ≤ 25 enumerates all 2ⁿ sign patterns;
/// larger n uses the normal approximation with tie-corrected variance and
/// continuity correction. Throws std::domain_error when every difference is 0.
PairedTest wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b);

struct ImprovementRow {
  std::string label;
  int k = 0;
  double dice_fed = 0.0, dice_fun = 0.0, delta = 0.0;
};

/// Δ = fun − fed per label, sorted by k ascending (ties keep label order).
std::vector<ImprovementRow> improvement_report(const std::map<std::string, double>& fun,
                                               const std::map<std::string, double>& fed, const LabelRegistry& registry);

std::string improvement_csv(const std::vector<ImprovementRow>& rows);

struct WilcoxonRow {
  std::string dataset, method_a, method_b;
  PairedTest test;
  bool degenerate = false;
};

std::string wilcoxon_csv(const std::vector<WilcoxonRow>& rows);

}  // namespace funavg

#include "oracles.hpp"
#include "support.hpp"

#include <funavg/config.hpp>
#include <funavg/metrics.hpp>
#include <funavg/text.hpp>

#include <doctest.h>

#include <set>
#include <sstream>

using namespace funavg;

namespace {

DatasetBundle small_bundle() {
  RunConfig cfg;
  cfg.n_per_client = {5, 5, 6, 5};
  DatasetBundle b{cfg.registry(), cfg.world_spec(4), {}};
  b.clients = make_federation(b.registry, b.spec);
  return b;
}

std::vector<std::vector<std::string>> csv_rows(const std::string& csv) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) rows.push_back(split_list(line));
  return rows;
}

}  // namespace

TEST_CASE("dice hand values") {
  LabelMap g = LabelMap::Zero(4, 4), p = LabelMap::Zero(4, 4);
  g.block(0, 0, 2, 2).setConstant(1);
  CHECK(dice(g, g, 1) == 1.0);
  p.block(2, 2, 2, 2).setConstant(1);
  CHECK(dice(p, g, 1) == 0.0);
  p.setZero();
  p.block(0, 1, 2, 2).setConstant(1);
  CHECK(dice(p, g, 1) == 0.5);
  CHECK(dice(p, g, 3) == 1.0);
  CHECK(std::isnan(dice(p, g, 3, EmptyDice::skip)));
  CHECK_THROWS_AS(dice(LabelMap::Zero(2, 3), g, 1), DataError);
}

TEST_CASE("dice matches set counting") {
  std::mt19937_64 gen(10);
  for (int trial = 0; trial < 300; ++trial) {
    const int h = 1 + int(gen() % 9), w = 1 + int(gen() % 9), labels = 1 + int(gen() % 4);
    const auto p = testing::random_labels(h, w, labels, gen), g = testing::random_labels(h, w, labels, gen);
    for (int l = 0; l <= labels; ++l) {
      const double d = dice(p, g, l);
      CHECK(d == oracle::brute_dice(p, g, l));
      CHECK(d == dice(g, p, l));
      CHECK(d >= 0.0);
      CHECK(d <= 1.0);
    }
  }
}

TEST_CASE("wilcoxon hand values") {
  const auto t = wilcoxon_signed_rank({1.1, 2.2, 3.3, 4.4, 5.5}, {1, 2, 3, 4, 5});
  CHECK(t.n == 5);
  CHECK(t.method == PairedTest::Method::exact);
  CHECK(t.p_value == 0.0625);
  CHECK(t.w_plus == 15.0);
  CHECK(t.w_minus == 0.0);
  CHECK(t.statistic == 0.0);

  CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2}, {1, 2}), std::domain_error);
  CHECK_THROWS_AS(wilcoxon_signed_rank({1, 2}, {1}), std::invalid_argument);
}

TEST_CASE("wilcoxon exact p equals sign-pattern enumeration") {
  std::mt19937_64 gen(55);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + gen() % 10;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse values so ties and zero differences both occur.
      a[i] = double(gen() % 7) / 4.0;
      b[i] = double(gen() % 7) / 4.0;
    }
    if (a == b) continue;
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) any |= a[i] != b[i];
    if (!any) continue;
    const auto t = wilcoxon_signed_rank(a, b);
    CHECK(t.p_value == oracle::brute_wilcoxon_p(a, b));
    CHECK(wilcoxon_signed_rank(b, a).p_value == t.p_value);
    CHECK(t.w_plus + t.w_minus == doctest::Approx(double(t.n * (t.n + 1)) / 2.0));
  }
}

TEST_CASE("wilcoxon normal approximation for large n") {
  std::vector<double> a(40), b(40);
  std::mt19937_64 gen(3);
  for (std::size_t i = 0; i < 40; ++i) {
    a[i] = uniform01(gen) + 0.5;
    b[i] = uniform01(gen);
  }
  const auto t = wilcoxon_signed_rank(a, b);
  CHECK(t.method == PairedTest::Method::normal_approx);
  CHECK(t.p_value < 0.01);
  CHECK(t.p_value > 0.0);

  // One-sided shift of 0 gives a large p.
  const auto same = wilcoxon_signed_rank(a, [&] {
    auto c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c[i] += (i % 2 ? 0.01 : -0.01);
    return c;
  }());
  CHECK(same.p_value > 0.5);
}

TEST_CASE("oracle and empty predictors") {
  const auto data = small_bundle();
  EnsemblePredictions oracle, empty;
  LocalPredictions local;
  for (const auto& c : data.clients)
    for (const auto& s : c.test) {
      oracle[s.id] = s.full_labels;
      empty[s.id] = LabelMap::Zero(s.full_labels.rows(), s.full_labels.cols());
      for (const auto& m : data.registry.clients()) local[m][s.id] = s.full_labels;
    }
  auto cases = score_ensemble("FedAvg", data, oracle);
  const auto zero = score_ensemble("FUNAvg", data, empty);
  cases.insert(cases.end(), zero.begin(), zero.end());
  const auto loc = score_local(data, local);
  cases.insert(cases.end(), loc.begin(), loc.end());
  const auto table = evaluate_run(cases, {"Same", "Others", "FedAvg", "FUNAvg"});
  for (const auto& cell : table.cells) {
    if (cell.method == "FUNAvg")
      CHECK(cell.dice == 0.0);
    else
      CHECK(cell.dice == 1.0);
  }
  CHECK(table.value("FedAvg", "M") == 1.0);
  CHECK(table.value("FUNAvg", "M") == 0.0);

  for (const auto& c : loc) {
    if (c.method == "Same") CHECK(c.dataset == c.model);
    if (c.method == "Others") CHECK(c.dataset != c.model);
    const auto channels = data.registry.client_channels(c.model);
    CHECK(std::count(channels.begin(), channels.end(), data.registry.channel_of(c.label)) == 1);
  }

  oracle.erase(oracle.begin());
  CHECK_THROWS_AS(score_ensemble("FedAvg", data, oracle), DataError);
}

TEST_CASE("summary means recompute from the cell dump") {
  const auto data = small_bundle();
  std::mt19937_64 gen(19);
  EnsemblePredictions noisy;
  for (const auto& c : data.clients)
    for (const auto& s : c.test) {
      LabelMap p = s.full_labels;
      for (Eigen::Index i = 0; i < p.size(); ++i)
        if (gen() % 5 == 0) p.data()[i] = std::int32_t(gen() % 6);
      noisy[s.id] = p;
    }
  const auto cases = score_ensemble("FedAvg", data, noisy);
  const auto table = evaluate_run(cases, {"FedAvg"});

  std::map<std::string, std::vector<double>> by_client, by_label;
  for (const auto& row : csv_rows(table.cells_csv())) {
    by_client[row[1]].push_back(std::stod(row[3]));
    by_label[row[2]].push_back(std::stod(row[3]));
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  std::vector<double> client_means, label_means;
  for (const auto& [c, v] : by_client) {
    client_means.push_back(mean(v));
    CHECK(table.value("FedAvg", "client:" + c) == doctest::Approx(client_means.back()).epsilon(1e-5));
  }
  for (const auto& [l, v] : by_label) label_means.push_back(mean(v));
  CHECK(table.value("FedAvg", "M") == doctest::Approx(mean(client_means)).epsilon(1e-5));
  CHECK(table.value("FedAvg", "M_label") == doctest::Approx(mean(label_means)).epsilon(1e-5));

  std::vector<double> all;
  for (const auto& c : cases) all.push_back(c.dice);
  CHECK(evaluate_run(cases, {"FedAvg"}, Aggregation::per_case).value("FedAvg", "M") ==
        doctest::Approx(mean(all)).epsilon(1e-12));

  const auto per_case = per_case_means(cases, "FedAvg", "B");
  CHECK(per_case.size() == data.client("B").test.size());
  CHECK(evaluate_run(cases, {"FedAvg"}).summary_csv() == table.summary_csv());
}

TEST_CASE("skip convention drops empty cases from every mean") {
  LabelMap g = LabelMap::Zero(3, 3);
  g(0, 0) = 1;
  std::vector<CaseDice> cases{{"X", "A", "", "i1", "L1", dice(g, g, 1, EmptyDice::skip)},
                              {"X", "A", "", "i1", "L2", dice(g, g, 2, EmptyDice::skip)}};
  const auto t = evaluate_run(cases, {"X"});
  CHECK(t.value("X", "M") == 1.0);
  CHECK(t.cells.size() == 1);
}

TEST_CASE("improvement report") {
  const auto reg = RunConfig{}.registry();
  std::map<std::string, double> fed{{"L1", 0.126}, {"L2", 0.5}, {"L3", 0.7}, {"L4", 0.8}, {"L5", 0.9}};
  std::map<std::string, double> fun{{"L1", 0.513}, {"L2", 0.6}, {"L3", 0.7}, {"L4", 0.81}, {"L5", 0.85}};
  const auto same = improvement_report(fed, fed, reg);
  for (const auto& r : same) CHECK(r.delta == 0.0);

  const auto rows = improvement_report(fun, fed, reg);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].label == "L1");
  CHECK(rows[0].k == 1);
  CHECK(rows[1].k == 2);
  CHECK(rows[4].k == 3);
  for (const auto& r : rows) CHECK(std::abs(r.delta - (fun.at(r.label) - fed.at(r.label))) < 1e-12);

  const auto csv = improvement_csv(rows);
  CHECK(csv.rfind("label,k,dice_fed,dice_fun,delta\nL1,1,0.126,0.513,0.387\n", 0) == 0);

  fun.erase("L3");
  CHECK_THROWS_AS(improvement_report(fun, fed, reg), std::invalid_argument);
}

TEST_CASE("wilcoxon csv") {
  std::vector<WilcoxonRow> rows{{"A", "FedAvg", "FUNAvg", wilcoxon_signed_rank({2, 3, 4, 5, 6}, {1, 1, 1, 1, 1}), false},
                                {"B", "FedAvg", "FUNAvg", {}, true}};
  CHECK(wilcoxon_csv(rows) ==
        "dataset,method_a,method_b,n,W,p,method\nA,FedAvg,FUNAvg,5,0,0.0625,exact\nB,FedAvg,FUNAvg,0,nan,nan,degenerate\n");
}

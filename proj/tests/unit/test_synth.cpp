#include "support.hpp"

#include <funavg/config.hpp>
#include <funavg/synth.hpp>

#include <doctest.h>

#include <algorithm>
#include <set>

using namespace funavg;

namespace {

bool same_sample(const Sample& a, const Sample& b) {
  return a.id == b.id && a.image == b.image && (a.full_labels == b.full_labels).all() &&
         (a.client_labels == b.client_labels).all();
}

}  // namespace

TEST_CASE("world generation is deterministic and order free") {
  const auto reg = RunConfig{}.registry();
  CHECK(make_world(1, 0, 32, reg).empty());
  const auto a = make_world(99, 6, 32, reg);
  const auto b = make_world(99, 6, 32, reg);
  const auto tail = make_world(99, 3, 32, reg);
  REQUIRE(a.size() == 6);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(same_sample(a[i], b[i]));
  for (std::size_t i = 0; i < tail.size(); ++i) CHECK(same_sample(a[i], tail[i]));
  CHECK_FALSE(a[0].image == make_world(100, 1, 32, reg)[0].image);
  CHECK_THROWS_AS(make_world(1, 1, 16, reg), std::invalid_argument);
}

TEST_CASE("every label appears in every sample") {
  const auto reg = RunConfig{}.registry();
  for (int size : {32, 64}) {
    const auto world = make_world(5, 40, size, reg);
    for (const auto& s : world) {
      std::vector<long> count(std::size_t(reg.num_channels()), 0);
      for (Eigen::Index i = 0; i < s.full_labels.size(); ++i) ++count[std::size_t(s.full_labels.data()[i])];
      for (int c = 1; c < reg.num_channels(); ++c) CHECK(count[std::size_t(c)] > 0);
      CHECK(s.image.data().minCoeff() >= 0.0f);
      CHECK(s.image.data().maxCoeff() <= 1.0f);
      CHECK((s.client_labels == s.full_labels).all());
    }
  }
}

TEST_CASE("label pixel frequencies are balanced") {
  const auto reg = RunConfig{}.registry();
  const auto world = make_world(3, 100, 64, reg);
  std::vector<double> count(std::size_t(reg.num_labels()), 0.0);
  for (const auto& s : world)
    for (Eigen::Index i = 0; i < s.full_labels.size(); ++i)
      if (s.full_labels.data()[i] > 0) count[std::size_t(s.full_labels.data()[i] - 1)] += 1.0;
  double mean = 0.0;
  for (double c : count) mean += c / double(count.size());
  for (double c : count) CHECK(std::abs(c / mean - 1.0) <= 0.30);
}

TEST_CASE("mask_labels") {
  const auto reg = RunConfig{}.registry();
  const auto s = make_world(8, 1, 32, reg).front();
  CHECK((mask_labels(s, reg.global_labels, reg).client_labels == s.full_labels).all());
  CHECK_THROWS_AS(mask_labels(s, {}, reg), std::invalid_argument);

  LabelRegistry two;
  two.global_labels = {"P", "Q"};
  two.client_label_sets = {{"A", {"P"}}, {"B", {"Q"}}};
  const auto t = make_world(4, 1, 32, two).front();
  const auto masked = mask_labels(t, {"P"}, two);
  for (Eigen::Index i = 0; i < t.full_labels.size(); ++i) {
    const int full = t.full_labels.data()[i], got = masked.client_labels.data()[i];
    CHECK(got == (full == 2 ? 0 : full));
  }
}

TEST_CASE("split sizes follow the floor rule and partition the input") {
  const auto reg = RunConfig{}.registry();
  auto world = make_world(2, 10, 32, reg);
  for (std::size_t i = 0; i < world.size(); ++i) world[i].id = "s" + std::to_string(i);
  auto [train, test] = split_train_test(world, 0.8, 7);
  CHECK(train.size() == 8);
  CHECK(test.size() == 2);
  std::multiset<std::string> ids;
  for (const auto& s : train) ids.insert(s.id);
  for (const auto& s : test) ids.insert(s.id);
  std::multiset<std::string> want;
  for (const auto& s : world) want.insert(s.id);
  CHECK(ids == want);

  world.resize(5);
  auto [train5, test5] = split_train_test(world, 0.8, 7);
  CHECK(train5.size() == 4);
  CHECK(test5.size() == 1);
  CHECK_THROWS_AS(split_train_test(world, 1.0, 7), std::invalid_argument);
}

TEST_CASE("federation respects client label sets") {
  RunConfig cfg;
  cfg.n_per_client = {5, 10, 6, 7};
  const auto reg = cfg.registry();
  const auto clients = make_federation(reg, cfg.world_spec(3));
  REQUIRE(clients.size() == 4);
  CHECK(clients[0].n_train() == 4);
  CHECK(clients[1].n_train() == 8);
  for (const auto& c : clients) {
    std::set<int> allowed{0};
    for (int ch : reg.client_channels(c.client_id)) allowed.insert(ch);
    for (const auto* split : {&c.train, &c.test})
      for (const auto& s : *split)
        for (Eigen::Index i = 0; i < s.client_labels.size(); ++i) {
          const int l = s.client_labels.data()[i];
          CHECK(allowed.count(l) == 1);
          if (l != 0) CHECK(l == s.full_labels.data()[i]);
        }
  }
  CHECK(reg.presence_counts() == std::vector<int>{1, 2, 3, 3, 3});
}

TEST_CASE("annotation offsets dilate and erode") {
  LabelMap m = LabelMap::Zero(9, 9);
  m.block(3, 3, 3, 3).setConstant(2);
  const auto grown = apply_annotation_offset(m, 1);
  CHECK((grown == 2).count() == 5 * 5 - 4);
  CHECK((apply_annotation_offset(m, -1) == 2).count() == 1);
  CHECK((apply_annotation_offset(m, 0) == m).all());
}

TEST_CASE("dataset directory round trip") {
  RunConfig cfg;
  cfg.n_per_client = {3, 4, 3, 5};
  DatasetBundle bundle{cfg.registry(), cfg.world_spec(1), {}};
  bundle.clients = make_federation(bundle.registry, bundle.spec);
  testing::TempDir dir("synth");
  write_dataset(dir.path / "data", bundle);
  const auto back = read_dataset(dir.path / "data");
  CHECK(back.registry.global_labels == bundle.registry.global_labels);
  CHECK(back.registry.client_label_sets == bundle.registry.client_label_sets);
  REQUIRE(back.clients.size() == bundle.clients.size());
  for (std::size_t c = 0; c < back.clients.size(); ++c) {
    REQUIRE(back.clients[c].train.size() == bundle.clients[c].train.size());
    REQUIRE(back.clients[c].test.size() == bundle.clients[c].test.size());
    for (std::size_t i = 0; i < back.clients[c].train.size(); ++i)
      CHECK(same_sample(back.clients[c].train[i], bundle.clients[c].train[i]));
    for (std::size_t i = 0; i < back.clients[c].test.size(); ++i)
      CHECK(same_sample(back.clients[c].test[i], bundle.clients[c].test[i]));
  }
}

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "sbat/error.hpp"
#include "sbat/partition.hpp"
#include "support/gradcheck.hpp"
#include "support/graphs.hpp"
#include "support/partition_oracle.hpp"

using namespace sbat;
using namespace sbat::testing;

TEST_CASE("partition_kway on a path of four nodes matches brute force") {
  auto g = path_graph(4);
  auto plan = partition_kway(g, 2, 1.3, 0);
  const auto best = best_bipartition(g, balance_capacity(4, 2, 1.3));
  CHECK(best.cut == 1.0);
  CHECK(plan.edge_cut == 1.0);
  CHECK(plan.assign == std::vector<std::size_t>{0, 0, 1, 1});
}

TEST_CASE("partition_kway degenerate counts") {
  std::mt19937_64 rng(1);
  auto g = random_connected(12, 0.4, rng);
  auto one = partition_kway(g, 1);
  CHECK(one.edge_cut == 0.0);
  CHECK(one.m == 12);
  CHECK(one.p == 1);

  auto all = partition_kway(g, 12);
  CHECK(all.m == 1);
  CHECK(all.edge_cut == doctest::Approx(g.total_weight()).epsilon(1e-12));

  CHECK_THROWS_AS(partition_kway(g, 13), InputError);
  CHECK_THROWS_AS(partition_kway(g, 0), InputError);
  CHECK_THROWS_AS(partition_kway(g, 2, 0.9), InputError);
}

TEST_CASE("partition invariants hold on random graphs") {
  std::mt19937_64 rng(123);
  std::uniform_int_distribution<std::size_t> size(8, 300);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = size(rng);
    auto g = random_geometric(n, std::sqrt(6.0 / static_cast<double>(n)), rng);
    std::uniform_int_distribution<std::size_t> parts(1, std::min<std::size_t>(n, 40));
    const std::size_t p = parts(rng);
    auto plan = partition_kway(g, p, 1.3, trial);
    CHECK_NOTHROW(plan.validate());
    CHECK_FALSE(plan.over_balance);
    CHECK(plan.m <= balance_capacity(n, p, 1.3));
    CHECK(plan.edge_cut == doctest::Approx(independent_cut(g, plan.assign)).epsilon(1e-12));
  }
}

TEST_CASE("partition quality within 1.5x of the exhaustive optimum for small graphs") {
  std::mt19937_64 rng(777);
  std::uniform_int_distribution<std::size_t> size(4, 10);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = size(rng);
    auto g = random_geometric(n, 0.6, rng);
    auto plan = partition_kway(g, 2, 1.3, trial);
    const auto best = best_bipartition(g, balance_capacity(n, 2, 1.3));
    INFO("n=" << n << " cut=" << plan.edge_cut << " optimum=" << best.cut);
    CHECK(plan.edge_cut <= 1.5 * best.cut + 1e-12);
  }
}

TEST_CASE("partition_kway is deterministic per seed") {
  std::mt19937_64 rng(3);
  auto g = random_geometric(200, 0.15, rng);
  auto a = partition_kway(g, 8, 1.3, 42);
  auto b = partition_kway(g, 8, 1.3, 42);
  CHECK(a.assign == b.assign);
  CHECK(plan_to_json(a).dump() == plan_to_json(b).dump());
}

TEST_CASE("strict balance factor 1 is honoured") {
  auto coords = grid_coords(1024);
  auto g = build_epsilon_graph(coords, 1.5);
  auto plan = partition_kway(g, 32, 1.0, 0);
  CHECK(plan.m == 32);
  CHECK_NOTHROW(plan.validate());
}

TEST_CASE("scale series subgraph counts") {
  std::mt19937_64 rng(9);
  auto g = random_connected(64, 0.25, rng);
  auto s = build_scale_series(g, 8, 3);
  REQUIRE(s.levels() == 3);
  CHECK(s.plans[0].p == 8);
  CHECK(s.plans[1].p == 4);
  CHECK(s.plans[2].p == 2);

  auto single = build_scale_series(g, 8, 1);
  CHECK(single.levels() == 1);
  CHECK(single.merges.empty());

  auto odd = build_scale_series(g, 5, 3);
  CHECK(odd.plans[1].p == 3);
  CHECK(odd.plans[2].p == 2);

  try {
    build_scale_series(g, 5, 4);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("at most 3 levels") != std::string::npos);
  }
}

TEST_CASE("scale series levels are nested unions of finer subgraphs") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    auto g = random_connected(80, 0.2, rng);
    auto s = build_scale_series(g, 9, 4, 1.3, trial);
    for (std::size_t l = 0; l + 1 < s.levels(); ++l) {
      CHECK(s.plans[l + 1].p == (s.plans[l].p + 1) / 2);
      for (std::size_t i = 0; i < 80; ++i) CHECK(s.merges[l][s.plans[l].assign[i]] == s.plans[l + 1].assign[i]);
      CHECK_NOTHROW(s.plans[l + 1].validate());
    }
  }
}

TEST_CASE("pair merge prefers intra-clique pairs over the bridge") {
  // Two 4-cliques {0..3}, {4..7} joined by edge 3-4.
  std::vector<Edge> es;
  for (std::size_t base : {0u, 4u})
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = i + 1; j < 4; ++j) es.push_back({base + i, base + j, 1.0});
  es.push_back({3, 4, 1.0});
  auto g = SpatialGraph::from_edges(8, es);
  auto s = build_scale_series(g, 4, 2);
  const auto& fine = s.plans[0];
  const auto& coarse = s.plans[1];
  for (std::size_t i = 0; i < 4; ++i) CHECK(coarse.assign[i] == coarse.assign[0]);
  for (std::size_t i = 4; i < 8; ++i) CHECK(coarse.assign[i] == coarse.assign[4]);
  CHECK(coarse.assign[0] != coarse.assign[4]);
  // Enumeration oracle over all perfect pairings of the 4 fine subgraphs.
  const double best = best_pairing_weight(g, fine);
  CHECK(pairing_weight(g, fine, s.merges[0]) == best);
}

TEST_CASE("apply_plan and revert_plan") {
  std::mt19937_64 rng(4);
  auto x = random_tensor({5, 3}, rng);
  auto one = PartitionPlan::from_assignment(1, {0, 0, 0, 0, 0}, 1.3, 0, 0.0);
  auto y = apply_plan(x, one);
  CHECK(y.shape() == Shape{1, 5, 3});
  CHECK(std::equal(x.values().begin(), x.values().end(), y.values().begin()));

  auto padded = PartitionPlan::from_assignment(2, {0, 0, 1}, 1.3, 0, 0.0);
  auto x3 = random_tensor({3, 2}, rng);
  auto y3 = apply_plan(x3, padded);
  CHECK(y3.shape() == Shape{2, 2, 2});
  CHECK(y3[6] == 0.0);
  CHECK(y3[7] == 0.0);

  auto back = revert_plan(y3, padded);
  CHECK(std::equal(x3.values().begin(), x3.values().end(), back.values().begin()));
  auto noisy = y3.detach();
  noisy.mutable_values()[6] = 123.0;
  noisy.mutable_values()[7] = -4.0;
  auto back2 = revert_plan(noisy, padded);
  CHECK(std::equal(back.values().begin(), back.values().end(), back2.values().begin()));

  CHECK_THROWS_AS(apply_plan(random_tensor({4, 2}, rng), padded), ContractError);
  CHECK_THROWS_AS(revert_plan(random_tensor({2, 3, 2}, rng), padded), ContractError);
}

TEST_CASE("round trip restores order under a random permuted plan") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::size_t> raw(10);
    std::uniform_int_distribution<std::size_t> part(0, 3);
    for (auto& r : raw) r = part(rng);
    raw[0] = 0;
    raw[1] = 1;
    raw[2] = 2;
    raw[3] = 3;
    std::shuffle(raw.begin(), raw.end(), rng);
    auto plan = PartitionPlan::from_assignment(4, canonical_labels(raw), 2.0, 0, 0.0);
    auto x = random_tensor({10, 4}, rng);
    auto y = apply_plan(x, plan);
    for (std::size_t q = 0; q < plan.p; ++q)
      for (std::size_t j = 0; j < plan.m; ++j) {
        const auto id = plan.gather[q * plan.m + j];
        for (std::size_t d = 0; d < 4; ++d) {
          const double got = y[(q * plan.m + j) * 4 + d];
          CHECK(got == (id < 0 ? 0.0 : x[static_cast<std::size_t>(id) * 4 + d]));
        }
      }
    auto back = revert_plan(y, plan);
    CHECK(std::equal(x.values().begin(), x.values().end(), back.values().begin()));
  }
}

TEST_CASE("plan and series JSON round trip") {
  std::mt19937_64 rng(2);
  auto g = random_connected(50, 0.3, rng);
  auto s = build_scale_series(g, 6, 3, 1.3, 5);
  auto back = series_from_json(series_to_json(s));
  REQUIRE(back.levels() == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(back.plans[l].assign == s.plans[l].assign);
    CHECK(back.plans[l].gather == s.plans[l].gather);
    CHECK(back.plans[l].edge_cut == s.plans[l].edge_cut);
  }
  auto j = series_to_json(s);
  j["plans"][1]["assign"][0] = 99;
  CHECK_THROWS_AS(series_from_json(j), InputError);
}

TEST_CASE("scale series file round trip is byte stable") {
  std::mt19937_64 rng(8);
  auto g = random_connected(40, 0.3, rng);
  const auto dir = std::filesystem::temp_directory_path() / "sbat_test_series_file";
  std::filesystem::create_directories(dir);
  auto s = build_scale_series(g, 4, 3, 1.3, 1);
  save_scale_series(s, dir / "a.json");
  save_scale_series(load_scale_series(dir / "a.json"), dir / "b.json");
  std::ifstream a(dir / "a.json"), b(dir / "b.json");
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  CHECK(sa == sb);
  CHECK_THROWS_AS(load_scale_series(dir / "missing.json"), LoadError);
  std::filesystem::remove_all(dir);
}

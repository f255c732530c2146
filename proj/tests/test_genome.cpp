#include "crna/genome.hpp"

#include <set>

#include "crna/rng.hpp"
#include "doctest.h"

using namespace crna;
using namespace crna::arch;

TEST_CASE("segment (3,1),(1,0) decodes to skip_connect from node 1 and "
          "max_pool_3x3 from node 0") {
  Genome g{};  // all zeros is valid
  g.set(0, 0, 0, 3, 1);
  g.set(0, 0, 1, 1, 0);
  auto [normal, reduction] = decode(g);
  CHECK(normal.nodes[0].edges[0].op == OpType::SkipConnect);
  CHECK(normal.nodes[0].edges[0].source == 1);
  CHECK(normal.nodes[0].edges[1].op == OpType::MaxPool3x3);
  CHECK(normal.nodes[0].edges[1].source == 0);
  CHECK(op_type_name(OpType::SkipConnect) == std::string("skip_connect"));
  CHECK(op_type_name(OpType::MaxPool3x3) == std::string("max_pool_3x3"));
}

TEST_CASE("all-zero genome decodes to a valid degenerate graph") {
  Genome g{};
  CHECK(is_valid(g));
  auto [normal, reduction] = decode(g);
  for (const auto& cell : {normal, reduction}) {
    for (const auto& node : cell.nodes) {
      for (const auto& e : node.edges) {
        CHECK(e.op == OpType::None);
        CHECK(e.source == 0);
      }
    }
  }
}

TEST_CASE("encode(decode(g)) is the identity on 1000 random genomes") {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    Genome g = random_genome(rng);
    auto [normal, reduction] = decode(g);
    CHECK(encode(normal, reduction) == g);
  }
}

TEST_CASE("validate flags out-of-range genes with positions") {
  Genome g{};
  CHECK(validate(g).empty());

  SUBCASE("node 0 source above 1") {
    g.set(0, 0, 0, 3, 3);
    auto v = validate(g);
    REQUIRE(v.size() == 1);
    CHECK(v[0].gene_index == 1);
    CHECK_THROWS_AS(decode(g), GenomeError);
  }
  SUBCASE("op index 8") {
    g.set(1, 2, 1, 8, 0);
    auto v = validate(g);
    REQUIRE(v.size() == 1);
    CHECK(v[0].gene_index == Genome::gene_index(1, 2, 1, 0));
  }
  SUBCASE("negative gene") {
    g.genes[5] = -1;
    CHECK(validate(g).size() == 1);
  }
}

TEST_CASE("random_genome is deterministic per seed and always valid") {
  Rng a(123), b(123);
  Genome ga = random_genome(a);
  Genome gb = random_genome(b);
  CHECK(ga == gb);
  Rng c(124);
  for (int i = 0; i < 200; ++i) CHECK(is_valid(random_genome(c)));
}

TEST_CASE("10^4 random genomes attain every legal value at every position") {
  Rng rng(7);
  std::array<std::set<int>, kGenomeLength> seen;
  for (int i = 0; i < 10000; ++i) {
    Genome g = random_genome(rng);
    for (int j = 0; j < kGenomeLength; ++j) {
      seen[static_cast<std::size_t>(j)].insert(
          g.genes[static_cast<std::size_t>(j)]);
    }
  }
  for (int j = 0; j < kGenomeLength; ++j) {
    CHECK(static_cast<int>(seen[static_cast<std::size_t>(j)].size()) ==
          gene_cardinality(j));
  }
}

TEST_CASE("genome text form round-trips") {
  Rng rng(9);
  Genome g = random_genome(rng);
  CHECK(Genome::from_string(g.to_string()) == g);
  CHECK_THROWS_AS(Genome::from_string("1,2,3"), ConfigError);
  CHECK_THROWS_AS(Genome::from_string("a,b"), ConfigError);
}

TEST_CASE("decoded graphs have in-degree exactly 2 with legal sources") {
  Rng rng(10);
  for (int i = 0; i < 100; ++i) {
    Genome g = random_genome(rng);
    auto [normal, reduction] = decode(g);
    for (const auto& cell : {normal, reduction}) {
      for (int t = 0; t < kNodesPerCell; ++t) {
        for (const auto& e : cell.nodes[static_cast<std::size_t>(t)].edges) {
          CHECK(e.source >= 0);
          // acyclicity: node t may only see inputs and earlier intermediates
          CHECK(e.source <= t + 1);
        }
      }
    }
  }
}

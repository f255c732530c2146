#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "crna/error.hpp"
#include "crna/rng.hpp"

namespace crna::arch {

inline constexpr int kGenomeLength = 32;
inline constexpr int kNodesPerCell = 4;
inline constexpr int kNumOps = 8;

enum class OpType : int {
  None = 0,
  MaxPool3x3 = 1,
  AvgPool3x3 = 2,
  SkipConnect = 3,
  SepConv3x3 = 4,
  SepConv5x5 = 5,
  DilConv3x3 = 6,
  DilConv5x5 = 7,
};

const char* op_type_name(OpType op);

enum class CellKind { Normal, Reduction };

// 32 integers: 2 cells x 4 intermediate nodes x 2 edge slots x (op, source).
// Source indices 0 and 1 are the cell inputs c_{k-2} and c_{k-1}; index s >= 2
// is intermediate node s-2. Node t may draw from sources 0..t+1.
struct Genome {
  std::array<int, kGenomeLength> genes{};

  static int gene_index(int cell, int node, int slot, int field) {
    return cell * 16 + node * 4 + slot * 2 + field;
  }
  int op(int cell, int node, int slot) const {
    return genes[static_cast<std::size_t>(gene_index(cell, node, slot, 0))];
  }
  int src(int cell, int node, int slot) const {
    return genes[static_cast<std::size_t>(gene_index(cell, node, slot, 1))];
  }
  void set(int cell, int node, int slot, int op_idx, int src_idx) {
    genes[static_cast<std::size_t>(gene_index(cell, node, slot, 0))] = op_idx;
    genes[static_cast<std::size_t>(gene_index(cell, node, slot, 1))] = src_idx;
  }

  std::string to_string() const;  // 32 comma-separated integers
  static Genome from_string(const std::string& text);

  auto operator<=>(const Genome&) const = default;
};

// Legal value count of gene position i: op genes have kNumOps values, the
// source gene of node t has t+2 values.
int gene_cardinality(int gene_index);

struct Violation {
  int gene_index;
  std::string message;
};

std::vector<Violation> validate(const Genome& g);
bool is_valid(const Genome& g);

struct GenomeError : Error {
  GenomeError(std::string msg, std::vector<Violation> v)
      : Error(std::move(msg)), violations(std::move(v)) {}
  std::vector<Violation> violations;
};

struct CellEdge {
  OpType op;
  int source;  // 0,1 = cell inputs; 2..5 = intermediate nodes 0..3
};

struct CellNode {
  std::array<CellEdge, 2> edges;
};

// Decoded cell: 2 input nodes, 4 intermediate nodes each with exactly two
// inbound edges, and an output node concatenating all intermediates.
struct CellGraph {
  CellKind kind;
  std::array<CellNode, kNodesPerCell> nodes;
};

std::pair<CellGraph, CellGraph> decode(const Genome& g);
Genome encode(const CellGraph& normal, const CellGraph& reduction);
Genome random_genome(Rng& rng);

}  // namespace crna::arch

#include "crna/genome.hpp"

#include <sstream>

namespace crna::arch {

const char* op_type_name(OpType op) {
  switch (op) {
    case OpType::None: return "none";
    case OpType::MaxPool3x3: return "max_pool_3x3";
    case OpType::AvgPool3x3: return "avg_pool_3x3";
    case OpType::SkipConnect: return "skip_connect";
    case OpType::SepConv3x3: return "sep_conv_3x3";
    case OpType::SepConv5x5: return "sep_conv_5x5";
    case OpType::DilConv3x3: return "dil_conv_3x3";
    case OpType::DilConv5x5: return "dil_conv_5x5";
  }
  return "?";
}

std::string Genome::to_string() const {
  std::ostringstream os;
  for (int i = 0; i < kGenomeLength; ++i) {
    if (i) os << ",";
    os << genes[static_cast<std::size_t>(i)];
  }
  return os.str();
}

Genome Genome::from_string(const std::string& text) {
  Genome g;
  std::istringstream is(text);
  std::string tok;
  int count = 0;
  while (std::getline(is, tok, ',')) {
    if (count >= kGenomeLength) {
      throw ConfigError("genome text: more than 32 values");
    }
    try {
      g.genes[static_cast<std::size_t>(count)] = std::stoi(tok);
    } catch (const std::exception&) {
      throw ConfigError("genome text: '" + tok + "' is not an integer");
    }
    ++count;
  }
  if (count != kGenomeLength) {
    throw ConfigError("genome text: expected 32 values, got " +
                      std::to_string(count));
  }
  return g;
}

int gene_cardinality(int gene_index) {
  int within_cell = gene_index % 16;
  int node = within_cell / 4;
  bool is_src = (gene_index % 2) == 1;
  return is_src ? node + 2 : kNumOps;
}

std::vector<Violation> validate(const Genome& g) {
  std::vector<Violation> out;
  for (int i = 0; i < kGenomeLength; ++i) {
    int value = g.genes[static_cast<std::size_t>(i)];
    int card = gene_cardinality(i);
    if (value < 0 || value >= card) {
      std::ostringstream os;
      os << "gene " << i << ": value " << value << " outside [0, " << card - 1
         << "]";
      out.push_back({i, os.str()});
    }
  }
  return out;
}

bool is_valid(const Genome& g) { return validate(g).empty(); }

std::pair<CellGraph, CellGraph> decode(const Genome& g) {
  auto violations = validate(g);
  if (!violations.empty()) {
    std::ostringstream os;
    os << "invalid genome:";
    for (const auto& v : violations) os << " [" << v.message << "]";
    throw GenomeError(os.str(), std::move(violations));
  }
  std::pair<CellGraph, CellGraph> cells;
  cells.first.kind = CellKind::Normal;
  cells.second.kind = CellKind::Reduction;
  for (int cell = 0; cell < 2; ++cell) {
    CellGraph& cg = cell == 0 ? cells.first : cells.second;
    for (int node = 0; node < kNodesPerCell; ++node) {
      for (int slot = 0; slot < 2; ++slot) {
        cg.nodes[static_cast<std::size_t>(node)]
            .edges[static_cast<std::size_t>(slot)] = CellEdge{
            static_cast<OpType>(g.op(cell, node, slot)),
            g.src(cell, node, slot)};
      }
    }
  }
  return cells;
}

Genome encode(const CellGraph& normal, const CellGraph& reduction) {
  Genome g;
  for (int cell = 0; cell < 2; ++cell) {
    const CellGraph& cg = cell == 0 ? normal : reduction;
    for (int node = 0; node < kNodesPerCell; ++node) {
      for (int slot = 0; slot < 2; ++slot) {
        const CellEdge& e = cg.nodes[static_cast<std::size_t>(node)]
                                .edges[static_cast<std::size_t>(slot)];
        g.set(cell, node, slot, static_cast<int>(e.op), e.source);
      }
    }
  }
  auto violations = validate(g);
  if (!violations.empty()) {
    throw GenomeError("cell graph violates genome invariants",
                      std::move(violations));
  }
  return g;
}

Genome random_genome(Rng& rng) {
  Genome g;
  for (int i = 0; i < kGenomeLength; ++i) {
    g.genes[static_cast<std::size_t>(i)] =
        rng.uniform_int(0, gene_cardinality(i) - 1);
  }
  return g;
}

}  // namespace crna::arch

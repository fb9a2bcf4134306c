#ifndef COEXMAP_GRAPH_HPP
#define COEXMAP_GRAPH_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "coexmap/coexpression.hpp"
#include "coexmap/data.hpp"
#include "coexmap/preprocess.hpp"
#include "coexmap/types.hpp"

namespace coexmap {

struct GraphMeta {
    std::string dataset_id;
    std::string tissue;
    Modality modality = Modality::ScRna;
    std::string species;
};

// Per-dataset gene graph: nodes are genes carrying their Pearson-residual
// vector across cells, edges are significant co-expression pairs. No stored
// self-loops; adjacency symmetric; isolated genes retained.
struct GeneGraph {
    std::vector<std::string> genes;
    Mat node_features; // p x d_in, row g = residual column of gene g
    std::vector<std::pair<Index, Index>> edges; // i < j
    std::vector<std::vector<Index>> neighbors;  // sorted, symmetric
    GraphMeta meta;
    // Reporting columns written next to the edge list.
    Vec edge_rho;
    Vec edge_pval;

    Index n_nodes() const { return static_cast<Index>(genes.size()); }
    Mat adjacency_dense() const; // 0/1, symmetric, zero diagonal
};

// Restrict residuals + edges to the selected genes. Edge indices refer to
// positions in `hvgs`.
GeneGraph assemble_graph(const ResidualMatrix& residuals, const std::vector<Index>& hvgs,
                         const EdgeSet& edges, const GraphMeta& meta,
                         const Mat* edge_rho_source = nullptr, const Mat* edge_pval_source = nullptr);

struct AnchorSet {
    std::vector<std::pair<Index, Index>> common; // (index in i, index in j), ordered by gene name
    std::vector<Index> diff_i, diff_j;
    std::vector<std::vector<Index>> diff_neighbors_i, diff_neighbors_j; // aligned with diff lists
    Vec lambda; // aligned with common, values in [0, 1]
};

// Name-matched anchors plus per-gene neighbourhood-overlap weights.
AnchorSet anchor_sets(const GeneGraph& gi, const GeneGraph& gj);

// lambda_g = |N_ig ∩ N_jg| / |N_ig ∪ N_jg| with neighbours matched by gene
// NAME; 0 when both neighbourhoods are empty.
Vec jaccard_weights(const GeneGraph& gi, const GeneGraph& gj,
                    const std::vector<std::pair<Index, Index>>& common);

// Graph bundle on disk: metadata.json + edges.tsv + features.bin.
void save_graph(const std::filesystem::path& dir, const GeneGraph& g,
                const std::map<std::string, std::string>& meta = {});
GeneGraph load_graph(const std::filesystem::path& dir);
// Returns the "input_hash" recorded in an existing bundle, or empty.
std::string bundle_input_hash(const std::filesystem::path& dir);

} // namespace coexmap

#endif

#ifndef COEXMAP_METRICS_HPP
#define COEXMAP_METRICS_HPP

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "coexmap/graph.hpp"
#include "coexmap/types.hpp"

namespace coexmap {

struct EmbeddingKey {
    std::string gene;
    std::string dataset;
    std::string tissue;
    std::string modality;
};

struct EmbeddingTable {
    std::vector<EmbeddingKey> keys;
    Mat values; // rows align with keys

    Index size() const { return static_cast<Index>(keys.size()); }
    void validate() const;
};

// CSV layout: gene,dataset,tissue,modality,v0..v{d-1}. Accepts embeddings
// produced by other methods for benchmarking.
void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable read_embeddings(const std::filesystem::path& path);

// Rows whose gene name appears in >= 2 datasets.
std::vector<Index> common_gene_rows(const EmbeddingTable& table);

// ---- Clustering -------------------------------------------------------------

struct LeidenParams {
    int knn = 15;
    Scalar resolution = 1.0;
    std::uint64_t seed = 0;
    int max_levels = 10;
};

// Symmetric unit-weight k-NN graph.
std::vector<std::vector<Index>> knn_graph(const Mat& points, int k);

struct ClusterAssignment {
    std::vector<int> of_row; // contiguous ids from 0
    int n_clusters = 0;
};

ClusterAssignment cluster_leiden(const Mat& embeddings, const LeidenParams& params = {});
Scalar modularity(const std::vector<std::vector<Index>>& adj, const std::vector<int>& membership,
                  Scalar resolution);

// ---- The six metrics --------------------------------------------------------

// Mean over datasets of the AUC of sigmoid(z z^T) scores against the true
// adjacency (off-diagonal pairs, Mann-Whitney tie handling). Graphs with no
// or all edges are skipped.
Scalar edge_auc(const EmbeddingTable& table, const std::vector<GeneGraph>& graphs);
// Same, against explicit adjacency matrices (planted-truth evaluation).
Scalar edge_auc_against(const EmbeddingTable& table, const std::vector<GeneGraph>& graphs,
                        const std::vector<Mat>& adjacency);

// Batch silhouette on common-gene rows with dataset labels: mean(1 - |s|).
Scalar asw_batch(const EmbeddingTable& table);

// Per Leiden cluster, per label group: largest connected component of the
// group's rows inside the cluster's k-NN graph over group size; weighted by
// group size, averaged over clusters.
Scalar graph_connectivity(const EmbeddingTable& table, const ClusterAssignment& clusters,
                          const std::string& label = "tissue", int k = 15);

// Inverse Simpson index of dataset labels in perplexity-weighted
// neighbourhoods of common-gene rows, normalized to [0, 1].
Scalar ilisi(const EmbeddingTable& table, Scalar perplexity = 30);

// Weighted average over clusters of 1 - (#unique-gene rows / cluster size).
Scalar common_gene_ratio(const EmbeddingTable& table, const ClusterAssignment& clusters);

// Weighted average over clusters of the mean pairwise Jaccard of co-expression
// neighbour name-sets for genes present in >= 2 member datasets.
Scalar neighbors_overlap(const EmbeddingTable& table, const ClusterAssignment& clusters,
                         const std::vector<GeneGraph>& graphs);

// ---- Aggregation ------------------------------------------------------------

struct MetricsReport {
    std::vector<std::string> methods;
    std::vector<std::string> metric_names;
    Mat raw;    // methods x metrics
    Mat scaled; // min-max per metric column (constant columns -> 0.5)
    Mat ranks;  // rank per metric, descending, average ties
    Vec avg_rank;
    Vec avg_score;
};

MetricsReport aggregate(const std::vector<std::string>& methods, const Mat& metric_matrix,
                        std::vector<std::string> metric_names = {});

std::string report_table(const MetricsReport& report);
void write_report_json(const std::filesystem::path& path, const MetricsReport& report,
                       const std::map<std::string, std::string>& meta = {});

// ---- k-NN gene-function prediction -------------------------------------------

// Majority vote among the k nearest training rows (Euclidean); ties broken by
// smallest mean distance.
std::vector<std::string> knn_predict(const Mat& train, const std::vector<std::string>& labels,
                                     const Mat& test, int k = 5);

} // namespace coexmap

#endif

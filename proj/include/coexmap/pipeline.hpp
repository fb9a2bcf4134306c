#ifndef COEXMAP_PIPELINE_HPP
#define COEXMAP_PIPELINE_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coexmap/data.hpp"
#include "coexmap/graph.hpp"
#include "coexmap/metrics.hpp"
#include "coexmap/training.hpp"
#include "coexmap/types.hpp"

namespace coexmap {

struct PreprocessConfig {
    Index hvg_count = 1000;   // HVGs per scRNA/activity dataset
    Index se_count = 1000;    // SE genes kept for spatial datasets
    Scalar alpha = 0.005;     // edge significance level
    std::vector<std::string> mito_prefixes = {"MT-"};
    QcParams qc() const;
};

struct MetricsConfig {
    int knn = 15;
    Scalar resolution = 1.0;
    Scalar perplexity = 30;
};

struct PipelineConfig {
    std::filesystem::path manifest;
    std::filesystem::path out_dir;
    std::uint64_t seed = 0;
    int threads = 0;
    PreprocessConfig preprocess;
    MetricsConfig metrics;
    Hyperparams train;

    std::string to_json() const;
    static PipelineConfig from_json_text(const std::string& text,
                                         const std::filesystem::path& base_dir);
    static PipelineConfig load(const std::filesystem::path& path);
    // FNV hash of the serialized config; embedded in artifact metadata.
    std::string config_hash() const;
};

// Provenance sidecar {build id, seed, config hash} written next to artifacts.
void write_meta_sidecar(const std::filesystem::path& artifact, const PipelineConfig& cfg,
                        const std::map<std::string, std::string>& extra = {});

// simulate: synthetic collection + manifest + planted truth on disk.
struct SimulateResult {
    std::filesystem::path manifest;
    std::filesystem::path truth;
    Index n_datasets = 0;
};
SimulateResult run_simulate(const SyntheticSpec& spec, const std::filesystem::path& out_dir);
SyntheticSpec synthetic_spec_from_json(const std::string& text);

// build-graphs: QC -> (SPARK-X for spatial) -> NB fit -> residuals -> gene
// selection -> CS-CORE edges -> bundle per dataset; anchors cached per pair.
// Bundles with matching input hashes are left untouched.
struct BuildResult {
    std::vector<std::filesystem::path> bundles;
    std::vector<std::string> skipped; // dataset ids served from cache
};
BuildResult run_build_graphs(const PipelineConfig& cfg);

std::vector<GeneGraph> load_graph_collection(const PipelineConfig& cfg);
std::map<std::pair<std::size_t, std::size_t>, AnchorSet> load_anchor_cache(
    const PipelineConfig& cfg, const std::vector<GeneGraph>& graphs);

// train / embed.
struct TrainArtifacts {
    std::filesystem::path checkpoint;
    std::filesystem::path embeddings;
    std::filesystem::path train_log;
    double wall_seconds = 0;
};
TrainArtifacts run_train(const PipelineConfig& cfg);
std::filesystem::path run_embed(const PipelineConfig& cfg);

EmbeddingTable embeddings_from_result(const std::vector<GeneGraph>& graphs,
                                      const std::map<std::string, Mat>& embeddings);

// evaluate: six metrics per embedding file, then rank/score aggregation.
MetricsReport run_evaluate(const PipelineConfig& cfg,
                           const std::vector<std::filesystem::path>& embedding_files,
                           const std::vector<std::string>& method_names);

// The six metrics for one embedding table against the built graphs.
Vec compute_metric_vector(const EmbeddingTable& table, const std::vector<GeneGraph>& graphs,
                          const MetricsConfig& mc, std::uint64_t seed);

} // namespace coexmap

#endif

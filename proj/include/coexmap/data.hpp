#ifndef COEXMAP_DATA_HPP
#define COEXMAP_DATA_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coexmap/types.hpp"

namespace coexmap {

enum class Modality { ScRna, ScAtacActivity, Spatial };

std::string modality_name(Modality m);
Modality modality_from_name(const std::string& name);

struct DatasetManifest {
    std::string dataset_id;
    std::string tissue;
    Modality modality = Modality::ScRna;
    std::string species;
    std::filesystem::path counts_path;
    std::optional<std::filesystem::path> coords_path;
};

// Sparse UMI counts, cells x genes. All entries are non-negative integers;
// gene names are unique; spatial matrices carry one coordinate row per
// barcode.
struct CountMatrix {
    CountSpMat values;
    std::vector<std::string> barcodes;
    std::vector<std::string> genes;
    std::optional<Mat> coords;

    Index n_cells() const { return values.rows(); }
    Index n_genes() const { return values.cols(); }
    // Sequencing depths s_i (row sums).
    Vec depths() const;
    Mat dense() const;
    void validate() const;
};

struct Dataset {
    DatasetManifest meta;
    CountMatrix counts;
};

std::vector<Dataset> load_collection(const std::filesystem::path& manifest_path);
// Writes counts (.mtx + genes.tsv + barcodes.tsv + coords.tsv) per dataset and
// a JSON manifest; `meta` entries are embedded as mtx comments.
void save_collection(const std::filesystem::path& manifest_path,
                     const std::vector<Dataset>& collection,
                     const std::vector<std::pair<std::string, std::string>>& meta = {});

struct QcParams {
    Count min_cell_counts = 200;   // barcodes below this total are dropped
    Index min_cells_detected = 3;  // genes seen in fewer barcodes are dropped
    std::vector<std::string> mito_prefixes = {"MT-"};
};

// Barcode filter first, then the two gene filters, each applied once.
CountMatrix qc_filter(const CountMatrix& m, const QcParams& params = {});

struct SyntheticSpec {
    Index n_datasets = 3;
    Index n_cells = 2000;
    Index n_genes = 200;
    Index n_modules = 2;
    Index module_size = 20;
    double shared_gene_fraction = 0.5;
    double module_correlation = 0.8;
    double base_mean = 0.5;    // latent per-gene mean scale
    double dispersion = 2.0;   // latent Gamma shape; Var(z) = mu^2 / dispersion
    double depth_mean = 2000;  // expected UMI total per cell
    std::uint64_t seed = 0;

    void validate() const;
};

// Ground truth for one generated dataset.
struct PlantedDataset {
    std::vector<std::string> genes;
    std::vector<int> module_of_gene;       // -1 for background genes
    Vec latent_mean;                       // mu_j
    Vec true_depth;                        // s_i used by the Poisson layer
    std::vector<std::pair<Index, Index>> true_edges; // same-module pairs, i<j
};

struct PlantedTruth {
    double module_correlation = 0;
    double dispersion = 0;
    std::vector<PlantedDataset> datasets;
    // Latent expression draws, one n_cells x n_genes matrix per dataset.
    // Kept in memory for estimator checks; not serialized.
    std::vector<Mat> latent;
};

struct SyntheticCollection {
    std::vector<Dataset> datasets;
    PlantedTruth truth;
};

// Gamma-Poisson hierarchy with block-correlated latent expression: gene j in
// module b draws z = mu_j * (G0_b + G_j) / dispersion with a module-shared
// Gamma(rho * dispersion) factor, so within-module latent correlation is
// exactly `module_correlation`; observed counts are Poisson(s_i * z).
SyntheticCollection generate_synthetic(const SyntheticSpec& spec);

void save_planted_truth(const std::filesystem::path& path, const SyntheticSpec& spec,
                        const PlantedTruth& truth);
PlantedTruth load_planted_truth(const std::filesystem::path& path);

} // namespace coexmap

#endif

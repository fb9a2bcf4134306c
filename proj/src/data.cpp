#include "coexmap/data.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "coexmap/io.hpp"

namespace coexmap {

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::ScRna: return "scRNA";
        case Modality::ScAtacActivity: return "scATAC-activity";
        case Modality::Spatial: return "spatial";
    }
    throw ConfigError("unknown modality");
}

Modality modality_from_name(const std::string& name) {
    if (name == "scRNA") return Modality::ScRna;
    if (name == "scATAC-activity") return Modality::ScAtacActivity;
    if (name == "spatial") return Modality::Spatial;
    throw ConfigError("unknown modality: " + name);
}

Vec CountMatrix::depths() const {
    Vec s = Vec::Zero(values.rows());
    for (int col = 0; col < values.outerSize(); ++col)
        for (CountSpMat::InnerIterator it(values, col); it; ++it)
            s(it.row()) += static_cast<Scalar>(it.value());
    return s;
}

Mat CountMatrix::dense() const {
    Mat d = Mat::Zero(values.rows(), values.cols());
    for (int col = 0; col < values.outerSize(); ++col)
        for (CountSpMat::InnerIterator it(values, col); it; ++it)
            d(it.row(), it.col()) = static_cast<Scalar>(it.value());
    return d;
}

void CountMatrix::validate() const {
    if (static_cast<Index>(barcodes.size()) != values.rows())
        throw DataError("barcode count does not match matrix rows");
    if (static_cast<Index>(genes.size()) != values.cols())
        throw DataError("gene count does not match matrix columns");
    std::set<std::string> seen;
    for (const auto& g : genes)
        if (!seen.insert(g).second) throw DataError("duplicate gene name: " + g);
    for (int col = 0; col < values.outerSize(); ++col)
        for (CountSpMat::InnerIterator it(values, col); it; ++it)
            if (it.value() < 0) throw DataError("negative count entry");
    if (coords && coords->rows() != values.rows())
        throw DataError("coordinate rows do not match barcode count");
}

namespace {

nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["dataset_id"] = m.dataset_id;
    j["tissue"] = m.tissue;
    j["modality"] = modality_name(m.modality);
    j["species"] = m.species;
    j["counts_path"] = m.counts_path.string();
    if (m.coords_path) j["coords_path"] = m.coords_path->string();
    return j;
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.dataset_id = j.at("dataset_id").get<std::string>();
    m.tissue = j.at("tissue").get<std::string>();
    m.modality = modality_from_name(j.at("modality").get<std::string>());
    m.species = j.at("species").get<std::string>();
    m.counts_path = j.at("counts_path").get<std::string>();
    if (j.contains("coords_path")) m.coords_path = j.at("coords_path").get<std::string>();
    return m;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
    return p.is_absolute() ? p : base / p;
}

} // namespace

std::vector<Dataset> load_collection(const std::filesystem::path& manifest_path) {
    nlohmann::json j = nlohmann::json::parse(io::read_text(manifest_path), nullptr, false);
    if (j.is_discarded() || !j.is_array())
        throw ConfigError("manifest is not a JSON array: " + manifest_path.string());
    const std::filesystem::path base = manifest_path.parent_path();
    std::vector<Dataset> out;
    std::set<std::string> ids;
    for (const auto& entry : j) {
        Dataset ds;
        ds.meta = manifest_from_json(entry);
        if (!ids.insert(ds.meta.dataset_id).second)
            throw DataError("duplicate dataset_id: " + ds.meta.dataset_id);
        const auto counts_path = resolve(base, ds.meta.counts_path);
        ds.counts.values = io::read_mtx(counts_path);
        const auto dir = counts_path.parent_path();
        ds.counts.genes = io::read_lines(dir / "genes.tsv");
        ds.counts.barcodes = io::read_lines(dir / "barcodes.tsv");
        if (ds.meta.modality == Modality::Spatial) {
            if (!ds.meta.coords_path)
                throw DataError("coords required for spatial dataset " + ds.meta.dataset_id);
            ds.counts.coords = io::read_coords(resolve(base, *ds.meta.coords_path));
        } else if (ds.meta.coords_path) {
            ds.counts.coords = io::read_coords(resolve(base, *ds.meta.coords_path));
        }
        ds.counts.validate();
        out.push_back(std::move(ds));
    }
    return out;
}

void save_collection(const std::filesystem::path& manifest_path,
                     const std::vector<Dataset>& collection,
                     const std::vector<std::pair<std::string, std::string>>& meta) {
    const std::filesystem::path base = manifest_path.parent_path();
    nlohmann::json j = nlohmann::json::array();
    for (const auto& ds : collection) {
        ds.counts.validate();
        const std::filesystem::path dir = base / ds.meta.dataset_id;
        std::filesystem::create_directories(dir);
        io::write_mtx(dir / "counts.mtx", ds.counts.values, meta);
        io::write_lines(dir / "genes.tsv", ds.counts.genes);
        io::write_lines(dir / "barcodes.tsv", ds.counts.barcodes);
        DatasetManifest m = ds.meta;
        m.counts_path = ds.meta.dataset_id + "/counts.mtx";
        if (ds.counts.coords) {
            io::write_coords(dir / "coords.tsv", *ds.counts.coords);
            m.coords_path = ds.meta.dataset_id + "/coords.tsv";
        }
        j.push_back(manifest_to_json(m));
    }
    io::write_text(manifest_path, j.dump(2) + "\n");
}

CountMatrix qc_filter(const CountMatrix& m, const QcParams& params) {
    if (m.n_cells() == 0 || m.n_genes() == 0) throw DataError("qc_filter: empty matrix");

    // Pass 1: barcode totals on the full gene set.
    std::vector<Count> cell_total(static_cast<std::size_t>(m.n_cells()), 0);
    for (int col = 0; col < m.values.outerSize(); ++col)
        for (CountSpMat::InnerIterator it(m.values, col); it; ++it)
            cell_total[static_cast<std::size_t>(it.row())] += it.value();

    std::vector<Index> keep_cells;
    for (Index i = 0; i < m.n_cells(); ++i)
        if (cell_total[static_cast<std::size_t>(i)] >= params.min_cell_counts) keep_cells.push_back(i);
    if (keep_cells.empty()) throw DataError("all cells/genes filtered");

    std::vector<Index> cell_index(static_cast<std::size_t>(m.n_cells()), -1);
    for (std::size_t k = 0; k < keep_cells.size(); ++k)
        cell_index[static_cast<std::size_t>(keep_cells[k])] = static_cast<Index>(k);

    // Pass 2: gene detection counts over the surviving barcodes, plus the
    // mitochondrial-prefix filter (case-insensitive).
    auto is_mito = [&](const std::string& name) {
        for (const auto& prefix : params.mito_prefixes) {
            if (name.size() < prefix.size()) continue;
            bool match = true;
            for (std::size_t i = 0; i < prefix.size(); ++i)
                if (std::toupper(static_cast<unsigned char>(name[i])) !=
                    std::toupper(static_cast<unsigned char>(prefix[i]))) {
                    match = false;
                    break;
                }
            if (match) return true;
        }
        return false;
    };

    std::vector<Index> keep_genes;
    for (Index g = 0; g < m.n_genes(); ++g) {
        if (is_mito(m.genes[static_cast<std::size_t>(g)])) continue;
        Index detected = 0;
        for (CountSpMat::InnerIterator it(m.values, static_cast<int>(g)); it; ++it)
            if (it.value() > 0 && cell_index[static_cast<std::size_t>(it.row())] >= 0) ++detected;
        if (detected >= params.min_cells_detected) keep_genes.push_back(g);
    }
    if (keep_genes.empty()) throw DataError("all cells/genes filtered");

    CountMatrix out;
    std::vector<Eigen::Triplet<Count, std::int64_t>> trips;
    for (std::size_t gk = 0; gk < keep_genes.size(); ++gk) {
        const Index g = keep_genes[gk];
        for (CountSpMat::InnerIterator it(m.values, static_cast<int>(g)); it; ++it) {
            const Index ci = cell_index[static_cast<std::size_t>(it.row())];
            if (ci >= 0 && it.value() > 0) trips.emplace_back(ci, static_cast<Index>(gk), it.value());
        }
    }
    out.values.resize(static_cast<Index>(keep_cells.size()), static_cast<Index>(keep_genes.size()));
    out.values.setFromTriplets(trips.begin(), trips.end());
    out.values.makeCompressed();
    for (Index i : keep_cells) out.barcodes.push_back(m.barcodes[static_cast<std::size_t>(i)]);
    for (Index g : keep_genes) out.genes.push_back(m.genes[static_cast<std::size_t>(g)]);
    if (m.coords) {
        Mat c(static_cast<Index>(keep_cells.size()), 2);
        for (std::size_t k = 0; k < keep_cells.size(); ++k) c.row(static_cast<Index>(k)) = m.coords->row(keep_cells[k]);
        out.coords = std::move(c);
    }
    const Vec s = out.depths();
    if ((s.array() <= 0).any()) throw DataError("qc_filter: zero-depth barcode survived");
    return out;
}

void SyntheticSpec::validate() const {
    if (n_datasets < 1 || n_cells < 1 || n_genes < 1) throw ConfigError("synthetic spec: empty dimensions");
    if (n_modules < 0 || module_size < 2) throw ConfigError("synthetic spec: bad module layout");
    if (n_modules * module_size > n_genes)
        throw ConfigError("synthetic spec: modules exceed gene count");
    if (shared_gene_fraction < 0 || shared_gene_fraction > 1)
        throw ConfigError("synthetic spec: shared_gene_fraction outside [0,1]");
    if (module_correlation < 0 || module_correlation >= 1)
        throw ConfigError("synthetic spec: module_correlation outside [0,1)");
    if (base_mean <= 0 || dispersion <= 0 || depth_mean <= 0)
        throw ConfigError("synthetic spec: non-positive scale parameter");
}

SyntheticCollection generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);

    const Index n_shared = static_cast<Index>(std::llround(spec.shared_gene_fraction * static_cast<double>(spec.n_genes)));

    char buf[64];
    std::vector<std::string> shared_names;
    for (Index g = 0; g < n_shared; ++g) {
        std::snprintf(buf, sizeof(buf), "G%04lld", static_cast<long long>(g));
        shared_names.emplace_back(buf);
    }

    // Shared genes reuse one latent mean across datasets.
    std::normal_distribution<double> mean_jitter(0.0, 0.25);
    Vec shared_mean(n_shared);
    for (Index g = 0; g < n_shared; ++g) shared_mean(g) = spec.base_mean * std::exp(mean_jitter(rng));

    // Module b covers gene slots [b*module_size, (b+1)*module_size); slots are
    // shared-first so planted modules line up across datasets.
    std::vector<int> module_of(static_cast<std::size_t>(spec.n_genes), -1);
    for (Index b = 0; b < spec.n_modules; ++b)
        for (Index k = 0; k < spec.module_size; ++k)
            module_of[static_cast<std::size_t>(b * spec.module_size + k)] = static_cast<int>(b);

    const double theta = spec.dispersion;
    const double a0 = spec.module_correlation * theta;   // shared Gamma shape
    const double aj = theta - a0;                        // private Gamma shape

    SyntheticCollection out;
    out.truth.module_correlation = spec.module_correlation;
    out.truth.dispersion = theta;

    for (Index d = 0; d < spec.n_datasets; ++d) {
        Dataset ds;
        std::snprintf(buf, sizeof(buf), "sim%02lld", static_cast<long long>(d));
        ds.meta.dataset_id = buf;
        ds.meta.tissue = "sim-tissue";
        ds.meta.species = "synthetic";
        ds.meta.modality = Modality::ScRna;

        PlantedDataset truth;
        truth.module_of_gene = module_of;
        truth.latent_mean.resize(spec.n_genes);
        for (Index g = 0; g < spec.n_genes; ++g) {
            if (g < n_shared) {
                truth.genes.push_back(shared_names[static_cast<std::size_t>(g)]);
                truth.latent_mean(g) = shared_mean(g);
            } else {
                std::snprintf(buf, sizeof(buf), "D%02lld-G%04lld", static_cast<long long>(d),
                              static_cast<long long>(g));
                truth.genes.push_back(buf);
                truth.latent_mean(g) = spec.base_mean * std::exp(mean_jitter(rng));
            }
        }
        for (Index a = 0; a < spec.n_genes; ++a)
            for (Index b = a + 1; b < spec.n_genes; ++b)
                if (module_of[static_cast<std::size_t>(a)] >= 0 &&
                    module_of[static_cast<std::size_t>(a)] == module_of[static_cast<std::size_t>(b)])
                    truth.true_edges.emplace_back(a, b);

        const double mu_total = truth.latent_mean.sum();
        const double depth_sd = 0.3;
        std::lognormal_distribution<double> depth_dist(std::log(spec.depth_mean / mu_total) - 0.5 * depth_sd * depth_sd,
                                                       depth_sd);
        truth.true_depth.resize(spec.n_cells);

        Mat latent(spec.n_cells, spec.n_genes);
        std::gamma_distribution<double> shared_gamma(a0 > 0 ? a0 : 1.0, 1.0);
        std::gamma_distribution<double> private_gamma(aj > 0 ? aj : theta, 1.0);
        std::gamma_distribution<double> background_gamma(theta, 1.0);

        std::vector<Eigen::Triplet<Count, std::int64_t>> trips;
        for (Index i = 0; i < spec.n_cells; ++i) {
            truth.true_depth(i) = depth_dist(rng);
            std::vector<double> shared_factor(static_cast<std::size_t>(std::max<Index>(spec.n_modules, 1)), 0.0);
            for (Index b = 0; b < spec.n_modules; ++b)
                shared_factor[static_cast<std::size_t>(b)] = (a0 > 0) ? shared_gamma(rng) : 0.0;
            for (Index g = 0; g < spec.n_genes; ++g) {
                const int b = module_of[static_cast<std::size_t>(g)];
                double z;
                if (b >= 0) {
                    const double priv = (aj > 0) ? private_gamma(rng) : 0.0;
                    z = truth.latent_mean(g) * (shared_factor[static_cast<std::size_t>(b)] + priv) / theta;
                } else {
                    z = truth.latent_mean(g) * background_gamma(rng) / theta;
                }
                latent(i, g) = z;
                const double rate = truth.true_depth(i) * z;
                std::poisson_distribution<Count> pois(rate > 0 ? rate : 1e-12);
                const Count x = pois(rng);
                if (x > 0) trips.emplace_back(i, g, x);
            }
            std::snprintf(buf, sizeof(buf), "%s-C%05lld", ds.meta.dataset_id.c_str(), static_cast<long long>(i));
            ds.counts.barcodes.emplace_back(buf);
        }
        ds.counts.values.resize(spec.n_cells, spec.n_genes);
        ds.counts.values.setFromTriplets(trips.begin(), trips.end());
        ds.counts.values.makeCompressed();
        ds.counts.genes = truth.genes;

        out.truth.latent.push_back(std::move(latent));
        out.truth.datasets.push_back(std::move(truth));
        out.datasets.push_back(std::move(ds));
    }
    return out;
}

void save_planted_truth(const std::filesystem::path& path, const SyntheticSpec& spec,
                        const PlantedTruth& truth) {
    nlohmann::json j;
    j["module_correlation"] = truth.module_correlation;
    j["dispersion"] = truth.dispersion;
    j["seed"] = spec.seed;
    nlohmann::json ds_arr = nlohmann::json::array();
    for (const auto& ds : truth.datasets) {
        nlohmann::json dj;
        dj["genes"] = ds.genes;
        dj["module_of_gene"] = ds.module_of_gene;
        dj["latent_mean"] = std::vector<double>(ds.latent_mean.data(), ds.latent_mean.data() + ds.latent_mean.size());
        dj["true_depth"] = std::vector<double>(ds.true_depth.data(), ds.true_depth.data() + ds.true_depth.size());
        nlohmann::json edges = nlohmann::json::array();
        for (const auto& [a, b] : ds.true_edges) edges.push_back({a, b});
        dj["true_edges"] = edges;
        ds_arr.push_back(std::move(dj));
    }
    j["datasets"] = std::move(ds_arr);
    io::write_text(path, j.dump() + "\n");
}

PlantedTruth load_planted_truth(const std::filesystem::path& path) {
    nlohmann::json j = nlohmann::json::parse(io::read_text(path), nullptr, false);
    if (j.is_discarded()) throw DataError("bad planted-truth file: " + path.string());
    PlantedTruth truth;
    truth.module_correlation = j.at("module_correlation").get<double>();
    truth.dispersion = j.at("dispersion").get<double>();
    for (const auto& dj : j.at("datasets")) {
        PlantedDataset ds;
        ds.genes = dj.at("genes").get<std::vector<std::string>>();
        ds.module_of_gene = dj.at("module_of_gene").get<std::vector<int>>();
        const auto mean = dj.at("latent_mean").get<std::vector<double>>();
        ds.latent_mean = Eigen::Map<const Vec>(mean.data(), static_cast<Index>(mean.size()));
        const auto depth = dj.at("true_depth").get<std::vector<double>>();
        ds.true_depth = Eigen::Map<const Vec>(depth.data(), static_cast<Index>(depth.size()));
        for (const auto& e : dj.at("true_edges"))
            ds.true_edges.emplace_back(e.at(0).get<Index>(), e.at(1).get<Index>());
        truth.datasets.push_back(std::move(ds));
    }
    return truth;
}

} // namespace coexmap

#include "coexmap/graph.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "coexmap/io.hpp"

namespace coexmap {

Mat GeneGraph::adjacency_dense() const {
    Mat a = Mat::Zero(n_nodes(), n_nodes());
    for (const auto& [i, j] : edges) {
        a(i, j) = 1.0;
        a(j, i) = 1.0;
    }
    return a;
}

namespace {

std::vector<std::vector<Index>> neighbor_lists(Index p, const std::vector<std::pair<Index, Index>>& edges) {
    std::vector<std::vector<Index>> nbrs(static_cast<std::size_t>(p));
    for (const auto& [i, j] : edges) {
        nbrs[static_cast<std::size_t>(i)].push_back(j);
        nbrs[static_cast<std::size_t>(j)].push_back(i);
    }
    for (auto& v : nbrs) std::sort(v.begin(), v.end());
    return nbrs;
}

} // namespace

GeneGraph assemble_graph(const ResidualMatrix& residuals, const std::vector<Index>& hvgs,
                         const EdgeSet& edges, const GraphMeta& meta,
                         const Mat* edge_rho_source, const Mat* edge_pval_source) {
    GeneGraph g;
    g.meta = meta;
    const Index p = static_cast<Index>(hvgs.size());
    g.node_features.resize(p, residuals.values.rows());
    for (Index k = 0; k < p; ++k) {
        const Index col = hvgs[static_cast<std::size_t>(k)];
        if (col < 0 || col >= residuals.values.cols())
            throw DataError("assemble_graph: HVG index out of range");
        g.genes.push_back(residuals.genes[static_cast<std::size_t>(col)]);
        g.node_features.row(k) = residuals.values.col(col).transpose();
    }
    g.edge_rho.resize(static_cast<Index>(edges.edges.size()));
    g.edge_pval.resize(static_cast<Index>(edges.edges.size()));
    Index e = 0;
    for (const auto& [i, j] : edges.edges) {
        if (i < 0 || j < 0 || i >= p || j >= p) throw DataError("assemble_graph: edge index out of range");
        if (i == j) throw DataError("assemble_graph: self-loop edge");
        const auto a = std::min(i, j), b = std::max(i, j);
        g.edges.emplace_back(a, b);
        g.edge_rho(e) = edge_rho_source ? (*edge_rho_source)(a, b) : 0.0;
        g.edge_pval(e) = edge_pval_source ? (*edge_pval_source)(a, b) : 0.0;
        ++e;
    }
    g.neighbors = neighbor_lists(p, g.edges);
    return g;
}

AnchorSet anchor_sets(const GeneGraph& gi, const GeneGraph& gj) {
    std::unordered_map<std::string, Index> index_j;
    for (Index k = 0; k < gj.n_nodes(); ++k) index_j.emplace(gj.genes[static_cast<std::size_t>(k)], k);

    AnchorSet out;
    std::vector<std::pair<std::string, std::pair<Index, Index>>> named_common;
    std::vector<bool> j_common(static_cast<std::size_t>(gj.n_nodes()), false);
    for (Index k = 0; k < gi.n_nodes(); ++k) {
        auto it = index_j.find(gi.genes[static_cast<std::size_t>(k)]);
        if (it == index_j.end()) {
            out.diff_i.push_back(k);
        } else {
            named_common.emplace_back(gi.genes[static_cast<std::size_t>(k)], std::make_pair(k, it->second));
            j_common[static_cast<std::size_t>(it->second)] = true;
        }
    }
    for (Index k = 0; k < gj.n_nodes(); ++k)
        if (!j_common[static_cast<std::size_t>(k)]) out.diff_j.push_back(k);

    std::sort(named_common.begin(), named_common.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [name, pair] : named_common) out.common.push_back(pair);

    for (Index k : out.diff_i) out.diff_neighbors_i.push_back(gi.neighbors[static_cast<std::size_t>(k)]);
    for (Index k : out.diff_j) out.diff_neighbors_j.push_back(gj.neighbors[static_cast<std::size_t>(k)]);

    out.lambda = jaccard_weights(gi, gj, out.common);
    return out;
}

Vec jaccard_weights(const GeneGraph& gi, const GeneGraph& gj,
                    const std::vector<std::pair<Index, Index>>& common) {
    Vec lambda = Vec::Zero(static_cast<Index>(common.size()));
    for (std::size_t c = 0; c < common.size(); ++c) {
        const auto& [idx_i, idx_j] = common[c];
        std::vector<std::string> names_i, names_j;
        for (Index n : gi.neighbors[static_cast<std::size_t>(idx_i)])
            names_i.push_back(gi.genes[static_cast<std::size_t>(n)]);
        for (Index n : gj.neighbors[static_cast<std::size_t>(idx_j)])
            names_j.push_back(gj.genes[static_cast<std::size_t>(n)]);
        std::sort(names_i.begin(), names_i.end());
        std::sort(names_j.begin(), names_j.end());
        std::vector<std::string> inter;
        std::set_intersection(names_i.begin(), names_i.end(), names_j.begin(), names_j.end(),
                              std::back_inserter(inter));
        const std::size_t uni = names_i.size() + names_j.size() - inter.size();
        lambda(static_cast<Index>(c)) = uni == 0 ? 0.0 : static_cast<Scalar>(inter.size()) / static_cast<Scalar>(uni);
    }
    return lambda;
}

void save_graph(const std::filesystem::path& dir, const GeneGraph& g,
                const std::map<std::string, std::string>& meta) {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["dataset_id"] = g.meta.dataset_id;
    j["tissue"] = g.meta.tissue;
    j["modality"] = modality_name(g.meta.modality);
    j["species"] = g.meta.species;
    j["n_genes"] = g.n_nodes();
    j["n_edges"] = g.edges.size();
    for (const auto& [k, v] : meta) j[k] = v;
    io::write_text(dir / "metadata.json", j.dump(2) + "\n");

    std::ostringstream edges;
    edges << "gene_a\tgene_b\trho\tpval\n";
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
        const auto& [a, b] = g.edges[e];
        edges << g.genes[static_cast<std::size_t>(a)] << "\t" << g.genes[static_cast<std::size_t>(b)] << "\t"
              << io::format_double(g.edge_rho.size() > static_cast<Index>(e) ? g.edge_rho(static_cast<Index>(e)) : 0.0)
              << "\t"
              << io::format_double(g.edge_pval.size() > static_cast<Index>(e) ? g.edge_pval(static_cast<Index>(e)) : 0.0)
              << "\n";
    }
    io::write_text(dir / "edges.tsv", edges.str());
    io::write_dense(dir / "features.bin", g.node_features, g.genes);
}

GeneGraph load_graph(const std::filesystem::path& dir) {
    GeneGraph g;
    nlohmann::json j = nlohmann::json::parse(io::read_text(dir / "metadata.json"), nullptr, false);
    if (j.is_discarded()) throw DataError("bad graph metadata in " + dir.string());
    g.meta.dataset_id = j.at("dataset_id").get<std::string>();
    g.meta.tissue = j.at("tissue").get<std::string>();
    g.meta.modality = modality_from_name(j.at("modality").get<std::string>());
    g.meta.species = j.at("species").get<std::string>();

    g.node_features = io::read_dense(dir / "features.bin", &g.genes);
    std::unordered_map<std::string, Index> index;
    for (Index k = 0; k < g.n_nodes(); ++k) index.emplace(g.genes[static_cast<std::size_t>(k)], k);

    const auto lines = io::read_lines(dir / "edges.tsv");
    std::vector<Scalar> rho, pval;
    for (std::size_t l = 1; l < lines.size(); ++l) {
        std::istringstream ss(lines[l]);
        std::string a, b;
        Scalar r = 0, p = 0;
        if (!(ss >> a >> b >> r >> p)) throw DataError("bad edge row in " + dir.string());
        const auto ia = index.find(a), ib = index.find(b);
        if (ia == index.end() || ib == index.end())
            throw DataError("edge references unknown gene in " + dir.string());
        g.edges.emplace_back(std::min(ia->second, ib->second), std::max(ia->second, ib->second));
        rho.push_back(r);
        pval.push_back(p);
    }
    g.edge_rho = Eigen::Map<const Vec>(rho.data(), static_cast<Index>(rho.size()));
    g.edge_pval = Eigen::Map<const Vec>(pval.data(), static_cast<Index>(pval.size()));
    g.neighbors = neighbor_lists(g.n_nodes(), g.edges);
    return g;
}

std::string bundle_input_hash(const std::filesystem::path& dir) {
    const auto meta_path = dir / "metadata.json";
    if (!std::filesystem::exists(meta_path)) return {};
    nlohmann::json j = nlohmann::json::parse(io::read_text(meta_path), nullptr, false);
    if (j.is_discarded() || !j.contains("input_hash")) return {};
    return j.at("input_hash").get<std::string>();
}

} // namespace coexmap

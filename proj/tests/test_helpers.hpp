#ifndef COEXMAP_TEST_HELPERS_HPP
#define COEXMAP_TEST_HELPERS_HPP

#include <map>
#include <numeric>
#include <vector>

#include "coexmap/coexpression.hpp"
#include "coexmap/data.hpp"
#include "coexmap/graph.hpp"
#include "coexmap/preprocess.hpp"

namespace coexmap {
namespace testing {

// QC -> NB fit -> residuals -> all genes -> CS-CORE edges -> graph, for each
// dataset of a synthetic collection.
inline std::vector<GeneGraph> build_graphs(const SyntheticCollection& collection,
                                           Scalar alpha = 0.005) {
    std::vector<GeneGraph> graphs;
    for (const auto& ds : collection.datasets) {
        const CountMatrix qc = qc_filter(ds.counts);
        const NBFit fit = fit_nb_glm(qc);
        const ResidualMatrix resid = pearson_residuals(qc, fit);
        std::vector<Index> genes(static_cast<std::size_t>(qc.n_genes()));
        std::iota(genes.begin(), genes.end(), Index{0});
        auto est = estimate_moments_irls(qc, genes);
        cscore_test(est, qc, genes);
        const EdgeSet edges = build_edges(est.pvals, alpha);
        graphs.push_back(assemble_graph(resid, genes, edges,
                                        {ds.meta.dataset_id, ds.meta.tissue, ds.meta.modality,
                                         ds.meta.species},
                                        &est.rho, &est.pvals));
    }
    return graphs;
}

inline std::map<std::pair<std::size_t, std::size_t>, AnchorSet> all_anchors(
    const std::vector<GeneGraph>& graphs) {
    std::map<std::pair<std::size_t, std::size_t>, AnchorSet> anchors;
    for (std::size_t i = 0; i < graphs.size(); ++i)
        for (std::size_t j = i + 1; j < graphs.size(); ++j)
            anchors[{i, j}] = anchor_sets(graphs[i], graphs[j]);
    return anchors;
}

} // namespace testing
} // namespace coexmap

#endif

#ifndef COEXMAP_MODEL_HPP
#define COEXMAP_MODEL_HPP

#include <map>
#include <string>
#include <vector>

#include "coexmap/autodiff.hpp"
#include "coexmap/graph.hpp"
#include "coexmap/types.hpp"

namespace coexmap {

struct ModelConfig {
    Index hidden = 64;         // input projection + dataset layer width
    Index embed = 32;          // shared layer output width
    int heads = 4;
    Index decoder_hidden = 16;
    Index edge_dim = 0;        // co-expression edges carry no features
    bool shared_identity = false; // skip the shared stack (diagnostics only)
};

// One multi-head graph-transformer layer: per-head query/key/value affine
// maps, optional edge-feature maps, attention softmax over incoming
// neighbours (self-loop included), head concatenation, residual when shapes
// allow, GraphNorm, Mish.
struct GtLayer {
    Index in_dim = 0, out_dim = 0, edge_dim = 0;
    int heads = 0;
    std::vector<ad::Tensor> wq, bq, wk, bk, wv, bv;
    std::vector<ad::Tensor> we, be;
    ad::Tensor gn_gamma, gn_beta, gn_alpha;
};

// Directed message list: one (target <- source) entry per adjacency edge in
// both directions plus one self-loop per node, grouped by target.
struct EdgeIndex {
    Index n_nodes = 0;
    std::vector<Index> target;
    std::vector<Index> source;
    std::vector<Index> edge_id; // -1 for self-loops, else undirected edge index
};

EdgeIndex build_edge_index(const GeneGraph& g);

ad::Tensor graph_norm(const GtLayer& layer, const ad::Tensor& h);
// edge_features: (n_messages x edge_dim) tensor, only read when the layer has
// edge maps; pass an undefined tensor otherwise.
ad::Tensor transformer_conv(const GtLayer& layer, const ad::Tensor& h, const EdgeIndex& edges,
                            const ad::Tensor& edge_features = {});

struct DatasetTower {
    ad::Tensor proj_w, proj_b; // d_in -> hidden
    GtLayer layer;
};

struct DecoderMlp {
    ad::Tensor w1, b1, w2, b2; // scalar MLP 1 -> h -> 1, sigmoid output
};

struct GraphSpec {
    std::string dataset_id;
    std::string modality;
    Index feature_dim = 0;
};

struct ModelParams {
    ModelConfig config;
    bool weight_sharing = true;
    std::map<std::string, DatasetTower> dataset;
    std::map<std::string, GtLayer> shared;                  // keyed by modality (or dataset when unshared)
    std::map<std::string, std::string> shared_key;          // dataset_id -> shared stack key
    std::map<std::string, DecoderMlp> decoder;
    std::map<std::string, ad::Tensor> registry;             // every trainable leaf by name

    std::vector<ad::Tensor> encoder_params() const;
    std::vector<ad::Tensor> decoder_params() const;
    Index parameter_count() const;
    void zero_grad();
};

// Kaiming-uniform weights (U(+-sqrt(6/fan_in))), zero biases, GraphNorm
// gamma=1 beta=0 alpha=1; deterministic under seed.
ModelParams init_params(const std::vector<GraphSpec>& graphs, const ModelConfig& config,
                        std::uint64_t seed, bool weight_sharing = true);

// X' = D_m(L_i(G_i)): input projection, dataset layer, shared stack.
ad::Tensor encode(const GeneGraph& g, const ModelParams& params);
ad::Tensor encode_features(const GeneGraph& g, const Mat& features, const ModelParams& params);
// E_rec = sigmoid MLP applied elementwise to the Gram matrix e e^T.
ad::Tensor decode(const ad::Tensor& embedding, const ModelParams& params, const std::string& dataset_id);

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::map<std::string, std::string>& meta = {});
// Loads tensor values into an already-initialized parameter set (shapes must
// match).
void load_checkpoint(const std::filesystem::path& path, ModelParams& params);

} // namespace coexmap

#endif

#include "coexmap/model.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "coexmap/io.hpp"

namespace coexmap {

using ad::Tensor;

EdgeIndex build_edge_index(const GeneGraph& g) {
    EdgeIndex idx;
    idx.n_nodes = g.n_nodes();
    // Undirected edge ids for feature lookup: edge e of g.edges maps to the
    // two directed messages it induces.
    std::map<std::pair<Index, Index>, Index> edge_of;
    for (std::size_t e = 0; e < g.edges.size(); ++e) edge_of[g.edges[e]] = static_cast<Index>(e);
    for (Index i = 0; i < idx.n_nodes; ++i) {
        idx.target.push_back(i); // mandatory self-loop keeps attention defined
        idx.source.push_back(i);
        idx.edge_id.push_back(-1);
        for (Index j : g.neighbors[static_cast<std::size_t>(i)]) {
            idx.target.push_back(i);
            idx.source.push_back(j);
            auto it = edge_of.find({std::min(i, j), std::max(i, j)});
            idx.edge_id.push_back(it == edge_of.end() ? -1 : it->second);
        }
    }
    return idx;
}

ad::Tensor graph_norm(const GtLayer& layer, const ad::Tensor& h) {
    const Index n = h.rows();
    Tensor mu = ad::colwise_mean(h);
    Tensor centered = ad::sub(h, ad::broadcast_rows(ad::mul(layer.gn_alpha, mu), n));
    Tensor var = ad::colwise_mean(ad::mul(centered, centered));
    Tensor sd = ad::sqrt(ad::add_scalar(var, 1e-5));
    Tensor normed = ad::div(centered, ad::broadcast_rows(sd, n));
    return ad::add(ad::mul(normed, ad::broadcast_rows(layer.gn_gamma, n)),
                   ad::broadcast_rows(layer.gn_beta, n));
}

ad::Tensor transformer_conv(const GtLayer& layer, const ad::Tensor& h, const EdgeIndex& edges,
                            const ad::Tensor& edge_features) {
    if (h.cols() != layer.in_dim) throw NumericError("transformer_conv: feature dim mismatch");
    const Index d_head = layer.out_dim / layer.heads;
    const Scalar inv_sqrt_d = 1.0 / std::sqrt(static_cast<Scalar>(d_head));
    const Index n = edges.n_nodes;

    Tensor out;
    for (int c = 0; c < layer.heads; ++c) {
        Tensor q = ad::add(ad::matmul(h, layer.wq[c]), ad::broadcast_rows(layer.bq[c], h.rows()));
        Tensor k = ad::add(ad::matmul(h, layer.wk[c]), ad::broadcast_rows(layer.bk[c], h.rows()));
        Tensor v = ad::add(ad::matmul(h, layer.wv[c]), ad::broadcast_rows(layer.bv[c], h.rows()));

        Tensor qe = ad::gather_rows(q, edges.target);
        Tensor ke = ad::gather_rows(k, edges.source);
        Tensor ve = ad::gather_rows(v, edges.source);

        if (layer.edge_dim > 0) {
            if (!edge_features.defined())
                throw NumericError("transformer_conv: layer expects edge features");
            Tensor ef = ad::add(ad::matmul(edge_features, layer.we[c]),
                                ad::broadcast_rows(layer.be[c], edge_features.rows()));
            ke = ad::add(ke, ef);
            ve = ad::add(ve, ef);
        }

        Tensor scores = ad::scale(ad::rowwise_sum(ad::mul(qe, ke)), inv_sqrt_d);
        Tensor alpha = ad::segment_softmax(scores, edges.target, n);
        Tensor weighted = ad::mul(ve, ad::broadcast_cols(alpha, d_head));
        Tensor agg = ad::segment_sum(weighted, edges.target, n);
        out = (c == 0) ? agg : ad::concat_cols(out, agg);
    }
    if (layer.in_dim == layer.out_dim) out = ad::add(out, h); // one-layer skip
    return ad::mish(graph_norm(layer, out));
}

namespace {

Mat kaiming_uniform(Index rows, Index cols, Index fan_in, std::mt19937_64& rng) {
    const Scalar bound = std::sqrt(6.0 / static_cast<Scalar>(fan_in));
    std::uniform_real_distribution<Scalar> dist(-bound, bound);
    Mat w(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j) w(i, j) = dist(rng);
    return w;
}

GtLayer make_gt_layer(Index in_dim, Index out_dim, int heads, Index edge_dim, std::mt19937_64& rng,
                      const std::string& prefix, std::map<std::string, Tensor>& registry) {
    if (out_dim % heads != 0) throw ConfigError("gt layer: out_dim must divide by heads");
    GtLayer layer;
    layer.in_dim = in_dim;
    layer.out_dim = out_dim;
    layer.heads = heads;
    layer.edge_dim = edge_dim;
    const Index d = out_dim / heads;
    auto reg = [&](const std::string& name, Mat init) {
        Tensor t = ad::param(std::move(init));
        registry.emplace(prefix + name, t);
        return t;
    };
    for (int c = 0; c < heads; ++c) {
        const std::string hc = "h" + std::to_string(c) + "/";
        layer.wq.push_back(reg(hc + "wq", kaiming_uniform(in_dim, d, in_dim, rng)));
        layer.bq.push_back(reg(hc + "bq", Mat::Zero(1, d)));
        layer.wk.push_back(reg(hc + "wk", kaiming_uniform(in_dim, d, in_dim, rng)));
        layer.bk.push_back(reg(hc + "bk", Mat::Zero(1, d)));
        layer.wv.push_back(reg(hc + "wv", kaiming_uniform(in_dim, d, in_dim, rng)));
        layer.bv.push_back(reg(hc + "bv", Mat::Zero(1, d)));
        if (edge_dim > 0) {
            layer.we.push_back(reg(hc + "we", kaiming_uniform(edge_dim, d, edge_dim, rng)));
            layer.be.push_back(reg(hc + "be", Mat::Zero(1, d)));
        }
    }
    layer.gn_gamma = reg("gn_gamma", Mat::Ones(1, out_dim));
    layer.gn_beta = reg("gn_beta", Mat::Zero(1, out_dim));
    layer.gn_alpha = reg("gn_alpha", Mat::Ones(1, out_dim));
    return layer;
}

} // namespace

ModelParams init_params(const std::vector<GraphSpec>& graphs, const ModelConfig& config,
                        std::uint64_t seed, bool weight_sharing) {
    ModelParams params;
    params.config = config;
    params.weight_sharing = weight_sharing;
    std::mt19937_64 rng(seed);

    for (const auto& spec : graphs) {
        if (params.dataset.count(spec.dataset_id))
            throw ConfigError("init_params: duplicate dataset " + spec.dataset_id);
        DatasetTower tower;
        const std::string prefix = "ds/" + spec.dataset_id + "/";
        tower.proj_w = ad::param(kaiming_uniform(spec.feature_dim, config.hidden, spec.feature_dim, rng));
        params.registry.emplace(prefix + "proj_w", tower.proj_w);
        tower.proj_b = ad::param(Mat::Zero(1, config.hidden));
        params.registry.emplace(prefix + "proj_b", tower.proj_b);
        tower.layer = make_gt_layer(config.hidden, config.hidden, config.heads, config.edge_dim, rng,
                                    prefix + "gt/", params.registry);
        params.dataset.emplace(spec.dataset_id, std::move(tower));

        const std::string shared_key = weight_sharing ? spec.modality : ("ds:" + spec.dataset_id);
        params.shared_key[spec.dataset_id] = shared_key;
        if (!params.shared.count(shared_key)) {
            params.shared.emplace(shared_key,
                                  make_gt_layer(config.hidden, config.embed, config.heads, config.edge_dim,
                                                rng, "mod/" + shared_key + "/gt/", params.registry));
        }

        DecoderMlp dec;
        const std::string dpfx = "dec/" + spec.dataset_id + "/";
        // Positive weights start the scalar head as an increasing map of the
        // Gram similarity; with signed init, half the seeds settle into an
        // inverted reconstruction code.
        dec.w1 = ad::param(kaiming_uniform(1, config.decoder_hidden, 1, rng).cwiseAbs());
        dec.b1 = ad::param(Mat::Zero(1, config.decoder_hidden));
        dec.w2 = ad::param(kaiming_uniform(config.decoder_hidden, 1, config.decoder_hidden, rng).cwiseAbs());
        dec.b2 = ad::param(Mat::Zero(1, 1));
        params.registry.emplace(dpfx + "w1", dec.w1);
        params.registry.emplace(dpfx + "b1", dec.b1);
        params.registry.emplace(dpfx + "w2", dec.w2);
        params.registry.emplace(dpfx + "b2", dec.b2);
        params.decoder.emplace(spec.dataset_id, std::move(dec));
    }
    return params;
}

std::vector<Tensor> ModelParams::encoder_params() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : registry)
        if (name.rfind("dec/", 0) != 0) out.push_back(t);
    return out;
}

std::vector<Tensor> ModelParams::decoder_params() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : registry)
        if (name.rfind("dec/", 0) == 0) out.push_back(t);
    return out;
}

Index ModelParams::parameter_count() const {
    Index n = 0;
    for (const auto& [name, t] : registry) n += t.rows() * t.cols();
    return n;
}

void ModelParams::zero_grad() {
    for (auto& [name, t] : registry) const_cast<Tensor&>(t).zero_grad();
}

ad::Tensor encode_features(const GeneGraph& g, const Mat& features, const ModelParams& params) {
    const auto ds = params.dataset.find(g.meta.dataset_id);
    if (ds == params.dataset.end())
        throw ConfigError("encode: unregistered dataset " + g.meta.dataset_id);
    const auto key = params.shared_key.find(g.meta.dataset_id);
    if (key == params.shared_key.end() || !params.shared.count(key->second))
        throw ConfigError("encode: unregistered modality for " + g.meta.dataset_id);

    const EdgeIndex edges = build_edge_index(g);
    Tensor x = ad::constant(features);
    Tensor h = ad::add(ad::matmul(x, ds->second.proj_w), ad::broadcast_rows(ds->second.proj_b, x.rows()));
    h = transformer_conv(ds->second.layer, h, edges);
    if (!params.config.shared_identity) h = transformer_conv(params.shared.at(key->second), h, edges);
    return h;
}

ad::Tensor encode(const GeneGraph& g, const ModelParams& params) {
    return encode_features(g, g.node_features, params);
}

ad::Tensor decode(const ad::Tensor& embedding, const ModelParams& params, const std::string& dataset_id) {
    const auto it = params.decoder.find(dataset_id);
    if (it == params.decoder.end()) throw ConfigError("decode: unregistered dataset " + dataset_id);
    const DecoderMlp& dec = it->second;
    const Index p = embedding.rows();
    Tensor gm = ad::gram(embedding);
    Tensor flat = ad::reshape(gm, p * p, 1);
    Tensor hidden = ad::mish(ad::add(ad::matmul(flat, dec.w1), ad::broadcast_rows(dec.b1, p * p)));
    Tensor out = ad::sigmoid(ad::add(ad::matmul(hidden, dec.w2), ad::broadcast_rows(dec.b2, p * p)));
    return ad::reshape(out, p, p);
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::map<std::string, std::string>& meta) {
    nlohmann::json manifest;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : params.registry) {
        manifest["tensors"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
    }
    for (const auto& [k, v] : meta) manifest[k] = v;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path.string());
    const std::string header = manifest.dump();
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.put('\n');
    for (const auto& [name, t] : params.registry) {
        const Mat& v = t.value();
        for (Index i = 0; i < v.rows(); ++i)
            for (Index j = 0; j < v.cols(); ++j) {
                const double x = v(i, j);
                out.write(reinterpret_cast<const char*>(&x), sizeof(double));
            }
    }
}

void load_checkpoint(const std::filesystem::path& path, ModelParams& params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path.string());
    std::string header;
    if (!std::getline(in, header)) throw DataError("missing checkpoint header");
    nlohmann::json manifest = nlohmann::json::parse(header, nullptr, false);
    if (manifest.is_discarded()) throw DataError("bad checkpoint header");
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Index rows = entry.at("rows").get<Index>();
        const Index cols = entry.at("cols").get<Index>();
        auto it = params.registry.find(name);
        if (it == params.registry.end()) throw DataError("checkpoint tensor unknown: " + name);
        if (it->second.rows() != rows || it->second.cols() != cols)
            throw DataError("checkpoint shape mismatch for " + name);
        Mat& v = const_cast<Tensor&>(it->second).value();
        for (Index i = 0; i < rows; ++i)
            for (Index j = 0; j < cols; ++j) {
                double x = 0;
                in.read(reinterpret_cast<char*>(&x), sizeof(double));
                if (!in) throw DataError("truncated checkpoint body");
                v(i, j) = x;
            }
    }
}

} // namespace coexmap

#include "coexmap/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "coexmap/io.hpp"

namespace coexmap {

using ad::Tensor;

void Hyperparams::validate() const {
    if (epochs < 0) throw ConfigError("hyperparams: negative epochs");
    if (lr_encoder <= 0 || lr_decoder <= 0) throw ConfigError("hyperparams: learning rates must be positive");
    if (tau <= 0) throw ConfigError("hyperparams: tau must be positive");
    if (contrastive_samples < 1) throw ConfigError("hyperparams: contrastive sample size must be >= 1");
    if (node_batch < 2) throw ConfigError("hyperparams: node batch too small");
    if (embed_dim < 1) throw ConfigError("hyperparams: embed_dim must be >= 1");
}

ad::Tensor bce_loss(const ad::Tensor& reconstructed, const Mat& target) {
    if (reconstructed.rows() != target.rows() || reconstructed.cols() != target.cols())
        throw NumericError("bce_loss: shape mismatch");
    Tensor p = ad::clamp(reconstructed, 1e-7, 1.0 - 1e-7);
    Tensor t = ad::constant(target);
    Tensor one_minus_t = ad::constant((1.0 - target.array()).matrix());
    Tensor one_minus_p = ad::add_scalar(ad::scale(p, -1.0), 1.0);
    Tensor ll = ad::add(ad::mul(t, ad::log(p)), ad::mul(one_minus_t, ad::log(one_minus_p)));
    return ad::neg(ad::mean(ll));
}

ad::Tensor weighted_cosine_loss(const ad::Tensor& emb_i, const ad::Tensor& emb_j,
                                const AnchorSet& anchors) {
    if (anchors.common.empty()) return ad::constant(Mat::Zero(1, 1));
    std::vector<Index> rows_i, rows_j;
    for (const auto& [a, b] : anchors.common) {
        rows_i.push_back(a);
        rows_j.push_back(b);
    }
    Tensor ni = ad::l2_normalize_rows_safe(ad::gather_rows(emb_i, rows_i));
    Tensor nj = ad::l2_normalize_rows_safe(ad::gather_rows(emb_j, rows_j));
    Tensor cos = ad::rowwise_sum(ad::mul(ni, nj));
    Tensor weighted = ad::mul(cos, ad::constant(anchors.lambda));
    return ad::mean(weighted);
}

ad::Tensor infonce_loss(const ad::Tensor& queries, const ad::Tensor& positives,
                        const ad::Tensor& negatives, Scalar tau) {
    if (tau <= 0) throw ConfigError("infonce_loss: tau must be positive");
    const Index m = queries.rows();
    const Index k = negatives.rows();
    if (m == 0) return ad::constant(Mat::Zero(1, 1));
    if (positives.rows() != m) throw NumericError("infonce_loss: one positive per query required");
    if (k < 1) throw NumericError("infonce_loss: need at least one negative");

    Tensor qn = ad::l2_normalize_rows(queries);
    Tensor pn = ad::l2_normalize_rows(positives);
    Tensor nn = ad::l2_normalize_rows(negatives);

    Tensor s_pos = ad::rowwise_sum(ad::mul(qn, pn));              // m x 1
    Tensor s_neg = ad::matmul(qn, ad::transpose(nn));             // m x k
    Tensor logits = ad::scale(ad::concat_cols(s_pos, s_neg), 1.0 / tau);

    // Column-major flatten: element t of the flat vector is logits(t % m, t/m),
    // so row ids are recovered with t % m and the positives sit at t < m.
    Tensor flat = ad::reshape(logits, m * (k + 1), 1);
    std::vector<Index> segment(static_cast<std::size_t>(m * (k + 1)));
    for (Index t = 0; t < m * (k + 1); ++t) segment[static_cast<std::size_t>(t)] = t % m;
    Tensor sm = ad::segment_softmax(flat, std::move(segment), m);
    std::vector<Index> pos_rows(static_cast<std::size_t>(m));
    std::iota(pos_rows.begin(), pos_rows.end(), Index{0});
    Tensor p0 = ad::gather_rows(sm, std::move(pos_rows));
    return ad::neg(ad::mean(ad::log(p0)));
}

ad::Tensor infonce_dictionary(const ad::Tensor& queries, const ad::Tensor& keys, Scalar tau) {
    const Index m = queries.rows();
    if (m < 2) return ad::constant(Mat::Zero(1, 1)); // no negatives available
    Tensor qn = ad::l2_normalize_rows(queries);
    Tensor kn = ad::l2_normalize_rows(keys);
    Tensor s_all = ad::matmul(qn, ad::transpose(kn)); // m x m, diag = positives
    Tensor s_pos = ad::rowwise_sum(ad::mul(s_all, ad::constant(Mat(Mat::Identity(m, m)))));
    // The diagonal is already counted as the positive column; mask it out of
    // the negative block.
    Mat mask = Mat::Zero(m, m);
    mask.diagonal().setConstant(-1e9);
    Tensor logits = ad::scale(ad::concat_cols(s_pos, ad::add(s_all, ad::constant(mask))), 1.0 / tau);
    Tensor flat = ad::reshape(logits, m * (m + 1), 1);
    std::vector<Index> segment(static_cast<std::size_t>(m * (m + 1)));
    for (Index t = 0; t < m * (m + 1); ++t) segment[static_cast<std::size_t>(t)] = t % m;
    Tensor sm = ad::segment_softmax(flat, std::move(segment), m);
    std::vector<Index> pos_rows(static_cast<std::size_t>(m));
    std::iota(pos_rows.begin(), pos_rows.end(), Index{0});
    Tensor p0 = ad::gather_rows(sm, std::move(pos_rows));
    return ad::neg(ad::mean(ad::log(p0)));
}

Adam::Adam(std::vector<ad::Tensor> params, Scalar lr, AdamConfig config)
    : params_(std::move(params)), lr_(lr), config_(config) {
    for (const auto& p : params_) {
        m_.push_back(Mat::Zero(p.rows(), p.cols()));
        v_.push_back(Mat::Zero(p.rows(), p.cols()));
    }
}

void Adam::step() {
    ++t_;
    const Scalar bc1 = 1.0 - std::pow(config_.beta1, static_cast<Scalar>(t_));
    const Scalar bc2 = 1.0 - std::pow(config_.beta2, static_cast<Scalar>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        const Mat& g = params_[i].grad();
        m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
        v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
        const Mat mhat = m_[i] / bc1;
        const Mat vhat = v_[i] / bc2;
        params_[i].value().array() -= lr_ * mhat.array() / (vhat.array().sqrt() + config_.eps);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

std::size_t sample_partner(std::size_t i, std::size_t n_graphs, std::mt19937_64& rng) {
    if (n_graphs < 2) throw DataError("sample_partner: need at least two graphs");
    std::uniform_int_distribution<std::size_t> dist(0, n_graphs - 2);
    const std::size_t k = dist(rng);
    return k >= i ? k + 1 : k;
}

namespace {

// Sample up to n diff genes that have at least one neighbour, without
// replacement, plus one uniformly drawn neighbour each.
void sample_queries(const GeneGraph& g, const std::vector<Index>& diff, Index n_samples,
                    std::mt19937_64& rng, std::vector<Index>* queries, std::vector<Index>* positives) {
    std::vector<Index> candidates;
    for (Index idx : diff)
        if (!g.neighbors[static_cast<std::size_t>(idx)].empty()) candidates.push_back(idx);
    const Index take = std::min<Index>(n_samples, static_cast<Index>(candidates.size()));
    for (Index t = 0; t < take; ++t) {
        std::uniform_int_distribution<Index> pick(t, static_cast<Index>(candidates.size()) - 1);
        std::swap(candidates[static_cast<std::size_t>(t)], candidates[static_cast<std::size_t>(pick(rng))]);
        const Index q = candidates[static_cast<std::size_t>(t)];
        const auto& nbrs = g.neighbors[static_cast<std::size_t>(q)];
        std::uniform_int_distribution<Index> npick(0, static_cast<Index>(nbrs.size()) - 1);
        queries->push_back(q);
        positives->push_back(nbrs[static_cast<std::size_t>(npick(rng))]);
    }
}

const AnchorSet& oriented_anchors(
    const std::map<std::pair<std::size_t, std::size_t>, AnchorSet>& anchors, std::size_t i,
    std::size_t j, AnchorSet* scratch) {
    const auto key = std::make_pair(std::min(i, j), std::max(i, j));
    const auto it = anchors.find(key);
    if (it == anchors.end()) throw DataError("missing anchor set for graph pair");
    if (i < j) return it->second;
    // Swap roles for the reversed orientation.
    scratch->common.clear();
    for (const auto& [a, b] : it->second.common) scratch->common.emplace_back(b, a);
    scratch->diff_i = it->second.diff_j;
    scratch->diff_j = it->second.diff_i;
    scratch->diff_neighbors_i = it->second.diff_neighbors_j;
    scratch->diff_neighbors_j = it->second.diff_neighbors_i;
    scratch->lambda = it->second.lambda;
    return *scratch;
}

} // namespace

PairSample sample_pair(std::size_t i, const std::vector<GeneGraph>& graphs,
                       const std::map<std::pair<std::size_t, std::size_t>, AnchorSet>& anchors,
                       Index n_samples, std::mt19937_64& rng) {
    PairSample out;
    out.j = sample_partner(i, graphs.size(), rng);
    AnchorSet scratch;
    const AnchorSet& a = oriented_anchors(anchors, i, out.j, &scratch);
    sample_queries(graphs[i], a.diff_i, n_samples, rng, &out.queries_i, &out.positives_i);
    sample_queries(graphs[out.j], a.diff_j, n_samples, rng, &out.queries_j, &out.positives_j);
    return out;
}

StepLoss train_step_loss(const std::vector<GeneGraph>& graphs, std::size_t i,
                         const std::optional<PairSample>& pair,
                         const std::map<std::pair<std::size_t, std::size_t>, AnchorSet>& anchors,
                         const ModelParams& params, const Hyperparams& hp,
                         const std::vector<Mat>* feature_override) {
    const GeneGraph& gi = graphs[i];
    Tensor e_i = feature_override ? encode_features(gi, (*feature_override)[i], params) : encode(gi, params);
    Tensor e_rec = decode(e_i, params, gi.meta.dataset_id);

    StepLoss loss;
    // Reconstruction target carries a unit diagonal (a gene co-expresses with
    // itself); the diagonal holds the largest Gram entries, so this anchors
    // the decoder to an increasing map of the similarity score.
    Mat target = gi.adjacency_dense();
    target.diagonal().setOnes();
    loss.bce = bce_loss(e_rec, target);
    loss.total = loss.bce;
    loss.sim = ad::constant(Mat::Zero(1, 1));
    loss.infonce = ad::constant(Mat::Zero(1, 1));

    if (pair && (hp.sim_loss || hp.infonce_loss)) {
        const std::size_t j = pair->j;
        const GeneGraph& gj = graphs[j];
        Tensor e_j = feature_override ? encode_features(gj, (*feature_override)[j], params) : encode(gj, params);
        AnchorSet scratch;
        const AnchorSet& a = oriented_anchors(anchors, i, j, &scratch);

        if (hp.sim_loss) {
            loss.sim = weighted_cosine_loss(e_i, e_j, a);
            loss.total = ad::sub(loss.total, loss.sim);
        }
        if (hp.infonce_loss) {
            const Index mi = static_cast<Index>(pair->queries_i.size());
            const Index mj = static_cast<Index>(pair->queries_j.size());
            // One dictionary over both graphs: queries are the sampled Diff
            // genes of either side, key r is query r's own-graph neighbour,
            // and every other key is a negative.
            if (mi + mj >= 2) {
                Tensor queries = (mi > 0 && mj > 0)
                                     ? ad::concat_rows(ad::gather_rows(e_i, pair->queries_i),
                                                       ad::gather_rows(e_j, pair->queries_j))
                                     : (mi > 0 ? ad::gather_rows(e_i, pair->queries_i)
                                               : ad::gather_rows(e_j, pair->queries_j));
                Tensor keys = (mi > 0 && mj > 0)
                                  ? ad::concat_rows(ad::gather_rows(e_i, pair->positives_i),
                                                    ad::gather_rows(e_j, pair->positives_j))
                                  : (mi > 0 ? ad::gather_rows(e_i, pair->positives_i)
                                            : ad::gather_rows(e_j, pair->positives_j));
                loss.infonce = infonce_dictionary(queries, keys, hp.tau);
                loss.total = ad::add(loss.total, ad::scale(loss.infonce, hp.lambda_c));
            }
        }
    }
    return loss;
}

AnchorSet restrict_anchors(const AnchorSet& a, const std::vector<Index>& keep_i,
                           const std::vector<Index>& keep_j, Index p_i, Index p_j) {
    std::vector<Index> map_i(static_cast<std::size_t>(p_i), -1), map_j(static_cast<std::size_t>(p_j), -1);
    for (std::size_t k = 0; k < keep_i.size(); ++k) map_i[static_cast<std::size_t>(keep_i[k])] = static_cast<Index>(k);
    for (std::size_t k = 0; k < keep_j.size(); ++k) map_j[static_cast<std::size_t>(keep_j[k])] = static_cast<Index>(k);

    AnchorSet out;
    std::vector<Index> lambda_keep;
    for (std::size_t c = 0; c < a.common.size(); ++c) {
        const Index ni = map_i[static_cast<std::size_t>(a.common[c].first)];
        const Index nj = map_j[static_cast<std::size_t>(a.common[c].second)];
        if (ni >= 0 && nj >= 0) {
            out.common.emplace_back(ni, nj);
            lambda_keep.push_back(static_cast<Index>(c));
        }
    }
    out.lambda.resize(static_cast<Index>(lambda_keep.size()));
    for (std::size_t c = 0; c < lambda_keep.size(); ++c) out.lambda(static_cast<Index>(c)) = a.lambda(lambda_keep[c]);

    auto restrict_diff = [](const std::vector<Index>& diff, const std::vector<std::vector<Index>>& nbrs,
                            const std::vector<Index>& map, std::vector<Index>* out_diff,
                            std::vector<std::vector<Index>>* out_nbrs) {
        for (std::size_t d = 0; d < diff.size(); ++d) {
            const Index nd = map[static_cast<std::size_t>(diff[d])];
            if (nd < 0) continue;
            out_diff->push_back(nd);
            std::vector<Index> nn;
            for (Index x : nbrs[d])
                if (map[static_cast<std::size_t>(x)] >= 0) nn.push_back(map[static_cast<std::size_t>(x)]);
            out_nbrs->push_back(std::move(nn));
        }
    };
    restrict_diff(a.diff_i, a.diff_neighbors_i, map_i, &out.diff_i, &out.diff_neighbors_i);
    restrict_diff(a.diff_j, a.diff_neighbors_j, map_j, &out.diff_j, &out.diff_neighbors_j);
    return out;
}

namespace {

GeneGraph induced_subgraph(const GeneGraph& g, const std::vector<Index>& keep) {
    GeneGraph out;
    out.meta = g.meta;
    std::vector<Index> map(static_cast<std::size_t>(g.n_nodes()), -1);
    for (std::size_t k = 0; k < keep.size(); ++k) map[static_cast<std::size_t>(keep[k])] = static_cast<Index>(k);
    out.node_features.resize(static_cast<Index>(keep.size()), g.node_features.cols());
    for (std::size_t k = 0; k < keep.size(); ++k) {
        out.genes.push_back(g.genes[static_cast<std::size_t>(keep[k])]);
        out.node_features.row(static_cast<Index>(k)) = g.node_features.row(keep[k]);
    }
    for (const auto& [a, b] : g.edges) {
        const Index na = map[static_cast<std::size_t>(a)], nb = map[static_cast<std::size_t>(b)];
        if (na >= 0 && nb >= 0) out.edges.emplace_back(std::min(na, nb), std::max(na, nb));
    }
    out.neighbors.assign(keep.size(), {});
    for (const auto& [a, b] : out.edges) {
        out.neighbors[static_cast<std::size_t>(a)].push_back(b);
        out.neighbors[static_cast<std::size_t>(b)].push_back(a);
    }
    for (auto& v : out.neighbors) std::sort(v.begin(), v.end());
    out.edge_rho = Vec::Zero(static_cast<Index>(out.edges.size()));
    out.edge_pval = Vec::Zero(static_cast<Index>(out.edges.size()));
    return out;
}

std::vector<Index> sample_nodes(Index p, Index batch, std::mt19937_64& rng) {
    std::vector<Index> all(static_cast<std::size_t>(p));
    std::iota(all.begin(), all.end(), Index{0});
    for (Index t = 0; t < batch; ++t) {
        std::uniform_int_distribution<Index> pick(t, p - 1);
        std::swap(all[static_cast<std::size_t>(t)], all[static_cast<std::size_t>(pick(rng))]);
    }
    all.resize(static_cast<std::size_t>(batch));
    std::sort(all.begin(), all.end());
    return all;
}

} // namespace

TrainResult train(const std::vector<GeneGraph>& graphs,
                  const std::map<std::pair<std::size_t, std::size_t>, AnchorSet>& anchors,
                  const Hyperparams& hp,
                  const std::function<void(int, const ModelParams&)>& on_checkpoint) {
    hp.validate();
    if (graphs.empty()) throw DataError("train: empty collection");
    const auto t0 = std::chrono::steady_clock::now();

    ModelConfig mc = hp.model;
    mc.embed = hp.embed_dim;
    std::vector<GraphSpec> specs;
    for (const auto& g : graphs)
        specs.push_back({g.meta.dataset_id, modality_name(g.meta.modality), g.node_features.cols()});

    ModelParams params = init_params(specs, mc, hp.seed, hp.weight_sharing);
    Adam adam_enc(params.encoder_params(), hp.lr_encoder);
    Adam adam_dec(params.decoder_params(), hp.lr_decoder);
    std::mt19937_64 rng(hp.seed);

    // Structure-only control: every graph reads from one shared feature
    // matrix, so expression information is removed while edges stay intact.
    std::vector<Mat> override_features;
    const std::vector<Mat>* feature_override = nullptr;
    if (hp.shuffle_features) {
        Index max_p = 0, max_d = 0;
        for (const auto& g : graphs) {
            max_p = std::max(max_p, g.n_nodes());
            max_d = std::max(max_d, g.node_features.cols());
        }
        std::mt19937_64 frng(hp.seed ^ 0x5eedfeedULL);
        std::normal_distribution<Scalar> normal(0.0, 1.0);
        Mat shared(max_p, max_d);
        for (Index i = 0; i < max_p; ++i)
            for (Index j = 0; j < max_d; ++j) shared(i, j) = normal(frng);
        for (const auto& g : graphs)
            override_features.push_back(shared.topLeftCorner(g.n_nodes(), g.node_features.cols()));
        feature_override = &override_features;
    }

    TrainResult result;
    bool warned_single = false;

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        for (std::size_t i = 0; i < graphs.size(); ++i) {
            // Node batching applies only to graphs larger than the batch size.
            const bool batched = graphs[i].n_nodes() > hp.node_batch;
            std::vector<GeneGraph> local_graphs;
            std::map<std::pair<std::size_t, std::size_t>, AnchorSet> local_anchors;
            const std::vector<GeneGraph>* step_graphs = &graphs;
            const std::map<std::pair<std::size_t, std::size_t>, AnchorSet>* step_anchors = &anchors;
            std::vector<Mat> local_features;
            const std::vector<Mat>* step_override = feature_override;

            std::optional<PairSample> pair;
            if (graphs.size() >= 2) {
                if (batched) {
                    // Restrict graph i (and the sampled partner when needed) to
                    // induced subgraphs; anchors follow.
                    const std::size_t j = sample_partner(i, graphs.size(), rng);
                    std::vector<Index> keep_i = sample_nodes(graphs[i].n_nodes(), hp.node_batch, rng);
                    std::vector<Index> keep_j;
                    if (graphs[j].n_nodes() > hp.node_batch)
                        keep_j = sample_nodes(graphs[j].n_nodes(), hp.node_batch, rng);
                    else {
                        keep_j.resize(static_cast<std::size_t>(graphs[j].n_nodes()));
                        std::iota(keep_j.begin(), keep_j.end(), Index{0});
                    }
                    local_graphs.resize(2);
                    local_graphs[0] = induced_subgraph(graphs[i], keep_i);
                    local_graphs[1] = induced_subgraph(graphs[j], keep_j);
                    AnchorSet scratch;
                    const AnchorSet& full = oriented_anchors(anchors, i, j, &scratch);
                    local_anchors[{0, 1}] = restrict_anchors(full, keep_i, keep_j, graphs[i].n_nodes(),
                                                             graphs[j].n_nodes());
                    if (feature_override) {
                        local_features.resize(2);
                        local_features[0].resize(static_cast<Index>(keep_i.size()), (*feature_override)[i].cols());
                        for (std::size_t k = 0; k < keep_i.size(); ++k)
                            local_features[0].row(static_cast<Index>(k)) = (*feature_override)[i].row(keep_i[k]);
                        local_features[1].resize(static_cast<Index>(keep_j.size()), (*feature_override)[j].cols());
                        for (std::size_t k = 0; k < keep_j.size(); ++k)
                            local_features[1].row(static_cast<Index>(k)) = (*feature_override)[j].row(keep_j[k]);
                        step_override = &local_features;
                    }
                    step_graphs = &local_graphs;
                    step_anchors = &local_anchors;
                    pair = sample_pair(0, local_graphs, local_anchors, hp.contrastive_samples, rng);
                    pair->j = 1;
                } else {
                    pair = sample_pair(i, graphs, anchors, hp.contrastive_samples, rng);
                }
            } else if (!warned_single) {
                std::cerr << "[train] single-graph collection: pair losses skipped\n";
                warned_single = true;
            }

            const std::size_t step_i = batched ? 0 : i;
            StepLoss loss;
            try {
                loss = train_step_loss(*step_graphs, step_i, pair, *step_anchors, params, hp, step_override);
            } catch (const NumericError& e) {
                throw NumericError("training failed at epoch " + std::to_string(epoch) + ", dataset " +
                                   graphs[i].meta.dataset_id + ": " + e.what());
            }
            const Scalar total_v = loss.total.value()(0, 0);
            if (!std::isfinite(total_v))
                throw NumericError("NaN loss at epoch " + std::to_string(epoch) + ", dataset " +
                                   graphs[i].meta.dataset_id);

            params.zero_grad();
            ad::backward(loss.total);
            adam_enc.step();
            adam_dec.step();

            result.log.push_back({epoch, graphs[i].meta.dataset_id, loss.bce.value()(0, 0),
                                  loss.sim.value()(0, 0), loss.infonce.value()(0, 0), total_v});
        }
        if (hp.checkpoint_every > 0 && (epoch + 1) % hp.checkpoint_every == 0 && on_checkpoint)
            on_checkpoint(epoch + 1, params);
    }

    for (std::size_t i = 0; i < graphs.size(); ++i) {
        Tensor e = feature_override ? encode_features(graphs[i], (*feature_override)[i], params)
                                    : encode(graphs[i], params);
        result.embeddings[graphs[i].meta.dataset_id] = e.value();
    }
    result.params = std::move(params);
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log) {
    std::ostringstream out;
    out << "epoch,dataset,bce,sim,infonce,total\n";
    for (const auto& row : log) {
        out << row.epoch << "," << row.dataset << "," << io::format_double(row.bce) << ","
            << io::format_double(row.sim) << "," << io::format_double(row.infonce) << ","
            << io::format_double(row.total) << "\n";
    }
    io::write_text(path, out.str());
}

} // namespace coexmap

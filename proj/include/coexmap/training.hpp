#ifndef COEXMAP_TRAINING_HPP
#define COEXMAP_TRAINING_HPP

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "coexmap/autodiff.hpp"
#include "coexmap/graph.hpp"
#include "coexmap/model.hpp"
#include "coexmap/types.hpp"

namespace coexmap {

struct Hyperparams {
    int epochs = 2000;
    Scalar lr_encoder = 1e-4;
    Scalar lr_decoder = 1e-3;
    Scalar lambda_c = 1e-2;       // InfoNCE weight
    Index embed_dim = 32;
    Index contrastive_samples = 100;
    Scalar tau = 0.07;
    Index node_batch = 2000;      // induced-subgraph size for larger graphs
    std::uint64_t seed = 0;
    bool sim_loss = true;
    bool infonce_loss = true;
    bool weight_sharing = true;
    bool shuffle_features = false; // structure-only control: one shared feature matrix
    int checkpoint_every = 0;
    ModelConfig model;

    void validate() const;
};

// ---- Loss components --------------------------------------------------------

// Mean binary cross-entropy over the flattened matrices; predictions are
// clipped to [1e-7, 1 - 1e-7].
ad::Tensor bce_loss(const ad::Tensor& reconstructed, const Mat& target);

// Mean over common genes of lambda_g * cos(e_i[g], e_j[g]); the trainer
// subtracts this value (similarity is maximized). Zero-norm rows contribute 0.
ad::Tensor weighted_cosine_loss(const ad::Tensor& emb_i, const ad::Tensor& emb_j,
                                const AnchorSet& anchors);

// Mean over queries of -log softmax(s_+/tau | all keys); cosine similarities
// of l2-normalized rows, positive included in the denominator.
ad::Tensor infonce_loss(const ad::Tensor& queries, const ad::Tensor& positives,
                        const ad::Tensor& negatives, Scalar tau);
// Dictionary form used by the training loop: key r is the positive for query
// r and all other keys serve as its negatives.
ad::Tensor infonce_dictionary(const ad::Tensor& queries, const ad::Tensor& keys, Scalar tau);

// ---- Adam -------------------------------------------------------------------

struct AdamConfig {
    Scalar beta1 = 0.9;
    Scalar beta2 = 0.999;
    Scalar eps = 1e-8;
};

class Adam {
public:
    Adam(std::vector<ad::Tensor> params, Scalar lr, AdamConfig config = {});
    // One update from the gradients currently stored on the parameters.
    void step();
    void zero_grad();
    Scalar lr() const { return lr_; }

private:
    std::vector<ad::Tensor> params_;
    std::vector<Mat> m_, v_;
    Scalar lr_;
    AdamConfig config_;
    long long t_ = 0;
};

// ---- Pair sampling ----------------------------------------------------------

// Contrastive material for one (i, j) pair: queries are sampled Diff genes
// with at least one neighbour, each paired with one sampled same-graph
// neighbour; the other side's samples serve as negatives.
struct PairSample {
    std::size_t j = 0; // partner graph index
    std::vector<Index> queries_i, positives_i;
    std::vector<Index> queries_j, positives_j;
};

std::size_t sample_partner(std::size_t i, std::size_t n_graphs, std::mt19937_64& rng);
PairSample sample_pair(std::size_t i, const std::vector<GeneGraph>& graphs,
                       const std::map<std::pair<std::size_t, std::size_t>, AnchorSet>& anchors,
                       Index n_samples, std::mt19937_64& rng);

// ---- Training loop ----------------------------------------------------------

struct TrainLogRow {
    int epoch = 0;
    std::string dataset;
    Scalar bce = 0, sim = 0, infonce = 0, total = 0;
};

struct TrainResult {
    ModelParams params;
    std::map<std::string, Mat> embeddings; // dataset_id -> p x embed matrix
    std::vector<TrainLogRow> log;
    double wall_seconds = 0;
};

// Loss for one dataset step given fixed contrastive samples; exposed so the
// full objective can be gradient-checked without RNG in the loop.
struct StepLoss {
    ad::Tensor total, bce, sim, infonce;
};
StepLoss train_step_loss(const std::vector<GeneGraph>& graphs, std::size_t i,
                         const std::optional<PairSample>& pair,
                         const std::map<std::pair<std::size_t, std::size_t>, AnchorSet>& anchors,
                         const ModelParams& params, const Hyperparams& hp,
                         const std::vector<Mat>* feature_override = nullptr);

AnchorSet restrict_anchors(const AnchorSet& a, const std::vector<Index>& keep_i,
                           const std::vector<Index>& keep_j, Index p_i, Index p_j);

// on_checkpoint fires every hp.checkpoint_every epochs when set.
TrainResult train(const std::vector<GeneGraph>& graphs,
                  const std::map<std::pair<std::size_t, std::size_t>, AnchorSet>& anchors,
                  const Hyperparams& hp,
                  const std::function<void(int, const ModelParams&)>& on_checkpoint = {});

void write_train_log(const std::filesystem::path& path, const std::vector<TrainLogRow>& log);

} // namespace coexmap

#endif

#include <doctest.h>

#include <numeric>
#include <random>

#include "coexmap/training.hpp"
#include "test_helpers.hpp"

using namespace coexmap;
using ad::Tensor;

namespace {

Hyperparams small_hp() {
    Hyperparams hp;
    hp.model.hidden = 16;
    hp.model.heads = 2;
    hp.model.decoder_hidden = 4;
    hp.embed_dim = 8;
    hp.contrastive_samples = 10;
    return hp;
}

SyntheticCollection small_collection(std::uint64_t seed, Index n_datasets = 3) {
    SyntheticSpec spec;
    spec.n_datasets = n_datasets;
    spec.n_cells = 300;
    spec.n_genes = 40;
    spec.n_modules = 2;
    spec.module_size = 8;
    spec.shared_gene_fraction = 0.6;
    spec.seed = seed;
    return generate_synthetic(spec);
}

} // namespace

TEST_CASE("bce_loss: constant half matrix gives ln 2; clipping floors perfect fits") {
    const Mat target = (Mat(2, 2) << 1, 0, 0, 1).finished();
    Tensor half = ad::constant(Mat::Constant(2, 2, 0.5));
    CHECK(bce_loss(half, target).value()(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor perfect = ad::constant(target);
    const Scalar v = bce_loss(perfect, target).value()(0, 0);
    CHECK(v > 0);
    CHECK(v < 2e-7); // clip floor scale
}

TEST_CASE("bce_loss matches a scalar-loop oracle on a random 6x6 instance") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<Scalar> unif(0.05, 0.95);
    Mat pred(6, 6), target(6, 6);
    for (Index i = 0; i < 6; ++i)
        for (Index j = 0; j < 6; ++j) {
            pred(i, j) = unif(rng);
            target(i, j) = (rng() % 2) ? 1.0 : 0.0;
        }
    Scalar oracle = 0;
    for (Index i = 0; i < 6; ++i)
        for (Index j = 0; j < 6; ++j)
            oracle -= target(i, j) * std::log(pred(i, j)) + (1 - target(i, j)) * std::log(1 - pred(i, j));
    oracle /= 36.0;
    CHECK(bce_loss(ad::constant(pred), target).value()(0, 0) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("weighted cosine: identity, orthogonality, weight annihilation") {
    AnchorSet anchors;
    anchors.common = {{0, 0}, {1, 1}};
    anchors.lambda = Vec::Ones(2);

    Mat e(2, 4);
    e << 1, 0, 0, 0, 0, 2, 0, 0;
    CHECK(weighted_cosine_loss(ad::constant(e), ad::constant(e), anchors).value()(0, 0) ==
          doctest::Approx(1.0).epsilon(1e-12));

    Mat f(2, 4);
    f << 0, 0, 3, 0, 0, 0, 0, 5;
    CHECK(weighted_cosine_loss(ad::constant(e), ad::constant(f), anchors).value()(0, 0) ==
          doctest::Approx(0.0).epsilon(1e-12));

    anchors.lambda = Vec::Zero(2);
    CHECK(weighted_cosine_loss(ad::constant(e), ad::constant(f), anchors).value()(0, 0) == 0.0);
}

TEST_CASE("infonce: uniform similarities give ln(K+1); matched positive drives to 0") {
    // all keys identical -> all similarities equal
    const Index k = 7;
    Mat q = Mat::Ones(3, 4);
    Mat pos = Mat::Ones(3, 4);
    Mat neg = Mat::Ones(k, 4);
    const Scalar v = infonce_loss(ad::constant(q), ad::constant(pos), ad::constant(neg), 0.07).value()(0, 0);
    CHECK(v == doctest::Approx(std::log(static_cast<Scalar>(k + 1))).epsilon(1e-9));

    // positive aligned, negatives opposed: loss ~ 0
    Mat neg2 = -Mat::Ones(k, 4);
    const Scalar v2 = infonce_loss(ad::constant(q), ad::constant(pos), ad::constant(neg2), 0.07).value()(0, 0);
    CHECK(v2 < 1e-9);
}

TEST_CASE("infonce is decreasing in the positive similarity") {
    std::mt19937_64 rng(2);
    std::normal_distribution<Scalar> normal;
    Mat neg(6, 4);
    for (Index i = 0; i < 6; ++i)
        for (Index j = 0; j < 4; ++j) neg(i, j) = normal(rng);
    Mat q(1, 4);
    q << 1, 0, 0, 0;
    Scalar prev = std::numeric_limits<Scalar>::infinity();
    for (Scalar angle : {1.2, 0.6, 0.0}) { // positive rotates toward the query
        Mat pos(1, 4);
        pos << std::cos(angle), std::sin(angle), 0, 0;
        const Scalar v = infonce_loss(ad::constant(q), ad::constant(pos), ad::constant(neg), 0.07).value()(0, 0);
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("infonce matches a scalar-loop oracle on a random 8-query/16-key instance") {
    std::mt19937_64 rng(3);
    std::normal_distribution<Scalar> normal;
    const Index m = 8, k = 16, d = 5;
    Mat q(m, d), pos(m, d), neg(k, d);
    for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < d; ++j) {
            q(i, j) = normal(rng);
            pos(i, j) = normal(rng);
        }
    for (Index i = 0; i < k; ++i)
        for (Index j = 0; j < d; ++j) neg(i, j) = normal(rng);

    const Scalar tau = 0.07;
    Scalar oracle = 0;
    for (Index i = 0; i < m; ++i) {
        const Vec qn = q.row(i).normalized();
        const Scalar sp = qn.dot(pos.row(i).normalized());
        Scalar denom = std::exp(sp / tau);
        for (Index t = 0; t < k; ++t) denom += std::exp(qn.dot(neg.row(t).normalized()) / tau);
        oracle -= std::log(std::exp(sp / tau) / denom);
    }
    oracle /= static_cast<Scalar>(m);
    const Scalar v = infonce_loss(ad::constant(q), ad::constant(pos), ad::constant(neg), tau).value()(0, 0);
    CHECK(v == doctest::Approx(oracle).epsilon(1e-12));

    CHECK_THROWS_AS(infonce_loss(ad::constant(Mat(Mat::Zero(1, 3))), ad::constant(Mat(Mat::Ones(1, 3))),
                                 ad::constant(Mat(Mat::Ones(2, 3))), tau),
                    NumericError);
}

TEST_CASE("adam: first-step delta, zero-grad no-op, determinism") {
    Tensor p = ad::param(Mat::Zero(1, 1));
    Adam adam({p}, 0.1);
    const_cast<Mat&>(p.grad())(0, 0) = 0.5;
    adam.step();
    // -lr * mhat / (sqrt(vhat) + eps) with mhat = 0.5, vhat = 0.25
    CHECK(p.value()(0, 0) == doctest::Approx(-0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));

    Tensor z = ad::param(Mat::Zero(2, 2));
    Adam adam2({z}, 0.1);
    adam2.step(); // zero grad from fresh state
    CHECK(z.value().isZero(0.0));

    auto run = [] {
        Tensor t = ad::param(Mat::Constant(2, 2, 1.0));
        Adam a({t}, 0.05);
        for (int i = 0; i < 25; ++i) {
            t.zero_grad();
            Tensor loss = ad::sum(ad::mul(t, t));
            ad::backward(loss);
            a.step();
        }
        return Mat(t.value());
    };
    const Mat r1 = run(), r2 = run();
    CHECK((r1.array() == r2.array()).all());
}

TEST_CASE("sample_partner: two graphs always pair; ten graphs pair uniformly") {
    std::mt19937_64 rng(4);
    for (int t = 0; t < 20; ++t) CHECK(sample_partner(0, 2, rng) == 1);

    const int draws = 10000;
    std::vector<int> counts(10, 0);
    for (int t = 0; t < draws; ++t) ++counts[sample_partner(3, 10, rng)];
    CHECK(counts[3] == 0);
    // chi-square over the 9 admissible partners, df = 8, alpha = 0.01
    const Scalar expected = draws / 9.0;
    Scalar chi2 = 0;
    for (std::size_t j = 0; j < 10; ++j) {
        if (j == 3) continue;
        chi2 += (counts[j] - expected) * (counts[j] - expected) / expected;
    }
    CHECK(chi2 < 20.09);

    CHECK_THROWS_AS(sample_partner(0, 1, rng), DataError);
}

TEST_CASE("sample_pair excludes genes without neighbours") {
    const auto collection = small_collection(5, 2);
    auto graphs = testing::build_graphs(collection);
    // strip all edges from one diff gene to make it ineligible
    const auto anchors = testing::all_anchors(graphs);
    std::mt19937_64 rng(6);
    for (int rep = 0; rep < 10; ++rep) {
        const PairSample s = sample_pair(0, graphs, anchors, 10, rng);
        CHECK(s.j == 1);
        for (std::size_t t = 0; t < s.queries_i.size(); ++t) {
            CHECK(!graphs[0].neighbors[static_cast<std::size_t>(s.queries_i[t])].empty());
            // positive is a true neighbour of the query in its own graph
            const auto& nbrs = graphs[0].neighbors[static_cast<std::size_t>(s.queries_i[t])];
            CHECK(std::find(nbrs.begin(), nbrs.end(), s.positives_i[t]) != nbrs.end());
        }
    }
}

TEST_CASE("full-objective gradients match finite differences on a 2-graph toy") {
    SyntheticSpec spec;
    spec.n_datasets = 2;
    spec.n_cells = 60;
    spec.n_genes = 12;
    spec.n_modules = 1;
    spec.module_size = 4;
    spec.shared_gene_fraction = 0.5;
    spec.seed = 7;
    const auto collection = generate_synthetic(spec);
    auto graphs = testing::build_graphs(collection, 0.05);
    const auto anchors = testing::all_anchors(graphs);

    Hyperparams hp = small_hp();
    hp.model.hidden = 6;
    hp.embed_dim = 4;
    hp.contrastive_samples = 4;

    ModelConfig mc = hp.model;
    mc.embed = hp.embed_dim;
    std::vector<GraphSpec> specs;
    for (const auto& g : graphs)
        specs.push_back({g.meta.dataset_id, modality_name(g.meta.modality), g.node_features.cols()});
    ModelParams params = init_params(specs, mc, 8, true);

    std::mt19937_64 rng(9);
    const PairSample pair = sample_pair(0, graphs, anchors, hp.contrastive_samples, rng);

    std::vector<Tensor> leaves;
    for (const auto& [name, t] : params.registry) leaves.push_back(t);
    const Scalar err = ad::gradcheck(
        [&](const std::vector<Tensor>&) {
            return train_step_loss(graphs, 0, pair, anchors, params, hp).total;
        },
        leaves);
    CHECK(err < 1e-5);
}

TEST_CASE("training reduces the loss (median over 5 seeds)") {
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto collection = small_collection(100 + seed);
        auto graphs = testing::build_graphs(collection);
        const auto anchors = testing::all_anchors(graphs);
        Hyperparams hp = small_hp();
        hp.epochs = 50;
        hp.seed = seed;
        const TrainResult result = train(graphs, anchors, hp);

        Scalar first = 0, last = 0;
        for (const auto& row : result.log) {
            if (row.epoch == 0) first += row.total;
            if (row.epoch == hp.epochs - 1) last += row.total;
        }
        if (last < first) ++improved;
    }
    CHECK(improved >= 3);
}

TEST_CASE("toggles: all off reduces to BCE with exactly-zero logged components") {
    const auto collection = small_collection(11);
    auto graphs = testing::build_graphs(collection);
    const auto anchors = testing::all_anchors(graphs);
    Hyperparams hp = small_hp();
    hp.epochs = 3;
    hp.sim_loss = false;
    hp.infonce_loss = false;
    const TrainResult result = train(graphs, anchors, hp);
    for (const auto& row : result.log) {
        CHECK(row.sim == 0.0);
        CHECK(row.infonce == 0.0);
        CHECK(row.total == row.bce);
    }
}

TEST_CASE("objective additivity holds at every logged step") {
    const auto collection = small_collection(12);
    auto graphs = testing::build_graphs(collection);
    const auto anchors = testing::all_anchors(graphs);
    Hyperparams hp = small_hp();
    hp.epochs = 5;
    const TrainResult result = train(graphs, anchors, hp);
    for (const auto& row : result.log)
        CHECK(std::abs(row.total - (row.bce - row.sim + hp.lambda_c * row.infonce)) < 1e-10);
}

TEST_CASE("training is deterministic under a fixed seed") {
    const auto collection = small_collection(13);
    auto graphs = testing::build_graphs(collection);
    const auto anchors = testing::all_anchors(graphs);
    Hyperparams hp = small_hp();
    hp.epochs = 4;
    hp.seed = 77;
    const TrainResult r1 = train(graphs, anchors, hp);
    const TrainResult r2 = train(graphs, anchors, hp);
    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].total == r2.log[i].total);
        CHECK(r1.log[i].bce == r2.log[i].bce);
    }
    for (const auto& [id, emb] : r1.embeddings)
        CHECK((emb.array() == r2.embeddings.at(id).array()).all());
}

TEST_CASE("weight-sharing toggle trains clones with strictly more parameters") {
    const auto collection = small_collection(14);
    auto graphs = testing::build_graphs(collection);
    const auto anchors = testing::all_anchors(graphs);
    Hyperparams hp = small_hp();
    hp.epochs = 1;
    const TrainResult shared = train(graphs, anchors, hp);
    hp.weight_sharing = false;
    const TrainResult cloned = train(graphs, anchors, hp);
    CHECK(cloned.params.parameter_count() > shared.params.parameter_count());
}

TEST_CASE("single-graph reconstruction drives BCE below ln 2 within 200 steps") {
    SyntheticSpec spec;
    spec.n_datasets = 1;
    spec.n_cells = 200;
    spec.n_genes = 30;
    spec.n_modules = 2;
    spec.module_size = 8;
    spec.seed = 15;
    const auto collection = generate_synthetic(spec);
    auto graphs = testing::build_graphs(collection);
    Hyperparams hp = small_hp();
    hp.epochs = 200;
    hp.sim_loss = false;
    hp.infonce_loss = false;
    hp.model.shared_identity = true; // decoder reads the dataset layer output
    hp.embed_dim = hp.model.hidden;
    const TrainResult result = train(graphs, {}, hp);
    CHECK(result.log.back().bce < std::log(2.0));
}

TEST_CASE("shuffle-features control removes expression information but still trains") {
    const auto collection = small_collection(21);
    auto graphs = testing::build_graphs(collection);
    const auto anchors = testing::all_anchors(graphs);
    Hyperparams hp = small_hp();
    hp.epochs = 3;
    const TrainResult plain = train(graphs, anchors, hp);
    hp.shuffle_features = true;
    const TrainResult control = train(graphs, anchors, hp);
    for (const auto& row : control.log) CHECK(std::isfinite(row.total));
    // same graphs, same seed, different features -> different embeddings
    const auto& id = graphs[0].meta.dataset_id;
    CHECK((plain.embeddings.at(id) - control.embeddings.at(id)).cwiseAbs().maxCoeff() > 1e-9);
    // the control is itself deterministic
    const TrainResult control2 = train(graphs, anchors, hp);
    CHECK((control.embeddings.at(id).array() == control2.embeddings.at(id).array()).all());
}

TEST_CASE("node batching restricts graphs and anchors but keeps training finite") {
    const auto collection = small_collection(16);
    auto graphs = testing::build_graphs(collection);
    const auto anchors = testing::all_anchors(graphs);
    Hyperparams hp = small_hp();
    hp.epochs = 3;
    hp.node_batch = 16; // below the 40-gene graphs
    const TrainResult result = train(graphs, anchors, hp);
    for (const auto& row : result.log) CHECK(std::isfinite(row.total));
}

TEST_CASE("restrict_anchors remaps indices correctly") {
    AnchorSet a;
    a.common = {{0, 1}, {2, 3}, {4, 0}};
    a.lambda = (Vec(3) << 0.1, 0.5, 0.9).finished();
    a.diff_i = {1, 3};
    a.diff_neighbors_i = {{0, 2}, {4}};
    a.diff_j = {2};
    a.diff_neighbors_j = {{1}};

    const AnchorSet r = restrict_anchors(a, {0, 2, 3}, {1, 3}, 5, 4);
    // kept common pairs: (0,1)->(0,0) and (2,3)->(1,1)
    REQUIRE(r.common.size() == 2);
    CHECK(r.common[0] == std::pair<Index, Index>{0, 0});
    CHECK(r.common[1] == std::pair<Index, Index>{1, 1});
    CHECK(r.lambda(0) == 0.1);
    CHECK(r.lambda(1) == 0.5);
    // diff_i: gene 3 kept (-> index 2), gene 1 dropped
    CHECK(r.diff_i == std::vector<Index>{2});
    CHECK(r.diff_neighbors_i == std::vector<std::vector<Index>>{{}});
}

TEST_CASE("non-finite training data aborts with dataset context") {
    const auto collection = small_collection(17, 2);
    auto graphs = testing::build_graphs(collection);
    graphs[0].node_features(0, 0) = std::numeric_limits<Scalar>::infinity();
    const auto anchors = testing::all_anchors(graphs);
    Hyperparams hp = small_hp();
    hp.epochs = 1;
    try {
        train(graphs, anchors, hp);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("sim00") != std::string::npos);
    }
}

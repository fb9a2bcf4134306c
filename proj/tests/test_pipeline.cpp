#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "coexmap/io.hpp"
#include "coexmap/pipeline.hpp"
#include "coexmap/preprocess.hpp"

using namespace coexmap;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("coexmap_pipe_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

SyntheticSpec tiny_spec(std::uint64_t seed) {
    SyntheticSpec spec;
    spec.n_datasets = 3;
    spec.n_cells = 250;
    spec.n_genes = 40;
    spec.n_modules = 2;
    spec.module_size = 8;
    spec.shared_gene_fraction = 0.6;
    spec.seed = seed;
    return spec;
}

PipelineConfig tiny_config(const std::filesystem::path& dir) {
    PipelineConfig cfg;
    cfg.manifest = dir / "manifest.json";
    cfg.out_dir = dir / "out";
    cfg.seed = 1;
    cfg.preprocess.hvg_count = 30;
    cfg.preprocess.se_count = 30;
    cfg.train.epochs = 10;
    cfg.train.seed = 1;
    cfg.train.model.hidden = 12;
    cfg.train.model.heads = 2;
    cfg.train.model.decoder_hidden = 4;
    cfg.train.embed_dim = 6;
    cfg.train.contrastive_samples = 8;
    cfg.metrics.knn = 10;
    cfg.metrics.perplexity = 10;
    return cfg;
}

} // namespace

TEST_CASE("simulate: default-ish spec writes manifest + truth; same seed, same bytes") {
    const auto dir1 = temp_dir("sim1");
    const auto dir2 = temp_dir("sim2");
    const SyntheticSpec spec = tiny_spec(9);
    const SimulateResult r1 = run_simulate(spec, dir1);
    const SimulateResult r2 = run_simulate(spec, dir2);
    CHECK(r1.n_datasets == 3);
    CHECK(std::filesystem::exists(r1.truth));

    const auto collection = load_collection(r1.manifest);
    CHECK(collection.size() == 3);

    for (const auto& name : {"sim00/counts.mtx", "sim01/counts.mtx", "manifest.json"}) {
        CHECK(io::hash_file(dir1 / name) == io::hash_file(dir2 / name));
    }
}

TEST_CASE("build-graphs: bundles per dataset, cache hit on rerun, rebuild on change") {
    const auto dir = temp_dir("build");
    run_simulate(tiny_spec(10), dir);
    PipelineConfig cfg = tiny_config(dir);

    const BuildResult first = run_build_graphs(cfg);
    CHECK(first.bundles.size() == 3);
    CHECK(first.skipped.empty());
    CHECK(std::filesystem::exists(cfg.out_dir / "graphs" / "sim00" / "features.bin"));
    CHECK(std::filesystem::exists(cfg.out_dir / "anchors" / "sim00__sim01.json"));

    const BuildResult second = run_build_graphs(cfg);
    CHECK(second.skipped.size() == 3);

    // touching an input invalidates only that dataset's cache
    {
        std::ofstream app(dir / "sim01" / "counts.mtx", std::ios::app);
        app << "% nudge\n";
    }
    const BuildResult third = run_build_graphs(cfg);
    CHECK(third.skipped.size() == 2);
}

TEST_CASE("build-graphs routes spatial datasets through the SE-gene test") {
    const auto dir = temp_dir("spatial");
    auto collection = generate_synthetic(tiny_spec(11));
    // Attach coordinates to dataset 2 and mark it spatial.
    auto& ds = collection.datasets[2];
    ds.meta.modality = Modality::Spatial;
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<Scalar> unif(0, 10);
    Mat coords(ds.counts.n_cells(), 2);
    for (Index i = 0; i < coords.rows(); ++i) {
        coords(i, 0) = unif(rng);
        coords(i, 1) = unif(rng);
    }
    ds.counts.coords = coords;
    save_collection(dir / "manifest.json", collection.datasets);

    PipelineConfig cfg = tiny_config(dir);
    run_build_graphs(cfg);

    // Expected SE selection computed independently.
    const auto reloaded = load_collection(cfg.manifest);
    const CountMatrix qc = qc_filter(reloaded[2].counts, cfg.preprocess.qc());
    const SparkxResult sres = sparkx_test(qc);
    const auto expect = select_se_genes(sres, qc.genes, std::min<Index>(cfg.preprocess.se_count, qc.n_genes()));
    std::vector<std::string> expect_names;
    for (Index idx : expect) expect_names.push_back(qc.genes[static_cast<std::size_t>(idx)]);

    const GeneGraph g = load_graph(cfg.out_dir / "graphs" / "sim02");
    CHECK(g.genes == expect_names);

    // scRNA datasets pick HVGs instead.
    const CountMatrix qc0 = qc_filter(reloaded[0].counts, cfg.preprocess.qc());
    const NBFit fit = fit_nb_glm(qc0);
    const ResidualMatrix resid = pearson_residuals(qc0, fit);
    const auto hvgs = select_hvgs(resid, std::min<Index>(cfg.preprocess.hvg_count, qc0.n_genes()));
    std::vector<std::string> hvg_names;
    for (Index idx : hvgs) hvg_names.push_back(qc0.genes[static_cast<std::size_t>(idx)]);
    const GeneGraph g0 = load_graph(cfg.out_dir / "graphs" / "sim00");
    CHECK(g0.genes == hvg_names);
}

TEST_CASE("train + embed: artifacts, sidecars, checkpoint fidelity, determinism") {
    const auto dir = temp_dir("train");
    run_simulate(tiny_spec(13), dir);
    PipelineConfig cfg = tiny_config(dir);
    run_build_graphs(cfg);

    const TrainArtifacts art = run_train(cfg);
    CHECK(std::filesystem::exists(art.checkpoint));
    CHECK(std::filesystem::exists(art.embeddings));
    CHECK(std::filesystem::exists(art.train_log));

    // provenance sidecar carries build id, seed, config hash
    const std::string sidecar = io::read_text(art.embeddings.string() + ".meta.json");
    CHECK(sidecar.find("config_hash") != std::string::npos);
    CHECK(sidecar.find("seed") != std::string::npos);
    CHECK(sidecar.find("build") != std::string::npos);

    const auto emb_hash = io::hash_file(art.embeddings);
    const auto log_hash = io::hash_file(art.train_log);

    // embed from the checkpoint reproduces the embeddings byte-for-byte
    run_embed(cfg);
    CHECK(io::hash_file(cfg.out_dir / "embeddings.csv") == emb_hash);

    // full rerun with the same seed is byte-identical
    const TrainArtifacts again = run_train(cfg);
    CHECK(io::hash_file(again.embeddings) == emb_hash);
    CHECK(io::hash_file(again.train_log) == log_hash);

    // different seed changes the trajectory
    PipelineConfig cfg2 = cfg;
    cfg2.seed = 2;
    cfg2.train.seed = 2;
    const TrainArtifacts other = run_train(cfg2);
    CHECK(io::hash_file(other.embeddings) != emb_hash);
}

TEST_CASE("evaluate: two embedding files produce a ranked two-method report") {
    const auto dir = temp_dir("eval");
    run_simulate(tiny_spec(14), dir);
    PipelineConfig cfg = tiny_config(dir);
    run_build_graphs(cfg);
    const TrainArtifacts art = run_train(cfg);

    // Second method: random embeddings over the same keys.
    EmbeddingTable table = read_embeddings(art.embeddings);
    std::mt19937_64 rng(15);
    std::normal_distribution<Scalar> normal;
    for (Index i = 0; i < table.values.rows(); ++i)
        for (Index j = 0; j < table.values.cols(); ++j) table.values(i, j) = normal(rng);
    const auto random_path = cfg.out_dir / "random.csv";
    write_embeddings(random_path, table);

    const MetricsReport report = run_evaluate(cfg, {art.embeddings, random_path}, {"trained", "random"});
    REQUIRE(report.methods.size() == 2);
    CHECK(report.avg_rank(0) >= 1.0);
    CHECK(report.avg_rank(0) <= 2.0);
    CHECK(report.avg_rank(1) >= 1.0);
    CHECK(report.avg_score.minCoeff() >= 0.0);
    CHECK(report.avg_score.maxCoeff() <= 1.0);
    CHECK(std::filesystem::exists(cfg.out_dir / "metrics_report.json"));
    CHECK(std::filesystem::exists(cfg.out_dir / "metrics_plot.csv"));

    CHECK_THROWS_AS(run_evaluate(cfg, {art.embeddings}, {"one"}), ConfigError);
}

TEST_CASE("planted truth round-trips through the evaluation harness") {
    const auto dir = temp_dir("truth");
    run_simulate(tiny_spec(16), dir);
    PipelineConfig cfg = tiny_config(dir);
    run_build_graphs(cfg);
    const TrainArtifacts art = run_train(cfg);

    const PlantedTruth truth = load_planted_truth(dir / "planted_truth.json");
    const auto graphs = load_graph_collection(cfg);
    const EmbeddingTable table = read_embeddings(art.embeddings);

    // Planted adjacency restricted to each graph's gene set.
    std::vector<Mat> adjacency;
    for (std::size_t d = 0; d < graphs.size(); ++d) {
        const auto& tds = truth.datasets[d];
        std::map<std::string, Index> truth_index;
        for (std::size_t k = 0; k < tds.genes.size(); ++k)
            truth_index[tds.genes[k]] = static_cast<Index>(k);
        const Index p = graphs[d].n_nodes();
        Mat adj = Mat::Zero(p, p);
        for (Index a = 0; a < p; ++a)
            for (Index b = a + 1; b < p; ++b) {
                const auto ia = truth_index.find(graphs[d].genes[static_cast<std::size_t>(a)]);
                const auto ib = truth_index.find(graphs[d].genes[static_cast<std::size_t>(b)]);
                if (ia == truth_index.end() || ib == truth_index.end()) continue;
                const int ma = tds.module_of_gene[static_cast<std::size_t>(ia->second)];
                const int mb = tds.module_of_gene[static_cast<std::size_t>(ib->second)];
                if (ma >= 0 && ma == mb) adj(a, b) = adj(b, a) = 1.0;
            }
        adjacency.push_back(std::move(adj));
    }
    const Scalar auc = edge_auc_against(table, graphs, adjacency);
    CHECK(auc >= 0.0);
    CHECK(auc <= 1.0);
}

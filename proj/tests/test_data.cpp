#include <doctest.h>

#include <filesystem>

#include "coexmap/data.hpp"
#include "coexmap/io.hpp"

using namespace coexmap;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("coexmap_data_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

CountMatrix make_counts(const Mat& dense, std::vector<std::string> genes,
                        std::vector<std::string> barcodes) {
    CountMatrix m;
    std::vector<Eigen::Triplet<Count, std::int64_t>> trips;
    for (Index i = 0; i < dense.rows(); ++i)
        for (Index j = 0; j < dense.cols(); ++j)
            if (dense(i, j) != 0) trips.emplace_back(i, j, static_cast<Count>(dense(i, j)));
    m.values.resize(dense.rows(), dense.cols());
    m.values.setFromTriplets(trips.begin(), trips.end());
    m.genes = std::move(genes);
    m.barcodes = std::move(barcodes);
    return m;
}

} // namespace

TEST_CASE("collection save/load round-trip preserves content and order") {
    const auto dir = temp_dir("roundtrip");
    Mat d(3, 4);
    d << 1, 0, 2, 0, 0, 5, 0, 0, 3, 0, 0, 7;
    Dataset ds;
    ds.meta = {"d0", "heart", Modality::ScRna, "human", "", std::nullopt};
    ds.counts = make_counts(d, {"gA", "gB", "gC", "gD"}, {"b0", "b1", "b2"});
    save_collection(dir / "manifest.json", {ds});
    const auto back = load_collection(dir / "manifest.json");
    REQUIRE(back.size() == 1);
    CHECK(back[0].counts.genes == ds.counts.genes);
    CHECK(back[0].counts.barcodes == ds.counts.barcodes);
    CHECK(Mat(back[0].counts.dense()) == d);
}

TEST_CASE("manifest with two entries loads two matrices with matching dims") {
    const auto dir = temp_dir("two");
    Mat d = Mat::Constant(2, 3, 4.0);
    Dataset a, b;
    a.meta = {"a", "heart", Modality::ScRna, "human", "", std::nullopt};
    a.counts = make_counts(d, {"g1", "g2", "g3"}, {"c1", "c2"});
    b.meta = {"b", "lung", Modality::ScAtacActivity, "human", "", std::nullopt};
    b.counts = make_counts(d, {"g1", "g2", "g3"}, {"c1", "c2"});
    save_collection(dir / "manifest.json", {a, b});
    const auto back = load_collection(dir / "manifest.json");
    REQUIRE(back.size() == 2);
    CHECK(back[0].counts.n_genes() == 3);
    CHECK(back[1].counts.n_cells() == 2);
}

TEST_CASE("spatial entry without coords errors") {
    const auto dir = temp_dir("spatial");
    Mat d = Mat::Constant(2, 2, 3.0);
    Dataset ds;
    ds.meta = {"s0", "cortex", Modality::Spatial, "human", "", std::nullopt};
    ds.counts = make_counts(d, {"g1", "g2"}, {"c1", "c2"});
    save_collection(dir / "manifest.json", {ds}); // no coords written
    try {
        load_collection(dir / "manifest.json");
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("coords required") != std::string::npos);
    }
}

TEST_CASE("qc_filter thresholds") {
    // 4 cells x 5 genes; gene names include a mitochondrial one.
    Mat d = Mat::Zero(4, 5);
    // cell 0: total 150 -> dropped; cell 1: exactly 200 -> kept
    d.row(0) << 150, 0, 0, 0, 0;
    d.row(1) << 50, 50, 50, 25, 25;
    d.row(2) << 100, 100, 50, 0, 10;
    d.row(3) << 100, 100, 50, 0, 10;
    CountMatrix m = make_counts(d, {"G1", "G2", "G3", "G4", "MT-CO1"}, {"c0", "c1", "c2", "c3"});

    const CountMatrix out = qc_filter(m);
    // c0 dropped (150 < 200)
    CHECK(out.barcodes == std::vector<std::string>{"c1", "c2", "c3"});
    // G4 detected in 1 surviving cell -> dropped; MT-CO1 dropped by prefix
    CHECK(out.genes == std::vector<std::string>{"G1", "G2", "G3"});
}

TEST_CASE("qc_filter drops gene detected in exactly two cells") {
    Mat d = Mat::Constant(4, 3, 100.0);
    d(0, 2) = 0;
    d(1, 2) = 0; // gene 2 nonzero in exactly 2 cells
    CountMatrix m = make_counts(d, {"A", "B", "C"}, {"c0", "c1", "c2", "c3"});
    const CountMatrix out = qc_filter(m);
    CHECK(out.genes == std::vector<std::string>{"A", "B"});
}

TEST_CASE("qc_filter errors when everything is filtered") {
    Mat d = Mat::Constant(2, 2, 1.0);
    CountMatrix m = make_counts(d, {"A", "B"}, {"c0", "c1"});
    CHECK_THROWS_AS(qc_filter(m), DataError);
}

TEST_CASE("qc_filter is idempotent on generator output") {
    SyntheticSpec spec;
    spec.n_datasets = 1;
    spec.n_cells = 300;
    spec.n_genes = 60;
    spec.seed = 11;
    const auto collection = generate_synthetic(spec);
    const CountMatrix once = qc_filter(collection.datasets[0].counts);
    const CountMatrix twice = qc_filter(once);
    CHECK(once.barcodes == twice.barcodes);
    CHECK(once.genes == twice.genes);
    CHECK(Mat(once.dense()) == Mat(twice.dense()));
}

TEST_CASE("synthetic generator: determinism and planted structure") {
    SyntheticSpec spec;
    spec.n_datasets = 2;
    spec.n_cells = 400;
    spec.n_genes = 50;
    spec.n_modules = 2;
    spec.module_size = 10;
    spec.seed = 5;

    const auto c1 = generate_synthetic(spec);
    const auto c2 = generate_synthetic(spec);
    REQUIRE(c1.datasets.size() == 2);
    for (std::size_t d = 0; d < 2; ++d) {
        CHECK(Mat(c1.datasets[d].counts.dense()) == Mat(c2.datasets[d].counts.dense()));
        CHECK(c1.datasets[d].counts.genes == c2.datasets[d].counts.genes);
    }

    // Two planted blocks recorded, truth edges = within-module pairs.
    const auto& truth = c1.truth.datasets[0];
    CHECK(truth.true_edges.size() == 2 * (10 * 9 / 2));
    int in_module = 0;
    for (int m : truth.module_of_gene)
        if (m >= 0) ++in_module;
    CHECK(in_module == 20);

    // Shared gene names reused across datasets.
    int shared = 0;
    for (const auto& g : c1.datasets[0].counts.genes)
        if (std::find(c1.datasets[1].counts.genes.begin(), c1.datasets[1].counts.genes.end(), g) !=
            c1.datasets[1].counts.genes.end())
            ++shared;
    CHECK(shared == 25);
}

TEST_CASE("synthetic generator: latent block correlation matches the target") {
    SyntheticSpec spec;
    spec.n_datasets = 1;
    spec.n_cells = 2000;
    spec.n_genes = 40;
    spec.n_modules = 1;
    spec.module_size = 10;
    spec.module_correlation = 0.8;
    spec.seed = 17;
    const auto collection = generate_synthetic(spec);
    const Mat& z = collection.truth.latent[0];

    auto corr = [&](Index a, Index b) {
        const Vec za = z.col(a).array() - z.col(a).mean();
        const Vec zb = z.col(b).array() - z.col(b).mean();
        return za.dot(zb) / std::sqrt(za.squaredNorm() * zb.squaredNorm());
    };
    Scalar within = 0;
    int n_within = 0;
    for (Index a = 0; a < 10; ++a)
        for (Index b = a + 1; b < 10; ++b) {
            within += corr(a, b);
            ++n_within;
        }
    within /= n_within;
    CHECK(within == doctest::Approx(0.8).epsilon(0.0625)); // +-0.05 absolute
    // Across blocks ~ 0.
    Scalar across = corr(0, 15);
    CHECK(std::abs(across) < 0.1);
}

TEST_CASE("synthetic generator satisfies the Poisson measurement model marginally") {
    SyntheticSpec spec;
    spec.n_datasets = 1;
    spec.n_cells = 2000;
    spec.n_genes = 30;
    spec.n_modules = 0;
    spec.module_size = 5;
    spec.seed = 23;
    const auto collection = generate_synthetic(spec);
    const Mat x = collection.datasets[0].counts.dense();
    const Vec s = collection.truth.datasets[0].true_depth;

    for (Index g = 0; g < spec.n_genes; ++g) {
        const Vec ratio = x.col(g).cwiseQuotient(s);
        const Scalar mean = ratio.mean();
        const Scalar sd = std::sqrt((ratio.array() - mean).square().sum() /
                                    static_cast<Scalar>(spec.n_cells - 1));
        const Scalar se = sd / std::sqrt(static_cast<Scalar>(spec.n_cells));
        const Scalar mu = collection.truth.datasets[0].latent_mean(g);
        CHECK(std::abs(mean - mu) < 3 * se + 1e-12);
    }
}

TEST_CASE("planted truth round-trips through disk") {
    SyntheticSpec spec;
    spec.n_datasets = 2;
    spec.n_cells = 50;
    spec.n_genes = 20;
    spec.n_modules = 1;
    spec.module_size = 5;
    spec.seed = 3;
    const auto dir = temp_dir("truth");
    const auto collection = generate_synthetic(spec);
    save_planted_truth(dir / "truth.json", spec, collection.truth);
    const PlantedTruth back = load_planted_truth(dir / "truth.json");
    REQUIRE(back.datasets.size() == 2);
    CHECK(back.module_correlation == collection.truth.module_correlation);
    CHECK(back.datasets[0].genes == collection.truth.datasets[0].genes);
    CHECK(back.datasets[0].true_edges == collection.truth.datasets[0].true_edges);
    CHECK((back.datasets[0].latent_mean.array() == collection.truth.datasets[0].latent_mean.array()).all());
}

TEST_CASE("infeasible synthetic spec is rejected") {
    SyntheticSpec spec;
    spec.n_genes = 10;
    spec.n_modules = 3;
    spec.module_size = 5;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
}

// Pipeline driver: simulate -> build-graphs -> train -> embed -> evaluate.
// Exit codes: 0 success, 1 config error, 2 data error, 3 numeric error.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "coexmap/io.hpp"
#include "coexmap/parallel.hpp"
#include "coexmap/pipeline.hpp"
#include "coexmap/version.hpp"

using namespace coexmap;

namespace {

PipelineConfig load_config(const std::string& path, int threads, long long seed_override) {
    PipelineConfig cfg = PipelineConfig::load(path);
    if (threads > 0) cfg.threads = threads;
    if (seed_override >= 0) {
        cfg.seed = static_cast<std::uint64_t>(seed_override);
        cfg.train.seed = cfg.seed;
    }
    return cfg;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"gene co-expression graph embedding pipeline"};
    app.set_version_flag("--version", std::string(kBuildId));
    app.require_subcommand(1);
    app.fallthrough(); // global options may follow the subcommand

    int threads = 0;
    long long seed_override = -1;
    app.add_option("--threads", threads, "worker thread cap (also COEXMAP_THREADS)");
    app.add_option("--seed", seed_override, "override the config seed");

    // simulate
    auto* sim = app.add_subcommand("simulate", "generate a synthetic dataset collection");
    std::string sim_spec_path, sim_out;
    sim->add_option("--spec", sim_spec_path, "synthetic spec JSON (defaults used when omitted)");
    sim->add_option("--out", sim_out, "output directory")->required();

    // build-graphs
    auto* build = app.add_subcommand("build-graphs", "QC, normalization, co-expression graphs");
    std::string build_config;
    build->add_option("--config", build_config, "pipeline config JSON")->required();

    // train
    auto* tr = app.add_subcommand("train", "train the embedding model");
    std::string train_config;
    bool no_sim = false, no_infonce = false, no_weight_sharing = false, shuffle_features = false;
    int epochs_override = -1;
    tr->add_option("--config", train_config, "pipeline config JSON")->required();
    tr->add_flag("--no-sim", no_sim, "disable the weighted similarity term");
    tr->add_flag("--no-infonce", no_infonce, "disable the contrastive term");
    tr->add_flag("--no-weight-sharing", no_weight_sharing, "clone shared layers per dataset");
    tr->add_flag("--shuffle-features", shuffle_features, "replace node features with one shared matrix");
    tr->add_option("--epochs", epochs_override, "override epoch count");

    // embed
    auto* em = app.add_subcommand("embed", "recompute embeddings from a checkpoint");
    std::string embed_config;
    em->add_option("--config", embed_config, "pipeline config JSON")->required();

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score embedding files and aggregate ranks");
    std::string eval_config;
    std::vector<std::string> eval_embeddings, eval_names;
    ev->add_option("--config", eval_config, "pipeline config JSON")->required();
    ev->add_option("--embeddings", eval_embeddings, "embedding CSV files")->required()->expected(-2);
    ev->add_option("--names", eval_names, "method name per embedding file");

    CLI11_PARSE(app, argc, argv);

    try {
        if (threads > 0) set_thread_cap(threads);

        if (sim->parsed()) {
            SyntheticSpec spec;
            if (!sim_spec_path.empty()) spec = synthetic_spec_from_json(io::read_text(sim_spec_path));
            if (seed_override >= 0) spec.seed = static_cast<std::uint64_t>(seed_override);
            const SimulateResult res = run_simulate(spec, sim_out);
            std::cout << "wrote " << res.n_datasets << " datasets to " << res.manifest.string() << "\n"
                      << "planted truth: " << res.truth.string() << "\n";
        } else if (build->parsed()) {
            const PipelineConfig cfg = load_config(build_config, threads, seed_override);
            const BuildResult res = run_build_graphs(cfg);
            for (const auto& b : res.bundles) std::cout << "bundle: " << b.string() << "\n";
            for (const auto& s : res.skipped) std::cout << "cached:  " << s << "\n";
        } else if (tr->parsed()) {
            PipelineConfig cfg = load_config(train_config, threads, seed_override);
            if (no_sim) cfg.train.sim_loss = false;
            if (no_infonce) cfg.train.infonce_loss = false;
            if (no_weight_sharing) cfg.train.weight_sharing = false;
            if (shuffle_features) cfg.train.shuffle_features = true;
            if (epochs_override >= 0) cfg.train.epochs = epochs_override;
            const TrainArtifacts art = run_train(cfg);
            std::cout << "checkpoint: " << art.checkpoint.string() << "\n"
                      << "embeddings: " << art.embeddings.string() << "\n"
                      << "train log:  " << art.train_log.string() << "\n"
                      << "wall time:  " << art.wall_seconds << " s\n";
        } else if (em->parsed()) {
            const PipelineConfig cfg = load_config(embed_config, threads, seed_override);
            std::cout << "embeddings: " << run_embed(cfg).string() << "\n";
        } else if (ev->parsed()) {
            const PipelineConfig cfg = load_config(eval_config, threads, seed_override);
            std::vector<std::filesystem::path> files(eval_embeddings.begin(), eval_embeddings.end());
            std::vector<std::string> names = eval_names;
            if (names.empty())
                for (const auto& f : files) names.push_back(std::filesystem::path(f).stem().string());
            if (names.size() != files.size())
                throw ConfigError("evaluate: --names count must match --embeddings");
            const MetricsReport report = run_evaluate(cfg, files, names);
            std::cout << report_table(report);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

#include "coexmap/pipeline.hpp"

#include <algorithm>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "coexmap/io.hpp"
#include "coexmap/parallel.hpp"
#include "coexmap/preprocess.hpp"
#include "coexmap/version.hpp"

namespace coexmap {

QcParams PreprocessConfig::qc() const {
    QcParams q;
    q.mito_prefixes = mito_prefixes;
    return q;
}

namespace {

nlohmann::json hyperparams_to_json(const Hyperparams& hp) {
    nlohmann::json j;
    j["epochs"] = hp.epochs;
    j["lr_encoder"] = hp.lr_encoder;
    j["lr_decoder"] = hp.lr_decoder;
    j["lambda_c"] = hp.lambda_c;
    j["embed_dim"] = hp.embed_dim;
    j["contrastive_samples"] = hp.contrastive_samples;
    j["tau"] = hp.tau;
    j["node_batch"] = hp.node_batch;
    j["sim_loss"] = hp.sim_loss;
    j["infonce_loss"] = hp.infonce_loss;
    j["weight_sharing"] = hp.weight_sharing;
    j["shuffle_features"] = hp.shuffle_features;
    j["checkpoint_every"] = hp.checkpoint_every;
    j["hidden"] = hp.model.hidden;
    j["heads"] = hp.model.heads;
    j["decoder_hidden"] = hp.model.decoder_hidden;
    return j;
}

void hyperparams_from_json(const nlohmann::json& j, Hyperparams* hp) {
    if (j.contains("epochs")) hp->epochs = j.at("epochs").get<int>();
    if (j.contains("lr_encoder")) hp->lr_encoder = j.at("lr_encoder").get<Scalar>();
    if (j.contains("lr_decoder")) hp->lr_decoder = j.at("lr_decoder").get<Scalar>();
    if (j.contains("lambda_c")) hp->lambda_c = j.at("lambda_c").get<Scalar>();
    if (j.contains("embed_dim")) hp->embed_dim = j.at("embed_dim").get<Index>();
    if (j.contains("contrastive_samples")) hp->contrastive_samples = j.at("contrastive_samples").get<Index>();
    if (j.contains("tau")) hp->tau = j.at("tau").get<Scalar>();
    if (j.contains("node_batch")) hp->node_batch = j.at("node_batch").get<Index>();
    if (j.contains("sim_loss")) hp->sim_loss = j.at("sim_loss").get<bool>();
    if (j.contains("infonce_loss")) hp->infonce_loss = j.at("infonce_loss").get<bool>();
    if (j.contains("weight_sharing")) hp->weight_sharing = j.at("weight_sharing").get<bool>();
    if (j.contains("shuffle_features")) hp->shuffle_features = j.at("shuffle_features").get<bool>();
    if (j.contains("checkpoint_every")) hp->checkpoint_every = j.at("checkpoint_every").get<int>();
    if (j.contains("hidden")) hp->model.hidden = j.at("hidden").get<Index>();
    if (j.contains("heads")) hp->model.heads = j.at("heads").get<int>();
    if (j.contains("decoder_hidden")) hp->model.decoder_hidden = j.at("decoder_hidden").get<Index>();
}

} // namespace

std::string PipelineConfig::to_json() const {
    nlohmann::json j;
    j["manifest"] = manifest.string();
    j["out_dir"] = out_dir.string();
    j["seed"] = seed;
    j["threads"] = threads;
    j["preprocess"] = {{"hvg_count", preprocess.hvg_count},
                       {"se_count", preprocess.se_count},
                       {"alpha", preprocess.alpha},
                       {"mito_prefixes", preprocess.mito_prefixes}};
    j["metrics"] = {{"knn", metrics.knn},
                    {"resolution", metrics.resolution},
                    {"perplexity", metrics.perplexity}};
    j["train"] = hyperparams_to_json(train);
    return j.dump(2) + "\n";
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text,
                                              const std::filesystem::path& base_dir) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config is not valid JSON");
    PipelineConfig cfg;
    if (!j.contains("manifest") || !j.contains("out_dir"))
        throw ConfigError("config requires 'manifest' and 'out_dir'");
    cfg.manifest = j.at("manifest").get<std::string>();
    cfg.out_dir = j.at("out_dir").get<std::string>();
    if (cfg.manifest.is_relative()) cfg.manifest = base_dir / cfg.manifest;
    if (cfg.out_dir.is_relative()) cfg.out_dir = base_dir / cfg.out_dir;
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
    if (j.contains("preprocess")) {
        const auto& p = j.at("preprocess");
        if (p.contains("hvg_count")) cfg.preprocess.hvg_count = p.at("hvg_count").get<Index>();
        if (p.contains("se_count")) cfg.preprocess.se_count = p.at("se_count").get<Index>();
        if (p.contains("alpha")) cfg.preprocess.alpha = p.at("alpha").get<Scalar>();
        if (p.contains("mito_prefixes"))
            cfg.preprocess.mito_prefixes = p.at("mito_prefixes").get<std::vector<std::string>>();
    }
    if (j.contains("metrics")) {
        const auto& m = j.at("metrics");
        if (m.contains("knn")) cfg.metrics.knn = m.at("knn").get<int>();
        if (m.contains("resolution")) cfg.metrics.resolution = m.at("resolution").get<Scalar>();
        if (m.contains("perplexity")) cfg.metrics.perplexity = m.at("perplexity").get<Scalar>();
    }
    if (j.contains("train")) hyperparams_from_json(j.at("train"), &cfg.train);
    cfg.train.seed = cfg.seed;
    return cfg;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
    return from_json_text(io::read_text(path), path.parent_path());
}

std::string PipelineConfig::config_hash() const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(io::hash_string(to_json())));
    return buf;
}

void write_meta_sidecar(const std::filesystem::path& artifact, const PipelineConfig& cfg,
                        const std::map<std::string, std::string>& extra) {
    nlohmann::json j;
    j["build"] = kBuildId;
    j["seed"] = cfg.seed;
    j["config_hash"] = cfg.config_hash();
    for (const auto& [k, v] : extra) j[k] = v;
    io::write_text(artifact.string() + ".meta.json", j.dump(2) + "\n");
}

SyntheticSpec synthetic_spec_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("synthetic spec is not valid JSON");
    SyntheticSpec spec;
    if (j.contains("n_datasets")) spec.n_datasets = j.at("n_datasets").get<Index>();
    if (j.contains("n_cells")) spec.n_cells = j.at("n_cells").get<Index>();
    if (j.contains("n_genes")) spec.n_genes = j.at("n_genes").get<Index>();
    if (j.contains("n_modules")) spec.n_modules = j.at("n_modules").get<Index>();
    if (j.contains("module_size")) spec.module_size = j.at("module_size").get<Index>();
    if (j.contains("shared_gene_fraction")) spec.shared_gene_fraction = j.at("shared_gene_fraction").get<Scalar>();
    if (j.contains("module_correlation")) spec.module_correlation = j.at("module_correlation").get<Scalar>();
    if (j.contains("base_mean")) spec.base_mean = j.at("base_mean").get<Scalar>();
    if (j.contains("dispersion")) spec.dispersion = j.at("dispersion").get<Scalar>();
    if (j.contains("depth_mean")) spec.depth_mean = j.at("depth_mean").get<Scalar>();
    if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
    spec.validate();
    return spec;
}

SimulateResult run_simulate(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    SyntheticCollection collection = generate_synthetic(spec);
    SimulateResult result;
    result.manifest = out_dir / "manifest.json";
    result.truth = out_dir / "planted_truth.json";
    result.n_datasets = static_cast<Index>(collection.datasets.size());
    char seed_buf[32];
    std::snprintf(seed_buf, sizeof(seed_buf), "%llu", static_cast<unsigned long long>(spec.seed));
    save_collection(result.manifest, collection.datasets,
                    {{"build", kBuildId}, {"seed", seed_buf}});
    save_planted_truth(result.truth, spec, collection.truth);
    return result;
}

namespace {

std::string dataset_input_hash(const PipelineConfig& cfg, const Dataset& ds,
                               const std::filesystem::path& base) {
    std::uint64_t h = io::hash_string(cfg.config_hash());
    const auto counts = ds.meta.counts_path.is_absolute() ? ds.meta.counts_path : base / ds.meta.counts_path;
    h = io::hash_file(counts, h);
    if (ds.meta.coords_path) {
        const auto coords = ds.meta.coords_path->is_absolute() ? *ds.meta.coords_path : base / *ds.meta.coords_path;
        h = io::hash_file(coords, h);
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace

BuildResult run_build_graphs(const PipelineConfig& cfg) {
    if (cfg.threads > 0) set_thread_cap(cfg.threads);
    const auto collection = load_collection(cfg.manifest);
    const auto base = cfg.manifest.parent_path();
    const auto graphs_dir = cfg.out_dir / "graphs";
    std::filesystem::create_directories(graphs_dir);

    BuildResult result;
    std::vector<GeneGraph> graphs;
    for (const auto& ds : collection) {
        const auto bundle_dir = graphs_dir / ds.meta.dataset_id;
        const std::string input_hash = dataset_input_hash(cfg, ds, base);
        if (bundle_input_hash(bundle_dir) == input_hash) {
            result.skipped.push_back(ds.meta.dataset_id);
            result.bundles.push_back(bundle_dir);
            graphs.push_back(load_graph(bundle_dir));
            continue;
        }
        try {
            CountMatrix qc = qc_filter(ds.counts, cfg.preprocess.qc());

            // Spatial datasets route through the SE-gene test before
            // normalization; others rank HVGs by residual variance.
            std::vector<Index> selected;
            NBFit fit = fit_nb_glm(qc);
            ResidualMatrix residuals = pearson_residuals(qc, fit);
            if (ds.meta.modality == Modality::Spatial) {
                SparkxResult sres = sparkx_test(qc);
                selected = select_se_genes(sres, qc.genes, std::min(cfg.preprocess.se_count, qc.n_genes()));
                // Per-kernel statistics and p-values, one row per gene.
                std::ostringstream tsv;
                tsv << "gene";
                for (const auto& kr : sres.kernels)
                    tsv << "\tstatistic_" << kernel_name(kr.kernel) << "\tp_" << kernel_name(kr.kernel);
                tsv << "\tcombined_p\n";
                for (Index g = 0; g < qc.n_genes(); ++g) {
                    tsv << qc.genes[static_cast<std::size_t>(g)];
                    for (const auto& kr : sres.kernels)
                        tsv << "\t" << io::format_double(kr.statistic(g)) << "\t"
                            << io::format_double(kr.pval(g));
                    tsv << "\t" << io::format_double(sres.combined_p(g)) << "\n";
                }
                std::filesystem::create_directories(bundle_dir);
                io::write_text(bundle_dir / "sparkx.tsv", tsv.str());
            } else {
                selected = select_hvgs(residuals, std::min(cfg.preprocess.hvg_count, qc.n_genes()));
            }

            CoexpressionEstimate est = estimate_moments_irls(qc, selected);
            cscore_test(est, qc, selected);
            EdgeSet edges = build_edges(est.pvals, cfg.preprocess.alpha);

            GraphMeta meta{ds.meta.dataset_id, ds.meta.tissue, ds.meta.modality, ds.meta.species};
            GeneGraph g = assemble_graph(residuals, selected, edges, meta, &est.rho, &est.pvals);
            char seed_buf[32];
            std::snprintf(seed_buf, sizeof(seed_buf), "%llu", static_cast<unsigned long long>(cfg.seed));
            save_graph(bundle_dir, g,
                       {{"input_hash", input_hash},
                        {"build", kBuildId},
                        {"seed", seed_buf},
                        {"config_hash", cfg.config_hash()}});
            graphs.push_back(std::move(g));
            result.bundles.push_back(bundle_dir);
        } catch (const std::exception& e) {
            throw DataError("build-graphs failed for dataset " + ds.meta.dataset_id + ": " + e.what());
        }
    }

    // Anchor cache: index pairs, diff lists and lambda per graph pair.
    const auto anchor_dir = cfg.out_dir / "anchors";
    std::filesystem::create_directories(anchor_dir);
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        for (std::size_t j = i + 1; j < graphs.size(); ++j) {
            const AnchorSet a = anchor_sets(graphs[i], graphs[j]);
            nlohmann::json aj;
            aj["dataset_i"] = graphs[i].meta.dataset_id;
            aj["dataset_j"] = graphs[j].meta.dataset_id;
            nlohmann::json common = nlohmann::json::array();
            for (const auto& [x, y] : a.common) common.push_back({x, y});
            aj["common"] = std::move(common);
            aj["diff_i"] = a.diff_i;
            aj["diff_j"] = a.diff_j;
            aj["lambda"] = std::vector<Scalar>(a.lambda.data(), a.lambda.data() + a.lambda.size());
            io::write_text(anchor_dir / (graphs[i].meta.dataset_id + "__" + graphs[j].meta.dataset_id + ".json"),
                           aj.dump() + "\n");
        }
    }
    return result;
}

std::vector<GeneGraph> load_graph_collection(const PipelineConfig& cfg) {
    const auto collection = load_collection(cfg.manifest);
    std::vector<GeneGraph> graphs;
    for (const auto& ds : collection) {
        const auto dir = cfg.out_dir / "graphs" / ds.meta.dataset_id;
        if (!std::filesystem::exists(dir / "metadata.json"))
            throw DataError("graph bundle missing for " + ds.meta.dataset_id + " (run build-graphs)");
        graphs.push_back(load_graph(dir));
    }
    return graphs;
}

std::map<std::pair<std::size_t, std::size_t>, AnchorSet> load_anchor_cache(
    const PipelineConfig& cfg, const std::vector<GeneGraph>& graphs) {
    std::map<std::pair<std::size_t, std::size_t>, AnchorSet> anchors;
    for (std::size_t i = 0; i < graphs.size(); ++i)
        for (std::size_t j = i + 1; j < graphs.size(); ++j) {
            const auto path = cfg.out_dir / "anchors" /
                              (graphs[i].meta.dataset_id + "__" + graphs[j].meta.dataset_id + ".json");
            if (!std::filesystem::exists(path)) {
                anchors[{i, j}] = anchor_sets(graphs[i], graphs[j]);
                continue;
            }
            nlohmann::json aj = nlohmann::json::parse(io::read_text(path), nullptr, false);
            if (aj.is_discarded()) throw DataError("bad anchor cache: " + path.string());
            AnchorSet a;
            for (const auto& pr : aj.at("common"))
                a.common.emplace_back(pr.at(0).get<Index>(), pr.at(1).get<Index>());
            a.diff_i = aj.at("diff_i").get<std::vector<Index>>();
            a.diff_j = aj.at("diff_j").get<std::vector<Index>>();
            const auto lam = aj.at("lambda").get<std::vector<Scalar>>();
            a.lambda = Eigen::Map<const Vec>(lam.data(), static_cast<Index>(lam.size()));
            for (Index d : a.diff_i) a.diff_neighbors_i.push_back(graphs[i].neighbors[static_cast<std::size_t>(d)]);
            for (Index d : a.diff_j) a.diff_neighbors_j.push_back(graphs[j].neighbors[static_cast<std::size_t>(d)]);
            anchors[{i, j}] = std::move(a);
        }
    return anchors;
}

EmbeddingTable embeddings_from_result(const std::vector<GeneGraph>& graphs,
                                      const std::map<std::string, Mat>& embeddings) {
    EmbeddingTable table;
    Index total = 0, dim = 0;
    for (const auto& g : graphs) {
        const auto it = embeddings.find(g.meta.dataset_id);
        if (it == embeddings.end()) throw DataError("missing embedding for " + g.meta.dataset_id);
        total += it->second.rows();
        dim = it->second.cols();
    }
    table.values.resize(total, dim);
    Index row = 0;
    for (const auto& g : graphs) {
        const Mat& e = embeddings.at(g.meta.dataset_id);
        for (Index i = 0; i < e.rows(); ++i) {
            table.keys.push_back({g.genes[static_cast<std::size_t>(i)], g.meta.dataset_id, g.meta.tissue,
                                  modality_name(g.meta.modality)});
            table.values.row(row++) = e.row(i);
        }
    }
    table.validate();
    return table;
}

TrainArtifacts run_train(const PipelineConfig& cfg) {
    if (cfg.threads > 0) set_thread_cap(cfg.threads);
    const auto graphs = load_graph_collection(cfg);
    const auto anchors = load_anchor_cache(cfg, graphs);

    Hyperparams hp = cfg.train;
    hp.seed = cfg.seed;

    TrainArtifacts artifacts;
    artifacts.checkpoint = cfg.out_dir / "checkpoint.bin";
    artifacts.embeddings = cfg.out_dir / "embeddings.csv";
    artifacts.train_log = cfg.out_dir / "train_log.csv";

    const auto on_checkpoint = [&](int epoch, const ModelParams& params) {
        save_checkpoint(cfg.out_dir / ("checkpoint_epoch" + std::to_string(epoch) + ".bin"), params,
                        {{"build", kBuildId}, {"config_hash", cfg.config_hash()}});
    };
    TrainResult result = train(graphs, anchors, hp, on_checkpoint);

    save_checkpoint(artifacts.checkpoint, result.params,
                    {{"build", kBuildId}, {"config_hash", cfg.config_hash()}});
    write_embeddings(artifacts.embeddings, embeddings_from_result(graphs, result.embeddings));
    write_train_log(artifacts.train_log, result.log);
    char wall[32];
    std::snprintf(wall, sizeof(wall), "%.3f", result.wall_seconds);
    write_meta_sidecar(artifacts.embeddings, cfg, {{"stage", "train"}});
    write_meta_sidecar(artifacts.train_log, cfg, {{"stage", "train"}, {"wall_seconds", wall}});
    artifacts.wall_seconds = result.wall_seconds;
    return artifacts;
}

std::filesystem::path run_embed(const PipelineConfig& cfg) {
    if (cfg.threads > 0) set_thread_cap(cfg.threads);
    const auto graphs = load_graph_collection(cfg);

    ModelConfig mc = cfg.train.model;
    mc.embed = cfg.train.embed_dim;
    std::vector<GraphSpec> specs;
    for (const auto& g : graphs)
        specs.push_back({g.meta.dataset_id, modality_name(g.meta.modality), g.node_features.cols()});
    ModelParams params = init_params(specs, mc, cfg.seed, cfg.train.weight_sharing);
    load_checkpoint(cfg.out_dir / "checkpoint.bin", params);

    std::map<std::string, Mat> embeddings;
    for (const auto& g : graphs) embeddings[g.meta.dataset_id] = encode(g, params).value();

    const auto path = cfg.out_dir / "embeddings.csv";
    write_embeddings(path, embeddings_from_result(graphs, embeddings));
    write_meta_sidecar(path, cfg, {{"stage", "embed"}});
    return path;
}

Vec compute_metric_vector(const EmbeddingTable& table, const std::vector<GeneGraph>& graphs,
                          const MetricsConfig& mc, std::uint64_t seed) {
    LeidenParams lp;
    lp.knn = mc.knn;
    lp.resolution = mc.resolution;
    lp.seed = seed;
    const ClusterAssignment clusters = cluster_leiden(table.values, lp);
    Vec v(6);
    v(0) = asw_batch(table);
    v(1) = edge_auc(table, graphs);
    v(2) = ilisi(table, mc.perplexity);
    v(3) = graph_connectivity(table, clusters, "tissue", mc.knn);
    v(4) = common_gene_ratio(table, clusters);
    v(5) = neighbors_overlap(table, clusters, graphs);
    return v;
}

MetricsReport run_evaluate(const PipelineConfig& cfg,
                           const std::vector<std::filesystem::path>& embedding_files,
                           const std::vector<std::string>& method_names) {
    if (cfg.threads > 0) set_thread_cap(cfg.threads);
    if (embedding_files.size() < 2)
        throw ConfigError("evaluate: need at least two embedding files to rank");
    if (embedding_files.size() != method_names.size())
        throw ConfigError("evaluate: method name per embedding file required");
    const auto graphs = load_graph_collection(cfg);

    Mat matrix(static_cast<Index>(embedding_files.size()), 6);
    for (std::size_t m = 0; m < embedding_files.size(); ++m) {
        const EmbeddingTable table = read_embeddings(embedding_files[m]);
        matrix.row(static_cast<Index>(m)) = compute_metric_vector(table, graphs, cfg.metrics, cfg.seed).transpose();
    }
    MetricsReport report = aggregate(method_names, matrix);

    const auto report_path = cfg.out_dir / "metrics_report.json";
    write_report_json(report_path, report,
                      {{"build", kBuildId}, {"config_hash", cfg.config_hash()}});
    // Long-format plot data.
    std::ostringstream plot;
    plot << "method,metric,value,scaled,rank\n";
    for (Index i = 0; i < matrix.rows(); ++i)
        for (Index j = 0; j < matrix.cols(); ++j)
            plot << report.methods[static_cast<std::size_t>(i)] << "," << report.metric_names[static_cast<std::size_t>(j)]
                 << "," << io::format_double(report.raw(i, j)) << "," << io::format_double(report.scaled(i, j))
                 << "," << io::format_double(report.ranks(i, j)) << "\n";
    io::write_text(cfg.out_dir / "metrics_plot.csv", plot.str());
    write_meta_sidecar(report_path, cfg, {{"stage", "evaluate"}});
    return report;
}

} // namespace coexmap

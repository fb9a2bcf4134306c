#include "coexmap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "coexmap/io.hpp"
#include "coexmap/parallel.hpp"

namespace coexmap {

void EmbeddingTable::validate() const {
    if (static_cast<Index>(keys.size()) != values.rows())
        throw DataError("embedding table: key/value row mismatch");
    if (!values.allFinite()) throw DataError("embedding table: non-finite values");
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& k : keys)
        if (!seen.insert({k.gene, k.dataset}).second)
            throw DataError("embedding table: duplicate (gene, dataset) key " + k.gene + "/" + k.dataset);
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingTable& table) {
    std::ostringstream out;
    out << "gene,dataset,tissue,modality";
    for (Index j = 0; j < table.values.cols(); ++j) out << ",v" << j;
    out << "\n";
    for (Index i = 0; i < table.size(); ++i) {
        const auto& k = table.keys[static_cast<std::size_t>(i)];
        out << k.gene << "," << k.dataset << "," << k.tissue << "," << k.modality;
        for (Index j = 0; j < table.values.cols(); ++j) out << "," << io::format_double(table.values(i, j));
        out << "\n";
    }
    io::write_text(path, out.str());
}

EmbeddingTable read_embeddings(const std::filesystem::path& path) {
    const auto lines = io::read_lines(path);
    if (lines.empty()) throw DataError("empty embedding file: " + path.string());
    EmbeddingTable table;
    std::vector<std::vector<Scalar>> rows;
    for (std::size_t l = 1; l < lines.size(); ++l) {
        std::istringstream ss(lines[l]);
        std::string field;
        EmbeddingKey key;
        if (!std::getline(ss, key.gene, ',') || !std::getline(ss, key.dataset, ',') ||
            !std::getline(ss, key.tissue, ',') || !std::getline(ss, key.modality, ','))
            throw DataError("bad embedding row in " + path.string());
        std::vector<Scalar> vals;
        while (std::getline(ss, field, ',')) vals.push_back(std::stod(field));
        if (vals.empty()) throw DataError("embedding row without values in " + path.string());
        if (!rows.empty() && vals.size() != rows.front().size())
            throw DataError("ragged embedding rows in " + path.string());
        table.keys.push_back(std::move(key));
        rows.push_back(std::move(vals));
    }
    table.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            table.values(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    table.validate();
    return table;
}

std::vector<Index> common_gene_rows(const EmbeddingTable& table) {
    std::unordered_map<std::string, std::set<std::string>> datasets_of;
    for (const auto& k : table.keys) datasets_of[k.gene].insert(k.dataset);
    std::vector<Index> rows;
    for (Index i = 0; i < table.size(); ++i)
        if (datasets_of[table.keys[static_cast<std::size_t>(i)].gene].size() >= 2) rows.push_back(i);
    return rows;
}

std::vector<std::vector<Index>> knn_graph(const Mat& points, int k) {
    const Index n = points.rows();
    const int kk = std::min<int>(k, static_cast<int>(n) - 1);
    std::vector<std::vector<Index>> adj(static_cast<std::size_t>(n));
    if (kk <= 0) return adj;
    std::vector<std::vector<Index>> knn(static_cast<std::size_t>(n));
    parallel_for(n, [&](Index begin, Index end) {
        std::vector<std::pair<Scalar, Index>> dists;
        for (Index i = begin; i < end; ++i) {
            dists.clear();
            for (Index j = 0; j < n; ++j) {
                if (j == i) continue;
                dists.emplace_back((points.row(i) - points.row(j)).squaredNorm(), j);
            }
            std::partial_sort(dists.begin(), dists.begin() + kk, dists.end());
            for (int t = 0; t < kk; ++t) knn[static_cast<std::size_t>(i)].push_back(dists[static_cast<std::size_t>(t)].second);
        }
    });
    std::vector<std::set<Index>> merged(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i)
        for (Index j : knn[static_cast<std::size_t>(i)]) {
            merged[static_cast<std::size_t>(i)].insert(j);
            merged[static_cast<std::size_t>(j)].insert(i);
        }
    for (Index i = 0; i < n; ++i) adj[static_cast<std::size_t>(i)].assign(merged[static_cast<std::size_t>(i)].begin(), merged[static_cast<std::size_t>(i)].end());
    return adj;
}

// ---- Leiden -----------------------------------------------------------------

namespace {

struct WeightedGraph {
    Index n = 0;
    std::vector<std::vector<std::pair<Index, Scalar>>> adj; // no self entries
    std::vector<Scalar> self_weight;                        // twice the internal weight
    std::vector<Scalar> strength;                           // degree incl. self weight
    Scalar two_m = 0;

    void finalize() {
        strength.assign(static_cast<std::size_t>(n), 0.0);
        for (Index i = 0; i < n; ++i) {
            Scalar s = self_weight[static_cast<std::size_t>(i)];
            for (const auto& [j, w] : adj[static_cast<std::size_t>(i)]) s += w;
            strength[static_cast<std::size_t>(i)] = s;
        }
        two_m = std::accumulate(strength.begin(), strength.end(), 0.0);
    }
};

WeightedGraph from_adjacency(const std::vector<std::vector<Index>>& adj) {
    WeightedGraph g;
    g.n = static_cast<Index>(adj.size());
    g.adj.resize(adj.size());
    g.self_weight.assign(adj.size(), 0.0);
    for (Index i = 0; i < g.n; ++i)
        for (Index j : adj[static_cast<std::size_t>(i)]) g.adj[static_cast<std::size_t>(i)].emplace_back(j, 1.0);
    g.finalize();
    return g;
}

// Greedy modularity local move; deterministic given the visit order.
bool local_move(const WeightedGraph& g, std::vector<int>& membership, Scalar resolution,
                std::mt19937_64& rng) {
    const Index n = g.n;
    int n_comm = *std::max_element(membership.begin(), membership.end()) + 1;
    std::vector<Scalar> comm_tot(static_cast<std::size_t>(n_comm), 0.0);
    for (Index i = 0; i < n; ++i) comm_tot[static_cast<std::size_t>(membership[static_cast<std::size_t>(i)])] += g.strength[static_cast<std::size_t>(i)];

    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);

    const Scalar m2 = g.two_m;
    if (m2 <= 0) return false;
    bool any_move = false;
    bool improved = true;
    int sweeps = 0;
    while (improved && sweeps < 100) {
        improved = false;
        ++sweeps;
        for (Index idx = 0; idx < n; ++idx) {
            const Index i = order[static_cast<std::size_t>(idx)];
            const int own = membership[static_cast<std::size_t>(i)];
            std::unordered_map<int, Scalar> w_to; // weight from i to each candidate community
            w_to[own] = 0.0;
            for (const auto& [j, w] : g.adj[static_cast<std::size_t>(i)]) w_to[membership[static_cast<std::size_t>(j)]] += w;

            const Scalar ki = g.strength[static_cast<std::size_t>(i)];
            comm_tot[static_cast<std::size_t>(own)] -= ki;
            int best = own;
            Scalar best_score = w_to[own] / m2 - resolution * ki * comm_tot[static_cast<std::size_t>(own)] / (m2 * m2);
            for (const auto& [c, w] : w_to) {
                if (c == own) continue;
                const Scalar score = w / m2 - resolution * ki * comm_tot[static_cast<std::size_t>(c)] / (m2 * m2);
                if (score > best_score + 1e-12 || (std::abs(score - best_score) <= 1e-12 && c < best)) {
                    best = c;
                    best_score = score;
                }
            }
            comm_tot[static_cast<std::size_t>(best)] += ki;
            if (best != own) {
                membership[static_cast<std::size_t>(i)] = best;
                improved = true;
                any_move = true;
            }
        }
    }
    return any_move;
}

// Leiden refinement: inside each community, rebuild from singletons by greedy
// positive-gain merges constrained to the community.
std::vector<int> refine(const WeightedGraph& g, const std::vector<int>& membership, Scalar resolution) {
    const Index n = g.n;
    std::vector<int> refined(static_cast<std::size_t>(n));
    std::iota(refined.begin(), refined.end(), 0);
    std::vector<Scalar> sub_tot(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) sub_tot[static_cast<std::size_t>(i)] = g.strength[static_cast<std::size_t>(i)];
    const Scalar m2 = g.two_m;
    if (m2 <= 0) return refined;

    for (Index i = 0; i < n; ++i) {
        // Only singleton subcommunities may merge (Leiden's constraint).
        if (sub_tot[static_cast<std::size_t>(refined[static_cast<std::size_t>(i)])] != g.strength[static_cast<std::size_t>(i)]) continue;
        const int own = refined[static_cast<std::size_t>(i)];
        std::unordered_map<int, Scalar> w_to;
        for (const auto& [j, w] : g.adj[static_cast<std::size_t>(i)])
            if (membership[static_cast<std::size_t>(j)] == membership[static_cast<std::size_t>(i)])
                w_to[refined[static_cast<std::size_t>(j)]] += w;
        const Scalar ki = g.strength[static_cast<std::size_t>(i)];
        int best = own;
        Scalar best_gain = 0;
        for (const auto& [c, w] : w_to) {
            if (c == own) continue;
            const Scalar gain = w / m2 - resolution * ki * sub_tot[static_cast<std::size_t>(c)] / (m2 * m2);
            if (gain > best_gain + 1e-12 || (gain > 1e-12 && std::abs(gain - best_gain) <= 1e-12 && c < best)) {
                best = c;
                best_gain = gain;
            }
        }
        if (best != own) {
            sub_tot[static_cast<std::size_t>(best)] += ki;
            sub_tot[static_cast<std::size_t>(own)] -= ki;
            refined[static_cast<std::size_t>(i)] = best;
        }
    }
    return refined;
}

std::vector<int> compact_labels(const std::vector<int>& labels) {
    std::unordered_map<int, int> remap;
    std::vector<int> out(labels.size());
    int next = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto [it, inserted] = remap.emplace(labels[i], next);
        if (inserted) ++next;
        out[i] = it->second;
    }
    return out;
}

WeightedGraph aggregate_graph(const WeightedGraph& g, const std::vector<int>& refined, int n_comm) {
    WeightedGraph out;
    out.n = n_comm;
    out.adj.resize(static_cast<std::size_t>(n_comm));
    out.self_weight.assign(static_cast<std::size_t>(n_comm), 0.0);
    std::vector<std::unordered_map<Index, Scalar>> acc(static_cast<std::size_t>(n_comm));
    for (Index i = 0; i < g.n; ++i) {
        const int ci = refined[static_cast<std::size_t>(i)];
        out.self_weight[static_cast<std::size_t>(ci)] += g.self_weight[static_cast<std::size_t>(i)];
        for (const auto& [j, w] : g.adj[static_cast<std::size_t>(i)]) {
            const int cj = refined[static_cast<std::size_t>(j)];
            if (ci == cj)
                out.self_weight[static_cast<std::size_t>(ci)] += w; // both directions visit once each
            else
                acc[static_cast<std::size_t>(ci)][cj] += w;
        }
    }
    for (Index c = 0; c < out.n; ++c) {
        auto items = std::vector<std::pair<Index, Scalar>>(acc[static_cast<std::size_t>(c)].begin(), acc[static_cast<std::size_t>(c)].end());
        std::sort(items.begin(), items.end());
        out.adj[static_cast<std::size_t>(c)] = std::move(items);
    }
    out.finalize();
    return out;
}

} // namespace

Scalar modularity(const std::vector<std::vector<Index>>& adj, const std::vector<int>& membership,
                  Scalar resolution) {
    WeightedGraph g = from_adjacency(adj);
    if (g.two_m <= 0) return 0;
    const int n_comm = *std::max_element(membership.begin(), membership.end()) + 1;
    std::vector<Scalar> in_w(static_cast<std::size_t>(n_comm), 0.0), tot(static_cast<std::size_t>(n_comm), 0.0);
    for (Index i = 0; i < g.n; ++i) {
        const int c = membership[static_cast<std::size_t>(i)];
        tot[static_cast<std::size_t>(c)] += g.strength[static_cast<std::size_t>(i)];
        for (const auto& [j, w] : g.adj[static_cast<std::size_t>(i)])
            if (membership[static_cast<std::size_t>(j)] == c) in_w[static_cast<std::size_t>(c)] += w;
    }
    Scalar q = 0;
    for (int c = 0; c < n_comm; ++c) {
        q += in_w[static_cast<std::size_t>(c)] / g.two_m;
        q -= resolution * (tot[static_cast<std::size_t>(c)] / g.two_m) * (tot[static_cast<std::size_t>(c)] / g.two_m);
    }
    return q;
}

ClusterAssignment cluster_leiden(const Mat& embeddings, const LeidenParams& params) {
    const Index n = embeddings.rows();
    if (n < 2) throw DataError("cluster_leiden: need at least two rows");
    WeightedGraph g = from_adjacency(knn_graph(embeddings, params.knn));
    std::mt19937_64 rng(params.seed);

    std::vector<int> membership(static_cast<std::size_t>(n));
    std::iota(membership.begin(), membership.end(), 0);
    // node_of[v] = current aggregate node containing original row v
    std::vector<int> node_of(static_cast<std::size_t>(n));
    std::iota(node_of.begin(), node_of.end(), 0);

    WeightedGraph level = g;
    std::vector<int> level_membership = membership;
    for (int lvl = 0; lvl < params.max_levels; ++lvl) {
        const bool moved = local_move(level, level_membership, params.resolution, rng);
        if (!moved && lvl > 0) break;

        std::vector<int> refined = compact_labels(refine(level, level_membership, params.resolution));
        const int n_ref = refined.empty() ? 0 : *std::max_element(refined.begin(), refined.end()) + 1;

        // Map original rows through the refined partition.
        for (std::size_t v = 0; v < node_of.size(); ++v) {
            membership[v] = level_membership[static_cast<std::size_t>(node_of[v])];
            node_of[v] = refined[static_cast<std::size_t>(node_of[v])];
        }
        if (n_ref == level.n) break; // no further aggregation possible

        // Aggregate; communities from the local move seed the next level.
        std::vector<int> agg_membership(static_cast<std::size_t>(n_ref), 0);
        for (Index i = 0; i < level.n; ++i)
            agg_membership[static_cast<std::size_t>(refined[static_cast<std::size_t>(i)])] = level_membership[static_cast<std::size_t>(i)];
        level = aggregate_graph(level, refined, n_ref);
        level_membership = agg_membership;
    }

    ClusterAssignment out;
    out.of_row = compact_labels(membership);
    out.n_clusters = out.of_row.empty() ? 0 : *std::max_element(out.of_row.begin(), out.of_row.end()) + 1;
    return out;
}

// ---- Metric helpers ---------------------------------------------------------

namespace {

// Mann-Whitney AUC with average ranks for ties.
Scalar auc_from_scores(const std::vector<Scalar>& scores, const std::vector<int>& labels) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::vector<Scalar> rank(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const Scalar avg = (static_cast<Scalar>(i) + static_cast<Scalar>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) rank[order[t]] = avg;
        i = j + 1;
    }
    Scalar pos_ranks = 0;
    std::size_t n_pos = 0;
    for (std::size_t t = 0; t < n; ++t)
        if (labels[t] == 1) {
            pos_ranks += rank[t];
            ++n_pos;
        }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::numeric_limits<Scalar>::quiet_NaN();
    return (pos_ranks - static_cast<Scalar>(n_pos) * (static_cast<Scalar>(n_pos) + 1) / 2.0) /
           (static_cast<Scalar>(n_pos) * static_cast<Scalar>(n_neg));
}

std::unordered_map<std::string, std::unordered_map<std::string, Index>> rows_by_dataset(
    const EmbeddingTable& table) {
    std::unordered_map<std::string, std::unordered_map<std::string, Index>> out;
    for (Index i = 0; i < table.size(); ++i) {
        const auto& k = table.keys[static_cast<std::size_t>(i)];
        out[k.dataset][k.gene] = i;
    }
    return out;
}

Scalar edge_auc_impl(const EmbeddingTable& table, const std::vector<GeneGraph>& graphs,
                     const std::vector<Mat>* adjacency_override) {
    const auto row_of = rows_by_dataset(table);
    Scalar total = 0;
    int used = 0;
    for (std::size_t gidx = 0; gidx < graphs.size(); ++gidx) {
        const GeneGraph& g = graphs[gidx];
        const auto ds = row_of.find(g.meta.dataset_id);
        if (ds == row_of.end()) continue;
        const Index p = g.n_nodes();
        Mat z(p, table.values.cols());
        bool complete = true;
        for (Index i = 0; i < p && complete; ++i) {
            const auto it = ds->second.find(g.genes[static_cast<std::size_t>(i)]);
            if (it == ds->second.end())
                complete = false;
            else
                z.row(i) = table.values.row(it->second);
        }
        if (!complete) throw DataError("edge_auc: embeddings missing genes for " + g.meta.dataset_id);
        for (Index i = 0; i < p; ++i) {
            const Scalar norm = z.row(i).norm();
            if (norm > 0) z.row(i) /= norm;
        }
        const Mat adj = adjacency_override ? (*adjacency_override)[gidx] : g.adjacency_dense();
        std::vector<Scalar> scores;
        std::vector<int> labels;
        scores.reserve(static_cast<std::size_t>(p * (p - 1) / 2));
        for (Index i = 0; i < p; ++i)
            for (Index j = i + 1; j < p; ++j) {
                const Scalar dot = z.row(i).dot(z.row(j));
                scores.push_back(1.0 / (1.0 + std::exp(-dot)));
                labels.push_back(adj(i, j) > 0 ? 1 : 0);
            }
        const Scalar auc = auc_from_scores(scores, labels);
        if (std::isnan(auc)) {
            std::cerr << "[edge_auc] dataset " << g.meta.dataset_id << " has no/all edges; skipped\n";
            continue;
        }
        total += auc;
        ++used;
    }
    if (used == 0) throw DataError("edge_auc: no usable dataset");
    return total / used;
}

} // namespace

Scalar edge_auc(const EmbeddingTable& table, const std::vector<GeneGraph>& graphs) {
    return edge_auc_impl(table, graphs, nullptr);
}

Scalar edge_auc_against(const EmbeddingTable& table, const std::vector<GeneGraph>& graphs,
                        const std::vector<Mat>& adjacency) {
    if (adjacency.size() != graphs.size()) throw DataError("edge_auc_against: adjacency count mismatch");
    return edge_auc_impl(table, graphs, &adjacency);
}

Scalar asw_batch(const EmbeddingTable& table) {
    const std::vector<Index> rows = common_gene_rows(table);
    const Index n = static_cast<Index>(rows.size());
    if (n < 2) throw DataError("asw_batch: fewer than two common-gene rows");

    std::vector<std::string> label(static_cast<std::size_t>(n));
    std::unordered_map<std::string, Index> label_count;
    for (Index i = 0; i < n; ++i) {
        label[static_cast<std::size_t>(i)] = table.keys[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])].dataset;
        ++label_count[label[static_cast<std::size_t>(i)]];
    }
    if (label_count.size() < 2) throw DataError("asw_batch: need rows from at least two datasets");

    Mat d(n, n);
    for (Index i = 0; i < n; ++i) {
        d(i, i) = 0;
        for (Index j = i + 1; j < n; ++j) {
            const Scalar dist =
                (table.values.row(rows[static_cast<std::size_t>(i)]) - table.values.row(rows[static_cast<std::size_t>(j)])).norm();
            d(i, j) = dist;
            d(j, i) = dist;
        }
    }

    Scalar total = 0;
    Index used = 0;
    for (Index i = 0; i < n; ++i) {
        const std::string& own = label[static_cast<std::size_t>(i)];
        if (label_count[own] < 2) continue; // silhouette undefined for singletons
        std::unordered_map<std::string, std::pair<Scalar, Index>> acc; // label -> (sum, count)
        for (Index j = 0; j < n; ++j) {
            if (j == i) continue;
            auto& [sum, cnt] = acc[label[static_cast<std::size_t>(j)]];
            sum += d(i, j);
            ++cnt;
        }
        const Scalar a = acc[own].first / static_cast<Scalar>(acc[own].second);
        Scalar b = std::numeric_limits<Scalar>::infinity();
        for (const auto& [lab, sc] : acc)
            if (lab != own) b = std::min(b, sc.first / static_cast<Scalar>(sc.second));
        const Scalar denom = std::max(a, b);
        const Scalar s = denom > 0 ? (b - a) / denom : 0.0;
        total += 1.0 - std::abs(s);
        ++used;
    }
    if (used == 0) throw DataError("asw_batch: no scorable rows");
    return total / static_cast<Scalar>(used);
}

Scalar graph_connectivity(const EmbeddingTable& table, const ClusterAssignment& clusters,
                          const std::string& label_kind, int k) {
    if (static_cast<Index>(clusters.of_row.size()) != table.size())
        throw DataError("graph_connectivity: cluster assignment mismatch");
    auto label_of = [&](Index row) -> const std::string& {
        const auto& key = table.keys[static_cast<std::size_t>(row)];
        return label_kind == "dataset" ? key.dataset : key.tissue;
    };

    Scalar cluster_total = 0;
    int clusters_used = 0;
    for (int c = 0; c < clusters.n_clusters; ++c) {
        std::vector<Index> members;
        for (Index i = 0; i < table.size(); ++i)
            if (clusters.of_row[static_cast<std::size_t>(i)] == c) members.push_back(i);
        if (members.size() < 2) continue; // skipped per contract

        Mat pts(static_cast<Index>(members.size()), table.values.cols());
        for (std::size_t m = 0; m < members.size(); ++m) pts.row(static_cast<Index>(m)) = table.values.row(members[m]);
        const auto adj = knn_graph(pts, k);

        std::map<std::string, std::vector<Index>> groups; // label -> local indices
        for (std::size_t m = 0; m < members.size(); ++m) groups[label_of(members[m])].push_back(static_cast<Index>(m));

        Scalar weighted = 0;
        Index weight_sum = 0;
        for (const auto& [lab, group] : groups) {
            std::set<Index> in_group(group.begin(), group.end());
            std::vector<char> seen(members.size(), 0);
            Index largest = 0;
            for (Index start : group) {
                if (seen[static_cast<std::size_t>(start)]) continue;
                Index size = 0;
                std::deque<Index> queue{start};
                seen[static_cast<std::size_t>(start)] = 1;
                while (!queue.empty()) {
                    const Index u = queue.front();
                    queue.pop_front();
                    ++size;
                    for (Index v : adj[static_cast<std::size_t>(u)])
                        if (in_group.count(v) && !seen[static_cast<std::size_t>(v)]) {
                            seen[static_cast<std::size_t>(v)] = 1;
                            queue.push_back(v);
                        }
                }
                largest = std::max(largest, size);
            }
            weighted += static_cast<Scalar>(group.size()) *
                        (static_cast<Scalar>(largest) / static_cast<Scalar>(group.size()));
            weight_sum += static_cast<Index>(group.size());
        }
        cluster_total += weighted / static_cast<Scalar>(weight_sum);
        ++clusters_used;
    }
    if (clusters_used == 0) throw DataError("graph_connectivity: no usable cluster");
    return cluster_total / clusters_used;
}

Scalar ilisi(const EmbeddingTable& table, Scalar perplexity) {
    const std::vector<Index> rows = common_gene_rows(table);
    const Index n = static_cast<Index>(rows.size());
    if (n < 2) throw DataError("ilisi: fewer than two common-gene rows");

    std::set<std::string> dataset_set;
    std::vector<std::string> label(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        label[static_cast<std::size_t>(i)] = table.keys[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])].dataset;
        dataset_set.insert(label[static_cast<std::size_t>(i)]);
    }
    const Scalar b = static_cast<Scalar>(dataset_set.size());
    if (b < 2) throw DataError("ilisi: need at least two datasets");

    Scalar perp = perplexity;
    if (static_cast<Scalar>(n - 1) < perplexity) {
        perp = std::max(1.0, static_cast<Scalar>(n - 1) / 3.0);
        std::cerr << "[ilisi] fewer rows than perplexity; reduced to " << perp << "\n";
    }
    const Index k = std::min<Index>(n - 1, static_cast<Index>(std::ceil(3 * perp)));
    const Scalar target_entropy = std::log(perp);

    Vec scores = Vec::Zero(n);
    parallel_for(n, [&](Index begin, Index end) {
        std::vector<std::pair<Scalar, Index>> dists;
        for (Index i = begin; i < end; ++i) {
            dists.clear();
            for (Index j = 0; j < n; ++j) {
                if (j == i) continue;
                dists.emplace_back(
                    (table.values.row(rows[static_cast<std::size_t>(i)]) - table.values.row(rows[static_cast<std::size_t>(j)])).squaredNorm(), j);
            }
            std::partial_sort(dists.begin(), dists.begin() + k, dists.end());

            // Bisection on precision beta to hit the target entropy.
            Scalar beta = 1.0, beta_lo = 0.0, beta_hi = std::numeric_limits<Scalar>::infinity();
            Vec p(k);
            for (int iter = 0; iter < 64; ++iter) {
                Scalar sum = 0;
                for (Index t = 0; t < k; ++t) {
                    p(t) = std::exp(-beta * dists[static_cast<std::size_t>(t)].first);
                    sum += p(t);
                }
                if (sum <= 0) {
                    p.setConstant(1.0 / static_cast<Scalar>(k));
                } else {
                    p /= sum;
                }
                Scalar entropy = 0;
                for (Index t = 0; t < k; ++t)
                    if (p(t) > 0) entropy -= p(t) * std::log(p(t));
                const Scalar diff = entropy - target_entropy;
                if (std::abs(diff) < 1e-7) break;
                if (diff > 0) {
                    beta_lo = beta;
                    beta = std::isinf(beta_hi) ? beta * 2 : (beta + beta_hi) / 2;
                } else {
                    beta_hi = beta;
                    beta = (beta + beta_lo) / 2;
                }
            }
            std::unordered_map<std::string, Scalar> mass;
            for (Index t = 0; t < k; ++t) mass[label[static_cast<std::size_t>(dists[static_cast<std::size_t>(t)].second)]] += p(t);
            Scalar simpson = 0;
            for (const auto& [lab, m] : mass) simpson += m * m;
            const Scalar inv = 1.0 / simpson;
            scores(i) = (inv - 1.0) / (b - 1.0);
        }
    });
    return std::clamp(scores.mean(), 0.0, 1.0);
}

Scalar common_gene_ratio(const EmbeddingTable& table, const ClusterAssignment& clusters) {
    if (static_cast<Index>(clusters.of_row.size()) != table.size())
        throw DataError("common_gene_ratio: cluster assignment mismatch");
    Scalar weighted = 0;
    Index total = 0;
    for (int c = 0; c < clusters.n_clusters; ++c) {
        std::unordered_map<std::string, Index> count;
        Index size = 0;
        for (Index i = 0; i < table.size(); ++i)
            if (clusters.of_row[static_cast<std::size_t>(i)] == c) {
                ++count[table.keys[static_cast<std::size_t>(i)].gene];
                ++size;
            }
        if (size == 0) continue;
        Index unique = 0;
        for (Index i = 0; i < table.size(); ++i)
            if (clusters.of_row[static_cast<std::size_t>(i)] == c &&
                count[table.keys[static_cast<std::size_t>(i)].gene] == 1)
                ++unique;
        weighted += static_cast<Scalar>(size) * (1.0 - static_cast<Scalar>(unique) / static_cast<Scalar>(size));
        total += size;
    }
    if (total == 0) throw DataError("common_gene_ratio: empty clustering");
    return weighted / static_cast<Scalar>(total);
}

Scalar neighbors_overlap(const EmbeddingTable& table, const ClusterAssignment& clusters,
                         const std::vector<GeneGraph>& graphs) {
    if (static_cast<Index>(clusters.of_row.size()) != table.size())
        throw DataError("neighbors_overlap: cluster assignment mismatch");
    // dataset -> gene -> sorted neighbour names
    std::unordered_map<std::string, std::unordered_map<std::string, std::vector<std::string>>> nbr_names;
    for (const auto& g : graphs) {
        auto& by_gene = nbr_names[g.meta.dataset_id];
        for (Index i = 0; i < g.n_nodes(); ++i) {
            std::vector<std::string> names;
            for (Index j : g.neighbors[static_cast<std::size_t>(i)]) names.push_back(g.genes[static_cast<std::size_t>(j)]);
            std::sort(names.begin(), names.end());
            by_gene[g.genes[static_cast<std::size_t>(i)]] = std::move(names);
        }
    }

    auto jaccard = [](const std::vector<std::string>& a, const std::vector<std::string>& b) -> Scalar {
        std::vector<std::string> inter;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
        const std::size_t uni = a.size() + b.size() - inter.size();
        return uni == 0 ? 0.0 : static_cast<Scalar>(inter.size()) / static_cast<Scalar>(uni);
    };

    Scalar weighted = 0;
    Index total = 0;
    for (int c = 0; c < clusters.n_clusters; ++c) {
        std::unordered_map<std::string, std::vector<const EmbeddingKey*>> by_gene;
        Index size = 0;
        for (Index i = 0; i < table.size(); ++i)
            if (clusters.of_row[static_cast<std::size_t>(i)] == c) {
                by_gene[table.keys[static_cast<std::size_t>(i)].gene].push_back(&table.keys[static_cast<std::size_t>(i)]);
                ++size;
            }
        if (size == 0) continue;
        Scalar gene_sum = 0;
        Index gene_count = 0;
        for (const auto& [gene, keys] : by_gene) {
            if (keys.size() < 2) continue;
            Scalar pair_sum = 0;
            Index pairs = 0;
            for (std::size_t a = 0; a < keys.size(); ++a)
                for (std::size_t b2 = a + 1; b2 < keys.size(); ++b2) {
                    const auto ita = nbr_names.find(keys[a]->dataset);
                    const auto itb = nbr_names.find(keys[b2]->dataset);
                    if (ita == nbr_names.end() || itb == nbr_names.end()) continue;
                    const auto ga = ita->second.find(gene);
                    const auto gb = itb->second.find(gene);
                    if (ga == ita->second.end() || gb == itb->second.end()) continue;
                    pair_sum += jaccard(ga->second, gb->second);
                    ++pairs;
                }
            if (pairs > 0) {
                gene_sum += pair_sum / static_cast<Scalar>(pairs);
                ++gene_count;
            }
        }
        const Scalar cluster_score = gene_count > 0 ? gene_sum / static_cast<Scalar>(gene_count) : 0.0;
        weighted += static_cast<Scalar>(size) * cluster_score;
        total += size;
    }
    if (total == 0) throw DataError("neighbors_overlap: empty clustering");
    return weighted / static_cast<Scalar>(total);
}

MetricsReport aggregate(const std::vector<std::string>& methods, const Mat& metric_matrix,
                        std::vector<std::string> metric_names) {
    const Index n_methods = metric_matrix.rows();
    const Index n_metrics = metric_matrix.cols();
    if (n_methods < 2) throw DataError("aggregate: need at least two methods");
    if (static_cast<Index>(methods.size()) != n_methods) throw DataError("aggregate: method names mismatch");

    MetricsReport report;
    report.methods = methods;
    if (metric_names.empty()) {
        if (n_metrics == 6)
            metric_names = {"ASW", "AUC", "iLISI", "GC", "CGR", "NO"};
        else
            for (Index j = 0; j < n_metrics; ++j) metric_names.push_back("m" + std::to_string(j));
    }
    report.metric_names = std::move(metric_names);
    report.raw = metric_matrix;
    report.scaled.resize(n_methods, n_metrics);
    report.ranks.resize(n_methods, n_metrics);

    for (Index j = 0; j < n_metrics; ++j) {
        // Descending ranks with average ties (best = 1).
        std::vector<Index> order(static_cast<std::size_t>(n_methods));
        std::iota(order.begin(), order.end(), Index{0});
        std::sort(order.begin(), order.end(),
                  [&](Index a, Index b) { return metric_matrix(a, j) > metric_matrix(b, j); });
        std::size_t i = 0;
        while (i < order.size()) {
            std::size_t t = i;
            while (t + 1 < order.size() &&
                   metric_matrix(order[t + 1], j) == metric_matrix(order[i], j))
                ++t;
            const Scalar avg_rank = (static_cast<Scalar>(i) + static_cast<Scalar>(t)) / 2.0 + 1.0;
            for (std::size_t u = i; u <= t; ++u) report.ranks(order[u], j) = avg_rank;
            i = t + 1;
        }
        const Scalar lo = metric_matrix.col(j).minCoeff();
        const Scalar hi = metric_matrix.col(j).maxCoeff();
        for (Index m = 0; m < n_methods; ++m)
            report.scaled(m, j) = (hi > lo) ? (metric_matrix(m, j) - lo) / (hi - lo) : 0.5;
    }
    report.avg_rank = report.ranks.rowwise().mean();
    report.avg_score = report.scaled.rowwise().mean();
    return report;
}

std::string report_table(const MetricsReport& report) {
    std::ostringstream out;
    out << std::left;
    out.width(14);
    out << "method";
    for (const auto& m : report.metric_names) {
        out.width(9);
        out << m;
    }
    out.width(9);
    out << "AvgRank";
    out.width(9);
    out << "AvgScore";
    out << "\n";
    for (Index i = 0; i < static_cast<Index>(report.methods.size()); ++i) {
        out.width(14);
        out << report.methods[static_cast<std::size_t>(i)];
        char buf[32];
        for (Index j = 0; j < report.raw.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%-9.3f", report.raw(i, j));
            out << buf;
        }
        std::snprintf(buf, sizeof(buf), "%-9.2f", report.avg_rank(i));
        out << buf;
        std::snprintf(buf, sizeof(buf), "%-9.2f", report.avg_score(i));
        out << buf;
        out << "\n";
    }
    return out.str();
}

void write_report_json(const std::filesystem::path& path, const MetricsReport& report,
                       const std::map<std::string, std::string>& meta) {
    nlohmann::json j;
    for (const auto& [k, v] : meta) j[k] = v;
    j["metrics"] = report.metric_names;
    nlohmann::json methods = nlohmann::json::array();
    for (Index i = 0; i < static_cast<Index>(report.methods.size()); ++i) {
        nlohmann::json m;
        m["name"] = report.methods[static_cast<std::size_t>(i)];
        for (Index c = 0; c < report.raw.cols(); ++c)
            m[report.metric_names[static_cast<std::size_t>(c)]] = report.raw(i, c);
        m["avg_rank"] = report.avg_rank(i);
        m["avg_score"] = report.avg_score(i);
        methods.push_back(std::move(m));
    }
    j["methods"] = std::move(methods);
    io::write_text(path, j.dump(2) + "\n");
}

std::vector<std::string> knn_predict(const Mat& train, const std::vector<std::string>& labels,
                                     const Mat& test, int k) {
    if (train.rows() == 0) throw DataError("knn_predict: empty training set");
    if (static_cast<Index>(labels.size()) != train.rows())
        throw DataError("knn_predict: label count mismatch");
    if (k < 1 || k > train.rows()) throw ConfigError("knn_predict: k out of range");

    std::vector<std::string> out(static_cast<std::size_t>(test.rows()));
    parallel_for(test.rows(), [&](Index begin, Index end) {
        std::vector<std::pair<Scalar, Index>> dists;
        for (Index i = begin; i < end; ++i) {
            dists.clear();
            for (Index j = 0; j < train.rows(); ++j)
                dists.emplace_back((test.row(i) - train.row(j)).norm(), j);
            std::partial_sort(dists.begin(), dists.begin() + k, dists.end());

            std::map<std::string, std::pair<Index, Scalar>> votes; // label -> (count, dist sum)
            for (int t = 0; t < k; ++t) {
                auto& [cnt, sum] = votes[labels[static_cast<std::size_t>(dists[static_cast<std::size_t>(t)].second)]];
                ++cnt;
                sum += dists[static_cast<std::size_t>(t)].first;
            }
            std::string best;
            Index best_count = -1;
            Scalar best_mean = std::numeric_limits<Scalar>::infinity();
            for (const auto& [lab, cs] : votes) {
                const Scalar mean_dist = cs.second / static_cast<Scalar>(cs.first);
                if (cs.first > best_count ||
                    (cs.first == best_count && mean_dist < best_mean)) {
                    best = lab;
                    best_count = cs.first;
                    best_mean = mean_dist;
                }
            }
            out[static_cast<std::size_t>(i)] = best;
        }
    });
    return out;
}

} // namespace coexmap

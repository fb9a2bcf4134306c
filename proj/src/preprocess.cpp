#include "coexmap/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coexmap/parallel.hpp"

namespace coexmap {

Scalar nb_loglik(const Vec& x, const Vec& s, Scalar beta0, Scalar theta) {
    Scalar ll = 0;
    const Scalar eb = std::exp(beta0);
    for (Index c = 0; c < x.size(); ++c) {
        const Scalar mu = s(c) * eb;
        ll += std::lgamma(x(c) + theta) - std::lgamma(theta) - std::lgamma(x(c) + 1.0) +
              theta * std::log(theta) + x(c) * std::log(mu) - (x(c) + theta) * std::log(theta + mu);
    }
    return ll;
}

namespace {

// Newton solve of beta0 at fixed theta; the profile is strictly concave.
Scalar solve_beta0(const Vec& x, const Vec& s, Scalar theta, Scalar beta0, int max_iter, bool* ok) {
    *ok = false;
    for (int it = 0; it < max_iter; ++it) {
        const Scalar eb = std::exp(beta0);
        Scalar g = 0, h = 0;
        for (Index c = 0; c < x.size(); ++c) {
            const Scalar mu = s(c) * eb;
            g += theta * (x(c) - mu) / (theta + mu);
            h -= theta * mu * (theta + x(c)) / ((theta + mu) * (theta + mu));
        }
        if (h >= -1e-300) break;
        const Scalar step = g / h;
        beta0 -= step;
        if (std::abs(step) < 1e-12) {
            *ok = true;
            break;
        }
    }
    return beta0;
}

} // namespace

NbGeneFit nb_fit_gene(const Vec& x, const Vec& s, const NbFitParams& params) {
    if (x.size() != s.size() || x.size() == 0) throw DataError("nb_fit_gene: size mismatch");
    if ((x.array() == 0).all()) throw DataError("nb_fit_gene: all-zero gene");
    if ((s.array() <= 0).any()) throw DataError("nb_fit_gene: non-positive depth");

    const Scalar beta0_init = std::log(x.sum() / s.sum());

    auto profile = [&](Scalar log_theta, Scalar* beta0_out, bool* newton_ok) {
        const Scalar theta = std::exp(log_theta);
        bool ok = false;
        const Scalar b = solve_beta0(x, s, theta, beta0_init, params.max_iterations, &ok);
        if (beta0_out) *beta0_out = b;
        if (newton_ok) *newton_ok = ok;
        return nb_loglik(x, s, b, theta);
    };

    // Golden-section maximization of the profile likelihood over ln(theta).
    const Scalar invphi = (std::sqrt(5.0) - 1.0) / 2.0;
    Scalar a = std::log(params.theta_min), b = std::log(params.theta_max);
    Scalar c = b - invphi * (b - a), d = a + invphi * (b - a);
    Scalar fc = profile(c, nullptr, nullptr), fd = profile(d, nullptr, nullptr);
    bool converged = false;
    for (int it = 0; it < params.max_iterations; ++it) {
        if (std::abs(fc - fd) < params.loglik_tol && (b - a) < 1e-4) {
            converged = true;
            break;
        }
        if (fc > fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = profile(c, nullptr, nullptr);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = profile(d, nullptr, nullptr);
        }
    }
    const Scalar log_theta = (fc > fd) ? c : d;

    NbGeneFit fit;
    bool newton_ok = false;
    fit.theta = std::exp(log_theta);
    fit.loglik = profile(log_theta, &fit.beta0, &newton_ok);
    // Hitting the upper bracket is the Poisson limit, not a failure.
    const bool at_lower = log_theta < std::log(params.theta_min) + 1e-3;
    fit.converged = newton_ok && std::isfinite(fit.loglik) && !at_lower;

    if (!fit.converged) {
        // Method-of-moments fallback: match E[x] = s e^b and the excess of
        // Var over the Poisson part.
        fit.beta0 = beta0_init;
        const Scalar eb = std::exp(fit.beta0);
        Scalar excess = 0, denom = 0;
        for (Index i = 0; i < x.size(); ++i) {
            const Scalar mu = s(i) * eb;
            excess += (x(i) - mu) * (x(i) - mu) - mu;
            denom += mu * mu;
        }
        fit.theta = (excess > 0 && denom > 0) ? std::clamp(denom / excess, params.theta_min, params.theta_max)
                                              : params.theta_max;
        fit.loglik = nb_loglik(x, s, fit.beta0, fit.theta);
    }
    return fit;
}

NBFit fit_nb_glm(const CountMatrix& m, const NbFitParams& params) {
    const Index p = m.n_genes();
    const Index n = m.n_cells();
    if (p == 0 || n == 0) throw DataError("fit_nb_glm: empty matrix");
    const Vec s = m.depths();
    if ((s.array() <= 0).any()) throw DataError("fit_nb_glm: zero-depth cell (matrix not QC'd?)");

    NBFit fit;
    fit.beta0.resize(p);
    fit.theta.resize(p);
    fit.theta_reg.resize(p);
    fit.log_gene_mean.resize(p);
    fit.fallback.assign(static_cast<std::size_t>(p), 0);

    const Mat dense = m.dense();
    parallel_for(p, [&](Index begin, Index end) {
        for (Index g = begin; g < end; ++g) {
            const Vec x = dense.col(g);
            if ((x.array() == 0).all()) throw DataError("fit_nb_glm: all-zero gene " + m.genes[static_cast<std::size_t>(g)]);
            const NbGeneFit gf = nb_fit_gene(x, s, params);
            fit.beta0(g) = gf.beta0;
            fit.theta(g) = gf.theta;
            fit.log_gene_mean(g) = std::log(x.sum() / s.sum());
            fit.fallback[static_cast<std::size_t>(g)] = gf.converged ? 0 : 1;
        }
    });

    // Rolling median of log(theta) over neighbours in log-mean order.
    std::vector<Index> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (fit.log_gene_mean(a) != fit.log_gene_mean(b)) return fit.log_gene_mean(a) < fit.log_gene_mean(b);
        return m.genes[static_cast<std::size_t>(a)] < m.genes[static_cast<std::size_t>(b)];
    });
    const Index half = params.smoothing_window / 2;
    std::vector<Scalar> window;
    for (Index pos = 0; pos < p; ++pos) {
        const Index lo = std::max<Index>(0, pos - half);
        const Index hi = std::min<Index>(p, pos + half + 1);
        window.clear();
        for (Index k = lo; k < hi; ++k) window.push_back(std::log(fit.theta(order[static_cast<std::size_t>(k)])));
        std::nth_element(window.begin(), window.begin() + window.size() / 2, window.end());
        Scalar med = window[window.size() / 2];
        if (window.size() % 2 == 0) {
            const auto lower = std::max_element(window.begin(), window.begin() + window.size() / 2);
            med = 0.5 * (med + *lower);
        }
        fit.theta_reg(order[static_cast<std::size_t>(pos)]) = std::exp(med);
    }
    return fit;
}

ResidualMatrix pearson_residuals(const CountMatrix& m, const NBFit& fit, bool clip) {
    const Index n = m.n_cells(), p = m.n_genes();
    if (fit.beta0.size() != p) throw DataError("pearson_residuals: fit does not match matrix");
    const Vec s = m.depths();
    const Scalar clip_bound = std::sqrt(static_cast<Scalar>(n));

    ResidualMatrix out;
    out.values.resize(n, p);
    out.genes = m.genes;
    out.residual_variance.resize(p);
    const Mat dense = m.dense();

    parallel_for(p, [&](Index begin, Index end) {
        for (Index g = begin; g < end; ++g) {
            const Scalar eb = std::exp(fit.beta0(g));
            const Scalar theta = fit.theta_reg(g);
            for (Index c = 0; c < n; ++c) {
                const Scalar mu = s(c) * eb;
                const Scalar sd = std::sqrt(mu + mu * mu / theta);
                Scalar z = (dense(c, g) - mu) / sd;
                if (clip) z = std::clamp(z, -clip_bound, clip_bound);
                out.values(c, g) = z;
            }
            const Scalar mean = out.values.col(g).mean();
            out.residual_variance(g) =
                (out.values.col(g).array() - mean).square().sum() / static_cast<Scalar>(std::max<Index>(n - 1, 1));
        }
    });
    return out;
}

std::vector<Index> select_hvgs(const ResidualMatrix& r, Index k) {
    const Index p = r.values.cols();
    if (k <= 0) throw ConfigError("select_hvgs: k must be positive");
    if (k > p) throw ConfigError("select_hvgs: k exceeds gene count");
    std::vector<Index> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (r.residual_variance(a) != r.residual_variance(b))
            return r.residual_variance(a) > r.residual_variance(b);
        return r.genes[static_cast<std::size_t>(a)] < r.genes[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(k));
    return order;
}

std::string kernel_name(SparkxKernel k) {
    switch (k) {
        case SparkxKernel::Identity: return "identity";
        case SparkxKernel::Gaussian: return "gaussian";
        case SparkxKernel::Cosine: return "cosine";
    }
    return "?";
}

Mat sparkx_kernel_coords(const Mat& coords, SparkxKernel kernel) {
    if (coords.cols() != 2) throw DataError("sparkx: coordinates must be n x 2");
    const Index n = coords.rows();
    Mat centered = coords.rowwise() - coords.colwise().mean();
    Mat out(n, 2);
    switch (kernel) {
        case SparkxKernel::Identity:
            out = centered;
            break;
        case SparkxKernel::Gaussian:
            for (Index d = 0; d < 2; ++d) {
                const Scalar sd = std::sqrt(centered.col(d).squaredNorm() / static_cast<Scalar>(std::max<Index>(n - 1, 1)));
                if (sd <= 0) throw DataError("degenerate coordinates");
                out.col(d) = (-centered.col(d).array().square() / (2 * sd * sd)).exp();
            }
            break;
        case SparkxKernel::Cosine:
            for (Index d = 0; d < 2; ++d) {
                const Scalar range = centered.col(d).maxCoeff() - centered.col(d).minCoeff();
                if (range <= 0) throw DataError("degenerate coordinates");
                out.col(d) = (2 * EIGEN_PI * centered.col(d).array() / range).cos();
            }
            break;
    }
    // Center the transformed columns; T is then trace-based on centered
    // projections.
    out.rowwise() -= out.colwise().mean().eval();
    return out;
}

Scalar sparkx_nt(const Vec& y, const Mat& kernel_coords) {
    const Index n = y.size();
    if (kernel_coords.rows() != n) throw DataError("sparkx: expression/coordinate size mismatch");
    const Vec yc = y.array() - y.mean();
    const Scalar ss = yc.squaredNorm();
    if (ss <= 0) return 0; // constant gene: convention p = 1
    Eigen::Matrix2d gram = kernel_coords.transpose() * kernel_coords;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(gram);
    if (es.eigenvalues()(0) <= 1e-12 * std::max(es.eigenvalues()(1), 1.0))
        throw DataError("degenerate coordinates");
    const Eigen::Vector2d b = kernel_coords.transpose() * yc;
    const Scalar q = b.dot(gram.ldlt().solve(b));
    const Scalar r2 = std::clamp(q / ss, 0.0, 1.0);
    return static_cast<Scalar>(n) * r2;
}

Scalar sparkx_pvalue(Scalar n_t, Index n_cells) {
    if (n_cells <= 3) return 1.0;
    const Scalar r2 = std::clamp(n_t / static_cast<Scalar>(n_cells), 0.0, 1.0);
    if (r2 >= 1.0) return 0.0;
    // R^2 ~ Beta(1, (n-3)/2) under the exchangeable null with a rank-2
    // centered kernel; the upper tail is (1-R^2)^((n-3)/2).
    return std::exp(0.5 * static_cast<Scalar>(n_cells - 3) * std::log1p(-r2));
}

SparkxResult sparkx_test(const CountMatrix& m) {
    if (!m.coords) throw DataError("sparkx: dataset has no coordinates");
    const Index n = m.n_cells(), p = m.n_genes();
    const Mat dense = m.dense();

    SparkxResult res;
    res.null_reference = "R2 ~ Beta(1,(n-3)/2), exact exchangeable null (chi2_2 limit of n*T)";
    const SparkxKernel kinds[] = {SparkxKernel::Identity, SparkxKernel::Gaussian, SparkxKernel::Cosine};
    res.combined_p = Vec::Ones(p);
    res.max_nt = Vec::Zero(p);
    for (SparkxKernel kind : kinds) {
        SpatialTestResult kr;
        kr.kernel = kind;
        kr.statistic.resize(p);
        kr.pval.resize(p);
        const Mat kc = sparkx_kernel_coords(*m.coords, kind);
        parallel_for(p, [&](Index begin, Index end) {
            for (Index g = begin; g < end; ++g) {
                const Scalar nt = sparkx_nt(dense.col(g), kc);
                kr.statistic(g) = nt / static_cast<Scalar>(n); // T = trace(E_C Sigma_C)/n
                kr.pval(g) = sparkx_pvalue(nt, n);
            }
        });
        res.kernels.push_back(std::move(kr));
    }
    const Scalar bonf = static_cast<Scalar>(res.kernels.size());
    for (Index g = 0; g < p; ++g) {
        Scalar pmin = 1.0, ntmax = 0.0;
        for (const auto& kr : res.kernels) {
            pmin = std::min(pmin, kr.pval(g));
            ntmax = std::max(ntmax, kr.statistic(g) * static_cast<Scalar>(n));
        }
        res.combined_p(g) = std::min(1.0, bonf * pmin);
        res.max_nt(g) = ntmax;
    }
    return res;
}

std::vector<Index> select_se_genes(const SparkxResult& res, const std::vector<std::string>& genes,
                                   Index k) {
    const Index p = res.combined_p.size();
    if (k <= 0) throw ConfigError("select_se_genes: k must be positive");
    if (k > p) throw ConfigError("select_se_genes: k exceeds gene count");
    if (static_cast<Index>(genes.size()) != p) throw DataError("select_se_genes: gene names mismatch");
    std::vector<Index> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), Index{0});
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        if (res.combined_p(a) != res.combined_p(b)) return res.combined_p(a) < res.combined_p(b);
        if (res.max_nt(a) != res.max_nt(b)) return res.max_nt(a) > res.max_nt(b);
        return genes[static_cast<std::size_t>(a)] < genes[static_cast<std::size_t>(b)];
    });
    order.resize(static_cast<std::size_t>(k));
    return order;
}

} // namespace coexmap

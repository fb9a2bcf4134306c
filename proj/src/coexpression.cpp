#include "coexmap/coexpression.hpp"

#include <algorithm>
#include <cmath>

#include "coexmap/parallel.hpp"

namespace coexmap {

namespace {

constexpr Scalar kVarFloor = 1e-12;

Mat dense_subset(const CountMatrix& m, const std::vector<Index>& genes) {
    Mat x = Mat::Zero(m.n_cells(), static_cast<Index>(genes.size()));
    for (std::size_t k = 0; k < genes.size(); ++k) {
        const Index g = genes[k];
        if (g < 0 || g >= m.n_genes()) throw DataError("coexpression: gene index out of range");
        for (CountSpMat::InnerIterator it(m.values, g); it; ++it)
            x(it.row(), static_cast<Index>(k)) = static_cast<Scalar>(it.value());
    }
    return x;
}

// v_ij = s_i mu_j + s_i^2 sigma_jj, floored away from zero.
Mat measurement_variance(const Vec& s, const Vec& mu, const Vec& sigma_diag) {
    Mat v = s * mu.transpose() + (s.array().square().matrix()) * sigma_diag.transpose();
    return v.cwiseMax(kVarFloor);
}

} // namespace

CoexpressionEstimate estimate_moments_irls(const CountMatrix& m, const std::vector<Index>& genes,
                                           const IrlsParams& params) {
    const Index n = m.n_cells();
    const Index p = static_cast<Index>(genes.size());
    if (n < 30) throw DataError("estimate_moments_irls: need at least 30 cells");
    if (p == 0) throw DataError("estimate_moments_irls: empty gene list");
    if (p > 3000) throw ConfigError("estimate_moments_irls: gene count exceeds the 3000-gene cap");

    const Vec s = m.depths();
    const Mat x = dense_subset(m, genes);
    const Vec s2 = s.array().square();

    CoexpressionEstimate est;
    est.variance_floored.assign(static_cast<std::size_t>(p), 0);

    // OLS initialization: x on s, then (e^2 - s mu) on s^2.
    Vec mu = (s.transpose() * x).transpose() / s2.sum();
    mu = mu.cwiseMax(0.0);
    Mat resid = x - s * mu.transpose();
    Vec sigma_diag(p);
    const Scalar s4sum = s2.array().square().sum();
    for (Index j = 0; j < p; ++j) {
        const Vec target = resid.col(j).array().square().matrix() - s * mu(j);
        sigma_diag(j) = s2.dot(target) / s4sum;
    }
    sigma_diag = sigma_diag.cwiseMax(0.0);

    Mat sigma_prev = Mat::Zero(p, p);
    est.converged = false;
    for (int it = 0; it < params.max_iterations; ++it) {
        const Mat v = measurement_variance(s, mu, sigma_diag);
        const Mat inv_v = v.cwiseInverse();

        // Weighted mean regression: mu_j = sum_i w s x / sum_i w s^2, w = 1/v.
        for (Index j = 0; j < p; ++j) {
            const Scalar num = (inv_v.col(j).cwiseProduct(s).cwiseProduct(x.col(j))).sum();
            const Scalar den = (inv_v.col(j).cwiseProduct(s2)).sum();
            mu(j) = den > 0 ? std::max(num / den, 0.0) : 0.0;
        }
        resid = x - s * mu.transpose();

        // Weighted variance regression with w = 1/v^2.
        for (Index j = 0; j < p; ++j) {
            const Vec w = inv_v.col(j).array().square();
            const Vec target = resid.col(j).array().square() - (s.array() * mu(j));
            const Scalar num = (w.cwiseProduct(s2).cwiseProduct(target)).sum();
            const Scalar den = (w.cwiseProduct(s2).cwiseProduct(s2)).sum();
            Scalar sj = den > 0 ? num / den : 0.0;
            if (sj < 0) {
                sj = 0;
                est.variance_floored[static_cast<std::size_t>(j)] = 1;
            } else {
                est.variance_floored[static_cast<std::size_t>(j)] = 0;
            }
            sigma_diag(j) = sj;
        }

        // Covariance regression; the factorized weights reduce it to GEMMs:
        // sigma_jj' = (A^T A)_{jj'} / (C^T C)_{jj'} with A = s e / v, C = s^2 / v.
        const Mat v_new = measurement_variance(s, mu, sigma_diag);
        const Mat a = (resid.cwiseQuotient(v_new).array().colwise() * s.array()).matrix();
        const Mat c = (v_new.cwiseInverse().array().colwise() * s2.array()).matrix();
        Mat num = a.transpose() * a;
        Mat den = c.transpose() * c;
        Mat sigma = num.cwiseQuotient(den.cwiseMax(kVarFloor));
        sigma.diagonal() = sigma_diag;

        est.iterations = it + 1;
        const Scalar change = (sigma - sigma_prev).norm();
        const Scalar scale = std::max(sigma.norm(), 1e-30);
        sigma_prev = sigma;
        if (change / scale < params.tol) {
            est.converged = true;
            break;
        }
    }

    est.mu = mu;
    est.sigma = sigma_prev;
    // Exact symmetry regardless of accumulation order.
    est.sigma = ((est.sigma + est.sigma.transpose()) / 2).eval();
    est.sigma.diagonal() = sigma_diag;

    est.rho = Mat::Zero(p, p);
    for (Index j = 0; j < p; ++j) {
        for (Index k = 0; k < p; ++k) {
            if (j == k) {
                est.rho(j, k) = 1.0;
                continue;
            }
            const Scalar d = std::sqrt(sigma_diag(j) * sigma_diag(k));
            // Zero-variance genes get a zeroed correlation row.
            est.rho(j, k) = d > 0 ? std::clamp(est.sigma(j, k) / d, -1.0, 1.0) : 0.0;
        }
    }
    return est;
}

Mat cscore_statistic(const Mat& residuals, const Mat& variances, const Vec& depths) {
    if (residuals.rows() != variances.rows() || residuals.cols() != variances.cols() ||
        residuals.rows() != depths.size())
        throw DataError("cscore_statistic: shape mismatch");
    const Mat v = variances.cwiseMax(kVarFloor);
    const Vec s2 = depths.array().square();
    // T = (A^T A) / sqrt(C^T C) elementwise, A = s e / v, C = s^2 / v.
    const Mat a = (residuals.cwiseQuotient(v).array().colwise() * depths.array()).matrix();
    const Mat c = (v.cwiseInverse().array().colwise() * s2.array()).matrix();
    const Mat num = a.transpose() * a;
    const Mat den = c.transpose() * c;
    const Index p = residuals.cols();
    Mat t = Mat::Zero(p, p);
    for (Index j = 0; j < p; ++j)
        for (Index k = 0; k < p; ++k)
            t(j, k) = den(j, k) > kVarFloor ? num(j, k) / std::sqrt(den(j, k)) : 0.0;
    return t;
}

Mat normal_two_sided_pvals(const Mat& tstat) {
    return tstat.unaryExpr([](Scalar t) { return std::erfc(std::abs(t) / std::sqrt(2.0)); });
}

void cscore_test(CoexpressionEstimate& est, const CountMatrix& m, const std::vector<Index>& genes) {
    const Vec s = m.depths();
    const Mat x = dense_subset(m, genes);
    if (est.mu.size() != x.cols()) throw DataError("cscore_test: estimate does not match gene list");
    const Mat resid = x - s * est.mu.transpose();
    const Mat v = measurement_variance(s, est.mu, est.sigma.diagonal());
    est.tstat = cscore_statistic(resid, v, s);
    est.pvals = normal_two_sided_pvals(est.tstat);
    // Degenerate genes (mu = 0 and sigma_jj = 0) carry no evidence.
    for (Index j = 0; j < x.cols(); ++j) {
        if (est.mu(j) <= 0 && est.sigma(j, j) <= 0) {
            est.tstat.row(j).setZero();
            est.tstat.col(j).setZero();
            est.pvals.row(j).setOnes();
            est.pvals.col(j).setOnes();
        }
    }
    est.tstat.diagonal().setZero();
    est.pvals.diagonal().setZero(); // convention; excluded from edges
}

EdgeSet build_edges(const Mat& pvals, Scalar alpha) {
    if (alpha <= 0 || alpha >= 1) throw ConfigError("build_edges: alpha outside (0,1)");
    if (pvals.rows() != pvals.cols()) throw DataError("build_edges: p-value matrix not square");
    EdgeSet out;
    out.alpha = alpha;
    for (Index j = 0; j < pvals.rows(); ++j)
        for (Index k = j + 1; k < pvals.cols(); ++k)
            if (pvals(j, k) < alpha) out.edges.emplace_back(j, k);
    return out;
}

} // namespace coexmap

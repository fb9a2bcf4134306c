#ifndef COEXMAP_COEXPRESSION_HPP
#define COEXMAP_COEXPRESSION_HPP

#include <vector>

#include "coexmap/data.hpp"
#include "coexmap/types.hpp"

namespace coexmap {

// Moment-based IRLS estimation of latent expression means and covariances
// under the Poisson measurement model x_ij | z ~ Poisson(s_i z_ij) with
// E z = mu, Cov z = Sigma. The pairwise weights factorize as
// g_ijj' = 1/(v_ij v_ij') with v_ij = s_i mu_j + s_i^2 sigma_jj, which turns
// every pairwise sum into a matrix product.

struct IrlsParams {
    Scalar tol = 1e-6;   // relative Frobenius change of Sigma
    int max_iterations = 50;
    Scalar alpha = 0.005;
};

struct CoexpressionEstimate {
    Vec mu;       // latent mean per gene
    Mat sigma;    // latent covariance, symmetric
    Mat rho;      // correlation, unit diagonal, clamped to [-1, 1]
    Mat tstat;    // test statistic per pair (diagonal 0)
    Mat pvals;    // two-sided normal p-values (diagonal 0 by convention)
    bool converged = false;
    int iterations = 0;
    std::vector<std::uint8_t> variance_floored; // genes with sigma_jj clipped at 0
};

// Estimates mu, Sigma, rho on the selected genes (raw counts; depths over the
// full matrix). Does not fill tstat/pvals.
CoexpressionEstimate estimate_moments_irls(const CountMatrix& m, const std::vector<Index>& genes,
                                           const IrlsParams& params = {});

// Fills tstat/pvals using the final IRLS weights.
void cscore_test(CoexpressionEstimate& est, const CountMatrix& m, const std::vector<Index>& genes);

// Core statistic on explicit residuals e_ij = x_ij - E[x_ij] and variances
// v_ij = Var[x_ij]: T_jj' = sum_i s_i^2 e_ij e_ij' g / sqrt(sum_i s_i^4 v_ij
// v_ij' g^2) with g = 1/(v_ij v_ij'). Entries with vanishing denominator get
// T = 0. This entry point lets callers apply affine count transforms together
// with correspondingly transformed moments.
Mat cscore_statistic(const Mat& residuals, const Mat& variances, const Vec& depths);

Mat normal_two_sided_pvals(const Mat& tstat);

struct EdgeSet {
    std::vector<std::pair<Index, Index>> edges; // j < j'
    Scalar alpha = 0.005;
};

// Edge (j, j') iff j < j' and p < alpha.
EdgeSet build_edges(const Mat& pvals, Scalar alpha = 0.005);

} // namespace coexmap

#endif

#ifndef COEXMAP_PREPROCESS_HPP
#define COEXMAP_PREPROCESS_HPP

#include <string>
#include <vector>

#include "coexmap/data.hpp"
#include "coexmap/types.hpp"

namespace coexmap {

// ---- Negative-binomial GLM normalization -----------------------------------
//
// Per gene g the counts follow NB(mu_gc, theta_g) with ln mu_gc = beta_g0 +
// ln s_c; beta and theta are fitted by profile maximum likelihood and theta is
// then regularized across genes as a smooth function of the log gene mean.

struct NbFitParams {
    Scalar loglik_tol = 1e-8;
    int max_iterations = 100;
    Index smoothing_window = 51; // rolling-median width in log-mean order
    Scalar theta_min = 1e-4;
    Scalar theta_max = 1e8;
};

struct NBFit {
    Vec beta0;        // per-gene intercept
    Vec theta;        // per-gene ML dispersion
    Vec theta_reg;    // regularized dispersion (rolling median over log mean)
    Vec log_gene_mean;
    std::vector<std::uint8_t> fallback; // 1 where the fit fell back to moments
};

struct NbGeneFit {
    Scalar beta0 = 0;
    Scalar theta = 1;
    Scalar loglik = 0;
    bool converged = false;
};

// Profile likelihood for a single gene: golden-section over ln(theta) with a
// Newton solve of beta0 inside. Exposed for oracle tests.
NbGeneFit nb_fit_gene(const Vec& x, const Vec& s, const NbFitParams& params = {});
Scalar nb_loglik(const Vec& x, const Vec& s, Scalar beta0, Scalar theta);

NBFit fit_nb_glm(const CountMatrix& m, const NbFitParams& params = {});

struct ResidualMatrix {
    Mat values; // cells x genes
    std::vector<std::string> genes;
    Vec residual_variance;
};

// Z_gc = (x_gc - mu_gc) / sqrt(mu_gc + mu_gc^2 / theta_reg_g), clipped to
// +-sqrt(n_cells).
ResidualMatrix pearson_residuals(const CountMatrix& m, const NBFit& fit, bool clip = true);

// Indices of the k genes with largest residual variance, descending; ties
// break by gene name.
std::vector<Index> select_hvgs(const ResidualMatrix& r, Index k);

// ---- Spatially-expressed gene detection ------------------------------------
//
// Projection-trace statistic T = trace(E_C Sigma_C) / n per kernel, where both
// covariance matrices are built from column-centered inputs. n*T is then the
// squared multiple correlation between the gene and the two kernel-transformed
// coordinates, whose null law (exchangeable y) is Beta(1, (n-3)/2); that exact
// reference replaces the asymptotic chi-square approximation so null p-values
// are uniform at any n.

enum class SparkxKernel { Identity, Gaussian, Cosine };

std::string kernel_name(SparkxKernel k);

struct SpatialTestResult {
    SparkxKernel kernel = SparkxKernel::Identity;
    Vec statistic; // T = trace(E_C Sigma_C) / n
    Vec pval;
};

struct SparkxResult {
    std::vector<SpatialTestResult> kernels;
    Vec combined_p;  // Bonferroni-adjusted minimum over kernels
    Vec max_nt;      // max_k n*T_k, used to break p-value ties
    std::string null_reference; // records the null law used for the p-map
};

SparkxResult sparkx_test(const CountMatrix& m);

// n*T for one expression vector against one kernel matrix; building block for
// null replication in tests.
Scalar sparkx_nt(const Vec& y, const Mat& kernel_coords);
Scalar sparkx_pvalue(Scalar n_t, Index n_cells);
// Kernel transform of (uncentered) coordinates; columns are centered on
// output.
Mat sparkx_kernel_coords(const Mat& coords, SparkxKernel kernel);

// k smallest combined p-values; ties by statistic descending, then name.
std::vector<Index> select_se_genes(const SparkxResult& res, const std::vector<std::string>& genes,
                                   Index k);

} // namespace coexmap

#endif

#pragma once

#include <vector>

#include "mia/rng.hpp"

namespace mia::num {

// ---------------------------------------------------------------------------
// Special functions
// ---------------------------------------------------------------------------

// ln Gamma(x) for x > 0, Lanczos approximation (g = 7, 9 coefficients).
// Relative accuracy well below 1e-10 over the whole domain.
double log_gamma(double x);

// Modified Bessel function of the first kind I_v(x), real order v >= 0,
// x >= 0. Power series up to x = 50, ratio recurrence anchored on the
// large-argument expansion above. Throws std::domain_error on bad arguments
// and std::overflow_error for x > 700 (where I_v overflows a double; use
// log_bessel_i instead).
double bessel_i(double order, double x);

// ln I_v(x) computed without overflow for any x >= 0 (returns -inf when
// I_v(x) = 0, i.e. v > 0 and x = 0).
double log_bessel_i(double order, double x);

// Mean resultant length of a vMF(kappa) distribution in dimension m:
// A_m(kappa) = I_{m/2}(kappa) / I_{m/2-1}(kappa).
double vmf_mean_resultant(double kappa, int dim);

// ---------------------------------------------------------------------------
// Variational posteriors and their KL terms
// ---------------------------------------------------------------------------

// Diagonal Gaussian q = N(mu, diag(exp(log_var))).
struct GaussianPosterior {
    std::vector<double> mu;
    std::vector<double> log_var;
};

struct GaussianKl {
    double value = 0.0;
    std::vector<double> grad_mu;       // d KL / d mu_i      = mu_i
    std::vector<double> grad_log_var;  // d KL / d log_var_i = (exp(lv_i)-1)/2
};

// KL(q || N(0, I)) = 0.5 * sum(-log_var + exp(log_var) + mu^2 - 1).
GaussianKl kl_gaussian(const GaussianPosterior& q);

// von Mises–Fisher q = vMF(mu, kappa) on the unit sphere in R^dim.
struct VmfPosterior {
    std::vector<double> mu;  // unit direction, dim >= 3
    double kappa = 0.0;      // concentration >= 0
};

struct VmfKl {
    double value = 0.0;
    double grad_kappa = 0.0;
};

// KL(vMF(mu, kappa) || Uniform(S^{dim-1})). Independent of mu. Returns
// exactly 0 (with zero gradient) for kappa < 1e-8. The gradient is the
// analytic d KL / d kappa = kappa * (1 - R^2) - (dim - 1) * R with
// R = A_dim(kappa); it matches central finite differences.
VmfKl kl_vmf(double kappa, int dim);

// ---------------------------------------------------------------------------
// Reparameterized / direct samplers
// ---------------------------------------------------------------------------

// mu + exp(log_var / 2) * noise, elementwise. noise is the injected standard
// normal draw so gradients can flow through mu and log_var.
std::vector<double> sample_gaussian(const GaussianPosterior& q,
                                    const std::vector<double>& noise);

// A vMF draw in the "north frame": z = [w; sqrt(1-w^2) * v] with w from the
// rejection sampler and v uniform on S^{dim-2}. Rotating z so that e1 maps to
// mu (Householder reflection) yields the actual sample. Exposing the frame
// separately lets training freeze z and differentiate the rotation only.
std::vector<double> sample_vmf_north(double kappa, int dim, Rng& rng);

// Householder reflection taking e1 to the unit vector mu, applied to z.
std::vector<double> rotate_from_north(const std::vector<double>& mu,
                                      const std::vector<double>& z);

// Full sampler: north-frame draw + rotation. kappa = 0 falls back to a
// uniform draw on the sphere. Throws std::runtime_error if the rejection
// loop fails to accept within 1000 iterations (diagnostic, never observed
// at sane kappa).
std::vector<double> sample_vmf(const VmfPosterior& q, Rng& rng);

// ---------------------------------------------------------------------------
// Ranking metric
// ---------------------------------------------------------------------------

struct ScoredLabels {
    std::vector<double> scores;
    std::vector<int> labels;  // 0 or 1
};

// Mann–Whitney AUC with half-credit for ties, computed by sorting
// (O(n log n)). The numerator is accumulated in integer half-units, so the
// result is bit-identical to a pairwise-comparison evaluation. Throws
// std::invalid_argument if either class is absent or sizes mismatch.
double auc(const ScoredLabels& data);

}  // namespace mia::num

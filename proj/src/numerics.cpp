#include "mia/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mia::num {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

// ---------------------------------------------------------------------------
// log_gamma: Lanczos, g = 7, 9 coefficients. Relative error ~1e-15.
// ---------------------------------------------------------------------------

double log_gamma(double x) {
    if (!(x > 0.0) || !std::isfinite(x))
        throw std::domain_error("log_gamma: requires finite x > 0");
    static const double g = 7.0;
    static const double coef[9] = {
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    };
    if (x < 0.5) {
        // Reflection keeps the series in its accurate range.
        return std::log(M_PI / std::sin(M_PI * x)) - log_gamma(1.0 - x);
    }
    double z = x - 1.0;
    double a = coef[0];
    for (int i = 1; i < 9; ++i) a += coef[i] / (z + i);
    double t = z + g + 0.5;
    return 0.5 * std::log(2.0 * M_PI) + (z + 0.5) * std::log(t) - t + std::log(a);
}

// ---------------------------------------------------------------------------
// Modified Bessel I. Two branches:
//  - x <= 50: ascending power series, terms by recurrence, prefix in logs.
//  - x  > 50: ratio chain. Anchor log I_f (0 <= f < 1) with the large-x
//    expansion, then climb to the requested order through I_{v}/I_{v-1}
//    ratios; the top ratio comes from the Gauss continued fraction and the
//    rest fall out of the downward three-term recurrence. Everything stays
//    in log space, so nothing overflows.
// ---------------------------------------------------------------------------

namespace {

// Power-series branch. Returns {log prefix, series sum}:
// I_v(x) = exp(prefix) * sum,  prefix = v*log(x/2) - lgamma(v+1).
struct SeriesParts {
    double log_prefix;
    double sum;
};

SeriesParts bessel_series(double v, double x) {
    double q = 0.25 * x * x;
    double term = 1.0, sum = 1.0;
    for (int k = 1; k < 1000; ++k) {
        term *= q / (k * (v + k));
        sum += term;
        if (term < sum * 1e-17) break;
    }
    double prefix = (x > 0.0) ? v * std::log(0.5 * x) - log_gamma(v + 1.0)
                              : (v == 0.0 ? 0.0 : -kInf);
    return {prefix, sum};
}

// log I_f(x) for 0 <= f < 1 and large x, via the asymptotic expansion
// I_f(x) ~ e^x / sqrt(2 pi x) * sum_k (-1)^k c_k. With f < 1 the terms decay
// to far below double precision before the series turns divergent.
double log_bessel_asymptotic(double f, double x) {
    double mu = 4.0 * f * f;
    double term = 1.0, sum = 1.0;
    for (int k = 1; k <= 40; ++k) {
        double num = mu - (2.0 * k - 1.0) * (2.0 * k - 1.0);
        double next = -term * num / (8.0 * x * k);
        if (std::abs(next) >= std::abs(term)) break;  // divergence onset
        term = next;
        sum += term;
        if (std::abs(term) < 1e-18 * std::abs(sum)) break;
    }
    return x - 0.5 * std::log(2.0 * M_PI * x) + std::log(sum);
}

// I_v(x) / I_{v-1}(x) by the continued fraction
// r = 1 / (2v/x + 1/(2(v+1)/x + ...)), evaluated with modified Lentz.
double bessel_ratio_cf(double v, double x) {
    const double tiny = 1e-300;
    double b = 2.0 * v / x;
    double f = (b != 0.0) ? b : tiny;
    double c = f, d = 0.0;
    for (int j = 1; j < 40000; ++j) {
        b = 2.0 * (v + j) / x;
        d = b + d;
        if (d == 0.0) d = tiny;
        c = b + 1.0 / c;
        if (c == 0.0) c = tiny;
        d = 1.0 / d;
        double delta = c * d;
        f *= delta;
        if (std::abs(delta - 1.0) < 1e-16) break;
    }
    return 1.0 / f;
}

double log_bessel_large(double v, double x) {
    double n_whole = std::floor(v);
    double f = v - n_whole;
    int n = static_cast<int>(n_whole);
    double log_anchor = log_bessel_asymptotic(f, x);
    if (n == 0) return log_anchor;
    // Top ratio from the continued fraction, the rest by downward recurrence
    // r_{v-1} = 1 / (2(v-1)/x + r_v); all ratios lie in (0, 1).
    double log_ratios = 0.0;
    double r = bessel_ratio_cf(f + n, x);
    log_ratios += std::log(r);
    for (int k = n - 1; k >= 1; --k) {
        r = 1.0 / (2.0 * (f + k) / x + r);
        log_ratios += std::log(r);
    }
    return log_anchor + log_ratios;
}

void check_bessel_args(double order, double x) {
    if (!(order >= 0.0) || !std::isfinite(order))
        throw std::domain_error("bessel_i: order must be finite and >= 0");
    if (!(x >= 0.0) || !std::isfinite(x))
        throw std::domain_error("bessel_i: x must be finite and >= 0");
}

}  // namespace

double log_bessel_i(double order, double x) {
    check_bessel_args(order, x);
    if (x == 0.0) return order == 0.0 ? 0.0 : -kInf;
    if (x <= 50.0) {
        SeriesParts p = bessel_series(order, x);
        return p.log_prefix + std::log(p.sum);
    }
    return log_bessel_large(order, x);
}

double bessel_i(double order, double x) {
    check_bessel_args(order, x);
    if (x > 700.0)
        throw std::overflow_error("bessel_i: x > 700 overflows; use log_bessel_i");
    if (x == 0.0) return order == 0.0 ? 1.0 : 0.0;
    if (x <= 50.0) {
        SeriesParts p = bessel_series(order, x);
        return std::exp(p.log_prefix) * p.sum;
    }
    return std::exp(log_bessel_large(order, x));
}

double vmf_mean_resultant(double kappa, int dim) {
    if (dim < 2) throw std::domain_error("vmf_mean_resultant: dim must be >= 2");
    if (kappa <= 0.0) return 0.0;
    double half = 0.5 * dim;
    return std::exp(log_bessel_i(half, kappa) - log_bessel_i(half - 1.0, kappa));
}

// ---------------------------------------------------------------------------
// KL terms
// ---------------------------------------------------------------------------

GaussianKl kl_gaussian(const GaussianPosterior& q) {
    if (q.mu.size() != q.log_var.size())
        throw std::invalid_argument("kl_gaussian: mu/log_var size mismatch");
    GaussianKl out;
    std::size_t d = q.mu.size();
    out.grad_mu.resize(d);
    out.grad_log_var.resize(d);
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        double var = std::exp(q.log_var[i]);
        acc += -q.log_var[i] + var + q.mu[i] * q.mu[i] - 1.0;
        out.grad_mu[i] = q.mu[i];
        out.grad_log_var[i] = 0.5 * (var - 1.0);
    }
    out.value = 0.5 * acc;
    return out;
}

VmfKl kl_vmf(double kappa, int dim) {
    if (dim < 3) throw std::domain_error("kl_vmf: dim must be >= 3");
    if (!(kappa >= 0.0) || !std::isfinite(kappa))
        throw std::domain_error("kl_vmf: kappa must be finite and >= 0");
    if (kappa < 1e-8) return {0.0, 0.0};
    double half = 0.5 * dim;
    double r = vmf_mean_resultant(kappa, dim);
    double value = kappa * r + (half - 1.0) * std::log(kappa)
                 - log_bessel_i(half - 1.0, kappa)
                 + (1.0 - half) * std::log(2.0) - log_gamma(half);
    // d/dkappa of the ratio: r' = 1 - r^2 - (dim-1) r / kappa, and only the
    // kappa * r term plus the log I derivative survive cancellation.
    double grad = kappa * (1.0 - r * r) - (dim - 1.0) * r;
    return {value, grad};
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

std::vector<double> sample_gaussian(const GaussianPosterior& q,
                                    const std::vector<double>& noise) {
    if (q.mu.size() != q.log_var.size() || q.mu.size() != noise.size())
        throw std::invalid_argument("sample_gaussian: size mismatch");
    std::vector<double> z(q.mu.size());
    for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = q.mu[i] + std::exp(0.5 * q.log_var[i]) * noise[i];
    return z;
}

namespace {

std::vector<double> uniform_sphere(int dim, Rng& rng) {
    std::vector<double> v(dim);
    for (;;) {
        double n2 = 0.0;
        for (auto& x : v) {
            x = rng.normal();
            n2 += x * x;
        }
        if (n2 > 1e-24) {
            double inv = 1.0 / std::sqrt(n2);
            for (auto& x : v) x *= inv;
            return v;
        }
    }
}

}  // namespace

std::vector<double> sample_vmf_north(double kappa, int dim, Rng& rng) {
    if (dim < 3) throw std::domain_error("sample_vmf_north: dim must be >= 3");
    double m1 = dim - 1.0;
    double root = std::sqrt(4.0 * kappa * kappa + m1 * m1);
    double b = (-2.0 * kappa + root) / m1;
    double a = (m1 + 2.0 * kappa + root) / 4.0;
    double d = 4.0 * a * b / (1.0 + b) - m1 * std::log(m1);

    double w = 0.0;
    bool accepted = false;
    for (int it = 0; it < 1000; ++it) {
        double eps = rng.beta(0.5 * m1, 0.5 * m1);
        double denom = 1.0 - (1.0 - b) * eps;
        w = (1.0 - (1.0 + b) * eps) / denom;
        double t = 2.0 * a * b / denom;
        double u = rng.uniform_pos();
        if (m1 * std::log(t) - t + d >= std::log(u)) {
            accepted = true;
            break;
        }
    }
    if (!accepted)
        throw std::runtime_error("sample_vmf_north: rejection sampler failed to "
                                 "accept within 1000 iterations");

    std::vector<double> v = uniform_sphere(dim - 1, rng);
    std::vector<double> z(dim);
    z[0] = w;
    double s = std::sqrt(std::max(0.0, 1.0 - w * w));
    for (int i = 1; i < dim; ++i) z[i] = s * v[i - 1];
    return z;
}

std::vector<double> rotate_from_north(const std::vector<double>& mu,
                                      const std::vector<double>& z) {
    if (mu.size() != z.size())
        throw std::invalid_argument("rotate_from_north: size mismatch");
    std::size_t dim = mu.size();
    std::vector<double> h(dim);
    double n2 = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        h[i] = (i == 0 ? 1.0 : 0.0) - mu[i];
        n2 += h[i] * h[i];
    }
    if (n2 < 1e-24) return z;  // mu is already the north pole
    double inv = 1.0 / std::sqrt(n2);
    double hz = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
        h[i] *= inv;
        hz += h[i] * z[i];
    }
    std::vector<double> out(dim);
    for (std::size_t i = 0; i < dim; ++i) out[i] = z[i] - 2.0 * hz * h[i];
    return out;
}

std::vector<double> sample_vmf(const VmfPosterior& q, Rng& rng) {
    int dim = static_cast<int>(q.mu.size());
    if (dim < 3) throw std::domain_error("sample_vmf: dim must be >= 3");
    if (!(q.kappa >= 0.0) || !std::isfinite(q.kappa))
        throw std::domain_error("sample_vmf: kappa must be finite and >= 0");
    double n2 = 0.0;
    for (double x : q.mu) n2 += x * x;
    if (std::abs(n2 - 1.0) > 1e-6)
        throw std::domain_error("sample_vmf: mu must be a unit vector");
    if (q.kappa == 0.0) return uniform_sphere(dim, rng);
    std::vector<double> z = sample_vmf_north(q.kappa, dim, rng);
    return rotate_from_north(q.mu, z);
}

// ---------------------------------------------------------------------------
// AUC
// ---------------------------------------------------------------------------

double auc(const ScoredLabels& data) {
    const auto& s = data.scores;
    const auto& y = data.labels;
    if (s.size() != y.size())
        throw std::invalid_argument("auc: scores/labels size mismatch");
    if (s.empty()) throw std::invalid_argument("auc: empty input");
    long long pos = 0, neg = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] == 1) ++pos;
        else if (y[i] == 0) ++neg;
        else throw std::invalid_argument("auc: label outside {0,1}");
        if (!std::isfinite(s[i])) throw std::invalid_argument("auc: non-finite score");
    }
    if (pos == 0 || neg == 0)
        throw std::invalid_argument("auc: both classes must be present");

    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return s[a] < s[b]; });

    // Rank sum over positives with midranks for ties, accumulated in integer
    // half-units: a tie run occupying sorted positions [i, j) contributes
    // (i + j + 1) half-units per positive. Keeping the numerator integral
    // makes the result bit-identical to the pairwise count.
    long long two_rank_sum = 0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        long long run_pos = 0;
        while (j < idx.size() && s[idx[j]] == s[idx[i]]) {
            run_pos += y[idx[j]];
            ++j;
        }
        two_rank_sum += run_pos * static_cast<long long>(i + j + 1);
        i = j;
    }
    long long two_u = two_rank_sum - pos * (pos + 1);
    return static_cast<double>(two_u) / static_cast<double>(2 * pos * neg);
}

}  // namespace mia::num

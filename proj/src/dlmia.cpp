#include "mia/dlmia.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace mia::dlmia {

namespace {

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
}

double bce_single(double p_member, double p_non, int y) {
    constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
    double p1 = std::clamp(p_member, lo, hi);
    double p2 = std::clamp(p_non, lo, hi);
    return -(y * std::log(p1) + (1 - y) * std::log(p2));
}

nn::LinearParams init_linear(int out, int in, Rng& rng) {
    nn::LinearParams p;
    p.w = nn::DenseMatrix(out, in);
    p.b.assign(out, 0.0);
    double limit = std::sqrt(6.0 / (in + out));
    for (auto& v : p.w.data) v = (2.0 * rng.uniform() - 1.0) * limit;
    return p;
}

nn::LinearParams zero_like(const nn::LinearParams& p) {
    nn::LinearParams g;
    g.w = nn::DenseMatrix(p.w.rows, p.w.cols);
    g.b.assign(p.b.size(), 0.0);
    return g;
}

// Accumulates the backward of y = x W^T + b for one row.
void linear_backward_row(const double* x, const double* dy, int out, int in,
                         nn::LinearParams& g) {
    for (int o = 0; o < out; ++o) {
        double d = dy[o];
        if (d == 0.0) continue;
        g.b[o] += d;
        double* gw = g.w.row(o);
        for (int i = 0; i < in; ++i) gw[i] += d * x[i];
    }
}

nn::DenseMatrix sample_matrix(const std::vector<diffvec::AttackSample>& v,
                              int dim, const char* who) {
    nn::DenseMatrix x(static_cast<int>(v.size()), dim);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (static_cast<int>(v[i].diff.size()) != dim)
            throw std::invalid_argument(std::string(who) +
                                        ": difference-vector width mismatch");
        std::copy(v[i].diff.begin(), v[i].diff.end(), x.row(static_cast<int>(i)));
    }
    return x;
}

std::vector<int> shadow_labels(const std::vector<diffvec::AttackSample>& v,
                               const char* who) {
    std::vector<int> y(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!v[i].label.has_value())
            throw std::invalid_argument(std::string(who) +
                                        ": shadow sample without a label");
        y[i] = *v[i].label;
    }
    return y;
}

// Per-sample latent state, enough to replay the chain rule.
struct SampleLatent {
    std::vector<double> mu, log_var, eps, f_inv;
    std::vector<double> mu_alpha;  // unit direction
    double dir_norm = 1.0;
    double kappa_raw = 0.0, kappa = 0.0;
    std::vector<double> z;  // north-frame sample; empty = deterministic
    std::vector<double> f_spe;
    num::GaussianKl gkl;
    num::VmfKl vkl;
};

SampleLatent latent_forward(const DlMiaConfig& cfg, const double* gauss_out,
                            const double* vmf_out, const ElboNoise* replay,
                            Rng* rng) {
    const int d = cfg.d_inv, m = cfg.m;
    SampleLatent s;
    s.mu.assign(gauss_out, gauss_out + d);
    s.log_var.assign(gauss_out + d, gauss_out + 2 * d);
    if (replay != nullptr) {
        s.eps = replay->eps;
        s.z = replay->z;
        if (!s.eps.empty() && static_cast<int>(s.eps.size()) != d)
            throw std::invalid_argument("latent_forward: replay noise mismatch");
        if (!s.z.empty() && static_cast<int>(s.z.size()) != m)
            throw std::invalid_argument("latent_forward: replay noise mismatch");
    } else if (rng != nullptr) {
        s.eps.resize(d);
        for (auto& e : s.eps) e = rng->normal();
    }
    s.f_inv = s.mu;
    if (!s.eps.empty())
        for (int i = 0; i < d; ++i)
            s.f_inv[i] += std::exp(0.5 * s.log_var[i]) * s.eps[i];

    double n2 = 0.0;
    for (int i = 0; i < m; ++i) n2 += vmf_out[i] * vmf_out[i];
    s.dir_norm = std::max(std::sqrt(n2), 1e-12);
    s.mu_alpha.resize(m);
    for (int i = 0; i < m; ++i) s.mu_alpha[i] = vmf_out[i] / s.dir_norm;
    s.kappa_raw = vmf_out[m];
    s.kappa = softplus(s.kappa_raw);
    if (replay == nullptr && rng != nullptr)
        s.z = num::sample_vmf_north(s.kappa, m, *rng);
    s.f_spe = s.z.empty() ? s.mu_alpha : num::rotate_from_north(s.mu_alpha, s.z);

    s.gkl = num::kl_gaussian({s.mu, s.log_var});
    s.vkl = num::kl_vmf(s.kappa, m);
    return s;
}

// kl_w scales the KL gradients (the per-sample objective weight). d_finv and
// d_fspe already carry their weights from the reconstruction/classifier
// paths. The sampled direction z is constant with respect to kappa.
void latent_backward(const DlMiaConfig& cfg, const SampleLatent& s,
                     const double* d_finv, const double* d_fspe, double kl_w,
                     double* d_gauss_out, double* d_vmf_out) {
    const int d = cfg.d_inv, m = cfg.m;
    for (int i = 0; i < d; ++i) {
        double dmu = d_finv[i] + kl_w * s.gkl.grad_mu[i];
        double dlv = kl_w * s.gkl.grad_log_var[i];
        if (!s.eps.empty())
            dlv += d_finv[i] * s.eps[i] * 0.5 * std::exp(0.5 * s.log_var[i]);
        d_gauss_out[i] = dmu;
        d_gauss_out[d + i] = dlv;
    }

    // f_spe -> mu_alpha (through the reflection when sampling, directly when
    // deterministic), then mu_alpha = r/||r|| -> raw direction r.
    std::vector<double> d_mu_alpha(m, 0.0);
    if (s.z.empty()) {
        for (int i = 0; i < m; ++i) d_mu_alpha[i] = d_fspe[i];
    } else {
        std::vector<double> h(m);
        double n2 = 0.0;
        for (int i = 0; i < m; ++i) {
            h[i] = (i == 0 ? 1.0 : 0.0) - s.mu_alpha[i];
            n2 += h[i] * h[i];
        }
        if (n2 >= 1e-24) {
            double n = std::sqrt(n2);
            double hz = 0.0, hu = 0.0;
            for (int i = 0; i < m; ++i) {
                h[i] /= n;
                hz += h[i] * s.z[i];
                hu += h[i] * d_fspe[i];
            }
            for (int i = 0; i < m; ++i)
                d_mu_alpha[i] =
                    (2.0 / n) * (hu * s.z[i] + hz * d_fspe[i] - 2.0 * hz * hu * h[i]);
        }
    }
    double dot = 0.0;
    for (int i = 0; i < m; ++i) dot += s.mu_alpha[i] * d_mu_alpha[i];
    for (int i = 0; i < m; ++i)
        d_vmf_out[i] = (d_mu_alpha[i] - s.mu_alpha[i] * dot) / s.dir_norm;
    d_vmf_out[m] = kl_w * s.vkl.grad_kappa * sigmoid(s.kappa_raw);
}

struct PassOptions {
    bool weighted = false;     // apply w = max(0, a*p + b); else w = 1
    bool score_grads = false;  // accumulate d/d(score_a), d/d(score_b)
    bool stochastic = false;   // sample latents from rng
    bool need_grads = true;
    const std::vector<ElboNoise>* replay = nullptr;
    Rng* rng = nullptr;
};

struct PassResult {
    double bce_part = 0.0;
    double elbo_part = 0.0;
    double value = 0.0;
    ModelGrads grads;
    std::vector<ElboNoise> noise;
};

ModelGrads zero_grads(const DlMiaState& st) {
    ModelGrads g;
    if (!st.cfg.identity_encoding) {
        g.gauss = zero_like(st.gauss_head);
        g.vmf = zero_like(st.vmf_head);
    }
    return g;
}

double sample_weight(const DlMiaState& st, double score, bool weighted) {
    if (!weighted) return 1.0;
    double pre = st.score_a * score + st.score_b;
    return pre > 0.0 ? pre : 0.0;
}

// The joint objective of both training stages:
//   (1/N_shadow) sum_sh w_i*bce_i + (1/N_total) sum_all w_i*elbo_i
// evaluated in one pass, with gradients for every trainable tensor. In
// identity mode the variational part vanishes and the classifier reads the
// raw difference vectors.
PassResult objective_pass(const DlMiaState& st, const nn::DenseMatrix& xs,
                          const std::vector<int>& ys, const nn::DenseMatrix& xt,
                          const PassOptions& opt) {
    const DlMiaConfig& cfg = st.cfg;
    const int n_sh = xs.rows, n_tg = xt.rows, n_tot = n_sh + n_tg;
    if (n_sh == 0) throw std::invalid_argument("objective_pass: no shadow samples");
    const double inv_sh = 1.0 / static_cast<double>(n_sh);
    const double inv_tot = 1.0 / static_cast<double>(n_tot);

    PassResult out;
    out.grads = zero_grads(st);

    auto weight_of = [&](int i) {  // i indexes shadow rows then target rows
        double p = i < n_sh ? st.scores_shadow[i] : st.scores_target[i - n_sh];
        return sample_weight(st, p, opt.weighted);
    };

    if (cfg.identity_encoding) {
        nn::MlpCache cache = nn::mlp_forward(st.attack, xs);
        std::vector<double> w(n_sh);
        for (int i = 0; i < n_sh; ++i) w[i] = weight_of(i) * inv_sh;
        nn::BceResult bce = nn::bce_loss(cache.output, ys, w);
        out.bce_part = bce.value;
        out.value = bce.value;
        if (opt.need_grads)
            out.grads.attack = nn::mlp_backward(st.attack, cache, bce.grad_probs);
        return out;
    }

    const int d = cfg.d_inv, m = cfg.m, lat = d + m;
    // Stack shadow rows then target rows.
    nn::DenseMatrix x(n_tot, cfg.diff_dim);
    std::copy(xs.data.begin(), xs.data.end(), x.data.begin());
    std::copy(xt.data.begin(), xt.data.end(),
              x.data.begin() + static_cast<std::size_t>(n_sh) * cfg.diff_dim);

    nn::DenseMatrix gauss_out = nn::linear_forward(x, st.gauss_head.w, st.gauss_head.b);
    nn::DenseMatrix vmf_out = nn::linear_forward(x, st.vmf_head.w, st.vmf_head.b);

    std::vector<SampleLatent> lats;
    lats.reserve(n_tot);
    nn::DenseMatrix dec_in(n_tot, lat);
    out.noise.resize(n_tot);
    for (int i = 0; i < n_tot; ++i) {
        const ElboNoise* rep = opt.replay ? &(*opt.replay)[i] : nullptr;
        Rng* rng = opt.stochastic ? opt.rng : nullptr;
        SampleLatent s = latent_forward(cfg, gauss_out.row(i), vmf_out.row(i), rep, rng);
        std::copy(s.f_inv.begin(), s.f_inv.end(), dec_in.row(i));
        std::copy(s.f_spe.begin(), s.f_spe.end(), dec_in.row(i) + d);
        out.noise[i] = {s.eps, s.z};
        lats.push_back(std::move(s));
    }

    nn::MlpCache dec_cache = nn::mlp_forward(st.decoder, dec_in);
    nn::DenseMatrix att_in(n_sh, lat);
    std::copy(dec_in.data.begin(),
              dec_in.data.begin() + static_cast<std::size_t>(n_sh) * lat,
              att_in.data.begin());
    nn::MlpCache att_cache = nn::mlp_forward(st.attack, att_in);

    std::vector<double> w(n_tot);
    for (int i = 0; i < n_tot; ++i) w[i] = weight_of(i);

    std::vector<double> w_bce(n_sh);
    for (int i = 0; i < n_sh; ++i) w_bce[i] = w[i] * inv_sh;
    nn::BceResult bce = nn::bce_loss(att_cache.output, ys, w_bce);
    out.bce_part = bce.value;

    std::vector<double> elbo(n_tot);
    for (int i = 0; i < n_tot; ++i) {
        double recon = 0.0;
        const double* yhat = dec_cache.output.row(i);
        const double* xi = x.row(i);
        for (int c = 0; c < cfg.diff_dim; ++c) {
            double r = yhat[c] - xi[c];
            recon += r * r;
        }
        elbo[i] = 0.5 * recon + lats[i].gkl.value + lats[i].vkl.value;
        out.elbo_part += w[i] * elbo[i] * inv_tot;
    }
    out.value = out.bce_part + out.elbo_part;
    if (!opt.need_grads) return out;

    // Backward. Classifier path first: d(bce)/d(latent rows of shadow).
    nn::MlpGrads att_grads = nn::mlp_backward(st.attack, att_cache, bce.grad_probs);

    nn::DenseMatrix dec_upstream(n_tot, cfg.diff_dim);
    for (int i = 0; i < n_tot; ++i) {
        double scale = w[i] * inv_tot;
        const double* yhat = dec_cache.output.row(i);
        const double* xi = x.row(i);
        double* up = dec_upstream.row(i);
        for (int c = 0; c < cfg.diff_dim; ++c) up[c] = scale * (yhat[c] - xi[c]);
    }
    nn::MlpGrads dec_grads = nn::mlp_backward(st.decoder, dec_cache, dec_upstream);

    nn::DenseMatrix d_gauss_out(n_tot, 2 * d);
    nn::DenseMatrix d_vmf_out(n_tot, m + 1);
    std::vector<double> d_lat(lat);
    for (int i = 0; i < n_tot; ++i) {
        const double* from_dec = dec_grads.input.row(i);
        std::copy(from_dec, from_dec + lat, d_lat.begin());
        if (i < n_sh) {
            const double* from_att = att_grads.input.row(i);
            for (int c = 0; c < lat; ++c) d_lat[c] += from_att[c];
        }
        latent_backward(cfg, lats[i], d_lat.data(), d_lat.data() + d,
                        w[i] * inv_tot, d_gauss_out.row(i), d_vmf_out.row(i));
    }
    for (int i = 0; i < n_tot; ++i) {
        linear_backward_row(x.row(i), d_gauss_out.row(i), 2 * d, cfg.diff_dim,
                            out.grads.gauss);
        linear_backward_row(x.row(i), d_vmf_out.row(i), m + 1, cfg.diff_dim,
                            out.grads.vmf);
    }
    out.grads.decoder = std::move(dec_grads);
    out.grads.attack = std::move(att_grads);

    if (opt.score_grads) {
        for (int i = 0; i < n_tot; ++i) {
            double p = i < n_sh ? st.scores_shadow[i] : st.scores_target[i - n_sh];
            double pre = st.score_a * p + st.score_b;
            if (pre <= 0.0) continue;
            double dw = elbo[i] * inv_tot;
            if (i < n_sh) dw += bce.per_sample[i] * inv_sh;
            out.grads.score_a += p * dw;
            out.grads.score_b += dw;
        }
    }
    return out;
}

void apply_step(DlMiaState& st, ModelGrads& g) {
    if (!st.cfg.identity_encoding) {
        std::vector<nn::ParamRef> refs;
        refs.push_back({st.gauss_head.w.data.data(), g.gauss.w.data.data(),
                        st.gauss_head.w.data.size()});
        refs.push_back({st.gauss_head.b.data(), g.gauss.b.data(),
                        st.gauss_head.b.size()});
        refs.push_back({st.vmf_head.w.data.data(), g.vmf.w.data.data(),
                        st.vmf_head.w.data.size()});
        refs.push_back({st.vmf_head.b.data(), g.vmf.b.data(), st.vmf_head.b.size()});
        std::vector<nn::ParamRef> dec = nn::param_refs(st.decoder, g.decoder);
        refs.insert(refs.end(), dec.begin(), dec.end());
        nn::OptimizerSpec adam;
        adam.kind = nn::OptKind::kAdam;
        adam.lr = st.cfg.encdec_lr;
        nn::optimizer_step(adam, st.encdec_opt, refs);

        std::vector<nn::ParamRef> srefs;
        srefs.push_back({&st.score_a, &g.score_a, 1});
        srefs.push_back({&st.score_b, &g.score_b, 1});
        nn::OptimizerSpec map_adam;
        map_adam.kind = nn::OptKind::kAdam;
        map_adam.lr = st.cfg.score_map_lr;
        nn::optimizer_step(map_adam, st.scoremap_opt, srefs);
    }
    nn::OptimizerSpec sgd;
    sgd.kind = nn::OptKind::kSgdMomentum;
    sgd.lr = st.cfg.attack_lr;
    sgd.momentum = st.cfg.attack_momentum;
    std::vector<nn::ParamRef> arefs = nn::param_refs(st.attack, g.attack);
    nn::optimizer_step(sgd, st.attack_opt, arefs);
}

std::vector<std::vector<double>> deterministic_latents(
    const DlMiaState& st, const std::vector<diffvec::AttackSample>& samples) {
    std::vector<std::vector<double>> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        EncodeResult e = encode(st, s.diff, nullptr);
        std::vector<double> v = std::move(e.f_inv);
        v.insert(v.end(), e.f_spe.begin(), e.f_spe.end());
        out.push_back(std::move(v));
    }
    return out;
}

nn::DenseMatrix rows_matrix(const std::vector<std::vector<double>>& rows, int dim,
                            const char* who) {
    nn::DenseMatrix x(static_cast<int>(rows.size()), dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (static_cast<int>(rows[i].size()) != dim)
            throw std::invalid_argument(std::string(who) + ": row width mismatch");
        std::copy(rows[i].begin(), rows[i].end(), x.row(static_cast<int>(i)));
    }
    return x;
}

// Per-sample classifier loss of given latent rows against given labels.
std::vector<double> attack_losses(const DlMiaState& st,
                                  const std::vector<std::vector<double>>& rows,
                                  const std::vector<int>& labels) {
    if (rows.empty()) return {};
    int lat = st.cfg.identity_encoding ? st.cfg.diff_dim : st.cfg.d_inv + st.cfg.m;
    nn::DenseMatrix x = rows_matrix(rows, lat, "attack_losses");
    nn::MlpCache cache = nn::mlp_forward(st.attack, x);
    std::vector<double> ones(rows.size(), 1.0);
    return nn::bce_loss(cache.output, labels, ones).per_sample;
}

}  // namespace

DlMiaState init_state(const DlMiaConfig& cfg, int n_shadow, int n_target) {
    if (cfg.diff_dim <= 0)
        throw std::invalid_argument("init_state: diff_dim must be positive");
    if (n_shadow <= 0 || n_target < 0)
        throw std::invalid_argument("init_state: bad sample counts");
    DlMiaState st;
    st.cfg = cfg;
    const int lat = cfg.identity_encoding ? cfg.diff_dim : cfg.d_inv + cfg.m;

    if (!cfg.identity_encoding) {
        if (cfg.d_inv <= 0 || cfg.m < 3)
            throw std::invalid_argument(
                "init_state: need d_inv >= 1 and m >= 3 (sphere sampling)");
        Rng gr(derive_seed(cfg.seed, "gauss-head-init"));
        st.gauss_head = init_linear(2 * cfg.d_inv, cfg.diff_dim, gr);
        Rng vr(derive_seed(cfg.seed, "vmf-head-init"));
        st.vmf_head = init_linear(cfg.m + 1, cfg.diff_dim, vr);

        nn::MlpSpec dec_spec;
        dec_spec.widths.push_back(lat);
        for (int h : cfg.decoder_hidden) dec_spec.widths.push_back(h);
        dec_spec.widths.push_back(cfg.diff_dim);
        dec_spec.head = nn::OutputHead::kIdentity;
        Rng dr(derive_seed(cfg.seed, "decoder-init"));
        st.decoder = nn::make_mlp(dec_spec, dr);
    }

    nn::MlpSpec att_spec;
    att_spec.widths.push_back(lat);
    for (int h : cfg.attack_hidden) att_spec.widths.push_back(h);
    att_spec.widths.push_back(2);
    att_spec.head = nn::OutputHead::kSoftmax2;
    Rng ar(derive_seed(cfg.seed, "attack-init"));
    st.attack = nn::make_mlp(att_spec, ar);

    st.scores_shadow.assign(n_shadow, 1.0);
    st.scores_target.assign(n_target, 1.0);
    if (!cfg.identity_encoding) {
        Rng sr(derive_seed(cfg.seed, "scores-init"));
        for (auto& p : st.scores_shadow) p = 0.9 + 0.2 * sr.uniform();
        for (auto& p : st.scores_target) p = 0.9 + 0.2 * sr.uniform();
    }
    st.noise = Rng(derive_seed(cfg.seed, "vae-noise"));
    return st;
}

EncodeResult encode(const DlMiaState& state, const std::vector<double>& diff,
                    Rng* rng) {
    const DlMiaConfig& cfg = state.cfg;
    if (static_cast<int>(diff.size()) != cfg.diff_dim)
        throw std::invalid_argument("encode: difference-vector width mismatch");
    EncodeResult out;
    if (cfg.identity_encoding) {
        out.f_inv = diff;
        return out;
    }
    nn::DenseMatrix x(1, cfg.diff_dim);
    std::copy(diff.begin(), diff.end(), x.row(0));
    nn::DenseMatrix g = nn::linear_forward(x, state.gauss_head.w, state.gauss_head.b);
    nn::DenseMatrix v = nn::linear_forward(x, state.vmf_head.w, state.vmf_head.b);
    SampleLatent s = latent_forward(cfg, g.row(0), v.row(0), nullptr, rng);
    out.f_inv = std::move(s.f_inv);
    out.f_spe = std::move(s.f_spe);
    out.kl_inv = s.gkl.value;
    out.kl_spe = s.vkl.value;
    return out;
}

ElboEval elbo_loss(const DlMiaState& state, const std::vector<double>& diff,
                   const ElboNoise* replay, Rng* rng) {
    const DlMiaConfig& cfg = state.cfg;
    if (cfg.identity_encoding)
        throw std::logic_error("elbo_loss: identity mode has no variational objective");
    if (static_cast<int>(diff.size()) != cfg.diff_dim)
        throw std::invalid_argument("elbo_loss: difference-vector width mismatch");
    const int d = cfg.d_inv, m = cfg.m, lat = d + m;

    nn::DenseMatrix x(1, cfg.diff_dim);
    std::copy(diff.begin(), diff.end(), x.row(0));
    nn::DenseMatrix g = nn::linear_forward(x, state.gauss_head.w, state.gauss_head.b);
    nn::DenseMatrix v = nn::linear_forward(x, state.vmf_head.w, state.vmf_head.b);
    SampleLatent s = latent_forward(cfg, g.row(0), v.row(0), replay,
                                    replay ? nullptr : rng);

    nn::DenseMatrix dec_in(1, lat);
    std::copy(s.f_inv.begin(), s.f_inv.end(), dec_in.row(0));
    std::copy(s.f_spe.begin(), s.f_spe.end(), dec_in.row(0) + d);
    nn::MlpCache dec_cache = nn::mlp_forward(state.decoder, dec_in);

    ElboEval out;
    double recon = 0.0;
    nn::DenseMatrix dec_up(1, cfg.diff_dim);
    for (int c = 0; c < cfg.diff_dim; ++c) {
        double r = dec_cache.output(0, c) - diff[c];
        recon += r * r;
        dec_up(0, c) = r;
    }
    out.value = 0.5 * recon + s.gkl.value + s.vkl.value;
    out.noise = {s.eps, s.z};

    out.d_decoder = nn::mlp_backward(state.decoder, dec_cache, dec_up);
    nn::DenseMatrix d_gauss_out(1, 2 * d);
    nn::DenseMatrix d_vmf_out(1, m + 1);
    latent_backward(cfg, s, out.d_decoder.input.row(0),
                    out.d_decoder.input.row(0) + d, 1.0, d_gauss_out.row(0),
                    d_vmf_out.row(0));
    out.d_gauss = zero_like(state.gauss_head);
    out.d_vmf = zero_like(state.vmf_head);
    linear_backward_row(x.row(0), d_gauss_out.row(0), 2 * d, cfg.diff_dim, out.d_gauss);
    linear_backward_row(x.row(0), d_vmf_out.row(0), m + 1, cfg.diff_dim, out.d_vmf);
    return out;
}

double truth_score(const std::array<double, 2>& attack_out_dis,
                   const std::array<double, 2>& attack_out_truth, int label) {
    if (label != 0 && label != 1)
        throw std::invalid_argument("truth_score: label outside {0,1}");
    double num = bce_single(attack_out_truth[0], attack_out_truth[1], label);
    double den = bce_single(attack_out_dis[0], attack_out_dis[1], label);
    return num / std::max(den, 1e-8);
}

ReweightedEval reweighted_loss(const DlMiaState& state,
                               const std::vector<diffvec::AttackSample>& shadow,
                               const std::vector<diffvec::AttackSample>& target,
                               const std::vector<ElboNoise>* replay, Rng* rng) {
    nn::DenseMatrix xs = sample_matrix(shadow, state.cfg.diff_dim, "reweighted_loss");
    nn::DenseMatrix xt = sample_matrix(target, state.cfg.diff_dim, "reweighted_loss");
    std::vector<int> ys = shadow_labels(shadow, "reweighted_loss");
    if (state.scores_shadow.size() != shadow.size() ||
        state.scores_target.size() != target.size())
        throw std::invalid_argument("reweighted_loss: score table size mismatch");
    if (replay != nullptr && replay->size() != shadow.size() + target.size())
        throw std::invalid_argument("reweighted_loss: replay noise size mismatch");
    PassOptions opt;
    opt.weighted = true;
    opt.score_grads = !state.cfg.identity_encoding;
    opt.stochastic = replay == nullptr && rng != nullptr;
    opt.replay = replay;
    opt.rng = rng;
    PassResult pr = objective_pass(state, xs, ys, xt, opt);
    ReweightedEval out;
    out.value = pr.value;
    out.bce_part = pr.bce_part;
    out.elbo_part = pr.elbo_part;
    out.grads = std::move(pr.grads);
    out.noise = std::move(pr.noise);
    return out;
}

EstimationEval estimation_loss(const DlMiaState& state,
                               const std::vector<diffvec::AttackSample>& shadow,
                               const std::vector<diffvec::AttackSample>& target,
                               const std::vector<int>& pseudo_labels,
                               const std::vector<std::vector<double>>& f_rew_shadow,
                               const std::vector<std::vector<double>>& f_rew_target) {
    if (state.dis_shadow.size() != shadow.size() ||
        state.dis_target.size() != target.size())
        throw std::invalid_argument(
            "estimation_loss: state holds no pretraining snapshot for these samples");
    if (pseudo_labels.size() != target.size() ||
        f_rew_shadow.size() != shadow.size() || f_rew_target.size() != target.size())
        throw std::invalid_argument("estimation_loss: input size mismatch");

    std::vector<int> ys = shadow_labels(shadow, "estimation_loss");
    std::vector<double> dis_sh = attack_losses(state, state.dis_shadow, ys);
    std::vector<double> rew_sh = attack_losses(state, f_rew_shadow, ys);
    std::vector<double> dis_tg = attack_losses(state, state.dis_target, pseudo_labels);
    std::vector<double> rew_tg = attack_losses(state, f_rew_target, pseudo_labels);

    EstimationEval out;
    out.grad_shadow.assign(shadow.size(), 0.0);
    out.grad_target.assign(target.size(), 0.0);
    double abs_sum = 0.0;
    auto add_group = [&](const std::vector<double>& scores,
                         const std::vector<double>& dis,
                         const std::vector<double>& rew, std::vector<double>& grad) {
        if (dis.empty()) return;
        double inv = 1.0 / static_cast<double>(dis.size());
        for (std::size_t i = 0; i < dis.size(); ++i) {
            double r = scores[i] * dis[i] - rew[i];
            out.value += inv * r * r;
            grad[i] = 2.0 * inv * r * dis[i];
            abs_sum += std::abs(r);
        }
    };
    add_group(state.scores_shadow, dis_sh, rew_sh, out.grad_shadow);
    add_group(state.scores_target, dis_tg, rew_tg, out.grad_target);
    out.mean_abs_residual =
        abs_sum / static_cast<double>(shadow.size() + target.size());
    return out;
}

PretrainResult pretrain(DlMiaState& state,
                        const std::vector<diffvec::AttackSample>& shadow,
                        const std::vector<diffvec::AttackSample>& target,
                        int epochs) {
    if (epochs < 0) throw std::invalid_argument("pretrain: negative epochs");
    PretrainResult res;
    if (epochs == 0) return res;
    nn::DenseMatrix xs = sample_matrix(shadow, state.cfg.diff_dim, "pretrain");
    nn::DenseMatrix xt = sample_matrix(target, state.cfg.diff_dim, "pretrain");
    std::vector<int> ys = shadow_labels(shadow, "pretrain");
    if (state.scores_shadow.size() != shadow.size() ||
        state.scores_target.size() != target.size())
        throw std::invalid_argument("pretrain: state sized for different sample counts");

    for (int epoch = 1; epoch <= epochs; ++epoch) {
        PassOptions opt;
        opt.weighted = false;
        opt.score_grads = false;
        opt.stochastic = !state.cfg.identity_encoding;
        opt.rng = &state.noise;
        PassResult pr = objective_pass(state, xs, ys, xt, opt);
        if (!std::isfinite(pr.value))
            throw std::runtime_error("pretrain: non-finite loss at epoch " +
                                     std::to_string(epoch));
        apply_step(state, pr.grads);

        EpochMetrics em;
        em.phase = "pretrain";
        em.epoch = epoch;
        em.loss_bce = pr.bce_part;
        em.loss_elbo = pr.elbo_part;
        res.trace.push_back(std::move(em));

        PassOptions ev;
        ev.weighted = false;
        ev.stochastic = false;
        ev.need_grads = false;
        res.eval_total.push_back(objective_pass(state, xs, ys, xt, ev).value);
    }
    state.dis_shadow = deterministic_latents(state, shadow);
    state.dis_target = deterministic_latents(state, target);
    return res;
}

std::vector<double> attack_predict(const DlMiaState& state,
                                   const std::vector<diffvec::AttackSample>& samples) {
    if (samples.empty()) return {};
    std::vector<std::vector<double>> lats = deterministic_latents(state, samples);
    int lat_dim = state.cfg.identity_encoding ? state.cfg.diff_dim
                                              : state.cfg.d_inv + state.cfg.m;
    nn::DenseMatrix x = rows_matrix(lats, lat_dim, "attack_predict");
    nn::MlpCache cache = nn::mlp_forward(state.attack, x);
    std::vector<double> probs(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i)
        probs[i] = cache.output(static_cast<int>(i), 0);
    return probs;
}

AlternatingResult alternating_train(DlMiaState& state,
                                    const std::vector<diffvec::AttackSample>& shadow,
                                    const std::vector<diffvec::AttackSample>& target) {
    const DlMiaConfig& cfg = state.cfg;
    if (!cfg.identity_encoding &&
        (state.dis_shadow.size() != shadow.size() ||
         state.dis_target.size() != target.size()))
        throw std::logic_error("alternating_train: state has no pretraining snapshot");
    nn::DenseMatrix xs = sample_matrix(shadow, cfg.diff_dim, "alternating_train");
    nn::DenseMatrix xt = sample_matrix(target, cfg.diff_dim, "alternating_train");
    std::vector<int> ys = shadow_labels(shadow, "alternating_train");

    AlternatingResult res;
    auto refresh_outputs = [&]() {
        res.f_rew_shadow = deterministic_latents(state, shadow);
        res.f_rew_target = deterministic_latents(state, target);
        res.target_probs = attack_predict(state, target);
    };

    for (int outer = 1; outer <= cfg.outer_epochs; ++outer) {
        for (int inner = 1; inner <= cfg.inner_epochs; ++inner) {
            PassOptions opt;
            opt.weighted = true;
            opt.score_grads = !cfg.identity_encoding;
            opt.stochastic = !cfg.identity_encoding;
            opt.rng = &state.noise;
            PassResult pr = objective_pass(state, xs, ys, xt, opt);
            if (!std::isfinite(pr.value))
                throw std::runtime_error(
                    "alternating_train: non-finite reweighted loss at outer epoch " +
                    std::to_string(outer) + ", inner " + std::to_string(inner));
            apply_step(state, pr.grads);
            EpochMetrics em;
            em.phase = "reweight";
            em.epoch = (outer - 1) * cfg.inner_epochs + inner;
            em.loss_bce = pr.bce_part;
            em.loss_elbo = pr.elbo_part;
            res.trace.push_back(std::move(em));
        }

        refresh_outputs();
        if (cfg.identity_encoding) continue;

        std::vector<int> pseudo(target.size());
        for (std::size_t i = 0; i < target.size(); ++i)
            pseudo[i] = res.target_probs[i] >= 0.5 ? 1 : 0;

        // Scores are the only moving part here, so the per-sample losses are
        // fixed for the whole refinement phase.
        std::vector<double> dis_sh = attack_losses(state, state.dis_shadow, ys);
        std::vector<double> rew_sh = attack_losses(state, res.f_rew_shadow, ys);
        std::vector<double> dis_tg = attack_losses(state, state.dis_target, pseudo);
        std::vector<double> rew_tg = attack_losses(state, res.f_rew_target, pseudo);
        const double inv_sh = 1.0 / static_cast<double>(shadow.size());
        const double inv_tg = target.empty() ? 0.0 : 1.0 / static_cast<double>(target.size());

        auto mean_abs = [&]() {
            double s = 0.0;
            for (std::size_t i = 0; i < shadow.size(); ++i)
                s += std::abs(state.scores_shadow[i] * dis_sh[i] - rew_sh[i]);
            for (std::size_t i = 0; i < target.size(); ++i)
                s += std::abs(state.scores_target[i] * dis_tg[i] - rew_tg[i]);
            return s / static_cast<double>(shadow.size() + target.size());
        };
        auto loss_value = [&]() {
            double v = 0.0;
            for (std::size_t i = 0; i < shadow.size(); ++i) {
                double r = state.scores_shadow[i] * dis_sh[i] - rew_sh[i];
                v += inv_sh * r * r;
            }
            for (std::size_t i = 0; i < target.size(); ++i) {
                double r = state.scores_target[i] * dis_tg[i] - rew_tg[i];
                v += inv_tg * r * r;
            }
            return v;
        };

        double lips = 0.0;
        for (std::size_t i = 0; i < shadow.size(); ++i)
            lips = std::max(lips, 2.0 * inv_sh * dis_sh[i] * dis_sh[i]);
        for (std::size_t i = 0; i < target.size(); ++i)
            lips = std::max(lips, 2.0 * inv_tg * dis_tg[i] * dis_tg[i]);
        double lr = cfg.scores_lr;
        if (lips > 0.0) lr = std::min(lr, 1.0 / lips);

        double start_residual = mean_abs();
        for (int inner = 1; inner <= cfg.inner_epochs; ++inner) {
            for (std::size_t i = 0; i < shadow.size(); ++i) {
                double g = 2.0 * inv_sh *
                           (state.scores_shadow[i] * dis_sh[i] - rew_sh[i]) * dis_sh[i];
                state.scores_shadow[i] =
                    std::clamp(state.scores_shadow[i] - lr * g, 1e-3, 1e3);
            }
            for (std::size_t i = 0; i < target.size(); ++i) {
                double g = 2.0 * inv_tg *
                           (state.scores_target[i] * dis_tg[i] - rew_tg[i]) * dis_tg[i];
                state.scores_target[i] =
                    std::clamp(state.scores_target[i] - lr * g, 1e-3, 1e3);
            }
            double v = loss_value();
            if (!std::isfinite(v))
                throw std::runtime_error(
                    "alternating_train: non-finite estimation loss at outer epoch " +
                    std::to_string(outer));
            EpochMetrics em;
            em.phase = "estimation";
            em.epoch = (outer - 1) * cfg.inner_epochs + inner;
            em.loss_est = v;
            res.trace.push_back(std::move(em));
        }
        res.est_residuals.emplace_back(start_residual, mean_abs());
    }

    if (cfg.outer_epochs == 0) refresh_outputs();
    return res;
}

BiasedResult biased_attack(const std::vector<diffvec::AttackSample>& shadow,
                           const std::vector<diffvec::AttackSample>& target,
                           const std::vector<int>& attack_hidden, double lr,
                           double momentum, int steps, std::uint64_t seed) {
    if (shadow.empty())
        throw std::invalid_argument("biased_attack: no shadow samples");
    const int dim = static_cast<int>(shadow.front().diff.size());
    nn::DenseMatrix xs = sample_matrix(shadow, dim, "biased_attack");
    nn::DenseMatrix xt = sample_matrix(target, dim, "biased_attack");
    std::vector<int> ys = shadow_labels(shadow, "biased_attack");

    nn::MlpSpec spec;
    spec.widths.push_back(dim);
    for (int h : attack_hidden) spec.widths.push_back(h);
    spec.widths.push_back(2);
    spec.head = nn::OutputHead::kSoftmax2;
    Rng ar(derive_seed(seed, "attack-init"));

    BiasedResult out;
    out.attack = nn::make_mlp(spec, ar);
    nn::OptState opt;
    nn::OptimizerSpec sgd;
    sgd.kind = nn::OptKind::kSgdMomentum;
    sgd.lr = lr;
    sgd.momentum = momentum;

    const double inv = 1.0 / static_cast<double>(xs.rows);
    std::vector<double> w(xs.rows, inv);
    for (int step = 1; step <= steps; ++step) {
        nn::MlpCache cache = nn::mlp_forward(out.attack, xs);
        nn::BceResult bce = nn::bce_loss(cache.output, ys, w);
        if (!std::isfinite(bce.value))
            throw std::runtime_error("biased_attack: non-finite loss at step " +
                                     std::to_string(step));
        nn::MlpGrads grads = nn::mlp_backward(out.attack, cache, bce.grad_probs);
        nn::optimizer_step(sgd, opt, nn::param_refs(out.attack, grads));
        EpochMetrics em;
        em.phase = "biased";
        em.epoch = step;
        em.loss_bce = bce.value;
        out.trace.push_back(std::move(em));
    }
    auto predict = [&](const nn::DenseMatrix& x) {
        std::vector<double> probs(x.rows);
        if (x.rows == 0) return probs;
        nn::MlpCache cache = nn::mlp_forward(out.attack, x);
        for (int i = 0; i < x.rows; ++i) probs[i] = cache.output(i, 0);
        return probs;
    };
    out.shadow_probs = predict(xs);
    out.target_probs = predict(xt);
    return out;
}

void save_dlmia(const DlMiaState& state, const std::string& path) {
    std::vector<nn::NamedTensor> tensors;
    tensors.push_back({"meta",
                       {4},
                       {static_cast<double>(state.cfg.diff_dim),
                        static_cast<double>(state.cfg.d_inv),
                        static_cast<double>(state.cfg.m),
                        state.cfg.identity_encoding ? 1.0 : 0.0}});
    if (!state.cfg.identity_encoding) {
        tensors.push_back({"gauss.w",
                           {state.gauss_head.w.rows, state.gauss_head.w.cols},
                           state.gauss_head.w.data});
        tensors.push_back({"gauss.b",
                           {static_cast<int>(state.gauss_head.b.size())},
                           state.gauss_head.b});
        tensors.push_back({"vmf.w",
                           {state.vmf_head.w.rows, state.vmf_head.w.cols},
                           state.vmf_head.w.data});
        tensors.push_back({"vmf.b",
                           {static_cast<int>(state.vmf_head.b.size())},
                           state.vmf_head.b});
        std::vector<nn::NamedTensor> dec = nn::mlp_tensors(state.decoder, "decoder");
        tensors.insert(tensors.end(), dec.begin(), dec.end());
    }
    std::vector<nn::NamedTensor> att = nn::mlp_tensors(state.attack, "attack");
    tensors.insert(tensors.end(), att.begin(), att.end());
    tensors.push_back({"score_map", {2}, {state.score_a, state.score_b}});
    tensors.push_back({"scores.shadow",
                       {static_cast<int>(state.scores_shadow.size())},
                       state.scores_shadow});
    tensors.push_back({"scores.target",
                       {static_cast<int>(state.scores_target.size())},
                       state.scores_target});
    nn::save_tensors(path, tensors);
}

DlMiaState load_dlmia(const std::string& path) {
    std::vector<nn::NamedTensor> tensors = nn::load_tensors(path);
    auto find = [&](const std::string& name) -> const nn::NamedTensor& {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw std::runtime_error("load_dlmia: missing tensor " + name + " in " + path);
    };
    const auto& meta = find("meta");
    if (meta.data.size() != 4)
        throw std::runtime_error("load_dlmia: malformed meta tensor");
    DlMiaState st;
    st.cfg.diff_dim = static_cast<int>(meta.data[0]);
    st.cfg.d_inv = static_cast<int>(meta.data[1]);
    st.cfg.m = static_cast<int>(meta.data[2]);
    st.cfg.identity_encoding = meta.data[3] != 0.0;
    if (!st.cfg.identity_encoding) {
        const auto& gw = find("gauss.w");
        st.gauss_head.w = nn::DenseMatrix(gw.shape.at(0), gw.shape.at(1));
        st.gauss_head.w.data = gw.data;
        st.gauss_head.b = find("gauss.b").data;
        const auto& vw = find("vmf.w");
        st.vmf_head.w = nn::DenseMatrix(vw.shape.at(0), vw.shape.at(1));
        st.vmf_head.w.data = vw.data;
        st.vmf_head.b = find("vmf.b").data;
        nn::mlp_from_tensors(st.decoder, tensors, "decoder");
    }
    nn::mlp_from_tensors(st.attack, tensors, "attack");
    const auto& sm = find("score_map");
    if (sm.data.size() != 2) throw std::runtime_error("load_dlmia: malformed score map");
    st.score_a = sm.data[0];
    st.score_b = sm.data[1];
    st.scores_shadow = find("scores.shadow").data;
    st.scores_target = find("scores.target").data;
    return st;
}

void dump_latents(const std::vector<std::vector<double>>& latents,
                  const std::vector<diffvec::AttackSample>& samples,
                  const std::vector<int>& labels,
                  const std::vector<std::int64_t>& user_ids,
                  const std::string& path) {
    if (latents.size() != samples.size() || labels.size() != samples.size())
        throw std::invalid_argument("dump_latents: size mismatch");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("dump_latents: cannot open " + path);
    f << "user_id,origin,label";
    if (!latents.empty())
        for (std::size_t c = 0; c < latents[0].size(); ++c) f << ",f" << c;
    f << '\n';
    char buf[32];
    for (std::size_t i = 0; i < latents.size(); ++i) {
        f << user_ids.at(samples[i].user) << ','
          << (samples[i].origin == diffvec::Origin::kShadow ? "shadow" : "target")
          << ',' << labels[i];
        for (double v : latents[i]) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            f << ',' << buf;
        }
        f << '\n';
    }
    if (!f) throw std::runtime_error("dump_latents: write failed: " + path);
}

}  // namespace mia::dlmia

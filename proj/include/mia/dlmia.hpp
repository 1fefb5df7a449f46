#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mia/diffvec.hpp"
#include "mia/nn.hpp"
#include "mia/numerics.hpp"
#include "mia/rng.hpp"

namespace mia::dlmia {

// Debiased membership-inference attack stack: a two-branch variational
// encoder (Gaussian "invariant" branch + von Mises-Fisher "specific" branch),
// a reconstruction decoder, an attack classifier, and a per-sample
// truth-level-score table driving loss reweighting. Setting
// `identity_encoding` collapses the stack to the biased baseline: the encoder
// and decoder disappear, samples pass through unchanged, and every weight
// stays 1, leaving a plain classifier on the raw difference vectors.
struct DlMiaConfig {
    int diff_dim = 0;                       // input width (set from data)
    int d_inv = 32;                         // Gaussian branch width
    int m = 32;                             // vMF sphere dimension
    std::vector<int> decoder_hidden{128, 128, 128};
    std::vector<int> attack_hidden{32, 8};
    double encdec_lr = 1e-3;                // Adam: heads and decoder
    double attack_lr = 0.01;                // SGD-momentum: attack classifier
    double attack_momentum = 0.7;
    double scores_lr = 1.0;                 // capped by the stability bound
    // Adam rate for the affine weight map w = max(0, a*p + b). All reweighted
    // losses are non-negative, so their gradients push (a, b) monotonically
    // toward the all-zero-weight fixed point where training freezes; a small
    // rate keeps the map near its identity initialization and the weights
    // tracking the truth-level scores for the whole alternating schedule.
    double score_map_lr = 1e-5;
    int pretrain_epochs = 200;
    int outer_epochs = 10;
    int inner_epochs = 10;
    bool identity_encoding = false;         // biased-baseline degenerate mode
    std::uint64_t seed = 0;                 // master seed for all stage streams
};

struct DlMiaState {
    DlMiaConfig cfg;
    nn::LinearParams gauss_head;  // diff -> [mu; log_var], width 2*d_inv
    nn::LinearParams vmf_head;    // diff -> [raw direction (m); raw kappa]
    nn::Mlp decoder;              // [d_inv+m, hidden..., diff_dim], identity
    nn::Mlp attack;               // [d_inv+m, hidden..., 2], softmax
    double score_a = 1.0;         // weight map w = max(0, a*p + b)
    double score_b = 0.0;
    std::vector<double> scores_shadow;
    std::vector<double> scores_target;
    // Deterministic disentangled vectors snapshotted when pretraining ends;
    // the estimation phase measures the attack's loss on these.
    std::vector<std::vector<double>> dis_shadow;
    std::vector<std::vector<double>> dis_target;
    nn::OptState encdec_opt;
    nn::OptState scoremap_opt;    // separate group: own learning rate
    nn::OptState attack_opt;
    Rng noise{0};                 // latent sampling stream
};

// Builds heads/decoder/attack from per-component seed streams and
// initializes the score table (uniform in [0.9, 1.1]; exactly 1 in
// identity mode, where encoder/decoder/score-map are absent).
DlMiaState init_state(const DlMiaConfig& cfg, int n_shadow, int n_target);

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

struct EncodeResult {
    std::vector<double> f_inv;
    std::vector<double> f_spe;  // unit-norm
    double kl_inv = 0.0;
    double kl_spe = 0.0;
};

// rng == nullptr selects deterministic mode: f_inv is the Gaussian mean and
// f_spe the vMF mean direction. Otherwise both branches sample.
EncodeResult encode(const DlMiaState& state, const std::vector<double>& diff,
                    Rng* rng);

// Frozen per-sample randomness, replayable for finite-difference checks:
// `eps` are the Gaussian draws, `z` the north-frame vMF sample. Empty vectors
// mean deterministic mode.
struct ElboNoise {
    std::vector<double> eps;
    std::vector<double> z;
};

// Gradients for everything the variational objective trains.
struct ModelGrads {
    nn::LinearParams gauss, vmf;
    nn::MlpGrads decoder;
    nn::MlpGrads attack;
    double score_a = 0.0;
    double score_b = 0.0;
};

struct ElboEval {
    double value = 0.0;  // 0.5*||decode(latent) - diff||^2 + kl_inv + kl_spe
    nn::LinearParams d_gauss, d_vmf;
    nn::MlpGrads d_decoder;
    ElboNoise noise;     // the randomness used (replay it to reproduce value)
};

// Negative single-sample evidence bound with analytic gradients. Pass
// `replay` to reuse recorded randomness (rng then unused); otherwise pass an
// rng to sample, or neither for deterministic mode. The concentration
// parameter receives only the KL-term gradient (the sampled direction is
// treated as constant with respect to it).
ElboEval elbo_loss(const DlMiaState& state, const std::vector<double>& diff,
                   const ElboNoise* replay, Rng* rng);

// ---------------------------------------------------------------------------
// Losses over sample sets
// ---------------------------------------------------------------------------

// p = delta(A(f_truth), y) / delta(A(f_dis), y), denominator floored at 1e-8;
// probability rows are (P(member), P(non-member)) and delta is the clamped
// cross entropy of one row against the label.
double truth_score(const std::array<double, 2>& attack_out_dis,
                   const std::array<double, 2>& attack_out_truth, int label);

struct ReweightedEval {
    double value = 0.0;      // bce_part + elbo_part
    double bce_part = 0.0;   // (1/N_shadow) sum_i w_i * bce_i
    double elbo_part = 0.0;  // (1/N_total)  sum_i w_i * elbo_i
    ModelGrads grads;
    std::vector<ElboNoise> noise;  // shadow rows then target rows
};

// Weighted joint objective, w_i = max(0, a*p_i + b) from the current score
// table. Gradients cover encoder heads, decoder, attack, and the score map
// (scores themselves are fixed here). Pass `replay` (shadow rows then target
// rows) to reproduce a previous stochastic evaluation; rng == nullptr and no
// replay runs deterministic encoding.
ReweightedEval reweighted_loss(const DlMiaState& state,
                               const std::vector<diffvec::AttackSample>& shadow,
                               const std::vector<diffvec::AttackSample>& target,
                               const std::vector<ElboNoise>* replay, Rng* rng);

struct EstimationEval {
    double value = 0.0;
    std::vector<double> grad_shadow;  // d value / d score, per shadow sample
    std::vector<double> grad_target;
    double mean_abs_residual = 0.0;   // mean_i |p_i*delta_dis_i - delta_rew_i|
};

// Constraint loss sum_group (1/N_group) sum_i (p_i*delta_dis_i -
// delta_rew_i)^2 where delta_dis uses the pretraining-end snapshot vectors
// and delta_rew the given reweighted vectors, both scored by the current
// attack. Shadow rows use true labels, target rows `pseudo_labels`. Only the
// score table trains against this loss.
EstimationEval estimation_loss(const DlMiaState& state,
                               const std::vector<diffvec::AttackSample>& shadow,
                               const std::vector<diffvec::AttackSample>& target,
                               const std::vector<int>& pseudo_labels,
                               const std::vector<std::vector<double>>& f_rew_shadow,
                               const std::vector<std::vector<double>>& f_rew_target);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct EpochMetrics {
    std::string phase;  // "pretrain" | "reweight" | "estimation"
    int epoch = 0;
    std::optional<double> loss_bce;
    std::optional<double> loss_elbo;
    std::optional<double> loss_est;
    std::optional<double> target_auc;  // filled by the evaluation layer only
};

struct PretrainResult {
    std::vector<EpochMetrics> trace;
    // Deterministic-mode total loss after each epoch (monotonicity probe).
    std::vector<double> eval_total;
};

// Joint stage: classifier cross entropy on labeled shadow samples plus the
// variational bound over shadow and target samples. Adam on heads/decoder,
// SGD-momentum on the attack. Ends by snapshotting each sample's
// deterministic disentangled vector into the state.
PretrainResult pretrain(DlMiaState& state,
                        const std::vector<diffvec::AttackSample>& shadow,
                        const std::vector<diffvec::AttackSample>& target,
                        int epochs);

struct AlternatingResult {
    std::vector<EpochMetrics> trace;
    std::vector<std::vector<double>> f_rew_shadow;
    std::vector<std::vector<double>> f_rew_target;
    std::vector<double> target_probs;  // member probability per target sample
    // Mean |p*delta_dis - delta_rew| at the start and end of each outer
    // epoch's score-refinement phase.
    std::vector<std::pair<double, double>> est_residuals;
};

// Alternates `outer_epochs` times between (a) `inner_epochs` reweighted
// steps over model + score-map parameters and (b) `inner_epochs` gradient
// steps on the score table against the estimation constraint, using hard
// pseudo-labels predicted on the current reweighted vectors. In identity
// mode only the classifier steps run and scores stay at 1.
AlternatingResult alternating_train(DlMiaState& state,
                                    const std::vector<diffvec::AttackSample>& shadow,
                                    const std::vector<diffvec::AttackSample>& target);

// Member probability per sample from deterministic encoding.
std::vector<double> attack_predict(const DlMiaState& state,
                                   const std::vector<diffvec::AttackSample>& samples);

// ---------------------------------------------------------------------------
// Biased baseline: a plain classifier on raw difference vectors, trained
// with the same optimizer, step count, and init stream as the degenerate
// stack configuration (the two produce bit-identical predictions).
// ---------------------------------------------------------------------------

struct BiasedResult {
    nn::Mlp attack;
    std::vector<EpochMetrics> trace;
    std::vector<double> shadow_probs;
    std::vector<double> target_probs;
};

BiasedResult biased_attack(const std::vector<diffvec::AttackSample>& shadow,
                           const std::vector<diffvec::AttackSample>& target,
                           const std::vector<int>& attack_hidden, double lr,
                           double momentum, int steps, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Persistence (inference checkpoint: parameters, score map, score table)
// ---------------------------------------------------------------------------

void save_dlmia(const DlMiaState& state, const std::string& path);
DlMiaState load_dlmia(const std::string& path);

// CSV dump `user_id,origin,label,f0..fD` of latent vectors (used for the
// invariant/specific/reweighted representation dumps).
void dump_latents(const std::vector<std::vector<double>>& latents,
                  const std::vector<diffvec::AttackSample>& samples,
                  const std::vector<int>& labels,
                  const std::vector<std::int64_t>& user_ids,
                  const std::string& path);

}  // namespace mia::dlmia

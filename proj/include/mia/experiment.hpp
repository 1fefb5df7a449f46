#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mia/data.hpp"
#include "mia/diffvec.hpp"
#include "mia/dlmia.hpp"
#include "mia/recommenders.hpp"

namespace mia::experiment {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Where a rating table comes from: planted low-rank synthetic generation or a
// file on disk (double-colon log format or comma-separated).
struct DatasetSpec {
    enum class Kind { kSynthetic, kMovielens, kCsv };
    Kind kind = Kind::kSynthetic;
    std::string path;  // file kinds only
    int users = 1000;  // synthetic kind only, likewise below
    int items = 200;
    int latent = 8;
    double density = 0.08;
};

// Which recommender trains on which data source, for the shadow and the
// target side. Parsed from a 2- or 4-letter code of [source letter]
// [algorithm letter] pairs: the first letter of a pair names an entry of
// ExperimentConfig::datasets, the second the algorithm (I = item
// neighborhood, L = latent factor). A 2-letter code applies to both sides;
// 4 letters give shadow then target. Anything else is rejected.
struct SettingCode {
    char shadow_source = 'M';
    rec::RecKind shadow_algo = rec::RecKind::kLfm;
    char target_source = 'M';
    rec::RecKind target_algo = rec::RecKind::kLfm;
};

SettingCode parse_setting(const std::string& code);

struct ExperimentConfig {
    std::string setting = "ML";
    int k = 20;              // recommendation list length
    bool defense = false;    // randomized popular lists for non-members
    int pool_multiplier = 5; // defense sampling pool = pool_multiplier * k
    std::uint64_t seed = 0;  // master seed; every stage derives its own stream

    // Data sources referenced by the setting code's source letters.
    std::map<char, DatasetSpec> datasets = {{'M', DatasetSpec{}}};

    // Interaction-count filtering applied to every source before splitting.
    int min_user_interactions = 5;
    int min_item_interactions = 5;
    data::SplitFractions fractions;  // shadow / target / extraction shares

    // Latent-factor recommender hyperparameters (used for 'L' sides).
    int lfm_dim = 16;
    double lfm_lr = 0.01;
    double lfm_reg = 0.001;
    int lfm_epochs = 60;

    // Item-embedding extraction hyperparameters.
    int embed_dim = 16;
    double embed_lr = 0.01;
    double embed_reg = 0.001;
    int embed_epochs = 60;

    // Attack stack hyperparameters. diff_dim, seed and identity_encoding are
    // overwritten by run_experiment (diff_dim = embed_dim, seed = master
    // seed, identity off — the biased baseline runs via dlmia::biased_attack
    // with the same derived init stream instead).
    dlmia::DlMiaConfig attack;
};

// Parses the plain-text `key = value` format ('#' comments, blank lines
// allowed). Unknown keys, unknown setting codes, malformed values and
// out-of-range values are rejected with std::invalid_argument naming the
// offending line. Keys are documented in README.md; every one has a default,
// so the empty string parses to the default configuration.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Round-trippable echo: parse_config_text(config_text(c)) reproduces c.
std::string config_text(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct PhaseSummary {
    std::string phase;       // "biased" | "pretrain" | "reweight" | "estimation"
    int epochs = 0;
    double first_loss = 0.0; // sum of the phase's loss terms at its first epoch
    double last_loss = 0.0;
};

struct ExperimentReport {
    ExperimentConfig config;
    double biased_auc = 0.0;
    double dlmia_pretrain_auc = 0.0;  // after pretraining, before alternating
    double dlmia_auc = 0.0;
    std::vector<PhaseSummary> phases;
    // (start, end) of mean |p * delta_dis - delta_rew| per outer epoch.
    std::vector<std::pair<double, double>> estimation_residuals;
    double runtime_seconds = 0.0;
    std::vector<std::string> artifacts;  // paths relative to the out dir
};

// Deterministic data half of the pipeline: materialize the configured
// sources, filter, and split (single-source or two-source per the setting
// code). Every stage failure is rethrown as std::runtime_error prefixed with
// the stage name.
data::SplitBundle build_bundle(const ExperimentConfig& cfg);

// Everything up to the attack inputs, shared by the stage subcommands and
// run_experiment: bundle, both recommenders (each trained on its members'
// interactions), item embeddings fitted on the extraction subset, and the
// difference-vector datasets.
struct PipelineArtifacts {
    data::SplitBundle bundle;
    rec::RecommenderModel shadow_model;
    rec::RecommenderModel target_model;
    diffvec::ItemEmbeddings embeddings;
    diffvec::AttackData attack_data;
};

PipelineArtifacts build_pipeline(const ExperimentConfig& cfg);

// Runs the full pipeline: build_pipeline -> biased baseline -> debiased
// attack (pretrain + alternating) -> evaluate both on the held-out target
// labels -> write report.json, metrics.jsonl and the CSV artifacts into
// out_dir (created if missing). Every stage failure is rethrown as
// std::runtime_error prefixed with the stage name.
ExperimentReport run_experiment(const ExperimentConfig& cfg,
                                const std::string& out_dir);

// One compact JSON object per epoch: {"phase", "epoch", then whichever of
// "loss_bce", "loss_elbo", "loss_est", "target_auc" the epoch carries}.
std::string metrics_jsonl(const std::vector<dlmia::EpochMetrics>& trace);

// Pretty JSON. The canonical form (include_runtime = false) omits the
// runtime_seconds field and is byte-identical across reruns with one seed on
// one platform; write_report stores the full form including runtime.
std::string report_json(const ExperimentReport& r, bool include_runtime);
void write_report(const ExperimentReport& r, const std::string& path);

// Validates report bytes against a JSON Schema document (the checked-in copy
// lives at schema/report.schema.json). Supports the subset used there: type,
// properties, required, additionalProperties, items, minItems, maxItems,
// minimum, maximum, enum. Throws std::runtime_error naming the JSON path of
// the first violation.
void validate_report_json(const std::string& report_bytes,
                          const std::string& schema_bytes);

// ---------------------------------------------------------------------------
// Intermediate artifacts (stage subcommands)
// ---------------------------------------------------------------------------

// Difference vectors read back from a dump_attack_samples CSV. Samples get
// row indices as user handles; user_ids maps them to the original ids.
// labels is parallel to samples and always 0/1 (shadow rows also carry the
// label on the sample itself; target rows keep it evaluation-only).
struct AttackTable {
    std::vector<diffvec::AttackSample> samples;
    std::vector<int> labels;
    std::vector<std::int64_t> user_ids;
};

AttackTable load_attack_samples(const std::string& path);

// ---------------------------------------------------------------------------
// Oracle-backed self checks
// ---------------------------------------------------------------------------

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;  // measured value vs bound
};

// Special functions and samplers against independent oracles: Bessel power
// series, directional KL vs 1-D quadrature (3 dims) and Monte Carlo (8
// dims), Gaussian KL vs Monte Carlo, sampler mean resultant length vs its
// closed form. `corrupt_vmf_kl` is a harness-sensitivity fixture: it negates
// the directional KL value before comparison, which must fail the KL checks.
std::vector<CheckResult> check_special_functions(bool corrupt_vmf_kl = false);

// Central finite differences over every trainable path: classifier
// parameters, encoder heads, decoder, score map, and the score table's
// estimation-constraint gradients.
std::vector<CheckResult> check_gradients();

// Sort-based ranking metric against an O(n^2) pairwise oracle, exact
// equality on 200 randomized instances including ties.
std::vector<CheckResult> check_ranking_metric();

// Split determinism and bundle invariants on synthetic data, for both the
// single-source and the two-source split paths.
std::vector<CheckResult> check_split_invariants();

// All of the above in order.
std::vector<CheckResult> verify_suite(bool corrupt_vmf_kl = false);

bool all_passed(const std::vector<CheckResult>& checks);
std::string render_checks(const std::vector<CheckResult>& checks);

}  // namespace mia::experiment

// recmia: command-line front end for the membership-inference laboratory.
//
// Subcommands cover the pipeline stage by stage (prepare-data, train-rec,
// gen-vectors, attack) plus the end-to-end runner (run-experiment) and the
// oracle-backed self-check suite (verify). Every stage re-derives its inputs
// deterministically from the config and master seed, so stages can run
// independently and still agree bit-for-bit with the end-to-end runner.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mia/data.hpp"
#include "mia/diffvec.hpp"
#include "mia/dlmia.hpp"
#include "mia/experiment.hpp"
#include "mia/nn.hpp"
#include "mia/numerics.hpp"
#include "mia/recommenders.hpp"
#include "mia/rng.hpp"

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using mia::experiment::ExperimentConfig;

std::string path_in(const std::string& dir, const std::string& rel) {
    return (fs::path(dir) / rel).string();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << text;
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<int> shadow_labels_of(
    const std::vector<mia::diffvec::AttackSample>& samples) {
    std::vector<int> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label.value());
    return out;
}

int cmd_prepare_data(const ExperimentConfig& cfg, const std::string& out) {
    fs::create_directories(out);
    mia::data::SplitBundle b = mia::experiment::build_bundle(cfg);
    mia::data::dump_csv(b.shadow, path_in(out, "shadow.csv"));
    mia::data::dump_csv(b.target, path_in(out, "target.csv"));
    mia::data::dump_csv(b.extraction, path_in(out, "extraction.csv"));
    json g;
    g["n_users"] = b.n_users;
    g["n_items"] = b.n_items;
    auto original_ids = [&](const std::vector<int>& idx) {
        json arr = json::array();
        for (int u : idx) arr.push_back(b.user_ids.at(u));
        return arr;
    };
    g["shadow_members"] = original_ids(b.shadow_members);
    g["shadow_nonmembers"] = original_ids(b.shadow_nonmembers);
    g["target_members"] = original_ids(b.target_members);
    g["target_nonmembers"] = original_ids(b.target_nonmembers);
    write_text(path_in(out, "groups.json"), g.dump(2) + "\n");
    write_text(path_in(out, "config.txt"), mia::experiment::config_text(cfg));
    std::cout << "bundle written to " << out << ": "
              << b.shadow.records.size() << " shadow, "
              << b.target.records.size() << " target, "
              << b.extraction.records.size() << " extraction interactions\n";
    return 0;
}

int cmd_train_rec(const ExperimentConfig& cfg, const std::string& side,
                  const std::string& out) {
    fs::create_directories(out);
    mia::experiment::SettingCode code =
        mia::experiment::parse_setting(cfg.setting);
    mia::data::SplitBundle b = mia::experiment::build_bundle(cfg);
    const bool is_shadow = side == "shadow";
    mia::rec::RecKind kind = is_shadow ? code.shadow_algo : code.target_algo;
    mia::data::RatingDataset train = mia::data::restrict_to_users(
        is_shadow ? b.shadow : b.target,
        is_shadow ? b.shadow_members : b.target_members);
    mia::rec::RecommenderModel model =
        kind == mia::rec::RecKind::kItemBase
            ? mia::rec::train_itembase(train)
            : mia::rec::train_lfm(train, cfg.lfm_dim, cfg.lfm_lr, cfg.lfm_reg,
                                  cfg.lfm_epochs,
                                  mia::derive_seed(cfg.seed,
                                                   is_shadow
                                                       ? "shadow-recommender"
                                                       : "target-recommender"));
    mia::rec::save_recommender(model, path_in(out, side + "_model.bin"));
    std::string csv = "epoch,rmse\n";  // epoch 0 = before training
    for (std::size_t i = 0; i < model.rmse_trace.size(); ++i)
        csv += std::to_string(i) + "," + fmt_double(model.rmse_trace[i]) + "\n";
    write_text(path_in(out, side + "_rmse.csv"), csv);
    std::cout << side << " recommender trained on " << train.records.size()
              << " interactions; rmse "
              << fmt_double(model.rmse_trace.front()) << " -> "
              << fmt_double(model.rmse_trace.back()) << "\n";
    return 0;
}

int cmd_gen_vectors(const ExperimentConfig& cfg, const std::string& out) {
    fs::create_directories(out);
    mia::experiment::PipelineArtifacts pipe =
        mia::experiment::build_pipeline(cfg);
    const mia::data::SplitBundle& b = pipe.bundle;
    mia::diffvec::dump_embeddings(pipe.embeddings, b.item_ids,
                                  path_in(out, "embeddings.csv"));
    mia::diffvec::dump_attack_samples(pipe.attack_data.shadow,
                                      shadow_labels_of(pipe.attack_data.shadow),
                                      b.user_ids,
                                      path_in(out, "attack_shadow.csv"));
    mia::diffvec::dump_attack_samples(pipe.attack_data.target,
                                      pipe.attack_data.target_labels,
                                      b.user_ids,
                                      path_in(out, "attack_target.csv"));
    std::vector<mia::rec::RecommendationSet> sets;
    for (int u : b.shadow_members)
        sets.push_back(mia::rec::recommend_top_k(pipe.shadow_model, u, cfg.k));
    for (int u : b.target_members)
        sets.push_back(mia::rec::recommend_top_k(pipe.target_model, u, cfg.k));
    mia::rec::dump_recommendations(sets, b.user_ids, b.item_ids,
                                   path_in(out, "recommendations_members.csv"));
    std::cout << "wrote " << pipe.attack_data.shadow.size() << " shadow and "
              << pipe.attack_data.target.size()
              << " target difference vectors to " << out << "\n";
    return 0;
}

int cmd_attack(ExperimentConfig cfg, const std::string& method,
               bool defense_flag, const std::string& vectors_dir,
               const std::string& out) {
    if (defense_flag) cfg.defense = true;
    fs::create_directories(out);

    std::vector<mia::diffvec::AttackSample> shadow, target;
    std::vector<int> shadow_labels, target_labels;
    std::vector<std::int64_t> shadow_row_ids, target_row_ids;
    if (!vectors_dir.empty()) {
        mia::experiment::AttackTable sh = mia::experiment::load_attack_samples(
            path_in(vectors_dir, "attack_shadow.csv"));
        mia::experiment::AttackTable tg = mia::experiment::load_attack_samples(
            path_in(vectors_dir, "attack_target.csv"));
        shadow = std::move(sh.samples);
        shadow_labels = std::move(sh.labels);
        shadow_row_ids = std::move(sh.user_ids);
        target = std::move(tg.samples);
        target_labels = std::move(tg.labels);
        target_row_ids = std::move(tg.user_ids);
    } else {
        mia::experiment::PipelineArtifacts pipe =
            mia::experiment::build_pipeline(cfg);
        shadow = std::move(pipe.attack_data.shadow);
        target = std::move(pipe.attack_data.target);
        shadow_labels = shadow_labels_of(shadow);
        target_labels = std::move(pipe.attack_data.target_labels);
        for (const auto& s : shadow)
            shadow_row_ids.push_back(pipe.bundle.user_ids.at(s.user));
        for (const auto& s : target)
            target_row_ids.push_back(pipe.bundle.user_ids.at(s.user));
    }
    if (shadow.empty() || target.empty())
        throw std::runtime_error("attack: empty shadow or target set");

    std::vector<double> shadow_probs, target_probs;
    std::vector<mia::dlmia::EpochMetrics> trace;
    if (method == "biased") {
        const int steps = cfg.attack.pretrain_epochs +
                          cfg.attack.outer_epochs * cfg.attack.inner_epochs;
        mia::dlmia::BiasedResult res = mia::dlmia::biased_attack(
            shadow, target, cfg.attack.attack_hidden, cfg.attack.attack_lr,
            cfg.attack.attack_momentum, steps, cfg.seed);
        shadow_probs = std::move(res.shadow_probs);
        target_probs = std::move(res.target_probs);
        trace = std::move(res.trace);
        mia::nn::save_tensors(path_in(out, "attack_model.bin"),
                              mia::nn::mlp_tensors(res.attack, "attack"));
    } else {
        mia::dlmia::DlMiaConfig acfg = cfg.attack;
        acfg.diff_dim = static_cast<int>(shadow.front().diff.size());
        acfg.seed = cfg.seed;
        acfg.identity_encoding = false;
        mia::dlmia::DlMiaState state = mia::dlmia::init_state(
            acfg, static_cast<int>(shadow.size()),
            static_cast<int>(target.size()));
        mia::dlmia::PretrainResult pre =
            mia::dlmia::pretrain(state, shadow, target, acfg.pretrain_epochs);
        mia::dlmia::AlternatingResult alt =
            mia::dlmia::alternating_train(state, shadow, target);
        shadow_probs = mia::dlmia::attack_predict(state, shadow);
        target_probs = std::move(alt.target_probs);
        trace = std::move(pre.trace);
        trace.insert(trace.end(), alt.trace.begin(), alt.trace.end());
        mia::dlmia::save_dlmia(state, path_in(out, "attack_model.bin"));
    }

    const double auc_val = mia::num::auc({target_probs, target_labels});
    json rep;
    rep["method"] = method;
    rep["defense"] = cfg.defense;
    rep["seed"] = cfg.seed;
    rep["n_shadow"] = shadow.size();
    rep["n_target"] = target.size();
    rep["target_auc"] = auc_val;
    write_text(path_in(out, "attack_report.json"), rep.dump(2) + "\n");

    std::string pred = "user_id,origin,label,prob\n";
    for (std::size_t i = 0; i < shadow.size(); ++i)
        pred += std::to_string(shadow_row_ids[i]) + ",shadow," +
                std::to_string(shadow_labels[i]) + "," +
                fmt_double(shadow_probs[i]) + "\n";
    for (std::size_t i = 0; i < target.size(); ++i)
        pred += std::to_string(target_row_ids[i]) + ",target," +
                std::to_string(target_labels[i]) + "," +
                fmt_double(target_probs[i]) + "\n";
    write_text(path_in(out, "predictions.csv"), pred);
    write_text(path_in(out, "metrics.jsonl"),
               mia::experiment::metrics_jsonl(trace));
    std::cout << method << " attack target AUC " << fmt_double(auc_val)
              << " (" << shadow.size() << " shadow / " << target.size()
              << " target samples)\n";
    return 0;
}

int cmd_run_experiment(const ExperimentConfig& cfg, const std::string& out) {
    mia::experiment::ExperimentReport rep =
        mia::experiment::run_experiment(cfg, out);
    std::cout << "report: " << path_in(out, "report.json") << "\n"
              << "biased_auc = " << fmt_double(rep.biased_auc) << "\n"
              << "dlmia_pretrain_auc = " << fmt_double(rep.dlmia_pretrain_auc)
              << "\n"
              << "dlmia_auc = " << fmt_double(rep.dlmia_auc) << "\n"
              << "runtime_seconds = " << fmt_double(rep.runtime_seconds)
              << "\n";
    return 0;
}

int cmd_verify() {
    std::vector<mia::experiment::CheckResult> checks =
        mia::experiment::verify_suite(false);
    std::cout << mia::experiment::render_checks(checks);
    return mia::experiment::all_passed(checks) ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"membership-inference laboratory for recommender systems"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    std::string side = "shadow";
    std::string method = "biased";
    std::string vectors_dir;
    bool defense_flag = false;

    auto add_common = [&](CLI::App* sub, bool with_out) {
        sub->add_option("--config", config_path,
                        "plain-text key = value config file (defaults apply "
                        "when omitted)");
        sub->add_option("--seed", seed, "override the config's master seed");
        if (with_out)
            sub->add_option("--out-dir", out_dir,
                            "output directory (default: out)");
    };

    CLI::App* prep = app.add_subcommand(
        "prepare-data", "materialize, filter and split the configured sources");
    add_common(prep, true);

    CLI::App* trec = app.add_subcommand(
        "train-rec", "train one side's recommender on its members");
    add_common(trec, true);
    trec->add_option("--side", side, "which recommender to train")
        ->required()
        ->check(CLI::IsMember({"shadow", "target"}));

    CLI::App* genv = app.add_subcommand(
        "gen-vectors",
        "fit item embeddings and emit both sides' difference vectors");
    add_common(genv, true);

    CLI::App* atk = app.add_subcommand(
        "attack", "train and evaluate a membership attack");
    add_common(atk, true);
    atk->add_option("--method", method, "attack variant")
        ->required()
        ->check(CLI::IsMember({"biased", "dlmia"}));
    atk->add_flag("--defense", defense_flag,
                  "serve non-members randomized popular lists");
    atk->add_option("--vectors", vectors_dir,
                    "directory with attack_shadow.csv / attack_target.csv "
                    "(recomputed from the config when omitted)");

    CLI::App* runx = app.add_subcommand(
        "run-experiment", "full pipeline: data, recommenders, both attacks, "
                          "report");
    add_common(runx, true);

    app.add_subcommand("verify",
                       "run the oracle-backed self checks and print a table");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("verify")) return cmd_verify();

        ExperimentConfig cfg;
        if (!config_path.empty())
            cfg = mia::experiment::load_config(config_path);
        bool seed_given = false;
        for (CLI::App* sub : {prep, trec, genv, atk, runx})
            if (sub->count("--seed") > 0) seed_given = true;
        if (seed_given) cfg.seed = seed;

        if (app.got_subcommand("prepare-data"))
            return cmd_prepare_data(cfg, out_dir);
        if (app.got_subcommand("train-rec"))
            return cmd_train_rec(cfg, side, out_dir);
        if (app.got_subcommand("gen-vectors"))
            return cmd_gen_vectors(cfg, out_dir);
        if (app.got_subcommand("attack"))
            return cmd_attack(cfg, method, defense_flag, vectors_dir, out_dir);
        if (app.got_subcommand("run-experiment"))
            return cmd_run_experiment(cfg, out_dir);
        std::cerr << "error: no subcommand selected\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

#include "mia/experiment.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mia/nn.hpp"
#include "mia/numerics.hpp"
#include "mia/rng.hpp"

namespace mia::experiment {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Small string / file helpers
// ---------------------------------------------------------------------------

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f << text;
    if (!f) throw std::runtime_error("write failed: " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// ---------------------------------------------------------------------------
// Config value parsers (each names the key on failure)
// ---------------------------------------------------------------------------

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& why) {
    throw std::invalid_argument("config key '" + key + "': bad value '" +
                                value + "' (" + why + ")");
}

long long parse_ll(const std::string& key, const std::string& value,
                   long long lo, long long hi) {
    long long v = 0;
    std::size_t pos = 0;
    try {
        v = std::stoll(value, &pos);
    } catch (const std::exception&) {
        bad_value(key, value, "not an integer");
    }
    if (pos != value.size()) bad_value(key, value, "trailing characters");
    if (v < lo || v > hi)
        bad_value(key, value,
                  "out of range [" + std::to_string(lo) + ", " +
                      std::to_string(hi) + "]");
    return v;
}

int parse_int(const std::string& key, const std::string& value, int lo,
              int hi = 1000000000) {
    return static_cast<int>(parse_ll(key, value, lo, hi));
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::uint64_t v = 0;
    std::size_t pos = 0;
    try {
        v = std::stoull(value, &pos);
    } catch (const std::exception&) {
        bad_value(key, value, "not an unsigned integer");
    }
    if (pos != value.size() || value.find('-') != std::string::npos)
        bad_value(key, value, "not an unsigned integer");
    return v;
}

double parse_real(const std::string& key, const std::string& value, double lo,
                  double hi) {
    double v = 0;
    std::size_t pos = 0;
    try {
        v = std::stod(value, &pos);
    } catch (const std::exception&) {
        bad_value(key, value, "not a number");
    }
    if (pos != value.size()) bad_value(key, value, "trailing characters");
    if (!std::isfinite(v) || v < lo || v > hi)
        bad_value(key, value,
                  "out of range [" + fmt_double(lo) + ", " + fmt_double(hi) +
                      "]");
    return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "on" || value == "true" || value == "1") return true;
    if (value == "off" || value == "false" || value == "0") return false;
    bad_value(key, value, "expected on/off, true/false or 1/0");
}

std::vector<int> parse_int_list(const std::string& key,
                                const std::string& value) {
    std::vector<int> out;
    for (const std::string& tok : split(value, ',')) {
        std::string t = trim(tok);
        if (t.empty()) bad_value(key, value, "empty list element");
        out.push_back(parse_int(key, t, 1, 100000));
    }
    return out;
}

std::string join_ints(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

const char* kind_name(DatasetSpec::Kind k) {
    switch (k) {
        case DatasetSpec::Kind::kSynthetic: return "synthetic";
        case DatasetSpec::Kind::kMovielens: return "movielens";
        case DatasetSpec::Kind::kCsv: return "csv";
    }
    return "synthetic";
}

DatasetSpec::Kind parse_kind(const std::string& key, const std::string& value) {
    if (value == "synthetic") return DatasetSpec::Kind::kSynthetic;
    if (value == "movielens") return DatasetSpec::Kind::kMovielens;
    if (value == "csv") return DatasetSpec::Kind::kCsv;
    bad_value(key, value, "expected synthetic, movielens or csv");
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string(name) + ": " + e.what());
    }
}

data::RatingDataset materialize(const DatasetSpec& spec, std::uint64_t seed) {
    switch (spec.kind) {
        case DatasetSpec::Kind::kSynthetic:
            return data::generate_synthetic(spec.users, spec.items, spec.latent,
                                            spec.density, seed);
        case DatasetSpec::Kind::kMovielens:
            return data::load_movielens(spec.path);
        case DatasetSpec::Kind::kCsv:
            return data::load_csv(spec.path);
    }
    throw std::logic_error("materialize: unknown dataset kind");
}

rec::RecommenderModel train_side(rec::RecKind kind,
                                 const data::RatingDataset& train,
                                 const ExperimentConfig& cfg,
                                 std::uint64_t seed) {
    if (kind == rec::RecKind::kItemBase) return rec::train_itembase(train);
    return rec::train_lfm(train, cfg.lfm_dim, cfg.lfm_lr, cfg.lfm_reg,
                          cfg.lfm_epochs, seed);
}

std::vector<int> labels_of(const std::vector<diffvec::AttackSample>& samples) {
    std::vector<int> out(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].label)
            throw std::logic_error("shadow sample without label");
        out[i] = *samples[i].label;
    }
    return out;
}

void append_metrics(std::string& out,
                    const std::vector<dlmia::EpochMetrics>& trace) {
    for (const auto& m : trace) {
        json j;
        j["phase"] = m.phase;
        j["epoch"] = m.epoch;
        if (m.loss_bce) j["loss_bce"] = *m.loss_bce;
        if (m.loss_elbo) j["loss_elbo"] = *m.loss_elbo;
        if (m.loss_est) j["loss_est"] = *m.loss_est;
        if (m.target_auc) j["target_auc"] = *m.target_auc;
        out += j.dump();
        out += '\n';
    }
}

void add_phase_summaries(std::vector<PhaseSummary>& out,
                         const std::vector<dlmia::EpochMetrics>& trace) {
    for (const auto& m : trace) {
        double loss = (m.loss_bce ? *m.loss_bce : 0.0) +
                      (m.loss_elbo ? *m.loss_elbo : 0.0) +
                      (m.loss_est ? *m.loss_est : 0.0);
        if (out.empty() || out.back().phase != m.phase)
            out.push_back({m.phase, 1, loss, loss});
        else {
            ++out.back().epochs;
            out.back().last_loss = loss;
        }
    }
}

json config_echo(const ExperimentConfig& c) {
    json j;
    j["setting"] = c.setting;
    j["k"] = c.k;
    j["defense"] = c.defense;
    j["pool_multiplier"] = c.pool_multiplier;
    j["seed"] = c.seed;
    json ds = json::object();
    for (const auto& [letter, spec] : c.datasets) {
        json d;
        d["kind"] = kind_name(spec.kind);
        if (spec.kind == DatasetSpec::Kind::kSynthetic) {
            d["users"] = spec.users;
            d["items"] = spec.items;
            d["latent"] = spec.latent;
            d["density"] = spec.density;
        } else {
            d["path"] = spec.path;
        }
        ds[std::string(1, letter)] = d;
    }
    j["datasets"] = ds;
    j["filter"] = {{"min_user", c.min_user_interactions},
                   {"min_item", c.min_item_interactions}};
    j["split"] = {{"shadow", c.fractions.shadow},
                  {"target", c.fractions.target},
                  {"extraction", c.fractions.extraction}};
    j["lfm"] = {{"dim", c.lfm_dim},
                {"lr", c.lfm_lr},
                {"reg", c.lfm_reg},
                {"epochs", c.lfm_epochs}};
    j["embed"] = {{"dim", c.embed_dim},
                  {"lr", c.embed_lr},
                  {"reg", c.embed_reg},
                  {"epochs", c.embed_epochs}};
    j["attack"] = {{"d_inv", c.attack.d_inv},
                   {"m", c.attack.m},
                   {"decoder_hidden", c.attack.decoder_hidden},
                   {"attack_hidden", c.attack.attack_hidden},
                   {"encdec_lr", c.attack.encdec_lr},
                   {"attack_lr", c.attack.attack_lr},
                   {"attack_momentum", c.attack.attack_momentum},
                   {"scores_lr", c.attack.scores_lr},
                   {"score_map_lr", c.attack.score_map_lr},
                   {"pretrain_epochs", c.attack.pretrain_epochs},
                   {"outer_epochs", c.attack.outer_epochs},
                   {"inner_epochs", c.attack.inner_epochs}};
    return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Setting codes
// ---------------------------------------------------------------------------

SettingCode parse_setting(const std::string& code) {
    auto algo = [&](char c) {
        if (c == 'I') return rec::RecKind::kItemBase;
        if (c == 'L') return rec::RecKind::kLfm;
        throw std::invalid_argument("setting code '" + code +
                                    "': unknown algorithm letter '" +
                                    std::string(1, c) + "' (expected I or L)");
    };
    auto source = [&](char c) {
        if (c < 'A' || c > 'Z')
            throw std::invalid_argument("setting code '" + code +
                                        "': source letter '" +
                                        std::string(1, c) +
                                        "' outside A-Z");
        return c;
    };
    SettingCode out;
    if (code.size() == 2) {
        out.shadow_source = out.target_source = source(code[0]);
        out.shadow_algo = out.target_algo = algo(code[1]);
    } else if (code.size() == 4) {
        out.shadow_source = source(code[0]);
        out.shadow_algo = algo(code[1]);
        out.target_source = source(code[2]);
        out.target_algo = algo(code[3]);
    } else {
        throw std::invalid_argument("setting code '" + code +
                                    "': length must be 2 or 4");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config parsing and echo
// ---------------------------------------------------------------------------

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string line = raw;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": expected 'key = value', got '" +
                                        trim(raw) + "'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": empty key or value");

        if (key.rfind("dataset.", 0) == 0) {
            std::vector<std::string> parts = split(key, '.');
            if (parts.size() != 3 || parts[1].size() != 1 ||
                parts[1][0] < 'A' || parts[1][0] > 'Z')
                throw std::invalid_argument(
                    "config key '" + key +
                    "': expected dataset.<A-Z>.<field>");
            DatasetSpec& d = cfg.datasets[parts[1][0]];
            const std::string& f = parts[2];
            if (f == "kind") d.kind = parse_kind(key, value);
            else if (f == "path") d.path = value;
            else if (f == "users") d.users = parse_int(key, value, 1);
            else if (f == "items") d.items = parse_int(key, value, 1);
            else if (f == "latent") d.latent = parse_int(key, value, 1);
            else if (f == "density") d.density = parse_real(key, value, 1e-6, 1.0);
            else bad_value(key, value, "unknown dataset field");
        } else if (key == "setting") {
            parse_setting(value);  // reject bad codes at parse time
            cfg.setting = value;
        } else if (key == "k") {
            cfg.k = parse_int(key, value, 1);
        } else if (key == "defense") {
            cfg.defense = parse_bool(key, value);
        } else if (key == "pool_multiplier") {
            cfg.pool_multiplier = parse_int(key, value, 1);
        } else if (key == "seed") {
            cfg.seed = parse_u64(key, value);
        } else if (key == "filter.min_user") {
            cfg.min_user_interactions = parse_int(key, value, 0);
        } else if (key == "filter.min_item") {
            cfg.min_item_interactions = parse_int(key, value, 0);
        } else if (key == "split.shadow") {
            cfg.fractions.shadow = parse_real(key, value, 1e-6, 1.0);
        } else if (key == "split.target") {
            cfg.fractions.target = parse_real(key, value, 1e-6, 1.0);
        } else if (key == "split.extraction") {
            cfg.fractions.extraction = parse_real(key, value, 1e-6, 1.0);
        } else if (key == "rec.lfm.dim") {
            cfg.lfm_dim = parse_int(key, value, 1);
        } else if (key == "rec.lfm.lr") {
            cfg.lfm_lr = parse_real(key, value, 1e-12, 10.0);
        } else if (key == "rec.lfm.reg") {
            cfg.lfm_reg = parse_real(key, value, 0.0, 10.0);
        } else if (key == "rec.lfm.epochs") {
            cfg.lfm_epochs = parse_int(key, value, 1);
        } else if (key == "embed.dim") {
            cfg.embed_dim = parse_int(key, value, 1);
        } else if (key == "embed.lr") {
            cfg.embed_lr = parse_real(key, value, 1e-12, 10.0);
        } else if (key == "embed.reg") {
            cfg.embed_reg = parse_real(key, value, 0.0, 10.0);
        } else if (key == "embed.epochs") {
            cfg.embed_epochs = parse_int(key, value, 1);
        } else if (key == "attack.d_inv") {
            cfg.attack.d_inv = parse_int(key, value, 1);
        } else if (key == "attack.m") {
            cfg.attack.m = parse_int(key, value, 3);
        } else if (key == "attack.decoder_hidden") {
            cfg.attack.decoder_hidden = parse_int_list(key, value);
        } else if (key == "attack.attack_hidden") {
            cfg.attack.attack_hidden = parse_int_list(key, value);
        } else if (key == "attack.encdec_lr") {
            cfg.attack.encdec_lr = parse_real(key, value, 1e-12, 10.0);
        } else if (key == "attack.attack_lr") {
            cfg.attack.attack_lr = parse_real(key, value, 1e-12, 10.0);
        } else if (key == "attack.attack_momentum") {
            cfg.attack.attack_momentum = parse_real(key, value, 0.0, 0.999);
        } else if (key == "attack.scores_lr") {
            cfg.attack.scores_lr = parse_real(key, value, 1e-12, 1e6);
        } else if (key == "attack.score_map_lr") {
            cfg.attack.score_map_lr = parse_real(key, value, 0.0, 10.0);
        } else if (key == "attack.pretrain_epochs") {
            cfg.attack.pretrain_epochs = parse_int(key, value, 1);
        } else if (key == "attack.outer_epochs") {
            cfg.attack.outer_epochs = parse_int(key, value, 0);
        } else if (key == "attack.inner_epochs") {
            cfg.attack.inner_epochs = parse_int(key, value, 1);
        } else {
            throw std::invalid_argument("config line " + std::to_string(lineno) +
                                        ": unknown key '" + key + "'");
        }
    }

    SettingCode code = parse_setting(cfg.setting);
    for (char ltr : {code.shadow_source, code.target_source})
        if (!cfg.datasets.count(ltr))
            throw std::invalid_argument(
                std::string("config: setting references undefined dataset '") +
                ltr + "'");
    double fsum = cfg.fractions.shadow + cfg.fractions.target +
                  cfg.fractions.extraction;
    if (fsum > 1.0 + 1e-9)
        throw std::invalid_argument("config: split fractions sum to " +
                                    fmt_double(fsum) + " > 1");
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    return parse_config_text(read_text(path));
}

std::string config_text(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << "setting = " << cfg.setting << '\n';
    out << "k = " << cfg.k << '\n';
    out << "defense = " << (cfg.defense ? "on" : "off") << '\n';
    out << "pool_multiplier = " << cfg.pool_multiplier << '\n';
    out << "seed = " << cfg.seed << '\n';
    for (const auto& [letter, d] : cfg.datasets) {
        std::string p = std::string("dataset.") + letter + ".";
        out << p << "kind = " << kind_name(d.kind) << '\n';
        if (d.kind == DatasetSpec::Kind::kSynthetic) {
            out << p << "users = " << d.users << '\n';
            out << p << "items = " << d.items << '\n';
            out << p << "latent = " << d.latent << '\n';
            out << p << "density = " << fmt_double(d.density) << '\n';
        } else {
            out << p << "path = " << d.path << '\n';
        }
    }
    out << "filter.min_user = " << cfg.min_user_interactions << '\n';
    out << "filter.min_item = " << cfg.min_item_interactions << '\n';
    out << "split.shadow = " << fmt_double(cfg.fractions.shadow) << '\n';
    out << "split.target = " << fmt_double(cfg.fractions.target) << '\n';
    out << "split.extraction = " << fmt_double(cfg.fractions.extraction)
        << '\n';
    out << "rec.lfm.dim = " << cfg.lfm_dim << '\n';
    out << "rec.lfm.lr = " << fmt_double(cfg.lfm_lr) << '\n';
    out << "rec.lfm.reg = " << fmt_double(cfg.lfm_reg) << '\n';
    out << "rec.lfm.epochs = " << cfg.lfm_epochs << '\n';
    out << "embed.dim = " << cfg.embed_dim << '\n';
    out << "embed.lr = " << fmt_double(cfg.embed_lr) << '\n';
    out << "embed.reg = " << fmt_double(cfg.embed_reg) << '\n';
    out << "embed.epochs = " << cfg.embed_epochs << '\n';
    out << "attack.d_inv = " << cfg.attack.d_inv << '\n';
    out << "attack.m = " << cfg.attack.m << '\n';
    out << "attack.decoder_hidden = " << join_ints(cfg.attack.decoder_hidden)
        << '\n';
    out << "attack.attack_hidden = " << join_ints(cfg.attack.attack_hidden)
        << '\n';
    out << "attack.encdec_lr = " << fmt_double(cfg.attack.encdec_lr) << '\n';
    out << "attack.attack_lr = " << fmt_double(cfg.attack.attack_lr) << '\n';
    out << "attack.attack_momentum = " << fmt_double(cfg.attack.attack_momentum)
        << '\n';
    out << "attack.scores_lr = " << fmt_double(cfg.attack.scores_lr) << '\n';
    out << "attack.score_map_lr = " << fmt_double(cfg.attack.score_map_lr)
        << '\n';
    out << "attack.pretrain_epochs = " << cfg.attack.pretrain_epochs << '\n';
    out << "attack.outer_epochs = " << cfg.attack.outer_epochs << '\n';
    out << "attack.inner_epochs = " << cfg.attack.inner_epochs << '\n';
    return out.str();
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

data::SplitBundle build_bundle(const ExperimentConfig& cfg) {
    SettingCode code = parse_setting(cfg.setting);
    for (char ltr : {code.shadow_source, code.target_source})
        if (!cfg.datasets.count(ltr))
            throw std::invalid_argument(
                std::string("config: setting references undefined dataset '") +
                ltr + "'");
    auto load_one = [&](const char* sname, char letter) {
        return stage(sname, [&] {
            data::RatingDataset src = materialize(
                cfg.datasets.at(letter),
                derive_seed(cfg.seed, std::string("source-") + letter));
            return data::filter_min_interactions(src,
                                                 cfg.min_user_interactions,
                                                 cfg.min_item_interactions);
        });
    };
    if (code.shadow_source == code.target_source) {
        data::RatingDataset one = load_one("load-data", code.shadow_source);
        return stage("split", [&] {
            auto b = data::make_splits(one, cfg.fractions,
                                       derive_seed(cfg.seed, "split"));
            data::verify_bundle(b);
            return b;
        });
    }
    data::RatingDataset sh = load_one("load-shadow-data", code.shadow_source);
    data::RatingDataset tg = load_one("load-target-data", code.target_source);
    return stage("split", [&] {
        auto b = data::make_splits_cross(sh, tg, cfg.fractions,
                                         derive_seed(cfg.seed, "split"));
        data::verify_bundle(b);
        return b;
    });
}

PipelineArtifacts build_pipeline(const ExperimentConfig& cfg) {
    SettingCode code = parse_setting(cfg.setting);
    PipelineArtifacts a;
    a.bundle = build_bundle(cfg);

    // Recommenders: each side trains on its members' interactions only.
    a.shadow_model = stage("train-shadow-recommender", [&] {
        return train_side(
            code.shadow_algo,
            data::restrict_to_users(a.bundle.shadow, a.bundle.shadow_members),
            cfg, derive_seed(cfg.seed, "shadow-recommender"));
    });
    a.target_model = stage("train-target-recommender", [&] {
        return train_side(
            code.target_algo,
            data::restrict_to_users(a.bundle.target, a.bundle.target_members),
            cfg, derive_seed(cfg.seed, "target-recommender"));
    });

    // Item embeddings from the held-out extraction subset.
    a.embeddings = stage("fit-embeddings", [&] {
        return diffvec::fit_item_embeddings(
            a.bundle.extraction, cfg.embed_dim, cfg.embed_lr, cfg.embed_reg,
            cfg.embed_epochs, derive_seed(cfg.seed, "item-embeddings"));
    });

    // Difference vectors for both sides, standardized so every attack input
    // dimension has zero mean and unit variance over the pooled samples.
    a.attack_data = stage("build-attack-data", [&] {
        Rng rng(derive_seed(cfg.seed, "attack-data"));
        diffvec::AttackData raw = diffvec::build_attack_dataset(
            a.bundle, a.embeddings, a.shadow_model, a.target_model, cfg.k,
            cfg.defense, rng, cfg.pool_multiplier);
        diffvec::standardize_attack_data(raw);
        return raw;
    });
    return a;
}

std::string metrics_jsonl(const std::vector<dlmia::EpochMetrics>& trace) {
    std::string out;
    append_metrics(out, trace);
    return out;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg,
                                const std::string& out_dir) {
    auto t0 = std::chrono::steady_clock::now();
    if (cfg.attack.pretrain_epochs < 1)
        throw std::invalid_argument(
            "config: attack.pretrain_epochs must be >= 1 for an experiment");
    fs::create_directories(out_dir);
    auto path_of = [&](const std::string& rel) {
        return (fs::path(out_dir) / rel).string();
    };

    ExperimentReport rep;
    rep.config = cfg;

    PipelineArtifacts pipe = build_pipeline(cfg);
    const data::SplitBundle& bundle = pipe.bundle;
    const diffvec::ItemEmbeddings& emb = pipe.embeddings;
    const diffvec::AttackData& att = pipe.attack_data;
    const rec::RecommenderModel& shadow_model = pipe.shadow_model;
    const rec::RecommenderModel& target_model = pipe.target_model;
    std::vector<int> shadow_labels = labels_of(att.shadow);

    // Biased baseline: plain classifier, same init stream and step budget as
    // the debiased stack.
    const int biased_steps = cfg.attack.pretrain_epochs +
                             cfg.attack.outer_epochs * cfg.attack.inner_epochs;
    dlmia::BiasedResult biased = stage("biased-attack", [&] {
        return dlmia::biased_attack(att.shadow, att.target,
                                    cfg.attack.attack_hidden,
                                    cfg.attack.attack_lr,
                                    cfg.attack.attack_momentum, biased_steps,
                                    cfg.seed);
    });

    // Debiased attack: pretraining then alternating refinement.
    dlmia::DlMiaConfig acfg = cfg.attack;
    acfg.diff_dim = emb.dim;
    acfg.seed = cfg.seed;
    acfg.identity_encoding = false;
    dlmia::DlMiaState state = stage("attack-init", [&] {
        return dlmia::init_state(acfg, static_cast<int>(att.shadow.size()),
                                 static_cast<int>(att.target.size()));
    });
    dlmia::PretrainResult pre = stage("pretrain", [&] {
        return dlmia::pretrain(state, att.shadow, att.target,
                               acfg.pretrain_epochs);
    });
    std::vector<double> pre_probs = dlmia::attack_predict(state, att.target);
    std::vector<std::vector<double>> dis_shadow = state.dis_shadow;
    std::vector<std::vector<double>> dis_target = state.dis_target;
    dlmia::AlternatingResult alt = stage("alternating", [&] {
        return dlmia::alternating_train(state, att.shadow, att.target);
    });

    stage("evaluate", [&] {
        rep.biased_auc = num::auc({biased.target_probs, att.target_labels});
        rep.dlmia_pretrain_auc = num::auc({pre_probs, att.target_labels});
        rep.dlmia_auc = num::auc({alt.target_probs, att.target_labels});
        return 0;
    });
    rep.estimation_residuals = alt.est_residuals;
    add_phase_summaries(rep.phases, biased.trace);
    add_phase_summaries(rep.phases, pre.trace);
    add_phase_summaries(rep.phases, alt.trace);

    stage("dump-artifacts", [&] {
        write_text(path_of("config.txt"), config_text(cfg));
        diffvec::dump_embeddings(emb, bundle.item_ids, path_of("embeddings.csv"));
        diffvec::dump_attack_samples(att.shadow, shadow_labels, bundle.user_ids,
                                     path_of("attack_shadow.csv"));
        diffvec::dump_attack_samples(att.target, att.target_labels,
                                     bundle.user_ids,
                                     path_of("attack_target.csv"));
        dlmia::dump_latents(dis_shadow, att.shadow, shadow_labels,
                            bundle.user_ids, path_of("latents_dis_shadow.csv"));
        dlmia::dump_latents(dis_target, att.target, att.target_labels,
                            bundle.user_ids, path_of("latents_dis_target.csv"));
        dlmia::dump_latents(alt.f_rew_shadow, att.shadow, shadow_labels,
                            bundle.user_ids, path_of("latents_rew_shadow.csv"));
        dlmia::dump_latents(alt.f_rew_target, att.target, att.target_labels,
                            bundle.user_ids, path_of("latents_rew_target.csv"));

        std::vector<double> dl_shadow_probs =
            dlmia::attack_predict(state, att.shadow);
        std::ostringstream pred;
        pred << "user_id,origin,label,biased_prob,debiased_prob\n";
        for (std::size_t i = 0; i < att.shadow.size(); ++i)
            pred << bundle.user_ids.at(att.shadow[i].user) << ",shadow,"
                 << shadow_labels[i] << ',' << fmt_double(biased.shadow_probs[i])
                 << ',' << fmt_double(dl_shadow_probs[i]) << '\n';
        for (std::size_t i = 0; i < att.target.size(); ++i)
            pred << bundle.user_ids.at(att.target[i].user) << ",target,"
                 << att.target_labels[i] << ','
                 << fmt_double(biased.target_probs[i]) << ','
                 << fmt_double(alt.target_probs[i]) << '\n';
        write_text(path_of("predictions.csv"), pred.str());

        std::string metrics;
        append_metrics(metrics, biased.trace);
        append_metrics(metrics, pre.trace);
        append_metrics(metrics, alt.trace);
        std::vector<dlmia::EpochMetrics> evals(3);
        evals[0].phase = "evaluate-biased";
        evals[0].target_auc = rep.biased_auc;
        evals[1].phase = "evaluate-pretrain";
        evals[1].target_auc = rep.dlmia_pretrain_auc;
        evals[2].phase = "evaluate-debiased";
        evals[2].target_auc = rep.dlmia_auc;
        append_metrics(metrics, evals);
        write_text(path_of("metrics.jsonl"), metrics);

        rec::save_recommender(shadow_model, path_of("shadow_model.bin"));
        rec::save_recommender(target_model, path_of("target_model.bin"));
        nn::save_tensors(path_of("attack_biased.bin"),
                         nn::mlp_tensors(biased.attack, "attack"));
        dlmia::save_dlmia(state, path_of("attack_debiased.bin"));
        return 0;
    });
    rep.artifacts = {"config.txt",
                     "embeddings.csv",
                     "attack_shadow.csv",
                     "attack_target.csv",
                     "latents_dis_shadow.csv",
                     "latents_dis_target.csv",
                     "latents_rew_shadow.csv",
                     "latents_rew_target.csv",
                     "predictions.csv",
                     "metrics.jsonl",
                     "shadow_model.bin",
                     "target_model.bin",
                     "attack_biased.bin",
                     "attack_debiased.bin"};

    rep.runtime_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    stage("write-report", [&] {
        write_report(rep, path_of("report.json"));
        return 0;
    });
    return rep;
}

// ---------------------------------------------------------------------------
// Report serialization and validation
// ---------------------------------------------------------------------------

std::string report_json(const ExperimentReport& r, bool include_runtime) {
    json j;
    j["config"] = config_echo(r.config);
    j["biased_auc"] = r.biased_auc;
    j["dlmia_pretrain_auc"] = r.dlmia_pretrain_auc;
    j["dlmia_auc"] = r.dlmia_auc;
    json phases = json::array();
    for (const PhaseSummary& p : r.phases)
        phases.push_back({{"phase", p.phase},
                          {"epochs", p.epochs},
                          {"first_loss", p.first_loss},
                          {"last_loss", p.last_loss}});
    j["phase_summaries"] = phases;
    json res = json::array();
    for (const auto& [start, end] : r.estimation_residuals)
        res.push_back({start, end});
    j["estimation_residuals"] = res;
    j["artifacts"] = r.artifacts;
    if (include_runtime) j["runtime_seconds"] = r.runtime_seconds;
    return j.dump(2) + "\n";
}

void write_report(const ExperimentReport& r, const std::string& path) {
    write_text(path, report_json(r, true));
}

namespace {

void check_schema(const json& sch, const json& node, const std::string& path) {
    auto fail = [&](const std::string& why) {
        throw std::runtime_error("report validation failed at " + path + ": " +
                                 why);
    };
    if (sch.contains("type")) {
        const std::string t = sch.at("type").get<std::string>();
        bool ok = false;
        if (t == "object") ok = node.is_object();
        else if (t == "array") ok = node.is_array();
        else if (t == "string") ok = node.is_string();
        else if (t == "number") ok = node.is_number();
        else if (t == "integer") ok = node.is_number_integer();
        else if (t == "boolean") ok = node.is_boolean();
        else throw std::runtime_error("schema error at " + path +
                                      ": unsupported type '" + t + "'");
        if (!ok) fail("expected type " + t);
    }
    if (sch.contains("enum")) {
        bool ok = false;
        for (const auto& v : sch.at("enum"))
            if (v == node) ok = true;
        if (!ok) fail("value not in enum");
    }
    if (node.is_object()) {
        if (sch.contains("required"))
            for (const auto& req : sch.at("required"))
                if (!node.contains(req.get<std::string>()))
                    fail("missing required key '" + req.get<std::string>() +
                         "'");
        const json* props =
            sch.contains("properties") ? &sch.at("properties") : nullptr;
        if (sch.contains("additionalProperties") &&
            sch.at("additionalProperties") == false) {
            for (const auto& [k, v] : node.items())
                if (!props || !props->contains(k))
                    fail("unexpected key '" + k + "'");
        }
        if (props)
            for (const auto& [k, sub] : props->items())
                if (node.contains(k)) check_schema(sub, node.at(k), path + "." + k);
    }
    if (node.is_array()) {
        if (sch.contains("minItems") &&
            node.size() < sch.at("minItems").get<std::size_t>())
            fail("fewer than minItems elements");
        if (sch.contains("maxItems") &&
            node.size() > sch.at("maxItems").get<std::size_t>())
            fail("more than maxItems elements");
        if (sch.contains("items"))
            for (std::size_t i = 0; i < node.size(); ++i)
                check_schema(sch.at("items"), node[i],
                             path + "[" + std::to_string(i) + "]");
    }
    if (node.is_number() && !node.is_boolean()) {
        if (sch.contains("minimum") &&
            node.get<double>() < sch.at("minimum").get<double>())
            fail("below minimum");
        if (sch.contains("maximum") &&
            node.get<double>() > sch.at("maximum").get<double>())
            fail("above maximum");
    }
}

}  // namespace

void validate_report_json(const std::string& report_bytes,
                          const std::string& schema_bytes) {
    json rep, sch;
    try {
        rep = json::parse(report_bytes);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("report is not valid JSON: ") +
                                 e.what());
    }
    try {
        sch = json::parse(schema_bytes);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string("schema is not valid JSON: ") +
                                 e.what());
    }
    check_schema(sch, rep, "$");
}

// ---------------------------------------------------------------------------
// Attack-table round trip
// ---------------------------------------------------------------------------

AttackTable load_attack_samples(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_attack_samples: cannot open " + path);
    std::string line;
    if (!std::getline(f, line))
        throw std::runtime_error("load_attack_samples: empty file: " + path);
    std::vector<std::string> header = split(trim(line), ',');
    if (header.size() < 4 || header[0] != "user_id" || header[1] != "origin" ||
        header[2] != "label")
        throw std::runtime_error(
            "load_attack_samples: unexpected header in " + path);
    const std::size_t dims = header.size() - 3;

    AttackTable out;
    int row = 0;
    while (std::getline(f, line)) {
        std::string t = trim(line);
        if (t.empty()) continue;
        std::vector<std::string> tok = split(t, ',');
        if (tok.size() != header.size())
            throw std::runtime_error("load_attack_samples: row " +
                                     std::to_string(row + 1) +
                                     " has wrong column count");
        diffvec::AttackSample s;
        s.user = row;
        out.user_ids.push_back(parse_ll("user_id", tok[0], INT64_MIN, INT64_MAX));
        if (tok[1] == "shadow") s.origin = diffvec::Origin::kShadow;
        else if (tok[1] == "target") s.origin = diffvec::Origin::kTarget;
        else throw std::runtime_error("load_attack_samples: bad origin '" +
                                      tok[1] + "'");
        int label = parse_int("label", tok[2], 0, 1);
        out.labels.push_back(label);
        if (s.origin == diffvec::Origin::kShadow) s.label = label;
        s.diff.resize(dims);
        for (std::size_t d = 0; d < dims; ++d) {
            std::size_t pos = 0;
            s.diff[d] = std::stod(tok[3 + d], &pos);
            if (pos != tok[3 + d].size())
                throw std::runtime_error(
                    "load_attack_samples: bad number in row " +
                    std::to_string(row + 1));
        }
        out.samples.push_back(std::move(s));
        ++row;
    }
    if (out.samples.empty())
        throw std::runtime_error("load_attack_samples: no rows in " + path);
    return out;
}

// ---------------------------------------------------------------------------
// Oracle-backed self checks
// ---------------------------------------------------------------------------

namespace {

CheckResult bound_check(const std::string& name, double measured, double bound) {
    CheckResult r;
    r.name = name;
    r.passed = measured <= bound;
    r.detail = fmt_double(measured) + " <= " + fmt_double(bound);
    return r;
}

// Independent power-series oracle, built on std::lgamma rather than the
// library's own gamma code.
double bessel_series(double v, double x) {
    if (x == 0.0) return v == 0.0 ? 1.0 : 0.0;
    const double half = x / 2.0;
    double term = std::exp(v * std::log(half) - std::lgamma(v + 1.0));
    double sum = term;
    for (int k = 1; k <= 2000; ++k) {
        term *= half * half / (k * (v + k));
        sum += term;
        if (term < sum * 1e-18) break;
    }
    return sum;
}

// KL(vMF(kappa) || uniform) on the 2-sphere by 1-D Simpson quadrature over
// the cosine w = mu . x, whose density is p(w) = kappa e^{kappa w} /
// (2 sinh kappa) against the uniform marginal 1/2.
double vmf_kl3_quadrature(double kappa) {
    auto logp = [&](double w) {
        return std::log(kappa) + kappa * (w - 1.0) -
               std::log1p(-std::exp(-2.0 * kappa));
    };
    const int n = 200001;
    const double h = 2.0 / (n - 1);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        double w = -1.0 + i * h;
        double lp = logp(w);
        double f = std::exp(lp) * (std::numbers::ln2 + lp);
        double wgt = (i == 0 || i == n - 1) ? 1.0 : (i % 2 ? 4.0 : 2.0);
        sum += wgt * f;
    }
    return sum * h / 3.0;
}

// Monte-Carlo KL(vMF || uniform) in dimension m: E_q[ln q - ln u] with the
// mean direction fixed at the north pole, so mu . z is the first coordinate.
double vmf_kl_mc(double kappa, int m, int n, Rng& rng) {
    const double log_cm = (m / 2.0 - 1.0) * std::log(kappa) -
                          (m / 2.0) * std::log(2.0 * std::numbers::pi) -
                          num::log_bessel_i(m / 2.0 - 1.0, kappa);
    const double log_u = std::lgamma(m / 2.0) - std::numbers::ln2 -
                         (m / 2.0) * std::log(std::numbers::pi);
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
        acc += num::sample_vmf_north(kappa, m, rng)[0];
    return log_cm - log_u + kappa * acc / n;
}

struct FdTracker {
    double worst = 0.0;  // |fd - an| / (1e-8 + 1e-4 * max(|fd|, |an|))
    void add(double fd, double an) {
        double scale = 1e-8 + 1e-4 * std::max(std::abs(fd), std::abs(an));
        worst = std::max(worst, std::abs(fd - an) / scale);
    }
    CheckResult result(const std::string& name) const {
        return bound_check(name, worst, 1.0);
    }
};

std::vector<diffvec::AttackSample> toy_samples(int n, int dim, bool labeled,
                                               diffvec::Origin origin,
                                               Rng& rng) {
    std::vector<diffvec::AttackSample> out(n);
    for (int i = 0; i < n; ++i) {
        int label = i % 2;
        out[i].user = i;
        out[i].origin = origin;
        if (labeled) out[i].label = label;
        out[i].diff.resize(dim);
        for (int d = 0; d < dim; ++d)
            out[i].diff[d] = (label ? 0.4 : -0.4) + 0.5 * rng.normal();
    }
    return out;
}

dlmia::DlMiaConfig toy_attack_config(int diff_dim) {
    dlmia::DlMiaConfig cfg;
    cfg.diff_dim = diff_dim;
    cfg.d_inv = 2;
    cfg.m = 3;
    cfg.decoder_hidden = {6};
    cfg.attack_hidden = {5};
    cfg.pretrain_epochs = 3;
    cfg.outer_epochs = 2;
    cfg.inner_epochs = 2;
    cfg.seed = 99;
    return cfg;
}

double pairwise_auc_oracle(const std::vector<double>& scores,
                           const std::vector<int>& labels) {
    double credit = 0.0;
    long long pos = 0, neg = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 1) ++pos;
        else ++neg;
    }
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            if (scores[i] > scores[j]) credit += 1.0;
            else if (scores[i] == scores[j]) credit += 0.5;
        }
    }
    return credit / static_cast<double>(pos * neg);
}

}  // namespace

std::vector<CheckResult> check_special_functions(bool corrupt_vmf_kl) {
    std::vector<CheckResult> out;
    const double flip = corrupt_vmf_kl ? -1.0 : 1.0;

    {
        double worst = 0.0;
        for (double v : {0.0, 0.5, 1.0, 1.5, 2.0, 5.0, 8.0, 15.5, 16.0})
            for (double x : {0.05, 0.5, 1.0, 5.0, 10.0, 25.0, 50.0}) {
                double oracle = bessel_series(v, x);
                double got = num::bessel_i(v, x);
                worst = std::max(worst, std::abs(got - oracle) /
                                            std::max(oracle, 1e-300));
            }
        out.push_back(bound_check("bessel-vs-series", worst, 1e-10));
    }
    {
        double worst = 0.0;
        for (double kappa : {0.1, 1.0, 5.0, 20.0, 100.0})
            worst = std::max(worst,
                             std::abs(flip * num::kl_vmf(kappa, 3).value -
                                      vmf_kl3_quadrature(kappa)));
        out.push_back(bound_check("kl-vmf-vs-quadrature-3d", worst, 1e-6));
    }
    {
        Rng rng(20260819);
        double worst = 0.0;
        for (double kappa : {1.0, 10.0})
            worst = std::max(worst,
                             std::abs(flip * num::kl_vmf(kappa, 8).value -
                                      vmf_kl_mc(kappa, 8, 1000000, rng)));
        out.push_back(bound_check("kl-vmf-vs-montecarlo-8d", worst, 5e-3));
    }
    {
        Rng rng(77001);
        num::GaussianPosterior q;
        for (int i = 0; i < 5; ++i) {
            q.mu.push_back(rng.normal());
            q.log_var.push_back(0.5 * rng.normal());
        }
        const int n = 400000;
        double acc = 0.0;
        for (int i = 0; i < n; ++i) {
            double term = 0.0;
            for (std::size_t d = 0; d < q.mu.size(); ++d) {
                double eps = rng.normal();
                double z = q.mu[d] + std::exp(0.5 * q.log_var[d]) * eps;
                term += -0.5 * (q.log_var[d] + eps * eps) + 0.5 * z * z;
            }
            acc += term;
        }
        double err = std::abs(num::kl_gaussian(q).value - acc / n);
        out.push_back(bound_check("kl-gaussian-vs-montecarlo", err, 5e-3));
    }
    {
        Rng rng(4242);
        double worst = 0.0;
        for (int m : {3, 8, 16})
            for (double kappa : {0.5, 2.0, 10.0, 50.0}) {
                const int n = 100000;
                double acc = 0.0;
                for (int i = 0; i < n; ++i)
                    acc += num::sample_vmf_north(kappa, m, rng)[0];
                worst = std::max(worst,
                                 std::abs(acc / n -
                                          num::vmf_mean_resultant(kappa, m)));
            }
        out.push_back(bound_check("vmf-sampler-resultant-length", worst, 0.01));
    }
    return out;
}

std::vector<CheckResult> check_gradients() {
    std::vector<CheckResult> out;
    const double h = 1e-5;

    // Classifier parameters through softmax + cross entropy.
    {
        Rng rng(310);
        nn::Mlp mlp = nn::make_mlp({{4, 6, 2}, nn::OutputHead::kSoftmax2}, rng);
        nn::DenseMatrix x(5, 4);
        std::vector<int> labels(5);
        std::vector<double> weights(5, 0.2);
        for (int i = 0; i < 5; ++i) {
            labels[i] = i % 2;
            for (int j = 0; j < 4; ++j) x(i, j) = rng.normal();
        }
        auto value = [&] {
            nn::MlpCache c = nn::mlp_forward(mlp, x);
            return nn::bce_loss(c.output, labels, weights).value;
        };
        nn::MlpCache cache = nn::mlp_forward(mlp, x);
        nn::BceResult bce = nn::bce_loss(cache.output, labels, weights);
        nn::MlpGrads grads = nn::mlp_backward(mlp, cache, bce.grad_probs);
        FdTracker fd;
        for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
            auto sweep = [&](std::vector<double>& vals,
                             const std::vector<double>& an) {
                for (std::size_t i = 0; i < vals.size(); ++i) {
                    double keep = vals[i];
                    vals[i] = keep + h;
                    double up = value();
                    vals[i] = keep - h;
                    double dn = value();
                    vals[i] = keep;
                    fd.add((up - dn) / (2 * h), an[i]);
                }
            };
            sweep(mlp.layers[l].w.data, grads.layers[l].w.data);
            sweep(mlp.layers[l].b, grads.layers[l].b);
        }
        out.push_back(fd.result("grad-classifier-params"));
    }

    // Encoder heads and decoder through the variational bound, deterministic
    // and frozen-noise modes.
    {
        Rng rng(311);
        dlmia::DlMiaConfig cfg = toy_attack_config(4);
        dlmia::DlMiaState state = dlmia::init_state(cfg, 6, 5);
        std::vector<double> diff(4);
        for (double& v : diff) v = rng.normal();

        for (bool frozen : {false, true}) {
            Rng noise_rng(512);
            dlmia::ElboEval base =
                dlmia::elbo_loss(state, diff, nullptr, frozen ? &noise_rng : nullptr);
            const dlmia::ElboNoise* replay = frozen ? &base.noise : nullptr;
            auto value = [&] {
                return dlmia::elbo_loss(state, diff, replay, nullptr).value;
            };
            FdTracker fd;
            auto sweep = [&](std::vector<double>& vals,
                             const std::vector<double>& an) {
                for (std::size_t i = 0; i < vals.size(); ++i) {
                    double keep = vals[i];
                    vals[i] = keep + h;
                    double up = value();
                    vals[i] = keep - h;
                    double dn = value();
                    vals[i] = keep;
                    fd.add((up - dn) / (2 * h), an[i]);
                }
            };
            sweep(state.gauss_head.w.data, base.d_gauss.w.data);
            sweep(state.gauss_head.b, base.d_gauss.b);
            sweep(state.vmf_head.w.data, base.d_vmf.w.data);
            sweep(state.vmf_head.b, base.d_vmf.b);
            for (std::size_t l = 0; l < state.decoder.layers.size(); ++l) {
                sweep(state.decoder.layers[l].w.data,
                      base.d_decoder.layers[l].w.data);
                sweep(state.decoder.layers[l].b, base.d_decoder.layers[l].b);
            }
            out.push_back(fd.result(frozen ? "grad-encoder-decoder-sampled"
                                           : "grad-encoder-decoder-mean"));
        }
    }

    // Score map (a, b) through the reweighted objective.
    {
        Rng rng(312);
        dlmia::DlMiaConfig cfg = toy_attack_config(4);
        dlmia::DlMiaState state = dlmia::init_state(cfg, 6, 5);
        auto shadow = toy_samples(6, 4, true, diffvec::Origin::kShadow, rng);
        auto target = toy_samples(5, 4, false, diffvec::Origin::kTarget, rng);
        dlmia::ReweightedEval base =
            dlmia::reweighted_loss(state, shadow, target, nullptr, nullptr);
        FdTracker fd;
        for (double* coord : {&state.score_a, &state.score_b}) {
            double keep = *coord;
            *coord = keep + h;
            double up =
                dlmia::reweighted_loss(state, shadow, target, nullptr, nullptr)
                    .value;
            *coord = keep - h;
            double dn =
                dlmia::reweighted_loss(state, shadow, target, nullptr, nullptr)
                    .value;
            *coord = keep;
            fd.add((up - dn) / (2 * h),
                   coord == &state.score_a ? base.grads.score_a
                                           : base.grads.score_b);
        }
        out.push_back(fd.result("grad-score-map"));
    }

    // Score table through the estimation constraint.
    {
        Rng rng(313);
        dlmia::DlMiaConfig cfg = toy_attack_config(4);
        dlmia::DlMiaState state = dlmia::init_state(cfg, 6, 5);
        auto shadow = toy_samples(6, 4, true, diffvec::Origin::kShadow, rng);
        auto target = toy_samples(5, 4, false, diffvec::Origin::kTarget, rng);
        dlmia::pretrain(state, shadow, target, 3);
        auto f_rew = [&](const std::vector<diffvec::AttackSample>& samples) {
            std::vector<std::vector<double>> rows;
            for (const auto& s : samples) {
                dlmia::EncodeResult e = dlmia::encode(state, s.diff, nullptr);
                std::vector<double> row = e.f_inv;
                row.insert(row.end(), e.f_spe.begin(), e.f_spe.end());
                rows.push_back(std::move(row));
            }
            return rows;
        };
        std::vector<std::vector<double>> rew_shadow = f_rew(shadow);
        std::vector<std::vector<double>> rew_target = f_rew(target);
        std::vector<int> pseudo(target.size());
        for (std::size_t i = 0; i < pseudo.size(); ++i) pseudo[i] = i % 2;
        auto value = [&] {
            return dlmia::estimation_loss(state, shadow, target, pseudo,
                                          rew_shadow, rew_target)
                .value;
        };
        dlmia::EstimationEval base = dlmia::estimation_loss(
            state, shadow, target, pseudo, rew_shadow, rew_target);
        FdTracker fd;
        auto sweep = [&](std::vector<double>& vals,
                         const std::vector<double>& an) {
            for (std::size_t i = 0; i < vals.size(); ++i) {
                double keep = vals[i];
                vals[i] = keep + h;
                double up = value();
                vals[i] = keep - h;
                double dn = value();
                vals[i] = keep;
                fd.add((up - dn) / (2 * h), an[i]);
            }
        };
        sweep(state.scores_shadow, base.grad_shadow);
        sweep(state.scores_target, base.grad_target);
        out.push_back(fd.result("grad-scores-estimation"));
    }
    return out;
}

std::vector<CheckResult> check_ranking_metric() {
    Rng rng(600);
    int exact = 0;
    const int instances = 200;
    for (int t = 0; t < instances; ++t) {
        int n = 2 + static_cast<int>(rng.uniform_index(59));
        std::vector<double> scores(n);
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) {
            scores[i] = (t % 2 == 0)
                            ? static_cast<double>(rng.uniform_index(5))
                            : rng.uniform();
            labels[i] = static_cast<int>(rng.uniform_index(2));
        }
        labels[0] = 1;  // force both classes
        labels[n - 1] = 0;
        double oracle = pairwise_auc_oracle(scores, labels);
        double got = num::auc({scores, labels});
        if (oracle == got) ++exact;
    }
    CheckResult r;
    r.name = "auc-vs-pairwise-oracle";
    r.passed = exact == instances;
    r.detail = std::to_string(exact) + "/" + std::to_string(instances) +
               " instances bit-identical";
    return {r};
}

std::vector<CheckResult> check_split_invariants() {
    std::vector<CheckResult> out;
    auto same_records = [](const data::RatingDataset& a,
                           const data::RatingDataset& b) {
        if (a.records.size() != b.records.size()) return false;
        for (std::size_t i = 0; i < a.records.size(); ++i) {
            if (a.records[i].user != b.records[i].user ||
                a.records[i].item != b.records[i].item ||
                a.records[i].rating != b.records[i].rating)
                return false;
        }
        return true;
    };
    {
        CheckResult r;
        r.name = "split-single-source";
        try {
            data::RatingDataset ds = data::filter_min_interactions(
                data::generate_synthetic(300, 80, 6, 0.12, 11), 3, 3);
            data::SplitBundle a = data::make_splits(ds, {}, 21);
            data::SplitBundle b = data::make_splits(ds, {}, 21);
            data::verify_bundle(a);
            bool det = same_records(a.shadow, b.shadow) &&
                       same_records(a.target, b.target) &&
                       same_records(a.extraction, b.extraction);
            r.passed = det;
            r.detail = det ? "bundle invariants hold; reruns identical"
                           : "reruns differ";
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = e.what();
        }
        out.push_back(r);
    }
    {
        CheckResult r;
        r.name = "split-two-source";
        try {
            data::RatingDataset s = data::filter_min_interactions(
                data::generate_synthetic(260, 80, 6, 0.12, 12), 3, 3);
            data::RatingDataset t = data::filter_min_interactions(
                data::generate_synthetic(240, 80, 5, 0.10, 13), 3, 3);
            data::SplitBundle a = data::make_splits_cross(s, t, {}, 22);
            data::SplitBundle b = data::make_splits_cross(s, t, {}, 22);
            data::verify_bundle(a);
            bool det = same_records(a.shadow, b.shadow) &&
                       same_records(a.target, b.target) &&
                       same_records(a.extraction, b.extraction);
            r.passed = det;
            r.detail = det ? "bundle invariants hold; reruns identical"
                           : "reruns differ";
        } catch (const std::exception& e) {
            r.passed = false;
            r.detail = e.what();
        }
        out.push_back(r);
    }
    return out;
}

std::vector<CheckResult> verify_suite(bool corrupt_vmf_kl) {
    std::vector<CheckResult> out;
    auto extend = [&](std::vector<CheckResult> v) {
        out.insert(out.end(), std::make_move_iterator(v.begin()),
                   std::make_move_iterator(v.end()));
    };
    extend(check_special_functions(corrupt_vmf_kl));
    extend(check_gradients());
    extend(check_ranking_metric());
    extend(check_split_invariants());
    return out;
}

bool all_passed(const std::vector<CheckResult>& checks) {
    return std::all_of(checks.begin(), checks.end(),
                       [](const CheckResult& c) { return c.passed; });
}

std::string render_checks(const std::vector<CheckResult>& checks) {
    std::size_t width = 4;
    for (const CheckResult& c : checks) width = std::max(width, c.name.size());
    std::ostringstream out;
    for (const CheckResult& c : checks) {
        out << (c.passed ? "PASS  " : "FAIL  ") << c.name
            << std::string(width - c.name.size() + 2, ' ') << c.detail << '\n';
    }
    int failed = 0;
    for (const CheckResult& c : checks)
        if (!c.passed) ++failed;
    out << (failed == 0 ? "all checks passed"
                        : std::to_string(failed) + " check(s) FAILED")
        << " (" << checks.size() << " total)\n";
    return out.str();
}

}  // namespace mia::experiment

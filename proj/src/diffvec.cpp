#include "mia/diffvec.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

namespace mia::diffvec {

ItemEmbeddings fit_item_embeddings(const data::RatingDataset& extraction,
                                   int dim, double lr, double reg, int epochs,
                                   std::uint64_t seed) {
    std::vector<int> counts = data::item_counts(extraction);
    for (int i = 0; i < extraction.n_items; ++i)
        if (counts[i] == 0)
            throw std::runtime_error(
                "fit_item_embeddings: catalog item " + std::to_string(i) +
                " has no interactions in the extraction subset");
    rec::RecommenderModel m =
        rec::train_lfm(extraction, dim, lr, reg, epochs, seed);
    ItemEmbeddings emb;
    emb.n_items = extraction.n_items;
    emb.dim = dim;
    emb.matrix = std::move(m.item_f);
    return emb;
}

std::vector<double> difference_vector(const ItemEmbeddings& emb,
                                      const std::vector<int>& history,
                                      const std::vector<int>& recs) {
    if (history.empty() || recs.empty())
        throw std::invalid_argument("difference_vector: empty item list");
    auto accumulate = [&](const std::vector<int>& items, std::vector<double>& acc) {
        for (int i : items) {
            if (i < 0 || i >= emb.n_items)
                throw std::invalid_argument(
                    "difference_vector: item " + std::to_string(i) +
                    " outside the catalog");
            const double* row = &emb.matrix[static_cast<std::size_t>(i) * emb.dim];
            for (int d = 0; d < emb.dim; ++d) acc[d] += row[d];
        }
        for (int d = 0; d < emb.dim; ++d) acc[d] /= static_cast<double>(items.size());
    };
    std::vector<double> hist_mean(emb.dim, 0.0), rec_mean(emb.dim, 0.0);
    accumulate(history, hist_mean);
    accumulate(recs, rec_mean);
    for (int d = 0; d < emb.dim; ++d) hist_mean[d] -= rec_mean[d];
    return hist_mean;
}

AttackData build_attack_dataset(const data::SplitBundle& bundle,
                                const ItemEmbeddings& emb,
                                const rec::RecommenderModel& shadow_model,
                                const rec::RecommenderModel& target_model,
                                int k, bool defense, Rng& rng,
                                int pool_multiplier) {
    const auto hist_shadow = data::items_by_user(bundle.shadow);
    const auto hist_target = data::items_by_user(bundle.target);
    const data::RatingDataset shadow_member_ds =
        data::restrict_to_users(bundle.shadow, bundle.shadow_members);
    const data::RatingDataset target_member_ds =
        data::restrict_to_users(bundle.target, bundle.target_members);

    AttackData out;
    auto add_members = [&](const std::vector<int>& users,
                           const rec::RecommenderModel& model,
                           const std::vector<std::vector<int>>& hist,
                           Origin origin) {
        for (int u : users) {
            rec::RecommendationSet recs = rec::recommend_top_k(model, u, k);
            AttackSample s;
            s.user = u;
            s.diff = difference_vector(emb, hist[u], recs.items);
            s.origin = origin;
            if (origin == Origin::kShadow) {
                s.label = 1;
                out.shadow.push_back(std::move(s));
            } else {
                out.target.push_back(std::move(s));
                out.target_labels.push_back(1);
            }
        }
    };
    auto add_nonmembers = [&](const std::vector<int>& users,
                              const data::RatingDataset& member_ds,
                              const std::vector<std::vector<int>>& hist,
                              Origin origin) {
        for (int u : users) {
            rec::RecommendationSet recs =
                defense ? rec::recommend_popular_randomized(
                              member_ds, hist[u], k, pool_multiplier, rng)
                        : rec::recommend_popular(member_ds, hist[u], k);
            AttackSample s;
            s.user = u;
            s.diff = difference_vector(emb, hist[u], recs.items);
            s.origin = origin;
            if (origin == Origin::kShadow) {
                s.label = 0;
                out.shadow.push_back(std::move(s));
            } else {
                out.target.push_back(std::move(s));
                out.target_labels.push_back(0);
            }
        }
    };

    add_members(bundle.shadow_members, shadow_model, hist_shadow, Origin::kShadow);
    add_nonmembers(bundle.shadow_nonmembers, shadow_member_ds, hist_shadow,
                   Origin::kShadow);
    add_members(bundle.target_members, target_model, hist_target, Origin::kTarget);
    add_nonmembers(bundle.target_nonmembers, target_member_ds, hist_target,
                   Origin::kTarget);
    return out;
}

void standardize_attack_data(AttackData& data) {
    std::size_t total = data.shadow.size() + data.target.size();
    if (total == 0)
        throw std::invalid_argument("standardize_attack_data: no samples");
    const std::size_t dim = data.shadow.empty() ? data.target.front().diff.size()
                                                : data.shadow.front().diff.size();
    auto check = [&](const std::vector<AttackSample>& v) {
        for (const auto& s : v)
            if (s.diff.size() != dim)
                throw std::invalid_argument(
                    "standardize_attack_data: inconsistent dimensions");
    };
    check(data.shadow);
    check(data.target);

    std::vector<double> mean(dim, 0.0), var(dim, 0.0);
    auto accumulate = [&](const std::vector<AttackSample>& v) {
        for (const auto& s : v)
            for (std::size_t d = 0; d < dim; ++d) mean[d] += s.diff[d];
    };
    accumulate(data.shadow);
    accumulate(data.target);
    for (std::size_t d = 0; d < dim; ++d) mean[d] /= static_cast<double>(total);
    auto accumulate_var = [&](const std::vector<AttackSample>& v) {
        for (const auto& s : v)
            for (std::size_t d = 0; d < dim; ++d) {
                double c = s.diff[d] - mean[d];
                var[d] += c * c;
            }
    };
    accumulate_var(data.shadow);
    accumulate_var(data.target);
    constexpr double kMinVariance = 1e-12;
    std::vector<double> scale(dim, 1.0);
    for (std::size_t d = 0; d < dim; ++d) {
        var[d] /= static_cast<double>(total);
        if (var[d] > kMinVariance) scale[d] = 1.0 / std::sqrt(var[d]);
    }
    auto apply = [&](std::vector<AttackSample>& v) {
        for (auto& s : v)
            for (std::size_t d = 0; d < dim; ++d)
                s.diff[d] = (s.diff[d] - mean[d]) * scale[d];
    };
    apply(data.shadow);
    apply(data.target);
}

namespace {

void write_double(std::ofstream& f, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    f << buf;
}

}  // namespace

void dump_embeddings(const ItemEmbeddings& emb,
                     const std::vector<std::int64_t>& item_ids,
                     const std::string& path) {
    if (static_cast<int>(item_ids.size()) != emb.n_items)
        throw std::invalid_argument("dump_embeddings: id map size mismatch");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("dump_embeddings: cannot open " + path);
    f << "item_id";
    for (int d = 0; d < emb.dim; ++d) f << ",dim" << d;
    f << '\n';
    for (int i = 0; i < emb.n_items; ++i) {
        f << item_ids[i];
        for (int d = 0; d < emb.dim; ++d) {
            f << ',';
            write_double(f, emb.matrix[static_cast<std::size_t>(i) * emb.dim + d]);
        }
        f << '\n';
    }
    if (!f) throw std::runtime_error("dump_embeddings: write failed: " + path);
}

void dump_attack_samples(const std::vector<AttackSample>& samples,
                         const std::vector<int>& labels,
                         const std::vector<std::int64_t>& user_ids,
                         const std::string& path) {
    if (labels.size() != samples.size())
        throw std::invalid_argument("dump_attack_samples: label count mismatch");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("dump_attack_samples: cannot open " + path);
    f << "user_id,origin,label";
    if (!samples.empty())
        for (std::size_t d = 0; d < samples[0].diff.size(); ++d) f << ",diff" << d;
    f << '\n';
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const AttackSample& s = samples[i];
        f << user_ids.at(s.user) << ','
          << (s.origin == Origin::kShadow ? "shadow" : "target") << ','
          << labels[i];
        for (double v : s.diff) {
            f << ',';
            write_double(f, v);
        }
        f << '\n';
    }
    if (!f) throw std::runtime_error("dump_attack_samples: write failed: " + path);
}

}  // namespace mia::diffvec

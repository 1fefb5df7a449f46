#include "mia/recommenders.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "mia/nn.hpp"

namespace mia::rec {

namespace {

std::vector<std::vector<std::pair<int, double>>> build_history(
    const data::RatingDataset& ds) {
    std::vector<std::vector<std::pair<int, double>>> hist(ds.n_users);
    for (const auto& r : ds.records) hist[r.user].emplace_back(r.item, r.rating);
    for (auto& h : hist) std::sort(h.begin(), h.end());
    return hist;
}

double dataset_rmse(const data::RatingDataset& ds,
                    const std::vector<double>& user_f,
                    const std::vector<double>& item_f, int dim) {
    double sse = 0.0;
    for (const auto& r : ds.records) {
        const double* p = &user_f[static_cast<std::size_t>(r.user) * dim];
        const double* q = &item_f[static_cast<std::size_t>(r.item) * dim];
        double pred = 0.0;
        for (int d = 0; d < dim; ++d) pred += p[d] * q[d];
        double e = r.rating - pred;
        sse += e * e;
    }
    return std::sqrt(sse / static_cast<double>(ds.records.size()));
}

// Popularity ranking (count desc, item id asc) of items outside `exclude`.
std::vector<int> popularity_ranking(const data::RatingDataset& ds,
                                    const std::vector<int>& exclude) {
    std::vector<int> counts = data::item_counts(ds);
    std::vector<char> excluded(ds.n_items, 0);
    for (int i : exclude) {
        if (i < 0 || i >= ds.n_items)
            throw std::invalid_argument("recommend_popular: history item out of range");
        excluded[i] = 1;
    }
    std::vector<int> items;
    items.reserve(ds.n_items);
    for (int i = 0; i < ds.n_items; ++i)
        if (!excluded[i]) items.push_back(i);
    std::stable_sort(items.begin(), items.end(), [&](int a, int b) {
        if (counts[a] != counts[b]) return counts[a] > counts[b];
        return a < b;
    });
    return items;
}

}  // namespace

double RecommenderModel::score(int user, int item) const {
    if (user < 0 || user >= n_users || item < 0 || item >= n_items)
        throw std::invalid_argument("score: user or item out of range");
    if (kind == RecKind::kLfm) {
        const double* p = &user_f[static_cast<std::size_t>(user) * dim];
        const double* q = &item_f[static_cast<std::size_t>(item) * dim];
        double s = 0.0;
        for (int d = 0; d < dim; ++d) s += p[d] * q[d];
        return s;
    }
    double s = 0.0;
    const std::size_t row = static_cast<std::size_t>(item) * n_items;
    for (const auto& [j, rating] : history[user]) {
        if (j == item) continue;
        s += sim[row + j] * rating;
    }
    return s;
}

RecommenderModel train_itembase(const data::RatingDataset& train) {
    if (train.records.empty())
        throw std::invalid_argument("train_itembase: empty training data");
    RecommenderModel m;
    m.kind = RecKind::kItemBase;
    m.n_users = train.n_users;
    m.n_items = train.n_items;
    m.history = build_history(train);

    const int n = train.n_items;
    std::vector<double> dot(static_cast<std::size_t>(n) * n, 0.0);
    std::vector<double> norm_sq(n, 0.0);
    for (const auto& h : m.history) {
        for (std::size_t a = 0; a < h.size(); ++a) {
            norm_sq[h[a].first] += h[a].second * h[a].second;
            for (std::size_t b = a + 1; b < h.size(); ++b) {
                double prod = h[a].second * h[b].second;
                dot[static_cast<std::size_t>(h[a].first) * n + h[b].first] += prod;
                dot[static_cast<std::size_t>(h[b].first) * n + h[a].first] += prod;
            }
        }
    }
    m.sim.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        m.sim[static_cast<std::size_t>(i) * n + i] = 1.0;
        for (int j = i + 1; j < n; ++j) {
            double denom = std::sqrt(norm_sq[i]) * std::sqrt(norm_sq[j]);
            double s = 0.0;
            if (denom > 0.0) s = dot[static_cast<std::size_t>(i) * n + j] / denom;
            m.sim[static_cast<std::size_t>(i) * n + j] = s;
            m.sim[static_cast<std::size_t>(j) * n + i] = s;
        }
    }
    return m;
}

RecommenderModel train_lfm(const data::RatingDataset& train, int embed,
                           double lr, double reg, int epochs,
                           std::uint64_t seed) {
    if (train.records.empty())
        throw std::invalid_argument("train_lfm: empty training data");
    if (embed < 1) throw std::invalid_argument("train_lfm: embed must be >= 1");
    if (epochs < 0) throw std::invalid_argument("train_lfm: negative epochs");

    RecommenderModel m;
    m.kind = RecKind::kLfm;
    m.n_users = train.n_users;
    m.n_items = train.n_items;
    m.dim = embed;
    m.history = build_history(train);

    Rng rng(seed);
    m.user_f.resize(static_cast<std::size_t>(train.n_users) * embed);
    m.item_f.resize(static_cast<std::size_t>(train.n_items) * embed);
    for (auto& v : m.user_f) v = 0.1 * rng.normal();
    for (auto& v : m.item_f) v = 0.1 * rng.normal();

    const double initial_rmse = dataset_rmse(train, m.user_f, m.item_f, embed);
    m.rmse_trace.push_back(initial_rmse);

    std::vector<std::size_t> order(train.records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<double> p_old(embed);

    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t idx : order) {
            const auto& r = train.records[idx];
            double* p = &m.user_f[static_cast<std::size_t>(r.user) * embed];
            double* q = &m.item_f[static_cast<std::size_t>(r.item) * embed];
            double pred = 0.0;
            for (int d = 0; d < embed; ++d) pred += p[d] * q[d];
            const double e = r.rating - pred;
            std::copy(p, p + embed, p_old.begin());
            for (int d = 0; d < embed; ++d) {
                p[d] += lr * (e * q[d] - reg * p[d]);
                q[d] += lr * (e * p_old[d] - reg * q[d]);
            }
        }
        double rmse = dataset_rmse(train, m.user_f, m.item_f, embed);
        m.rmse_trace.push_back(rmse);
        if (!std::isfinite(rmse) || rmse > 10.0 * initial_rmse)
            throw std::runtime_error(
                "train_lfm: training diverged (epoch " + std::to_string(epoch + 1) +
                " RMSE " + std::to_string(rmse) + " vs initial " +
                std::to_string(initial_rmse) + ")");
    }
    return m;
}

RecommendationSet recommend_top_k(const RecommenderModel& model, int user,
                                  int k) {
    if (user < 0 || user >= model.n_users || model.history[user].empty())
        throw std::invalid_argument("recommend_top_k: user not in training set");
    if (k < 1) throw std::invalid_argument("recommend_top_k: k must be >= 1");
    std::vector<char> seen(model.n_items, 0);
    for (const auto& [item, rating] : model.history[user]) seen[item] = 1;
    std::vector<std::pair<double, int>> scored;
    scored.reserve(model.n_items);
    for (int i = 0; i < model.n_items; ++i) {
        if (seen[i]) continue;
        scored.emplace_back(model.score(user, i), i);
    }
    if (static_cast<int>(scored.size()) < k)
        throw std::runtime_error(
            "recommend_top_k: catalog too small (" +
            std::to_string(scored.size()) + " candidates for k=" +
            std::to_string(k) + ")");
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    RecommendationSet out;
    out.user = user;
    out.source = RecSource::kModel;
    out.items.reserve(k);
    for (int i = 0; i < k; ++i) out.items.push_back(scored[i].second);
    return out;
}

RecommendationSet recommend_popular(const data::RatingDataset& ds,
                                    const std::vector<int>& user_history,
                                    int k) {
    if (k < 1) throw std::invalid_argument("recommend_popular: k must be >= 1");
    std::vector<int> ranked = popularity_ranking(ds, user_history);
    if (static_cast<int>(ranked.size()) < k)
        throw std::runtime_error(
            "recommend_popular: catalog too small (" +
            std::to_string(ranked.size()) + " candidates for k=" +
            std::to_string(k) + ")");
    RecommendationSet out;
    out.source = RecSource::kPopularity;
    out.items.assign(ranked.begin(), ranked.begin() + k);
    return out;
}

RecommendationSet recommend_popular_randomized(
    const data::RatingDataset& ds, const std::vector<int>& user_history, int k,
    int pool_multiplier, Rng& rng) {
    if (k < 1 || pool_multiplier < 1)
        throw std::invalid_argument(
            "recommend_popular_randomized: k and pool_multiplier must be >= 1");
    std::vector<int> ranked = popularity_ranking(ds, user_history);
    const std::size_t pool_size = std::min<std::size_t>(
        ranked.size(), static_cast<std::size_t>(pool_multiplier) *
                           static_cast<std::size_t>(k));
    if (pool_size < static_cast<std::size_t>(k))
        throw std::runtime_error(
            "recommend_popular_randomized: popularity pool too small (" +
            std::to_string(pool_size) + " candidates for k=" +
            std::to_string(k) + ")");
    std::vector<int> pool(ranked.begin(), ranked.begin() + pool_size);
    // Partial Fisher-Yates: after i swaps, pool[0..i) is a uniform sample.
    for (int i = 0; i < k; ++i) {
        std::size_t j = i + rng.uniform_index(pool_size - i);
        std::swap(pool[i], pool[j]);
    }
    RecommendationSet out;
    out.source = RecSource::kPopularityRandomized;
    out.items.assign(pool.begin(), pool.begin() + k);
    return out;
}

void save_recommender(const RecommenderModel& model, const std::string& path) {
    std::vector<nn::NamedTensor> tensors;
    tensors.push_back({"meta",
                       {4},
                       {static_cast<double>(model.kind == RecKind::kLfm ? 1 : 0),
                        static_cast<double>(model.n_users),
                        static_cast<double>(model.n_items),
                        static_cast<double>(model.dim)}});
    if (model.kind == RecKind::kItemBase) {
        tensors.push_back({"sim", {model.n_items, model.n_items}, model.sim});
    } else {
        tensors.push_back({"user_f", {model.n_users, model.dim}, model.user_f});
        tensors.push_back({"item_f", {model.n_items, model.dim}, model.item_f});
        tensors.push_back({"rmse_trace",
                           {static_cast<int>(model.rmse_trace.size())},
                           model.rmse_trace});
    }
    std::vector<double> offsets;
    std::vector<double> items;
    std::vector<double> ratings;
    offsets.push_back(0.0);
    for (const auto& h : model.history) {
        for (const auto& [item, rating] : h) {
            items.push_back(static_cast<double>(item));
            ratings.push_back(rating);
        }
        offsets.push_back(static_cast<double>(items.size()));
    }
    tensors.push_back({"hist_offsets", {static_cast<int>(offsets.size())}, offsets});
    tensors.push_back({"hist_items", {static_cast<int>(items.size())}, items});
    tensors.push_back({"hist_ratings", {static_cast<int>(ratings.size())}, ratings});
    nn::save_tensors(path, tensors);
}

RecommenderModel load_recommender(const std::string& path) {
    std::vector<nn::NamedTensor> tensors = nn::load_tensors(path);
    auto find = [&](const std::string& name) -> const nn::NamedTensor& {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw std::runtime_error("load_recommender: missing tensor " + name +
                                 " in " + path);
    };
    const auto& meta = find("meta");
    if (meta.data.size() != 4)
        throw std::runtime_error("load_recommender: malformed meta tensor");
    RecommenderModel m;
    m.kind = meta.data[0] == 1.0 ? RecKind::kLfm : RecKind::kItemBase;
    m.n_users = static_cast<int>(meta.data[1]);
    m.n_items = static_cast<int>(meta.data[2]);
    m.dim = static_cast<int>(meta.data[3]);
    if (m.kind == RecKind::kItemBase) {
        m.sim = find("sim").data;
        if (m.sim.size() != static_cast<std::size_t>(m.n_items) * m.n_items)
            throw std::runtime_error("load_recommender: similarity size mismatch");
    } else {
        m.user_f = find("user_f").data;
        m.item_f = find("item_f").data;
        m.rmse_trace = find("rmse_trace").data;
        if (m.user_f.size() != static_cast<std::size_t>(m.n_users) * m.dim ||
            m.item_f.size() != static_cast<std::size_t>(m.n_items) * m.dim)
            throw std::runtime_error("load_recommender: factor size mismatch");
    }
    const auto& offsets = find("hist_offsets");
    const auto& items = find("hist_items");
    const auto& ratings = find("hist_ratings");
    if (offsets.data.size() != static_cast<std::size_t>(m.n_users) + 1 ||
        items.data.size() != ratings.data.size())
        throw std::runtime_error("load_recommender: malformed history tensors");
    m.history.resize(m.n_users);
    for (int u = 0; u < m.n_users; ++u) {
        auto begin = static_cast<std::size_t>(offsets.data[u]);
        auto end = static_cast<std::size_t>(offsets.data[u + 1]);
        if (begin > end || end > items.data.size())
            throw std::runtime_error("load_recommender: malformed history offsets");
        for (std::size_t i = begin; i < end; ++i)
            m.history[u].emplace_back(static_cast<int>(items.data[i]),
                                      ratings.data[i]);
    }
    return m;
}

void dump_recommendations(const std::vector<RecommendationSet>& sets,
                          const std::vector<std::int64_t>& user_ids,
                          const std::vector<std::int64_t>& item_ids,
                          const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("dump_recommendations: cannot open " + path);
    f << "user_id,rank,item_id,source\n";
    auto source_name = [](RecSource s) {
        switch (s) {
            case RecSource::kModel: return "model";
            case RecSource::kPopularity: return "popularity";
            case RecSource::kPopularityRandomized: return "popularity_randomized";
        }
        return "unknown";
    };
    for (const auto& set : sets) {
        for (std::size_t rank = 0; rank < set.items.size(); ++rank) {
            f << user_ids.at(set.user) << ',' << rank + 1 << ','
              << item_ids.at(set.items[rank]) << ',' << source_name(set.source)
              << '\n';
        }
    }
    if (!f) throw std::runtime_error("dump_recommendations: write failed: " + path);
}

}  // namespace mia::rec

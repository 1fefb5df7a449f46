#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "mia/recommenders.hpp"

using namespace mia;
using namespace mia::rec;

namespace {

data::RatingDataset make_ds(int n_users, int n_items,
                            std::vector<data::Interaction> recs) {
    data::RatingDataset ds;
    ds.n_users = n_users;
    ds.n_items = n_items;
    for (int u = 0; u < n_users; ++u) ds.user_ids.push_back(u);
    for (int i = 0; i < n_items; ++i) ds.item_ids.push_back(i);
    ds.records = std::move(recs);
    return ds;
}

// Rank-1 ratings r(u,i) = a_u * b_i with a in [1,2), b in [1,2.5).
double planted_a(int u) { return 1.0 + 0.05 * u; }
double planted_b(int i) { return 1.0 + 0.1 * i; }

data::RatingDataset rank1_dataset(int n_users, int n_items,
                                  const std::set<std::pair<int, int>>& holdout) {
    std::vector<data::Interaction> recs;
    for (int u = 0; u < n_users; ++u)
        for (int i = 0; i < n_items; ++i) {
            if (holdout.count({u, i})) continue;
            recs.push_back({u, i, planted_a(u) * planted_b(i), u * 100 + i});
        }
    return make_ds(n_users, n_items, std::move(recs));
}

}  // namespace

TEST_CASE("itembase similarity matches a dense cosine oracle") {
    // 5 users x 4 items. Items 0 and 1 have identical rating vectors; items
    // 2 and 3 have disjoint rater sets.
    std::vector<data::Interaction> recs = {
        {0, 0, 4, 1}, {0, 1, 4, 2}, {0, 2, 2, 3},
        {1, 0, 3, 4}, {1, 1, 3, 5},
        {2, 0, 5, 6}, {2, 1, 5, 7}, {2, 2, 4, 8},
        {3, 3, 1, 9},
        {4, 3, 5, 10},
    };
    data::RatingDataset ds = make_ds(5, 4, recs);
    RecommenderModel m = train_itembase(ds);

    // Dense oracle: cosine of full rating columns (missing entries are 0).
    std::vector<std::vector<double>> r(5, std::vector<double>(4, 0.0));
    for (const auto& rec : recs) r[rec.user][rec.item] = rec.rating;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            if (i == j) continue;
            double dot = 0, ni = 0, nj = 0;
            for (int u = 0; u < 5; ++u) {
                dot += r[u][i] * r[u][j];
                ni += r[u][i] * r[u][i];
                nj += r[u][j] * r[u][j];
            }
            double want = dot > 0 ? dot / std::sqrt(ni * nj) : 0.0;
            CHECK(std::abs(m.sim[i * 4 + j] - want) < 1e-10);
            CHECK(m.sim[i * 4 + j] == m.sim[j * 4 + i]);
        }
    }
    CHECK(m.sim[0 * 4 + 1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m.sim[2 * 4 + 3] == 0.0);

    // score(u,i) = sum over history of sim * rating, skipping the item itself.
    double want = m.sim[3 * 4 + 0] * 4 + m.sim[3 * 4 + 1] * 4 + m.sim[3 * 4 + 2] * 2;
    CHECK(m.score(0, 3) == doctest::Approx(want).epsilon(1e-12));
    double want_seen = m.sim[0 * 4 + 1] * 4 + m.sim[0 * 4 + 2] * 2;
    CHECK(m.score(0, 0) == doctest::Approx(want_seen).epsilon(1e-12));

    CHECK_THROWS_AS(train_itembase(make_ds(3, 3, {})), std::invalid_argument);
}

TEST_CASE("lfm recovers a planted rank-1 matrix") {
    data::RatingDataset ds = rank1_dataset(20, 15, {});
    RecommenderModel m = train_lfm(ds, 4, 0.01, 0.001, 200, 42);
    CHECK(m.rmse_trace.size() == 201);
    CHECK(m.rmse_trace.back() < 0.05);
    // Non-increasing training RMSE within 1e-9 slack per epoch.
    for (std::size_t e = 1; e < m.rmse_trace.size(); ++e)
        CHECK(m.rmse_trace[e] <= m.rmse_trace[e - 1] + 1e-9);
}

TEST_CASE("lfm determinism, zero-epoch init, and divergence guard") {
    data::RatingDataset ds = rank1_dataset(10, 8, {});
    RecommenderModel a = train_lfm(ds, 3, 0.01, 0.01, 5, 7);
    RecommenderModel b = train_lfm(ds, 3, 0.01, 0.01, 5, 7);
    CHECK(a.user_f == b.user_f);
    CHECK(a.item_f == b.item_f);
    CHECK(a.rmse_trace == b.rmse_trace);

    RecommenderModel init1 = train_lfm(ds, 3, 0.01, 0.01, 0, 7);
    RecommenderModel init2 = train_lfm(ds, 3, 0.01, 0.01, 0, 7);
    CHECK(init1.user_f == init2.user_f);
    CHECK(init1.rmse_trace.size() == 1);
    CHECK(init1.user_f != a.user_f);  // training moved the factors

    CHECK_THROWS_AS(train_lfm(ds, 3, 5.0, 0.0, 50, 7), std::runtime_error);
    CHECK_THROWS_AS(train_lfm(ds, 0, 0.01, 0.01, 5, 7), std::invalid_argument);
}

TEST_CASE("recommend_top_k ranks held-out items by planted score") {
    std::set<std::pair<int, int>> holdout = {{0, 3}, {0, 7}, {0, 11}};
    data::RatingDataset ds = rank1_dataset(20, 15, holdout);
    RecommenderModel m = train_lfm(ds, 4, 0.01, 0.001, 200, 42);

    RecommendationSet top1 = recommend_top_k(m, 0, 1);
    CHECK(top1.items == std::vector<int>{11});  // largest planted b among held out
    RecommendationSet top3 = recommend_top_k(m, 0, 3);
    CHECK(top3.items == std::vector<int>{11, 7, 3});
    CHECK(top3.source == RecSource::kModel);

    // Exhaustive scoring oracle agreement.
    std::vector<std::pair<double, int>> scored;
    for (int i : {3, 7, 11}) scored.emplace_back(m.score(0, i), i);
    std::sort(scored.begin(), scored.end(),
              [](auto& x, auto& y) { return x.first > y.first; });
    CHECK(top1.items[0] == scored[0].second);

    // k = catalog - history: all unseen items, ordered by score.
    RecommendationSet all = recommend_top_k(m, 0, 3);
    CHECK(all.items.size() == 3);
    CHECK_THROWS_AS(recommend_top_k(m, 0, 4), std::runtime_error);
    CHECK_THROWS_AS(recommend_top_k(m, 99, 1), std::invalid_argument);
}

TEST_CASE("recommend_top_k breaks exact ties by ascending item id") {
    RecommenderModel m;
    m.kind = RecKind::kLfm;
    m.n_users = 1;
    m.n_items = 5;
    m.dim = 2;
    m.user_f = {0.0, 0.0};  // every item scores exactly 0
    m.item_f = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    m.history = {{{2, 4.0}}};
    RecommendationSet out = recommend_top_k(m, 0, 4);
    CHECK(out.items == std::vector<int>{0, 1, 3, 4});
}

TEST_CASE("recommend_popular follows counts with id tie-breaks") {
    // counts: item0=3, item1=3, item2=1, item3=2, item4=0
    std::vector<data::Interaction> recs = {
        {0, 0, 3, 1}, {1, 0, 3, 2}, {2, 0, 3, 3},
        {0, 1, 3, 4}, {1, 1, 3, 5}, {3, 1, 3, 6},
        {4, 2, 3, 7},
        {0, 3, 3, 8}, {1, 3, 3, 9},
    };
    data::RatingDataset ds = make_ds(5, 5, recs);
    RecommendationSet top = recommend_popular(ds, {}, 3);
    CHECK(top.items == std::vector<int>{0, 1, 3});
    CHECK(top.source == RecSource::kPopularity);

    // History exclusion removes item 0; next is 1, 3, 2.
    RecommendationSet ex = recommend_popular(ds, {0}, 3);
    CHECK(ex.items == std::vector<int>{1, 3, 2});

    // All-equal counts: first k ids.
    std::vector<data::Interaction> eq = {
        {0, 0, 3, 1}, {0, 1, 3, 2}, {0, 2, 3, 3}, {0, 3, 3, 4}};
    RecommendationSet flat = recommend_popular(make_ds(1, 4, eq), {}, 2);
    CHECK(flat.items == std::vector<int>{0, 1});

    CHECK_THROWS_AS(recommend_popular(ds, {0, 1, 2}, 3), std::runtime_error);
}

TEST_CASE("popularity randomization samples the pool uniformly") {
    // 40 items with strictly decreasing popularity.
    std::vector<data::Interaction> recs;
    int t = 0;
    for (int i = 0; i < 40; ++i)
        for (int c = 0; c < 41 - i; ++c) recs.push_back({c, i, 3.0, t++});
    data::RatingDataset ds = make_ds(41, 40, recs);

    Rng rng(2024);
    const int k = 5, mult = 4;  // pool = 20 most popular items = ids 0..19
    RecommendationSet one = recommend_popular_randomized(ds, {}, k, mult, rng);
    CHECK(one.items.size() == 5);
    CHECK(one.source == RecSource::kPopularityRandomized);
    std::set<int> uniq(one.items.begin(), one.items.end());
    CHECK(uniq.size() == 5);
    for (int i : one.items) CHECK(i < 20);

    // pool_multiplier = 1 degenerates to the deterministic top-k as a set.
    RecommendationSet det = recommend_popular_randomized(ds, {}, 5, 1, rng);
    std::vector<int> sorted_det = det.items;
    std::sort(sorted_det.begin(), sorted_det.end());
    CHECK(sorted_det == recommend_popular(ds, {}, 5).items);

    // Frequency uniformity across the pool: 1e4 draws, 3-sigma binomial bound.
    std::vector<int> count(40, 0);
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) {
        RecommendationSet s = recommend_popular_randomized(ds, {}, k, mult, rng);
        for (int i : s.items) ++count[i];
    }
    const double p = static_cast<double>(k) / 20.0;
    const double mean = draws * p;
    const double sigma = std::sqrt(draws * p * (1 - p));
    for (int i = 0; i < 20; ++i) {
        CHECK(count[i] > mean - 3 * sigma);
        CHECK(count[i] < mean + 3 * sigma);
    }
    for (int i = 20; i < 40; ++i) CHECK(count[i] == 0);

    CHECK_THROWS_AS(recommend_popular_randomized(ds, {}, 41, 2, rng),
                    std::runtime_error);
}

TEST_CASE("recommender checkpoints round-trip exactly") {
    data::RatingDataset ds = rank1_dataset(12, 10, {{0, 4}});
    RecommenderModel lfm = train_lfm(ds, 3, 0.01, 0.01, 20, 9);
    save_recommender(lfm, "/tmp/mia_rec_lfm.ckpt");
    RecommenderModel lfm2 = load_recommender("/tmp/mia_rec_lfm.ckpt");
    CHECK(lfm2.kind == RecKind::kLfm);
    CHECK(lfm2.user_f == lfm.user_f);
    CHECK(lfm2.item_f == lfm.item_f);
    CHECK(lfm2.rmse_trace == lfm.rmse_trace);
    CHECK(lfm2.history == lfm.history);
    CHECK(recommend_top_k(lfm2, 0, 1).items == recommend_top_k(lfm, 0, 1).items);

    RecommenderModel ib = train_itembase(ds);
    save_recommender(ib, "/tmp/mia_rec_ib.ckpt");
    RecommenderModel ib2 = load_recommender("/tmp/mia_rec_ib.ckpt");
    CHECK(ib2.kind == RecKind::kItemBase);
    CHECK(ib2.sim == ib.sim);
    CHECK(ib2.score(0, 4) == ib.score(0, 4));

    CHECK_THROWS_AS(load_recommender("/tmp/definitely_missing.ckpt"),
                    std::runtime_error);
}

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mia/data.hpp"
#include "mia/rng.hpp"

namespace mia::rec {

enum class RecKind { kItemBase, kLfm };

// A fitted recommender. For kItemBase, `sim` holds the dense item-item cosine
// similarity matrix (row-major n_items x n_items). For kLfm, `user_f` and
// `item_f` hold row-major factor matrices of width `dim`. Both kinds keep the
// per-user training history (item, rating), sorted by item id.
struct RecommenderModel {
    RecKind kind = RecKind::kItemBase;
    int n_users = 0;
    int n_items = 0;
    int dim = 0;  // 0 for item-based models
    std::vector<double> sim;
    std::vector<double> user_f;
    std::vector<double> item_f;
    std::vector<double> rmse_trace;  // [0]=before training, then one per epoch
    std::vector<std::vector<std::pair<int, double>>> history;

    // Predicted preference of `user` for `item`. Item-based scoring skips the
    // self-similarity term when the item is already in the user's history.
    double score(int user, int item) const;
};

RecommenderModel train_itembase(const data::RatingDataset& train);

RecommenderModel train_lfm(const data::RatingDataset& train, int embed,
                           double lr, double reg, int epochs,
                           std::uint64_t seed);

enum class RecSource { kModel, kPopularity, kPopularityRandomized };

struct RecommendationSet {
    int user = 0;
    std::vector<int> items;
    RecSource source = RecSource::kModel;
};

// k highest-scoring items outside the user's history; ties broken by
// ascending item id. Throws if the user is unknown or fewer than k items
// remain outside the history.
RecommendationSet recommend_top_k(const RecommenderModel& model, int user,
                                  int k);

// k most-interacted items of `ds` outside `user_history`; count ties broken
// by ascending item id.
RecommendationSet recommend_popular(const data::RatingDataset& ds,
                                    const std::vector<int>& user_history,
                                    int k);

// Uniform sample of k distinct items from the top (pool_multiplier * k)
// popular items outside `user_history`.
RecommendationSet recommend_popular_randomized(
    const data::RatingDataset& ds, const std::vector<int>& user_history, int k,
    int pool_multiplier, Rng& rng);

void save_recommender(const RecommenderModel& model, const std::string& path);
RecommenderModel load_recommender(const std::string& path);

// CSV dump `user_id,rank,item_id,source` using the original (source) ids.
void dump_recommendations(const std::vector<RecommendationSet>& sets,
                          const std::vector<std::int64_t>& user_ids,
                          const std::vector<std::int64_t>& item_ids,
                          const std::string& path);

}  // namespace mia::rec

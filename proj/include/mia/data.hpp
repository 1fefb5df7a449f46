#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mia/rng.hpp"

namespace mia::data {

struct Interaction {
    int user = 0;
    int item = 0;
    double rating = 0.0;
    std::int64_t timestamp = 0;
};

// Canonical interaction set. `n_users`/`n_items` bound the id space; loaders
// and filters keep ids dense (every id in [0, n) appears), while subset views
// produced by splitting share their parent's id space and need not touch
// every id. `user_ids`/`item_ids` map dense ids back to the source file's.
struct RatingDataset {
    std::vector<Interaction> records;
    int n_users = 0;
    int n_items = 0;
    std::vector<std::int64_t> user_ids;
    std::vector<std::int64_t> item_ids;
};

// MovieLens-style `user::item::rating::timestamp` file. Malformed lines and
// duplicate (user, item) pairs raise std::runtime_error naming the line.
RatingDataset load_movielens(const std::string& path);

// Same canonical result from `user,item,rating,timestamp` CSV (header row
// optional, detected by a non-numeric first field).
RatingDataset load_csv(const std::string& path);

// Canonical dump used by the CLI: sorted `user_id,item_id,rating,timestamp`
// rows with the original ids. load_csv(dump) round-trips the dataset.
void dump_csv(const RatingDataset& ds, const std::string& path);

// Drops users with < min_user and items with < min_item interactions,
// iterating to a fixed point, then re-indexes densely. Idempotent.
RatingDataset filter_min_interactions(const RatingDataset& ds, int min_user, int min_item);

// Three-way user split for the attack protocol. Users are partitioned into
// shadow / target / extraction groups; shadow and target users are further
// halved into members and non-members. Interactions whose item never occurs
// in the extraction subset are dropped and the item space is re-indexed, so
// one item catalog (the extraction one) covers every subset.
struct SplitBundle {
    RatingDataset shadow;      // all interactions of shadow users
    RatingDataset target;
    RatingDataset extraction;
    std::vector<int> shadow_members;      // user ids (shared id space)
    std::vector<int> shadow_nonmembers;
    std::vector<int> target_members;
    std::vector<int> target_nonmembers;
    int n_users = 0;           // id space shared by the three subsets
    int n_items = 0;           // extraction catalog size after re-indexing
    std::vector<std::int64_t> user_ids;
    std::vector<std::int64_t> item_ids;
};

struct SplitFractions {
    double shadow = 0.4;
    double target = 0.4;
    double extraction = 0.2;
};

SplitBundle make_splits(const RatingDataset& ds, const SplitFractions& fractions,
                        std::uint64_t seed);

// Cross-population variant: shadow and extraction users come from `shadow_src`,
// target users from `target_src`. Both sources must share an item space width
// (synthetic generators over the same catalog). Used for attacks transferred
// across differently distributed populations.
SplitBundle make_splits_cross(const RatingDataset& shadow_src,
                              const RatingDataset& target_src,
                              const SplitFractions& fractions, std::uint64_t seed);

// Re-checks every SplitBundle guarantee from the raw id sets (user-group
// disjointness and coverage, member/non-member partition, item containment).
// Throws std::logic_error naming the first violated guarantee.
void verify_bundle(const SplitBundle& bundle);

// Synthetic ratings with planted low-rank structure: user and item factors
// are drawn once, each user rates a `density` fraction of the catalog, and
// ratings are a clipped affine image of the factor dot product plus noise.
// The first latent dimension is a positive "quality" axis, so item mean
// ratings track it; remaining dimensions are signed taste axes.
RatingDataset generate_synthetic(int n_users, int n_items, int n_latent,
                                 double density, std::uint64_t seed);

// Same generator, also returning the planted factors (ground truth for
// recovery checks).
struct SyntheticTrace {
    RatingDataset dataset;
    std::vector<std::vector<double>> user_factors;
    std::vector<std::vector<double>> item_factors;
};

SyntheticTrace generate_synthetic_traced(int n_users, int n_items, int n_latent,
                                         double density, std::uint64_t seed);

// Convenience lookups used across the pipeline.
std::vector<std::vector<int>> items_by_user(const RatingDataset& ds);
std::vector<int> item_counts(const RatingDataset& ds);

// Same id space and maps, records filtered to `users` (sorted dense ids).
RatingDataset restrict_to_users(const RatingDataset& ds,
                                const std::vector<int>& users);

}  // namespace mia::data

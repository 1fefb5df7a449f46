#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mia/data.hpp"
#include "mia/recommenders.hpp"
#include "mia/rng.hpp"

namespace mia::diffvec {

// Item representations extracted by matrix factorization of the extraction
// subset's rating matrix (row-major n_items x dim).
struct ItemEmbeddings {
    int n_items = 0;
    int dim = 0;
    std::vector<double> matrix;
};

// Fits the same regularized-MF model as rec::train_lfm on `extraction` and
// keeps only the item factors. Throws if any catalog item has no
// interactions (the embedding row would be untrained noise).
ItemEmbeddings fit_item_embeddings(const data::RatingDataset& extraction,
                                   int dim, double lr, double reg, int epochs,
                                   std::uint64_t seed);

// mean(emb[history]) - mean(emb[recs]). Both item lists must be nonempty and
// within the catalog.
std::vector<double> difference_vector(const ItemEmbeddings& emb,
                                      const std::vector<int>& history,
                                      const std::vector<int>& recs);

enum class Origin { kShadow, kTarget };

// One attack-model input: the interaction/recommendation difference vector of
// a single user, plus the bookkeeping the debiased attack trains on. Shadow
// samples carry their membership label; target samples do not (their labels
// live in AttackData::target_labels and are used for evaluation only).
struct AttackSample {
    int user = 0;
    std::vector<double> diff;
    Origin origin = Origin::kShadow;
    std::optional<int> label;
    double truth_score = 1.0;
    double weight = 1.0;
};

struct AttackData {
    std::vector<AttackSample> shadow;
    std::vector<AttackSample> target;
    std::vector<int> target_labels;  // parallel to `target`, evaluation only
};

// Builds the attack datasets from a split bundle and fitted recommenders.
// Members receive their model's top-k recommendations; non-members receive
// the k most popular items of the member training data on their side
// (uniformly sampled from the top pool_multiplier*k when `defense` is on).
// Histories are each user's full interaction set in their subset. Iteration
// order (and therefore rng consumption) is: shadow members, shadow
// non-members, target members, target non-members, each ascending by user.
AttackData build_attack_dataset(const data::SplitBundle& bundle,
                                const ItemEmbeddings& emb,
                                const rec::RecommenderModel& shadow_model,
                                const rec::RecommenderModel& target_model,
                                int k, bool defense, Rng& rng,
                                int pool_multiplier = 5);

// Standardizes every difference-vector dimension to zero mean and unit
// variance in place. The statistics are computed once over the pooled shadow
// and target samples (no labels involved) and applied to both sides, so every
// downstream consumer sees identically conditioned inputs. Dimensions with
// (near-)zero variance are centered but not rescaled. Throws if the pool is
// empty or dimensions disagree.
void standardize_attack_data(AttackData& data);

// CSV dump `item_id,dim0..dimD` with original item ids.
void dump_embeddings(const ItemEmbeddings& emb,
                     const std::vector<std::int64_t>& item_ids,
                     const std::string& path);

// CSV dump `user_id,origin,label,diff0..diffD` with original user ids.
// `labels` must parallel `samples` (pass AttackData::target_labels for the
// target side; shadow labels are on the samples themselves).
void dump_attack_samples(const std::vector<AttackSample>& samples,
                         const std::vector<int>& labels,
                         const std::vector<std::int64_t>& user_ids,
                         const std::string& path);

}  // namespace mia::diffvec

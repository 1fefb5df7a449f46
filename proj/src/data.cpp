#include "mia/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace mia::data {

namespace {

struct RawRecord {
    std::int64_t user, item, timestamp;
    double rating;
};

[[noreturn]] void parse_fail(const std::string& path, std::size_t line_no,
                             const std::string& why) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + why);
}

bool parse_i64(const std::string& s, std::int64_t& out) {
    if (s.empty()) return false;
    std::size_t pos = 0;
    try {
        out = std::stoll(s, &pos);
    } catch (...) {
        return false;
    }
    return pos == s.size();
}

bool parse_f64(const std::string& s, double& out) {
    if (s.empty()) return false;
    std::size_t pos = 0;
    try {
        out = std::stod(s, &pos);
    } catch (...) {
        return false;
    }
    return pos == s.size();
}

std::vector<std::string> split_on(const std::string& line, const std::string& sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t p = line.find(sep, start);
        if (p == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, p - start));
        start = p + sep.size();
    }
    return out;
}

// Shared canonicalization: validate, densify ids (sorted by source id so the
// result is independent of record order), reject duplicates.
RatingDataset canonicalize(std::vector<RawRecord> raw,
                           const std::vector<std::size_t>& line_nos,
                           const std::string& path) {
    std::vector<std::int64_t> users, items;
    users.reserve(raw.size());
    items.reserve(raw.size());
    for (const auto& r : raw) {
        users.push_back(r.user);
        items.push_back(r.item);
    }
    auto dedupe_sort = [](std::vector<std::int64_t>& v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    dedupe_sort(users);
    dedupe_sort(items);
    std::unordered_map<std::int64_t, int> umap, imap;
    for (std::size_t i = 0; i < users.size(); ++i) umap[users[i]] = static_cast<int>(i);
    for (std::size_t i = 0; i < items.size(); ++i) imap[items[i]] = static_cast<int>(i);

    RatingDataset ds;
    ds.n_users = static_cast<int>(users.size());
    ds.n_items = static_cast<int>(items.size());
    ds.user_ids = std::move(users);
    ds.item_ids = std::move(items);
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(raw.size() * 2);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        int u = umap[raw[i].user];
        int it = imap[raw[i].item];
        std::uint64_t key = (static_cast<std::uint64_t>(u) << 32) |
                            static_cast<std::uint32_t>(it);
        if (!seen.insert(key).second)
            parse_fail(path, line_nos[i], "duplicate (user, item) pair");
        ds.records.push_back({u, it, raw[i].rating, raw[i].timestamp});
    }
    return ds;
}

RatingDataset load_delimited(const std::string& path, const std::string& sep,
                             bool maybe_header) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<RawRecord> raw;
    std::vector<std::size_t> line_nos;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> parts = split_on(line, sep);
        if (parts.size() != 4)
            parse_fail(path, line_no, "expected 4 fields, got " + std::to_string(parts.size()));
        RawRecord r;
        if (!parse_i64(parts[0], r.user)) {
            if (maybe_header && line_no == 1) continue;  // skip header row
            parse_fail(path, line_no, "bad user id '" + parts[0] + "'");
        }
        if (!parse_i64(parts[1], r.item))
            parse_fail(path, line_no, "bad item id '" + parts[1] + "'");
        if (!parse_f64(parts[2], r.rating))
            parse_fail(path, line_no, "bad rating '" + parts[2] + "'");
        if (!(r.rating >= 1.0 && r.rating <= 5.0))
            parse_fail(path, line_no, "rating outside [1, 5]");
        if (!parse_i64(parts[3], r.timestamp))
            parse_fail(path, line_no, "bad timestamp '" + parts[3] + "'");
        raw.push_back(r);
        line_nos.push_back(line_no);
    }
    if (raw.empty()) throw std::runtime_error(path + ": no interaction records");
    return canonicalize(std::move(raw), line_nos, path);
}

}  // namespace

RatingDataset load_movielens(const std::string& path) {
    return load_delimited(path, "::", false);
}

RatingDataset load_csv(const std::string& path) {
    return load_delimited(path, ",", true);
}

void dump_csv(const RatingDataset& ds, const std::string& path) {
    std::vector<Interaction> sorted = ds.records;
    std::sort(sorted.begin(), sorted.end(), [](const Interaction& a, const Interaction& b) {
        return a.user != b.user ? a.user < b.user : a.item < b.item;
    });
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << "user_id,item_id,rating,timestamp\n";
    char buf[64];
    for (const auto& r : sorted) {
        std::snprintf(buf, sizeof buf, "%.17g", r.rating);
        f << ds.user_ids[r.user] << ',' << ds.item_ids[r.item] << ',' << buf << ','
          << r.timestamp << '\n';
    }
    if (!f) throw std::runtime_error("write failed for " + path);
}

RatingDataset filter_min_interactions(const RatingDataset& ds, int min_user, int min_item) {
    std::vector<char> user_ok(ds.n_users, 1), item_ok(ds.n_items, 1);
    for (;;) {
        std::vector<int> ucount(ds.n_users, 0), icount(ds.n_items, 0);
        for (const auto& r : ds.records) {
            if (user_ok[r.user] && item_ok[r.item]) {
                ++ucount[r.user];
                ++icount[r.item];
            }
        }
        bool changed = false;
        for (int u = 0; u < ds.n_users; ++u)
            if (user_ok[u] && ucount[u] < min_user) {
                user_ok[u] = 0;
                changed = true;
            }
        for (int i = 0; i < ds.n_items; ++i)
            if (item_ok[i] && icount[i] < min_item) {
                item_ok[i] = 0;
                changed = true;
            }
        if (!changed) break;
    }

    std::vector<int> umap(ds.n_users, -1), imap(ds.n_items, -1);
    RatingDataset out;
    for (int u = 0; u < ds.n_users; ++u)
        if (user_ok[u]) {
            umap[u] = out.n_users++;
            out.user_ids.push_back(ds.user_ids[u]);
        }
    for (int i = 0; i < ds.n_items; ++i)
        if (item_ok[i]) {
            imap[i] = out.n_items++;
            out.item_ids.push_back(ds.item_ids[i]);
        }
    for (const auto& r : ds.records)
        if (user_ok[r.user] && item_ok[r.item])
            out.records.push_back({umap[r.user], imap[r.item], r.rating, r.timestamp});
    if (out.records.empty())
        throw std::runtime_error("filter_min_interactions: nothing survived the thresholds");
    return out;
}

namespace {

void check_fractions(const SplitFractions& f) {
    if (!(f.shadow > 0.0 && f.target > 0.0 && f.extraction > 0.0))
        throw std::invalid_argument("split fractions must be positive");
    if (std::abs(f.shadow + f.target + f.extraction - 1.0) > 1e-9)
        throw std::invalid_argument("split fractions must sum to 1");
}

// Shuffles `users`, carves off the first `take` of them, halves that slice
// into members/non-members.
struct GroupSplit {
    std::vector<int> members, nonmembers, all;
};

GroupSplit take_group(std::vector<int>& pool, std::size_t take, Rng& rng) {
    GroupSplit g;
    if (take < 2 || take > pool.size())
        throw std::runtime_error("make_splits: degenerate user group (size " +
                                 std::to_string(take) + ")");
    g.all.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    pool.erase(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    std::vector<int> shuffled = g.all;
    rng.shuffle(shuffled);
    std::size_t half = (shuffled.size() + 1) / 2;
    g.members.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(half));
    g.nonmembers.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(half), shuffled.end());
    std::sort(g.members.begin(), g.members.end());
    std::sort(g.nonmembers.begin(), g.nonmembers.end());
    return g;
}

RatingDataset subset_of(const RatingDataset& ds, const std::vector<int>& users,
                        int n_users_space) {
    std::vector<char> in(ds.n_users, 0);
    for (int u : users) in[u] = 1;
    RatingDataset out;
    out.n_users = n_users_space;
    out.n_items = ds.n_items;
    out.user_ids = ds.user_ids;
    out.item_ids = ds.item_ids;
    for (const auto& r : ds.records)
        if (in[r.user]) out.records.push_back(r);
    return out;
}

// Restricts shadow/target to the extraction item catalog and re-indexes items
// across the whole bundle so the catalog is dense.
void enforce_item_containment(SplitBundle& b) {
    std::vector<char> in_ex(b.extraction.n_items, 0);
    for (const auto& r : b.extraction.records) in_ex[r.item] = 1;
    std::vector<int> imap(b.extraction.n_items, -1);
    int next = 0;
    std::vector<std::int64_t> kept_ids;
    for (int i = 0; i < b.extraction.n_items; ++i)
        if (in_ex[i]) {
            imap[i] = next++;
            kept_ids.push_back(b.extraction.item_ids[i]);
        }
    auto remap = [&](RatingDataset& ds) {
        std::vector<Interaction> kept;
        for (auto r : ds.records) {
            if (imap[r.item] < 0) continue;  // item absent from extraction
            r.item = imap[r.item];
            kept.push_back(r);
        }
        ds.records = std::move(kept);
        ds.n_items = next;
        ds.item_ids = kept_ids;
    };
    remap(b.extraction);
    remap(b.shadow);
    remap(b.target);
    b.n_items = next;
    b.item_ids = kept_ids;
    if (b.shadow.records.empty() || b.target.records.empty())
        throw std::runtime_error("make_splits: item containment emptied a subset");
}

}  // namespace

SplitBundle make_splits(const RatingDataset& ds, const SplitFractions& fractions,
                        std::uint64_t seed) {
    check_fractions(fractions);
    Rng rng(seed);
    std::vector<int> pool(ds.n_users);
    for (int u = 0; u < ds.n_users; ++u) pool[u] = u;
    rng.shuffle(pool);

    std::size_t n = pool.size();
    std::size_t n_shadow = static_cast<std::size_t>(std::floor(fractions.shadow * n + 1e-9));
    std::size_t n_target = static_cast<std::size_t>(std::floor(fractions.target * n + 1e-9));
    std::size_t n_extract = n - n_shadow - n_target;
    if (n_extract == 0)
        throw std::runtime_error("make_splits: degenerate extraction group");

    GroupSplit shadow = take_group(pool, n_shadow, rng);
    GroupSplit target = take_group(pool, n_target, rng);
    std::vector<int> extraction_users = pool;

    SplitBundle b;
    b.n_users = ds.n_users;
    b.user_ids = ds.user_ids;
    b.shadow = subset_of(ds, shadow.all, ds.n_users);
    b.target = subset_of(ds, target.all, ds.n_users);
    b.extraction = subset_of(ds, extraction_users, ds.n_users);
    if (b.extraction.records.empty())
        throw std::runtime_error("make_splits: extraction subset has no interactions");
    b.shadow_members = shadow.members;
    b.shadow_nonmembers = shadow.nonmembers;
    b.target_members = target.members;
    b.target_nonmembers = target.nonmembers;
    enforce_item_containment(b);
    return b;
}

SplitBundle make_splits_cross(const RatingDataset& shadow_src,
                              const RatingDataset& target_src,
                              const SplitFractions& fractions, std::uint64_t seed) {
    check_fractions(fractions);
    if (shadow_src.item_ids != target_src.item_ids)
        throw std::invalid_argument("make_splits_cross: sources must share an item catalog");
    Rng rng(seed);

    // Combined user space: target users are shifted past the shadow source's.
    int offset = shadow_src.n_users;
    std::vector<int> pool_a(shadow_src.n_users);
    for (int u = 0; u < shadow_src.n_users; ++u) pool_a[u] = u;
    rng.shuffle(pool_a);
    std::size_t n_shadow =
        static_cast<std::size_t>(std::floor(fractions.shadow * pool_a.size() + 1e-9));
    GroupSplit shadow = take_group(pool_a, n_shadow, rng);
    std::size_t n_extract =
        static_cast<std::size_t>(std::floor(fractions.extraction * shadow_src.n_users + 1e-9));
    if (n_extract == 0 || n_extract > pool_a.size())
        throw std::runtime_error("make_splits_cross: degenerate extraction group");
    std::vector<int> extraction_users(pool_a.begin(),
                                      pool_a.begin() + static_cast<std::ptrdiff_t>(n_extract));

    std::vector<int> pool_b(target_src.n_users);
    for (int u = 0; u < target_src.n_users; ++u) pool_b[u] = u;
    rng.shuffle(pool_b);
    std::size_t n_target =
        static_cast<std::size_t>(std::floor(fractions.target * pool_b.size() + 1e-9));
    GroupSplit target = take_group(pool_b, n_target, rng);

    SplitBundle b;
    b.n_users = shadow_src.n_users + target_src.n_users;
    b.user_ids = shadow_src.user_ids;
    for (std::int64_t id : target_src.user_ids)
        b.user_ids.push_back(1000000000LL + id);  // keep source ids distinguishable
    b.shadow = subset_of(shadow_src, shadow.all, b.n_users);
    b.extraction = subset_of(shadow_src, extraction_users, b.n_users);
    b.shadow.user_ids = b.user_ids;
    b.extraction.user_ids = b.user_ids;

    RatingDataset tgt = subset_of(target_src, target.all, b.n_users);
    for (auto& r : tgt.records) r.user += offset;
    tgt.user_ids = b.user_ids;
    b.target = std::move(tgt);

    b.shadow_members = shadow.members;
    b.shadow_nonmembers = shadow.nonmembers;
    for (int u : target.members) b.target_members.push_back(u + offset);
    for (int u : target.nonmembers) b.target_nonmembers.push_back(u + offset);
    if (b.extraction.records.empty())
        throw std::runtime_error("make_splits_cross: extraction subset has no interactions");
    enforce_item_containment(b);
    return b;
}

void verify_bundle(const SplitBundle& b) {
    auto fail = [](const std::string& what) { throw std::logic_error("verify_bundle: " + what); };

    auto users_of = [](const RatingDataset& ds) {
        std::set<int> s;
        for (const auto& r : ds.records) s.insert(r.user);
        return s;
    };
    std::set<int> shadow_group(b.shadow_members.begin(), b.shadow_members.end());
    for (int u : b.shadow_nonmembers)
        if (!shadow_group.insert(u).second) fail("shadow member/non-member overlap");
    std::set<int> target_group(b.target_members.begin(), b.target_members.end());
    for (int u : b.target_nonmembers)
        if (!target_group.insert(u).second) fail("target member/non-member overlap");
    for (int u : shadow_group)
        if (target_group.count(u)) fail("shadow and target groups overlap");

    std::set<int> shadow_users = users_of(b.shadow);
    std::set<int> target_users = users_of(b.target);
    std::set<int> extraction_users = users_of(b.extraction);
    for (int u : shadow_users)
        if (!shadow_group.count(u)) fail("shadow interaction from a non-shadow user");
    for (int u : target_users)
        if (!target_group.count(u)) fail("target interaction from a non-target user");
    for (int u : extraction_users)
        if (shadow_group.count(u) || target_group.count(u))
            fail("extraction user also in shadow/target");

    std::vector<char> in_ex(b.n_items, 0);
    for (const auto& r : b.extraction.records) {
        if (r.item < 0 || r.item >= b.n_items) fail("extraction item out of range");
        in_ex[r.item] = 1;
    }
    for (int i = 0; i < b.n_items; ++i)
        if (!in_ex[i]) fail("catalog item missing from extraction");
    for (const RatingDataset* ds : {&b.shadow, &b.target}) {
        for (const auto& r : ds->records) {
            if (r.item < 0 || r.item >= b.n_items) fail("item outside the shared catalog");
            if (!in_ex[r.item]) fail("shadow/target item absent from extraction");
        }
    }
    for (const RatingDataset* ds : {&b.shadow, &b.target, &b.extraction}) {
        std::unordered_set<std::uint64_t> seen;
        for (const auto& r : ds->records) {
            std::uint64_t key = (static_cast<std::uint64_t>(r.user) << 32) |
                                static_cast<std::uint32_t>(r.item);
            if (!seen.insert(key).second) fail("duplicate (user, item) inside a subset");
        }
    }
}

SyntheticTrace generate_synthetic_traced(int n_users, int n_items, int n_latent,
                                         double density, std::uint64_t seed) {
    if (n_users <= 0 || n_items <= 0 || n_latent <= 0)
        throw std::invalid_argument("generate_synthetic: sizes must be positive");
    if (!(density > 0.0 && density <= 1.0))
        throw std::invalid_argument("generate_synthetic: density must be in (0, 1]");
    Rng rng(seed);

    auto draw_factors = [&](int n) {
        std::vector<std::vector<double>> f(n, std::vector<double>(n_latent));
        for (auto& row : f) {
            row[0] = 0.5 + 0.5 * std::abs(rng.normal());  // quality axis
            for (int d = 1; d < n_latent; ++d) row[d] = rng.normal();
        }
        return f;
    };
    SyntheticTrace trace;
    trace.user_factors = draw_factors(n_users);
    trace.item_factors = draw_factors(n_items);

    int per_user = std::max(1, static_cast<int>(std::lround(density * n_items)));
    per_user = std::min(per_user, n_items);

    RatingDataset ds;
    ds.n_users = n_users;
    ds.n_items = n_items;
    for (int u = 0; u < n_users; ++u) ds.user_ids.push_back(u);
    for (int i = 0; i < n_items; ++i) ds.item_ids.push_back(i);

    double scale = 1.0 / std::sqrt(static_cast<double>(n_latent));
    // Users interact mostly with items they like: per-user sampling without
    // replacement, weighted by exp(kPreference * normalized score), drawn as
    // Gumbel top-k. This makes item popularity heavy-tailed, correlated with
    // the planted quality axis, and therefore consistent across user splits,
    // as in real interaction logs.
    const double kPreference = 2.0;
    std::vector<std::pair<double, int>> keys(n_items);
    std::vector<int> idx(per_user);
    std::int64_t ts = 0;
    for (int u = 0; u < n_users; ++u) {
        for (int i = 0; i < n_items; ++i) {
            double s = 0.0;
            for (int d = 0; d < n_latent; ++d)
                s += trace.user_factors[u][d] * trace.item_factors[i][d];
            double gumbel = -std::log(-std::log(rng.uniform_pos()));
            keys[i] = {kPreference * scale * s + gumbel, i};
        }
        std::partial_sort(keys.begin(), keys.begin() + per_user, keys.end(),
                          [](const auto& a, const auto& b) { return a.first > b.first; });
        for (int j = 0; j < per_user; ++j) idx[j] = keys[j].second;
        std::sort(idx.begin(), idx.end());
        for (int j = 0; j < per_user; ++j) {
            int it = idx[j];
            double s = 0.0;
            for (int d = 0; d < n_latent; ++d)
                s += trace.user_factors[u][d] * trace.item_factors[it][d];
            double rating = 3.0 + 1.2 * scale * s + 0.2 * rng.normal();
            rating = std::clamp(rating, 1.0, 5.0);
            ds.records.push_back({u, it, rating, ts++});
        }
    }
    trace.dataset = std::move(ds);
    return trace;
}

RatingDataset generate_synthetic(int n_users, int n_items, int n_latent,
                                 double density, std::uint64_t seed) {
    return generate_synthetic_traced(n_users, n_items, n_latent, density, seed).dataset;
}

std::vector<std::vector<int>> items_by_user(const RatingDataset& ds) {
    std::vector<std::vector<int>> out(ds.n_users);
    for (const auto& r : ds.records) out[r.user].push_back(r.item);
    return out;
}

std::vector<int> item_counts(const RatingDataset& ds) {
    std::vector<int> out(ds.n_items, 0);
    for (const auto& r : ds.records) ++out[r.item];
    return out;
}

RatingDataset restrict_to_users(const RatingDataset& ds,
                                const std::vector<int>& users) {
    RatingDataset out;
    out.n_users = ds.n_users;
    out.n_items = ds.n_items;
    out.user_ids = ds.user_ids;
    out.item_ids = ds.item_ids;
    for (const auto& r : ds.records)
        if (std::binary_search(users.begin(), users.end(), r.user))
            out.records.push_back(r);
    return out;
}

}  // namespace mia::data

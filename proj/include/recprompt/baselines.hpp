#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "recprompt/corpus.hpp"
#include "recprompt/errors.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

/// Click counts per news id and per category, used by the popularity rankers.
struct PopularityTable {
    std::map<std::string, long> news_clicks;
    std::map<std::string, long> category_clicks;
    std::string source;

    long news_count(const std::string& id) const {
        auto it = news_clicks.find(id);
        return it == news_clicks.end() ? 0 : it->second;
    }

    long category_count(const std::string& category) const {
        auto it = category_clicks.find(category);
        return it == category_clicks.end() ? 0 : it->second;
    }
};

/// Counts one click per history item (history entries are past clicks) and
/// one per positively labeled candidate. Categories roll up through the
/// catalog; articles missing from the catalog still count toward news clicks.
/// Set include_history=false to count label-1 candidates only.
inline PopularityTable build_popularity(const std::vector<Impression>& impressions,
                                        const Catalog& catalog, bool include_history = true) {
    PopularityTable table;
    table.source = include_history ? "history+clicked-candidates" : "clicked-candidates";
    auto add = [&](const std::string& news_id) {
        ++table.news_clicks[news_id];
        if (const NewsArticle* a = catalog.find(news_id)) ++table.category_clicks[a->category];
    };
    for (const auto& imp : impressions) {
        if (include_history)
            for (const auto& id : imp.history) add(id);
        for (const auto& c : imp.candidates)
            if (c.label == 1) add(c.news_id);
    }
    return table;
}

/// Uniform random permutation of 1..n, deterministic per seed.
inline std::vector<int> random_rank(int n, uint64_t seed) {
    if (n < 1) throw ValidationError("candidate count must be >= 1");
    std::vector<int> perm(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 1);
    DetRng rng(seed);
    rng.shuffle(perm);
    return perm;
}

/// Candidates ordered by descending global click count; ties keep the
/// original candidate order.
inline std::vector<int> mostpop_rank(const std::vector<Candidate>& candidates,
                                     const PopularityTable& table) {
    if (candidates.empty()) throw ValidationError("candidate list is empty");
    std::vector<int> perm(candidates.size());
    std::iota(perm.begin(), perm.end(), 1);
    std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
        return table.news_count(candidates[static_cast<size_t>(a - 1)].news_id) >
               table.news_count(candidates[static_cast<size_t>(b - 1)].news_id);
    });
    return perm;
}

/// Candidates ordered by descending click count of their category, breaking
/// ties by descending per-news count and then original order.
inline std::vector<int> topicpop_rank(const std::vector<Candidate>& candidates,
                                      const PopularityTable& table, const Catalog& catalog) {
    if (candidates.empty()) throw ValidationError("candidate list is empty");
    std::vector<long> cat_key(candidates.size());
    std::vector<long> news_key(candidates.size());
    for (size_t i = 0; i < candidates.size(); ++i) {
        const NewsArticle* a = catalog.find(candidates[i].news_id);
        if (a == nullptr)
            throw ValidationError("candidate '" + candidates[i].news_id +
                                  "' has no catalog entry to resolve its category");
        cat_key[i] = table.category_count(a->category);
        news_key[i] = table.news_count(candidates[i].news_id);
    }
    std::vector<int> perm(candidates.size());
    std::iota(perm.begin(), perm.end(), 1);
    std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
        size_t ia = static_cast<size_t>(a - 1), ib = static_cast<size_t>(b - 1);
        if (cat_key[ia] != cat_key[ib]) return cat_key[ia] > cat_key[ib];
        return news_key[ia] > news_key[ib];
    });
    return perm;
}

inline nlohmann::json popularity_to_json(const PopularityTable& table) {
    return nlohmann::json{{"news_clicks", table.news_clicks},
                          {"category_clicks", table.category_clicks},
                          {"source", table.source}};
}

inline PopularityTable popularity_from_json(const nlohmann::json& j) {
    PopularityTable table;
    table.news_clicks = j.at("news_clicks").get<std::map<std::string, long>>();
    table.category_clicks = j.at("category_clicks").get<std::map<std::string, long>>();
    table.source = j.value("source", "");
    return table;
}

} // namespace recprompt

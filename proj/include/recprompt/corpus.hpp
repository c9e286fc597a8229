#pragma once

#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "recprompt/errors.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

struct NewsArticle {
    std::string id;
    std::string title;
    std::string category;
    std::string subcategory; // may be empty

    bool operator==(const NewsArticle&) const = default;
};

struct Candidate {
    std::string news_id;
    int label = 0; // 0 or 1

    bool operator==(const Candidate&) const = default;
};

/// One user's page view: reading history plus labeled candidate list.
struct Impression {
    std::string impression_id;
    std::string user_id;
    std::vector<std::string> history;  // news ids, oldest first
    std::vector<Candidate> candidates; // shown candidates with click labels

    int positive_count() const {
        int n = 0;
        for (const auto& c : candidates) n += (c.label == 1);
        return n;
    }
    bool operator==(const Impression&) const = default;
};

/// News catalog keyed by id; insertion order is preserved so a parsed
/// catalog serializes back to the same line order.
class Catalog {
public:
    bool insert(NewsArticle article) {
        auto [it, fresh] = index_.emplace(article.id, articles_.size());
        (void)it;
        if (fresh) articles_.push_back(std::move(article));
        return fresh;
    }

    const NewsArticle* find(const std::string& id) const {
        auto it = index_.find(id);
        return it == index_.end() ? nullptr : &articles_[it->second];
    }

    bool contains(const std::string& id) const { return index_.count(id) != 0; }
    size_t size() const { return articles_.size(); }
    bool empty() const { return articles_.empty(); }
    const std::vector<NewsArticle>& articles() const { return articles_; }

    bool operator==(const Catalog& other) const { return articles_ == other.articles_; }

private:
    std::vector<NewsArticle> articles_;
    std::unordered_map<std::string, size_t> index_;
};

struct ParseIssue {
    size_t line = 0;
    std::string message;
};

struct CatalogParseResult {
    Catalog catalog;
    std::vector<ParseIssue> issues; // record-level errors, offending lines skipped
    size_t duplicate_count = 0;     // duplicate ids kept-first
};

/// Parse the MIND news.tsv layout: id, category, subcategory, title,
/// further columns ignored. Bad records are reported and skipped.
inline CatalogParseResult parse_news_catalog(std::istream& stream) {
    CatalogParseResult result;
    std::string line;
    size_t lineno = 0;
    while (std::getline(stream, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split(line, '\t');
        if (fields.size() < 4) {
            result.issues.push_back({lineno, "expected >=4 tab-separated fields, got " +
                                                 std::to_string(fields.size())});
            continue;
        }
        NewsArticle a{fields[0], fields[3], fields[1], fields[2]};
        if (a.id.empty() || a.title.empty() || a.category.empty()) {
            result.issues.push_back({lineno, "empty id, category, or title"});
            continue;
        }
        if (!result.catalog.insert(std::move(a))) ++result.duplicate_count;
    }
    return result;
}

inline CatalogParseResult parse_news_catalog(const std::string& text) {
    std::istringstream in(text);
    return parse_news_catalog(in);
}

/// Inverse of parse_news_catalog for the four columns this library keeps.
inline std::string serialize_catalog(const Catalog& catalog) {
    std::string out;
    for (const auto& a : catalog.articles()) {
        out += a.id;
        out += '\t';
        out += a.category;
        out += '\t';
        out += a.subcategory;
        out += '\t';
        out += a.title;
        out += '\n';
    }
    return out;
}

/// Filters applied while building impressions. The strict profile keeps only
/// impressions with the protocol's 10-candidate/single-click shape.
struct ExperimentProfile {
    int candidate_count = 0;      // exact candidate count required when > 0
    bool single_positive = false; // require exactly one label-1 candidate
    bool drop_empty = false;      // exclude impressions with no candidates

    static ExperimentProfile none() { return {}; }
    static ExperimentProfile strict() { return {10, true, true}; }
};

struct ImpressionRepair {
    std::string impression_id;
    std::string note;
};

struct BehaviorParseResult {
    std::vector<Impression> impressions;
    std::vector<ParseIssue> issues;       // impression-level errors, rows skipped
    std::vector<ImpressionRepair> repairs; // unresolvable ids dropped
    size_t excluded_empty = 0;
    size_t excluded_no_positive = 0;
    size_t excluded_multi_positive = 0;
    size_t excluded_candidate_count = 0;

    size_t excluded_total() const {
        return excluded_empty + excluded_no_positive + excluded_multi_positive +
               excluded_candidate_count;
    }
};

/// Parse the MIND behaviors.tsv layout: impression id, user id, time,
/// space-separated history ids, space-separated "Nxxxx-0/1" candidates.
inline BehaviorParseResult parse_behaviors(std::istream& stream, const Catalog& catalog,
                                           const ExperimentProfile& profile = {}) {
    BehaviorParseResult result;
    std::string line;
    size_t lineno = 0;
    while (std::getline(stream, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split(line, '\t');
        if (fields.size() < 5) {
            result.issues.push_back({lineno, "expected 5 tab-separated fields, got " +
                                                 std::to_string(fields.size())});
            continue;
        }
        Impression imp;
        imp.impression_id = fields[0];
        imp.user_id = fields[1];
        // fields[2] is the timestamp; file order already gives recency.

        size_t dropped = 0;
        for (const auto& id : split_ws(fields[3])) {
            if (catalog.contains(id)) {
                imp.history.push_back(id);
            } else {
                ++dropped;
            }
        }
        if (dropped > 0) {
            result.repairs.push_back(
                {imp.impression_id, "dropped " + std::to_string(dropped) +
                                        " unresolvable history id(s)"});
        }

        bool bad = false;
        size_t dropped_cand = 0;
        for (const auto& tok : split_ws(fields[4])) {
            auto dash = tok.rfind('-');
            if (dash == std::string::npos || dash == 0 || dash + 2 != tok.size() ||
                (tok[dash + 1] != '0' && tok[dash + 1] != '1')) {
                result.issues.push_back({lineno, "malformed candidate token '" + tok + "'"});
                bad = true;
                break;
            }
            Candidate c{tok.substr(0, dash), tok[dash + 1] - '0'};
            if (!catalog.contains(c.news_id)) {
                ++dropped_cand;
                continue;
            }
            imp.candidates.push_back(std::move(c));
        }
        if (bad) continue;
        if (dropped_cand > 0) {
            result.repairs.push_back(
                {imp.impression_id, "dropped " + std::to_string(dropped_cand) +
                                        " unresolvable candidate(s)"});
        }

        if (profile.drop_empty && imp.candidates.empty()) {
            ++result.excluded_empty;
            continue;
        }
        int positives = imp.positive_count();
        if (profile.single_positive && positives == 0) {
            ++result.excluded_no_positive;
            continue;
        }
        if (profile.single_positive && positives > 1) {
            ++result.excluded_multi_positive;
            continue;
        }
        if (profile.candidate_count > 0 &&
            static_cast<int>(imp.candidates.size()) != profile.candidate_count) {
            ++result.excluded_candidate_count;
            continue;
        }
        result.impressions.push_back(std::move(imp));
    }
    return result;
}

inline BehaviorParseResult parse_behaviors(const std::string& text, const Catalog& catalog,
                                           const ExperimentProfile& profile = {}) {
    std::istringstream in(text);
    return parse_behaviors(in, catalog, profile);
}

struct EvaluationSplit {
    std::vector<Impression> validation_users;
    std::vector<Impression> test_users;
    uint64_t seed = 0;
};

/// Draw disjoint validation/test user sets. One impression is retained per
/// user: the most recent by file order. Deterministic for a fixed seed.
inline EvaluationSplit sample_split(const std::vector<Impression>& impressions, uint64_t seed,
                                    size_t n_validation, size_t n_test, size_t min_history = 1) {
    // Last impression in file order per user.
    std::unordered_map<std::string, size_t> latest;
    std::vector<std::string> user_order;
    for (size_t i = 0; i < impressions.size(); ++i) {
        auto [it, fresh] = latest.insert_or_assign(impressions[i].user_id, i);
        (void)it;
        if (fresh) user_order.push_back(impressions[i].user_id);
    }
    std::vector<std::string> eligible;
    for (const auto& uid : user_order) {
        if (impressions[latest[uid]].history.size() >= min_history) eligible.push_back(uid);
    }
    if (eligible.size() < n_validation + n_test) {
        throw SizingError("cannot sample " + std::to_string(n_validation) + "+" +
                          std::to_string(n_test) + " users: " +
                          std::to_string(eligible.size()) + " available");
    }
    DetRng rng(seed);
    rng.shuffle(eligible);

    EvaluationSplit split;
    split.seed = seed;
    for (size_t i = 0; i < n_validation; ++i)
        split.validation_users.push_back(impressions[latest[eligible[i]]]);
    for (size_t i = 0; i < n_test; ++i)
        split.test_users.push_back(impressions[latest[eligible[n_validation + i]]]);
    return split;
}

inline nlohmann::json split_manifest(const EvaluationSplit& split) {
    nlohmann::json j;
    j["seed"] = split.seed;
    auto ids = [](const std::vector<Impression>& v) {
        std::vector<std::string> out;
        out.reserve(v.size());
        for (const auto& imp : v) out.push_back(imp.user_id);
        return out;
    };
    j["validation_users"] = ids(split.validation_users);
    j["test_users"] = ids(split.test_users);
    return j;
}

/// Rebuild a split from a manifest against freshly parsed impressions.
/// Each listed user resolves to their most recent impression in file order.
inline EvaluationSplit split_from_manifest(const nlohmann::json& manifest,
                                           const std::vector<Impression>& impressions) {
    std::unordered_map<std::string, size_t> latest;
    for (size_t i = 0; i < impressions.size(); ++i) latest[impressions[i].user_id] = i;

    EvaluationSplit split;
    split.seed = manifest.value("seed", 0ull);
    auto resolve = [&](const nlohmann::json& users, std::vector<Impression>& out) {
        for (const auto& u : users) {
            auto it = latest.find(u.get<std::string>());
            if (it == latest.end())
                throw ValidationError("split manifest user '" + u.get<std::string>() +
                                      "' not found in behaviors data");
            out.push_back(impressions[it->second]);
        }
    };
    resolve(manifest.at("validation_users"), split.validation_users);
    resolve(manifest.at("test_users"), split.test_users);
    return split;
}

} // namespace recprompt

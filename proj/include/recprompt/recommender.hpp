#pragma once

#include <algorithm>
#include <regex>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "recprompt/corpus.hpp"
#include "recprompt/errors.hpp"
#include "recprompt/llm_gateway.hpp"
#include "recprompt/prompt_engine.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

/// Result of reading a model ranking answer. When `failed` is false,
/// `ranking` is always a permutation of 1..n (1-based candidate indices,
/// best first); `clean` marks answers that needed no repair at all.
struct ParsedRanking {
    std::vector<int> ranking;
    bool failed = false;
    bool clean = false;
    std::vector<std::string> repairs;
};

/// Extracts the ranking between the first <START>/<END> marker pair and
/// repairs it into a full permutation: unparseable and out-of-range tokens
/// are dropped, duplicates keep their first position, and missing candidate
/// indices are appended in ascending order. Only a missing marker pair is
/// unrecoverable (`failed`).
inline ParsedRanking parse_ranking(const std::string& text, int n_candidates) {
    if (n_candidates < 1) throw ValidationError("candidate count must be >= 1");
    ParsedRanking out;

    size_t start = text.find("<START>");
    size_t end = start == std::string::npos ? std::string::npos : text.find("<END>", start + 7);
    if (start == std::string::npos || end == std::string::npos) {
        out.failed = true;
        out.repairs.push_back("no <START>/<END> marker pair in answer");
        return out;
    }
    std::string region = text.substr(start + 7, end - (start + 7));

    static const std::regex token_re(R"(^[Cc]\s?(\d+)$)");
    std::unordered_set<int> seen;
    for (const std::string& raw : split(region, ',')) {
        std::string token = trim(raw);
        if (token.empty()) continue;
        std::smatch m;
        if (!std::regex_match(token, m, token_re)) {
            out.repairs.push_back("dropped unparseable token '" + token + "'");
            continue;
        }
        int idx = 0;
        try {
            idx = std::stoi(m[1].str());
        } catch (const std::exception&) {
            out.repairs.push_back("dropped oversized token '" + token + "'");
            continue;
        }
        if (idx < 1 || idx > n_candidates) {
            out.repairs.push_back("dropped out-of-range index C" + std::to_string(idx));
            continue;
        }
        if (!seen.insert(idx).second) {
            out.repairs.push_back("dropped duplicate index C" + std::to_string(idx));
            continue;
        }
        out.ranking.push_back(idx);
    }
    for (int idx = 1; idx <= n_candidates; ++idx) {
        if (!seen.count(idx)) {
            out.ranking.push_back(idx);
            out.repairs.push_back("appended missing index C" + std::to_string(idx));
        }
    }
    out.clean = out.repairs.empty();
    return out;
}

/// One topic the model attributed to the user, with the 1-based history
/// indices it grouped under that topic.
struct TopicEntry {
    std::string label;
    std::vector<int> indices;

    bool operator==(const TopicEntry&) const = default;
};

struct ParsedTopics {
    std::vector<TopicEntry> topics;
    std::vector<std::string> notes;
};

/// Reads `Topic: <label> - News: H1, H3` lines out of a chain-of-thought
/// answer. Duplicate labels are merged, history indices are deduplicated and
/// sorted, and out-of-range indices are dropped with a note.
inline ParsedTopics parse_topics(const std::string& text, int history_size) {
    ParsedTopics out;
    // Non-greedy label so a label containing " - " still parses as long as
    // the final separator is the marker before "News:".
    static const std::regex line_re(R"(^\s*Topic:\s*(.+?)\s*-\s*News:\s*(.*?)\s*$)");
    static const std::regex index_re(R"([Hh]\s?(\d+))");

    std::unordered_map<std::string, size_t> by_label;
    for (const std::string& line : split_lines(text)) {
        std::smatch m;
        if (!std::regex_match(line, m, line_re)) continue;
        std::string label = trim(m[1].str());
        if (label.empty()) {
            out.notes.push_back("skipped topic line with empty label");
            continue;
        }
        std::vector<int> indices;
        std::string rest = m[2].str();
        for (auto it = std::sregex_iterator(rest.begin(), rest.end(), index_re);
             it != std::sregex_iterator(); ++it) {
            int idx = 0;
            try {
                idx = std::stoi((*it)[1].str());
            } catch (const std::exception&) {
                continue;
            }
            if (idx < 1 || idx > history_size) {
                out.notes.push_back("dropped out-of-range history index H" +
                                    std::to_string(idx) + " for topic '" + label + "'");
                continue;
            }
            indices.push_back(idx);
        }
        auto [pos, inserted] = by_label.try_emplace(label, out.topics.size());
        if (inserted) {
            out.topics.push_back(TopicEntry{label, std::move(indices)});
        } else {
            auto& dst = out.topics[pos->second].indices;
            dst.insert(dst.end(), indices.begin(), indices.end());
        }
    }
    for (auto& topic : out.topics) {
        std::sort(topic.indices.begin(), topic.indices.end());
        topic.indices.erase(std::unique(topic.indices.begin(), topic.indices.end()),
                            topic.indices.end());
    }
    return out;
}

struct RecommenderSettings {
    std::string model = "gpt-3.5-turbo-1106";
    double temperature = 0.0;
    int max_tokens = 1024;
    int history_limit = 50;    // most recent clicks are kept
    int max_parse_attempts = 3; // initial call plus re-asks on parse failure
};

/// Overall quality of one parsed answer.
inline const char* parse_quality_name(const ParsedRanking& parsed) {
    if (parsed.failed) return "failed";
    return parsed.clean ? "clean" : "repaired";
}

/// Full record of one recommendation call for one impression.
struct UserRecommendation {
    std::string impression_id;
    std::string user_id;
    std::string template_id;
    std::string prompt;
    std::string answer;
    ParsedRanking parsed;
    ParsedTopics topics;
    std::vector<std::string> shown_history; // ids actually rendered, oldest first
    ResponseSource source = ResponseSource::mock;

    int history_shown() const { return static_cast<int>(shown_history.size()); }
};

namespace detail {

inline const NewsArticle& require_article(const Catalog& catalog, const std::string& id,
                                           const char* where) {
    const NewsArticle* a = catalog.find(id);
    if (a == nullptr)
        throw ValidationError(std::string(where) + " references unknown article '" + id + "'");
    return *a;
}

} // namespace detail

/// Renders the recommendation prompt for one impression (history truncated to
/// the most recent `history_limit` clicks), sends it through the gateway, and
/// parses the ranking plus any topic lines from the answer. When the answer
/// has no marker pair at all, the same call is reissued up to
/// `max_parse_attempts` times in total before the failure is returned as a
/// value (a deterministic backend will answer identically, so the retries
/// only help nondeterministic endpoints; the last answer is kept).
inline UserRecommendation recommend(LlmGateway& gateway, const TemplateInstruction& tpl,
                                    const Impression& imp, const Catalog& catalog,
                                    const RecommenderSettings& settings) {
    if (imp.candidates.empty())
        throw ValidationError("impression " + imp.impression_id + " has no candidates");

    std::vector<NewsArticle> history;
    size_t first = imp.history.size() > static_cast<size_t>(settings.history_limit)
                       ? imp.history.size() - static_cast<size_t>(settings.history_limit)
                       : 0;
    for (size_t i = first; i < imp.history.size(); ++i)
        history.push_back(detail::require_article(catalog, imp.history[i], "history"));

    std::vector<NewsArticle> candidates;
    candidates.reserve(imp.candidates.size());
    for (const auto& c : imp.candidates)
        candidates.push_back(detail::require_article(catalog, c.news_id, "candidate list"));

    UserRecommendation rec;
    rec.impression_id = imp.impression_id;
    rec.user_id = imp.user_id;
    rec.template_id = tpl.id;
    for (const auto& a : history) rec.shown_history.push_back(a.id);
    rec.prompt = render_recommendation_prompt(tpl, history, candidates);

    ChatRequest req;
    req.role_tag = RoleTag::recommender;
    req.model = settings.model;
    req.temperature = settings.temperature;
    req.max_tokens = settings.max_tokens;
    req.messages.push_back({MessageRole::user, rec.prompt});

    int attempts = std::max(settings.max_parse_attempts, 1);
    for (int attempt = 1; attempt <= attempts; ++attempt) {
        ChatResponse resp = gateway.complete(req);
        rec.answer = resp.content;
        rec.source = resp.source;
        rec.parsed = parse_ranking(rec.answer, static_cast<int>(imp.candidates.size()));
        if (!rec.parsed.failed) break;
    }
    rec.topics = parse_topics(rec.answer, rec.history_shown());
    return rec;
}

inline nlohmann::json recommendation_to_json(const UserRecommendation& rec,
                                             bool with_prompt = false) {
    nlohmann::json topics = nlohmann::json::array();
    for (const auto& t : rec.topics.topics)
        topics.push_back({{"label", t.label}, {"indices", t.indices}});
    nlohmann::json j{{"impression_id", rec.impression_id},
                     {"user_id", rec.user_id},
                     {"template_id", rec.template_id},
                     {"ranking", rec.parsed.ranking},
                     {"topics", topics},
                     {"parse_quality", parse_quality_name(rec.parsed)},
                     {"repair_notes", rec.parsed.repairs},
                     {"raw_text", rec.answer},
                     {"shown_history", rec.shown_history},
                     {"source", response_source_name(rec.source)}};
    if (with_prompt) j["prompt"] = rec.prompt;
    return j;
}

} // namespace recprompt

#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "recprompt/corpus.hpp"
#include "recprompt/errors.hpp"
#include "recprompt/llm_gateway.hpp"
#include "recprompt/recommender.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

/// One user's explanation: the topics the recommender attributed to the user
/// and, per topic, the history articles it grouped under that topic.
struct ExplanationTopic {
    std::string label;
    std::vector<std::string> news_ids;

    bool operator==(const ExplanationTopic&) const = default;
};

struct ExplanationRecord {
    std::string user_id;
    std::vector<std::string> history_ids; // the full history shown to the model
    std::vector<ExplanationTopic> topics;

    bool operator==(const ExplanationRecord&) const = default;
};

inline void validate_explanation(const ExplanationRecord& rec) {
    std::unordered_set<std::string> history(rec.history_ids.begin(), rec.history_ids.end());
    for (const auto& t : rec.topics)
        for (const auto& id : t.news_ids)
            if (!history.count(id))
                throw ValidationError("explanation for user " + rec.user_id + " topic '" +
                                      t.label + "' references '" + id +
                                      "' outside the user's history");
}

/// Maps the H# indices of a parsed answer back to article ids.
inline ExplanationRecord explanation_from_recommendation(const UserRecommendation& rec) {
    ExplanationRecord out;
    out.user_id = rec.user_id;
    out.history_ids = rec.shown_history;
    for (const auto& t : rec.topics.topics) {
        ExplanationTopic topic;
        topic.label = t.label;
        for (int idx : t.indices)
            topic.news_ids.push_back(rec.shown_history[static_cast<size_t>(idx - 1)]);
        out.topics.push_back(std::move(topic));
    }
    return out;
}

inline nlohmann::json explanation_to_json(const ExplanationRecord& rec) {
    nlohmann::json topics = nlohmann::json::array();
    for (const auto& t : rec.topics)
        topics.push_back({{"label", t.label}, {"news_ids", t.news_ids}});
    return nlohmann::json{
        {"user_id", rec.user_id}, {"history_ids", rec.history_ids}, {"topics", topics}};
}

inline ExplanationRecord explanation_from_json(const nlohmann::json& j) {
    ExplanationRecord rec;
    rec.user_id = j.at("user_id").get<std::string>();
    rec.history_ids = j.at("history_ids").get<std::vector<std::string>>();
    for (const auto& t : j.at("topics")) {
        ExplanationTopic topic;
        topic.label = t.at("label").get<std::string>();
        topic.news_ids = t.at("news_ids").get<std::vector<std::string>>();
        rec.topics.push_back(std::move(topic));
    }
    validate_explanation(rec);
    return rec;
}

/// Normal form of a topic label: trimmed, ASCII-lowercased, terminal
/// punctuation stripped, internal whitespace collapsed to single spaces.
inline std::string canonicalize_label(const std::string& raw) {
    std::string s = collapse_ws(trim(to_lower(raw)));
    while (!s.empty()) {
        char c = s.back();
        if (c == '.' || c == ',' || c == ';' || c == ':' || c == '!' || c == '?')
            s.pop_back();
        else
            break;
    }
    return trim(s);
}

/// Canonical labels plus the label mapping produced by consolidation.
struct ConsolidationResult {
    std::vector<std::string> canonical;         // distinct labels, first-appearance order
    std::map<std::string, std::string> mapping; // raw input label -> canonical label
    std::map<std::string, std::string> merge;   // fully resolved canonical merge pairs

    std::string resolve(const std::string& raw) const {
        std::string canon = canonicalize_label(raw);
        auto it = merge.find(canon);
        return it == merge.end() ? canon : it->second;
    }
};

/// Collapses label variants: canonicalization first, then an optional
/// user-supplied merge map (itself canonicalized, chains resolved
/// transitively). A cyclic or empty-target merge map is rejected.
inline ConsolidationResult consolidate_topics(const std::vector<std::string>& raw_labels,
                                              const std::map<std::string, std::string>& merge_map
                                              = {}) {
    ConsolidationResult out;

    std::map<std::string, std::string> merge;
    for (const auto& [k, v] : merge_map) {
        std::string key = canonicalize_label(k);
        std::string value = canonicalize_label(v);
        if (key.empty()) throw ConfigError("merge map contains an empty source label");
        if (value.empty())
            throw ConfigError("merge map target for '" + k + "' is empty after canonicalization");
        merge[key] = value;
    }
    for (auto& [key, value] : merge) {
        std::set<std::string> seen{key};
        std::string current = value;
        for (;;) {
            if (seen.count(current))
                throw ConfigError("merge map contains a cycle through '" + current + "'");
            auto it = merge.find(current);
            if (it == merge.end()) break;
            seen.insert(current);
            current = it->second;
        }
        value = current;
    }
    out.merge = std::move(merge);

    std::unordered_set<std::string> seen_canonical;
    for (const auto& raw : raw_labels) {
        std::string canonical = out.resolve(raw);
        out.mapping[raw] = canonical;
        if (!canonical.empty() && seen_canonical.insert(canonical).second)
            out.canonical.push_back(canonical);
    }
    return out;
}

/// One (topic, article) claim: "article `news_id` is about `canonical_label`".
/// Instances are counted pre-consolidation, so two raw variants of the same
/// topic on the same article are two instances sharing one verdict.
struct TopicInstance {
    std::string user_id;
    std::string canonical_label;
    std::string news_id;
};

inline std::vector<TopicInstance> collect_instances(
    const std::vector<ExplanationRecord>& explanations, const ConsolidationResult& consolidation) {
    std::vector<TopicInstance> out;
    for (const auto& rec : explanations) {
        validate_explanation(rec);
        for (const auto& t : rec.topics) {
            std::string canonical = consolidation.resolve(t.label);
            if (canonical.empty()) continue;
            for (const auto& id : t.news_ids)
                out.push_back(TopicInstance{rec.user_id, canonical, id});
        }
    }
    return out;
}

enum class Verdict { match, no_match };

inline const char* verdict_name(Verdict v) { return v == Verdict::match ? "match" : "no_match"; }

inline Verdict verdict_from_string(const std::string& s) {
    if (s == "match") return Verdict::match;
    if (s == "no_match") return Verdict::no_match;
    throw ValidationError("unknown verdict '" + s + "'");
}

/// One judge's verdict on one (topic, article) pair. `judge` is
/// "llm:<model>" or "human:<annotator-id>".
struct TopicJudgment {
    std::string topic_label; // canonical
    std::string news_id;
    Verdict verdict = Verdict::no_match;
    std::string judge;
};

inline nlohmann::json judgment_to_json(const TopicJudgment& j) {
    return nlohmann::json{{"topic_label", j.topic_label},
                          {"news_id", j.news_id},
                          {"verdict", verdict_name(j.verdict)},
                          {"judge", j.judge}};
}

inline TopicJudgment judgment_from_json(const nlohmann::json& j) {
    TopicJudgment out;
    out.topic_label = j.at("topic_label").get<std::string>();
    out.news_id = j.at("news_id").get<std::string>();
    out.verdict = verdict_from_string(j.at("verdict").get<std::string>());
    out.judge = j.value("judge", "");
    return out;
}

/// Indicator values per (topic, article) pair. Binary for a single judge;
/// fractional (mean of indicators) for an averaged human panel.
class JudgmentSet {
public:
    void add(const std::string& label, const std::string& news_id, double indicator) {
        auto& cell = cells_[key(label, news_id)];
        cell.sum += indicator;
        cell.count += 1;
    }

    void add(const TopicJudgment& j) {
        add(j.topic_label, j.news_id, j.verdict == Verdict::match ? 1.0 : 0.0);
    }

    std::optional<double> indicator(const std::string& label, const std::string& news_id) const {
        auto it = cells_.find(key(label, news_id));
        if (it == cells_.end()) return std::nullopt;
        return it->second.sum / static_cast<double>(it->second.count);
    }

    size_t size() const { return cells_.size(); }

private:
    struct Cell {
        double sum = 0;
        int count = 0;
    };

    static std::string key(const std::string& label, const std::string& news_id) {
        return label + '\x1f' + news_id;
    }

    std::unordered_map<std::string, Cell> cells_;
};

inline JudgmentSet judgment_set(const std::vector<TopicJudgment>& judgments) {
    JudgmentSet set;
    for (const auto& j : judgments) set.add(j);
    return set;
}

/// Merges several annotators' judgment lists into one fractional set: each
/// pair's indicator is the mean over the annotators who judged it.
inline JudgmentSet average_judgments(const std::vector<std::vector<TopicJudgment>>& per_annotator) {
    JudgmentSet set;
    for (const auto& judgments : per_annotator)
        for (const auto& j : judgments) set.add(j);
    return set;
}

/// Correctness: matched topic instances over all topic instances, summed
/// across users. Every instance must carry a verdict; use score_correctness
/// for the coverage-tolerant variant.
inline double ts_correctness(const std::vector<TopicInstance>& instances,
                             const JudgmentSet& judgments) {
    if (instances.empty())
        throw UndefinedScoreError("correctness is undefined without topic instances");
    double matched = 0;
    for (const auto& inst : instances) {
        auto ind = judgments.indicator(inst.canonical_label, inst.news_id);
        if (!ind)
            throw ProtocolError("no verdict for topic '" + inst.canonical_label +
                                "' on article '" + inst.news_id + "'");
        matched += *ind;
    }
    return matched / static_cast<double>(instances.size());
}

/// Completeness: distinct history articles covered by at least one topic,
/// over all history articles, summed across users. Users with an empty
/// history are excluded (their ratio is ill-posed) with a note.
inline double ts_completeness(const std::vector<ExplanationRecord>& explanations,
                              std::vector<std::string>* notes = nullptr) {
    long covered_total = 0;
    long history_total = 0;
    for (const auto& rec : explanations) {
        validate_explanation(rec);
        if (rec.history_ids.empty()) {
            if (notes)
                notes->push_back("excluded user " + rec.user_id + " with empty history");
            continue;
        }
        std::unordered_set<std::string> covered;
        for (const auto& t : rec.topics)
            for (const auto& id : t.news_ids) covered.insert(id);
        covered_total += static_cast<long>(covered.size());
        history_total += static_cast<long>(rec.history_ids.size());
    }
    if (history_total == 0)
        throw UndefinedScoreError("completeness is undefined without nonempty histories");
    return static_cast<double>(covered_total) / static_cast<double>(history_total);
}

struct JudgeSettings {
    std::string model = "gpt-4-1106-preview";
    double temperature = 0.0;
    int max_tokens = 16;
};

inline std::string build_judge_prompt(const std::string& topic_label, const NewsArticle& article) {
    std::string prompt;
    prompt += "You are checking a news recommender's explanation.\n";
    prompt += "News title: " + article.title + "\n";
    prompt += "News category: " + article.category + "\n";
    prompt += "Summarized topic: " + topic_label + "\n\n";
    prompt += "Does this topic accurately reflect the content of the news article?\n";
    prompt += "Answer with the single token YES or NO on the final line.";
    return prompt;
}

/// The final token of the final nonempty line decides the verdict.
inline Verdict parse_judge_answer(const std::string& answer) {
    auto lines = split_lines(answer);
    std::string last_line;
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
        if (!trim(*it).empty()) {
            last_line = trim(*it);
            break;
        }
    }
    auto tokens = split_ws(last_line);
    std::string token = tokens.empty() ? "" : tokens.back();
    while (!token.empty() && !std::isalpha(static_cast<unsigned char>(token.back())))
        token.pop_back();
    while (!token.empty() && !std::isalpha(static_cast<unsigned char>(token.front())))
        token.erase(token.begin());
    std::string upper;
    for (char c : token) upper += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    if (upper == "YES") return Verdict::match;
    if (upper == "NO") return Verdict::no_match;
    throw JudgeParseError("judge answer has no YES/NO on its final line: " +
                          (answer.size() <= 120 ? answer : answer.substr(0, 120) + "..."));
}

inline Verdict llm_judge(const std::string& topic_label, const NewsArticle& article,
                         LlmGateway& gateway, const JudgeSettings& settings = {}) {
    if (article.title.empty() || article.category.empty())
        throw ValidationError("judging needs an article with title and category");
    ChatRequest req;
    req.role_tag = RoleTag::evaluator;
    req.model = settings.model;
    req.temperature = settings.temperature;
    req.max_tokens = settings.max_tokens;
    req.messages.push_back({MessageRole::user, build_judge_prompt(topic_label, article)});
    return parse_judge_answer(gateway.complete(req).content);
}

struct JudgeRunResult {
    std::vector<TopicJudgment> judgments;
    std::vector<std::pair<std::string, std::string>> unjudged; // (label, news_id)
};

/// Judges every distinct (canonical topic, article) pair in the explanation
/// set. Pairs whose answer cannot be parsed are reported, not fatal.
inline JudgeRunResult llm_judge_all(const std::vector<ExplanationRecord>& explanations,
                                    const ConsolidationResult& consolidation,
                                    const Catalog& catalog, LlmGateway& gateway,
                                    const JudgeSettings& settings = {}) {
    std::set<std::pair<std::string, std::string>> pairs;
    for (const auto& inst : collect_instances(explanations, consolidation))
        pairs.emplace(inst.canonical_label, inst.news_id);

    JudgeRunResult result;
    std::string judge_name = "llm:" + settings.model;
    for (const auto& [label, news_id] : pairs) {
        const NewsArticle* article = catalog.find(news_id);
        if (article == nullptr)
            throw ValidationError("explanation references article '" + news_id +
                                  "' missing from the catalog");
        try {
            Verdict v = llm_judge(label, *article, gateway, settings);
            result.judgments.push_back(TopicJudgment{label, news_id, v, judge_name});
        } catch (const JudgeParseError&) {
            result.unjudged.emplace_back(label, news_id);
        }
    }
    return result;
}

/// One article to annotate, with every candidate topic claimed for it.
struct AnnotationItem {
    NewsArticle article;
    std::vector<std::string> topic_labels;
};

/// Groups the distinct (topic, article) pairs of an explanation set by
/// article, ordered by news id for a stable session order.
inline std::vector<AnnotationItem> annotation_items(
    const std::vector<ExplanationRecord>& explanations, const ConsolidationResult& consolidation,
    const Catalog& catalog) {
    std::map<std::string, std::set<std::string>> by_article;
    for (const auto& inst : collect_instances(explanations, consolidation))
        by_article[inst.news_id].insert(inst.canonical_label);
    std::vector<AnnotationItem> items;
    for (const auto& [news_id, labels] : by_article) {
        const NewsArticle* article = catalog.find(news_id);
        if (article == nullptr)
            throw ValidationError("explanation references article '" + news_id +
                                  "' missing from the catalog");
        items.push_back(AnnotationItem{*article, {labels.begin(), labels.end()}});
    }
    return items;
}

/// Interactive multi-select annotation over article/topic pairs. Judgments
/// stream to `progress_path` as they are made, so an interrupted session
/// loses nothing; rerunning with the same path resumes after the last fully
/// annotated article. Returns all judgments for this annotator, including
/// resumed ones.
inline std::vector<TopicJudgment> annotation_session(const std::vector<AnnotationItem>& items,
                                                     const std::string& annotator_id,
                                                     std::istream& in, std::ostream& out,
                                                     const std::filesystem::path& progress_path) {
    if (annotator_id.empty()) throw ValidationError("annotator id must not be empty");
    std::string judge_name = "human:" + annotator_id;

    std::vector<TopicJudgment> judgments;
    std::unordered_set<std::string> done_articles;
    if (!progress_path.empty() && std::filesystem::exists(progress_path)) {
        std::ifstream prev(progress_path);
        std::string line;
        while (std::getline(prev, line)) {
            if (trim(line).empty()) continue;
            TopicJudgment j = judgment_from_json(nlohmann::json::parse(line));
            done_articles.insert(j.news_id);
            judgments.push_back(std::move(j));
        }
    }

    std::ofstream progress;
    if (!progress_path.empty()) progress.open(progress_path, std::ios::app);

    size_t skipped = 0;
    for (size_t idx = 0; idx < items.size(); ++idx) {
        const auto& item = items[idx];
        if (done_articles.count(item.article.id)) {
            ++skipped;
            continue;
        }
        out << "\n[" << (idx + 1) << "/" << items.size() << "] " << item.article.id << " ("
            << item.article.category << ")\n";
        out << "  " << item.article.title << "\n";
        out << "Claimed topics:\n";
        for (size_t t = 0; t < item.topic_labels.size(); ++t)
            out << "  " << (t + 1) << ". " << item.topic_labels[t] << "\n";
        out << "Select all topics that match this article (numbers separated by spaces or "
               "commas; empty = none; q = stop): "
            << std::flush;

        std::set<size_t> selected;
        bool quit = false;
        for (;;) {
            std::string reply;
            if (!std::getline(in, reply)) {
                quit = true; // interrupted: keep what we have
                break;
            }
            reply = trim(reply);
            if (reply == "q" || reply == "Q") {
                quit = true;
                break;
            }
            selected.clear();
            bool valid = true;
            std::string normalized = reply;
            replace_all(normalized, ",", " ");
            for (const auto& token : split_ws(normalized)) {
                size_t pos = 0;
                unsigned long value = 0;
                try {
                    value = std::stoul(token, &pos);
                } catch (const std::exception&) {
                    valid = false;
                }
                if (!valid || pos != token.size() || value < 1 ||
                    value > item.topic_labels.size()) {
                    out << "Please enter numbers between 1 and " << item.topic_labels.size()
                        << ": " << std::flush;
                    valid = false;
                    break;
                }
                selected.insert(static_cast<size_t>(value));
            }
            if (valid) break;
        }
        if (quit) break;

        for (size_t t = 0; t < item.topic_labels.size(); ++t) {
            TopicJudgment j;
            j.topic_label = item.topic_labels[t];
            j.news_id = item.article.id;
            j.verdict = selected.count(t + 1) ? Verdict::match : Verdict::no_match;
            j.judge = judge_name;
            if (progress.is_open()) progress << judgment_to_json(j).dump() << '\n';
            judgments.push_back(std::move(j));
        }
        if (progress.is_open()) progress.flush();
    }
    out << "\nAnnotated " << (judgments.size()) << " pairs (" << skipped
        << " articles resumed from earlier progress).\n";
    return judgments;
}

/// Scores of one judge over an explanation set. When some instances lack a
/// verdict, correctness covers the judged subset and `coverage` says how much.
struct JudgeScore {
    std::string judge;
    double correctness = 0;
    double completeness = 0;
    double coverage = 1.0;
    size_t judged_instances = 0;
    size_t total_instances = 0;
    std::vector<std::string> uncovered; // "label|news_id" pairs without verdicts
};

inline JudgeScore score_judge(const std::string& judge_name, const JudgmentSet& judgments,
                              const std::vector<TopicInstance>& instances,
                              double completeness) {
    JudgeScore score;
    score.judge = judge_name;
    score.completeness = completeness;
    score.total_instances = instances.size();
    double matched = 0;
    for (const auto& inst : instances) {
        auto ind = judgments.indicator(inst.canonical_label, inst.news_id);
        if (!ind) {
            score.uncovered.push_back(inst.canonical_label + "|" + inst.news_id);
            continue;
        }
        matched += *ind;
        ++score.judged_instances;
    }
    if (score.judged_instances == 0)
        throw UndefinedScoreError("judge '" + judge_name + "' covers no topic instance");
    score.correctness = matched / static_cast<double>(score.judged_instances);
    score.coverage = instances.empty()
                         ? 1.0
                         : static_cast<double>(score.judged_instances) /
                               static_cast<double>(score.total_instances);
    std::sort(score.uncovered.begin(), score.uncovered.end());
    score.uncovered.erase(std::unique(score.uncovered.begin(), score.uncovered.end()),
                          score.uncovered.end());
    return score;
}

/// One (correctness, completeness) pair per judge over the same explanation
/// set — the plotting payload for judge-vs-judge comparisons.
inline std::vector<JudgeScore> topicscore_report(
    const std::map<std::string, JudgmentSet>& judges,
    const std::vector<ExplanationRecord>& explanations,
    const ConsolidationResult& consolidation) {
    auto instances = collect_instances(explanations, consolidation);
    if (instances.empty())
        throw UndefinedScoreError("no topic instances: nothing to score");
    double completeness = ts_completeness(explanations);
    std::vector<JudgeScore> scores;
    for (const auto& [name, set] : judges)
        scores.push_back(score_judge(name, set, instances, completeness));
    return scores;
}

inline nlohmann::json judge_score_to_json(const JudgeScore& s) {
    return nlohmann::json{{"judge", s.judge},
                          {"correctness", s.correctness},
                          {"completeness", s.completeness},
                          {"coverage", s.coverage},
                          {"judged_instances", s.judged_instances},
                          {"total_instances", s.total_instances},
                          {"uncovered", s.uncovered}};
}

} // namespace recprompt

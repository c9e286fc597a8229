#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "recprompt/corpus.hpp"
#include "recprompt/llm_gateway.hpp"
#include "recprompt/prompt_engine.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

/// One "H3: title (category)" or "C3: title (category)" line recovered from a
/// rendered prompt — all the context a mock model gets to see.
struct PromptArticleLine {
    int index = 0;
    std::string title;
    std::string category;
};

inline std::vector<PromptArticleLine> parse_prompt_article_lines(const std::string& prompt,
                                                                 char prefix) {
    std::vector<PromptArticleLine> out;
    for (const std::string& line : split_lines(prompt)) {
        if (line.size() < 4 || line[0] != prefix) continue;
        size_t colon = line.find(": ");
        if (colon == std::string::npos || colon < 2) continue;
        bool digits = true;
        for (size_t i = 1; i < colon; ++i)
            if (!std::isdigit(static_cast<unsigned char>(line[i]))) digits = false;
        if (!digits) continue;

        PromptArticleLine entry;
        entry.index = std::stoi(line.substr(1, colon - 1));
        std::string rest = line.substr(colon + 2);
        size_t open = rest.rfind(" (");
        if (open != std::string::npos && !rest.empty() && rest.back() == ')') {
            entry.title = rest.substr(0, open);
            entry.category = rest.substr(open + 2, rest.size() - open - 3);
        } else {
            entry.title = rest;
        }
        out.push_back(std::move(entry));
    }
    return out;
}

namespace detail {

/// Deterministic stand-in recommender: prefers candidates whose category
/// dominates the user's history, breaking ties by a hash of title and prompt
/// (so different templates genuinely produce different rankings). Emits topic
/// lines when the prompt asks for the step-by-step format.
inline std::string mock_recommender_answer(const std::string& prompt) {
    auto history = parse_prompt_article_lines(prompt, 'H');
    auto candidates = parse_prompt_article_lines(prompt, 'C');

    std::map<std::string, int> category_weight;
    for (const auto& h : history) ++category_weight[h.category];

    uint64_t prompt_salt = fnv1a64(prompt);
    std::vector<size_t> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        int wa = category_weight.count(candidates[a].category)
                     ? category_weight[candidates[a].category]
                     : 0;
        int wb = category_weight.count(candidates[b].category)
                     ? category_weight[candidates[b].category]
                     : 0;
        if (wa != wb) return wa > wb;
        uint64_t ja = fnv1a64(candidates[a].title + '\x1f' + std::to_string(prompt_salt));
        uint64_t jb = fnv1a64(candidates[b].title + '\x1f' + std::to_string(prompt_salt));
        return ja > jb;
    });

    std::string answer;
    if (prompt.find("Topic:") != std::string::npos && !history.empty()) {
        answer += "The user's history groups into these topics:\n";
        std::vector<std::pair<std::string, std::vector<int>>> groups;
        std::map<std::string, size_t> group_of;
        for (const auto& h : history) {
            if (h.category.empty()) continue;
            auto [it, inserted] = group_of.try_emplace(h.category, groups.size());
            if (inserted) groups.push_back({h.category, {}});
            groups[it->second].second.push_back(h.index);
        }
        for (const auto& [category, indices] : groups) {
            answer += "Topic: " + category + " - News: ";
            for (size_t i = 0; i < indices.size(); ++i) {
                if (i) answer += ", ";
                answer += "H" + std::to_string(indices[i]);
            }
            answer += "\n";
        }
        answer += "Matching the candidates against these topics gives the ranking below.\n";
    }
    answer += "Ranked news: <START>";
    for (size_t i = 0; i < order.size(); ++i) {
        if (i) answer += ", ";
        answer += "C" + std::to_string(candidates[order[i]].index);
    }
    answer += "<END>";
    return answer;
}

/// Deterministic stand-in optimizer: echoes the current template with one
/// hash-selected refinement sentence appended, inside the reply markers.
inline std::string mock_optimizer_answer(const std::string& prompt) {
    static const char* kAdvice[] = {
        "Pay extra attention to the most recent items in the user's history.",
        "Prefer candidates whose topic matches the dominant category of the history.",
        "Weigh categories that repeat across the history more heavily.",
        "Consider both the category and the concrete subject of each candidate.",
        "Summarize the user's interests first, then rank the candidates against them.",
    };
    std::string current;
    const std::string head = "# Current Template\n";
    size_t a = prompt.find(head);
    size_t b = prompt.find("\n\n# Example Recommendation Prompt");
    if (a != std::string::npos && b != std::string::npos && b > a + head.size())
        current = prompt.substr(a + head.size(), b - a - head.size());
    else
        current = kInitialIOTemplate;

    size_t pick = fnv1a64(prompt) % (sizeof(kAdvice) / sizeof(kAdvice[0]));
    std::string tweaked = trim(current) + "\n" + kAdvice[pick];
    return "Here is an improved template instruction.\n" + std::string(kTemplateStartMarker) +
           "\n" + tweaked + "\n" + std::string(kTemplateEndMarker) + "\n";
}

/// Deterministic stand-in judge: a topic matches when it equals the article's
/// category or occurs in the title (case-insensitive).
inline std::string mock_evaluator_answer(const std::string& prompt) {
    std::string title, category, topic;
    for (const std::string& line : split_lines(prompt)) {
        if (line.rfind("News title: ", 0) == 0) title = to_lower(line.substr(12));
        if (line.rfind("News category: ", 0) == 0) category = to_lower(line.substr(15));
        if (line.rfind("Summarized topic: ", 0) == 0) topic = to_lower(line.substr(18));
    }
    bool match = !topic.empty() &&
                 (topic == category || (!title.empty() && title.find(topic) != std::string::npos));
    return match ? "YES" : "NO";
}

} // namespace detail

/// The built-in offline model: pure per request (therefore thread-safe) and
/// deterministic, dispatching on the request's role tag.
inline MockFn default_mock() {
    return [](const ChatRequest& req) -> std::string {
        const std::string& prompt = req.messages.back().content;
        switch (req.role_tag) {
            case RoleTag::recommender: return detail::mock_recommender_answer(prompt);
            case RoleTag::optimizer: return detail::mock_optimizer_answer(prompt);
            default: return detail::mock_evaluator_answer(prompt);
        }
    };
}

/// A recommender mock that always ranks the clicked candidate first. It
/// recognizes impressions by their candidate title tuple (the only identity
/// visible inside a rendered prompt), so titles must be distinct per
/// impression. Non-recommender roles fall through to the default mock.
inline MockFn make_perfect_mock(const std::vector<Impression>& impressions,
                                const Catalog& catalog) {
    auto key_to_click = std::make_shared<std::unordered_map<uint64_t, int>>();
    for (const auto& imp : impressions) {
        std::string joined;
        int clicked = 0;
        for (size_t i = 0; i < imp.candidates.size(); ++i) {
            const NewsArticle* a = catalog.find(imp.candidates[i].news_id);
            joined += (a ? a->title : imp.candidates[i].news_id);
            joined += '\x1f';
            if (imp.candidates[i].label == 1) clicked = static_cast<int>(i) + 1;
        }
        if (clicked > 0) key_to_click->emplace(fnv1a64(joined), clicked);
    }
    MockFn fallback = default_mock();
    return [key_to_click, fallback](const ChatRequest& req) -> std::string {
        if (req.role_tag != RoleTag::recommender) return fallback(req);
        const std::string& prompt = req.messages.back().content;
        auto candidates = parse_prompt_article_lines(prompt, 'C');
        std::string joined;
        for (const auto& c : candidates) joined += c.title + '\x1f';
        auto it = key_to_click->find(fnv1a64(joined));
        if (it == key_to_click->end() || candidates.empty()) return fallback(req);
        int clicked = it->second;
        std::string answer = "Ranked news: <START>C" + std::to_string(clicked);
        for (size_t i = 1; i <= candidates.size(); ++i)
            if (static_cast<int>(i) != clicked) answer += ", C" + std::to_string(i);
        answer += "<END>";
        return answer;
    };
}

} // namespace recprompt

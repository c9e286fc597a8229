#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "recprompt/corpus.hpp"
#include "recprompt/errors.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

inline constexpr const char* kHistoryPlaceholder = "${history}";
inline constexpr const char* kCandidatePlaceholder = "${candidate}";
inline constexpr const char* kTemplateStartMarker = "<START_TEMPLATE>";
inline constexpr const char* kTemplateEndMarker = "<END_TEMPLATE>";

/// The evolving prompt template the optimizer rewrites. The text must hold
/// each input placeholder exactly once so rendering is unambiguous.
struct TemplateInstruction {
    std::string id;
    std::string text;
    std::string provenance; // initial-IO | initial-CoT | optimizer@iteration-k
    std::string created_at;

    bool operator==(const TemplateInstruction&) const = default;
};

inline void validate_template_text(const std::string& text) {
    if (trim(text).empty()) throw ValidationError("template text is empty");
    auto require_once = [&](const char* placeholder) {
        size_t n = count_occurrences(text, placeholder);
        if (n != 1) {
            throw ValidationError(std::string("template must contain ") + placeholder +
                                  " exactly once, found " + std::to_string(n));
        }
    };
    require_once(kHistoryPlaceholder);
    require_once(kCandidatePlaceholder);
}

inline TemplateInstruction make_template(std::string text, std::string id,
                                         std::string provenance) {
    validate_template_text(text);
    return TemplateInstruction{std::move(id), std::move(text), std::move(provenance),
                               iso8601_utc_now()};
}

enum class PromptStrategy { IO, CoT };

inline const char* kInitialIOTemplate =
    R"(You serve as a personalized news recommendation system.
# Input Format
## User's History News
${history}
## Candidate News
${candidate}
# Output Format
Rank candidate news based on the user's history news in
the format: "Ranked news: <START>C#, C#,..., C#<END>".)";

inline const char* kInitialCoTTemplate =
    R"(You serve as a personalized news recommendation system.
# Input Format
## User's History News
${history}
## Candidate News
${candidate}
# Recommendation Process
Think step by step. First, summarize the topics of interest covered by the
user's history news. Write one line per topic in the format:
Topic: <topic> - News: H#, H#
listing the history news that belong to it. Then match each candidate news
against these topics and rank all candidate news from best to worst fit
with the user's interests.
# Output Format
Output the topic lines first, then rank candidate news based on the user's
history news in the format: "Ranked news: <START>C#, C#,..., C#<END>".)";

/// Starting template for a tuning run. IO is the plain input-output prompt;
/// CoT additionally asks for the intermediate topic summary that the topic
/// parser and TopicScore consume.
inline TemplateInstruction initial_template(PromptStrategy strategy) {
    if (strategy == PromptStrategy::IO)
        return make_template(kInitialIOTemplate, "initial-IO", "initial-IO");
    return make_template(kInitialCoTTemplate, "initial-CoT", "initial-CoT");
}

namespace detail {
// Substituted values must not re-introduce placeholder syntax.
inline std::string sanitize_value(std::string s) {
    replace_all(s, "${", "$ {");
    return s;
}

inline std::string article_lines(char prefix, const std::vector<NewsArticle>& articles) {
    std::string out;
    for (size_t i = 0; i < articles.size(); ++i) {
        out += prefix;
        out += std::to_string(i + 1);
        out += ": ";
        out += sanitize_value(articles[i].title);
        out += " (";
        out += sanitize_value(articles[i].category);
        out += ")";
        if (i + 1 < articles.size()) out += '\n';
    }
    return out;
}
} // namespace detail

/// Fill the two placeholders with numbered article lines, producing the
/// recommendation prompt. History lines are `H<i>: <title> (<category>)`,
/// candidates `C<j>: ...`; an empty history becomes a sentinel line.
inline std::string render_recommendation_prompt(const TemplateInstruction& tpl,
                                                const std::vector<NewsArticle>& history,
                                                const std::vector<NewsArticle>& candidates) {
    validate_template_text(tpl.text);
    if (candidates.empty()) throw ValidationError("candidate list is empty");
    std::string out = tpl.text;
    std::string history_block =
        history.empty() ? std::string("(no history)") : detail::article_lines('H', history);
    replace_all(out, kHistoryPlaceholder, history_block);
    replace_all(out, kCandidatePlaceholder, detail::article_lines('C', candidates));
    return out;
}

/// One worked example shown to the optimizer: the prompt the recommender
/// saw, its raw answer, and which candidate the user actually clicked.
struct Exemplar {
    std::string rendered_prompt;
    std::string raw_answer;
    int clicked_index = 0; // 1-based candidate index
    int n_candidates = 0;
};

inline const char* kRefinementInstruction =
    "You should generate an improved template instruction based on the provided "
    "information.";

inline const char* kObservationInstruction =
    "You should focus on how well the recommender's response aligns with the user's "
    "click behavior by examining if the topics from the user's news history and "
    "candidate news are accurately summarized and matched to the user's interests. "
    "Specifically, evaluate the clarity of topics in the recommender's answer, review "
    "the task description for adequacy, and check the detail in the recommendation "
    "process to ensure it reflects an analysis and summary of user-interest topics.";

struct OptimizationContext {
    std::string refinement_instruction = kRefinementInstruction;
    TemplateInstruction current_template;
    Exemplar exemplar;
    TemplateInstruction best_template;
    std::string observation_instruction = kObservationInstruction;
};

inline void validate_context(const OptimizationContext& ctx) {
    validate_template_text(ctx.current_template.text);
    validate_template_text(ctx.best_template.text);
    if (ctx.exemplar.rendered_prompt.empty())
        throw ValidationError("optimization context has no rendered exemplar prompt");
    if (ctx.exemplar.n_candidates < 1 || ctx.exemplar.clicked_index < 1 ||
        ctx.exemplar.clicked_index > ctx.exemplar.n_candidates)
        throw ValidationError("exemplar clicked index out of candidate range");
}

/// Assemble the optimization prompt: refinement instruction, current
/// template, exemplar prompt/answer/ground truth, best template, observation
/// instruction, and the marker directive for the reply.
inline std::string build_optimization_prompt(const OptimizationContext& ctx) {
    validate_context(ctx);
    std::string out;
    out += ctx.refinement_instruction;
    out += "\n\n# Current Template\n";
    out += ctx.current_template.text;
    out += "\n\n# Example Recommendation Prompt\n";
    out += ctx.exemplar.rendered_prompt;
    out += "\n\n# Recommender's Answer\n";
    out += ctx.exemplar.raw_answer;
    out += "\n\n# Ground Truth\nThe candidate news the user actually clicked is C";
    out += std::to_string(ctx.exemplar.clicked_index);
    out += ".\n\n# Best Template So Far\n";
    out += ctx.best_template.text;
    out += "\n\n";
    out += ctx.observation_instruction;
    out += "\n\nNow write the improved template instruction. It must contain the "
           "${history} placeholder exactly once and the ${candidate} placeholder "
           "exactly once. Emit only the new template instruction between ";
    out += kTemplateStartMarker;
    out += " and ";
    out += kTemplateEndMarker;
    out += " markers.";
    return out;
}

/// Pull the proposed template out of the optimizer's reply and validate it.
/// Raises ExtractionError when the markers are missing and ValidationError
/// when the extracted text breaks the placeholder invariant.
inline TemplateInstruction extract_template_from_optimizer_output(
    const std::string& text, std::string id = "extracted", std::string provenance = "") {
    size_t start = text.find(kTemplateStartMarker);
    if (start == std::string::npos)
        throw ExtractionError("optimizer output has no <START_TEMPLATE> marker");
    start += std::string(kTemplateStartMarker).size();
    size_t end = text.find(kTemplateEndMarker, start);
    if (end == std::string::npos)
        throw ExtractionError("optimizer output has no <END_TEMPLATE> marker");
    std::string body = trim(text.substr(start, end - start));
    return make_template(std::move(body), std::move(id), std::move(provenance));
}

inline nlohmann::json template_to_json(const TemplateInstruction& t) {
    return {{"id", t.id}, {"provenance", t.provenance}, {"created_at", t.created_at},
            {"text", t.text}};
}

inline TemplateInstruction template_from_json(const nlohmann::json& j) {
    TemplateInstruction t;
    t.id = j.at("id").get<std::string>();
    t.provenance = j.value("provenance", "");
    t.created_at = j.value("created_at", "");
    t.text = j.at("text").get<std::string>();
    validate_template_text(t.text);
    return t;
}

} // namespace recprompt

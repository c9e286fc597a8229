#pragma once

#include <string>
#include <vector>

#include "recprompt/errors.hpp"
#include "recprompt/llm_gateway.hpp"
#include "recprompt/prompt_engine.hpp"

namespace recprompt {

struct OptimizerSettings {
    std::string model = "gpt-4-1106-preview";
    double temperature = 1.0;
    int max_tokens = 1024;
    int max_attempts = 3; // initial call plus corrective retries
};

/// Fixed corrective message appended when an optimizer answer cannot be
/// turned into a valid template. Fixed wording keeps retries deterministic
/// and therefore cache-friendly.
inline constexpr const char* kCorrectiveMessage =
    "Your previous answer did not contain a usable template. Reply again with the improved "
    "template instruction between <START_TEMPLATE> and <END_TEMPLATE>, and make sure it "
    "contains the ${history} placeholder exactly once and the ${candidate} placeholder "
    "exactly once.";

/// Runs one prompt-refinement step: sends the optimization prompt, extracts
/// the marked template from the answer, and validates it. On extraction or
/// validation failure the conversation grows by the failed answer plus a
/// corrective user message and the call is retried, up to
/// `settings.max_attempts` attempts in total.
inline TemplateInstruction optimize_step(const OptimizationContext& ctx, LlmGateway& gateway,
                                         const OptimizerSettings& settings, int iteration) {
    validate_context(ctx);
    if (settings.max_attempts < 1) throw ConfigError("optimizer max_attempts must be >= 1");

    std::string id = "optimizer-iter-" + std::to_string(iteration);
    std::string provenance = "optimizer@iteration-" + std::to_string(iteration);

    ChatRequest req;
    req.role_tag = RoleTag::optimizer;
    req.model = settings.model;
    req.temperature = settings.temperature;
    req.max_tokens = settings.max_tokens;
    req.messages.push_back({MessageRole::user, build_optimization_prompt(ctx)});

    std::vector<std::string> raw_outputs;
    std::string last_error;
    for (int attempt = 1; attempt <= settings.max_attempts; ++attempt) {
        ChatResponse resp = gateway.complete(req);
        raw_outputs.push_back(resp.content);
        try {
            return extract_template_from_optimizer_output(resp.content, id, provenance);
        } catch (const ExtractionError& e) {
            last_error = e.what();
        } catch (const ValidationError& e) {
            last_error = e.what();
        }
        req.messages.push_back({MessageRole::assistant, resp.content});
        req.messages.push_back({MessageRole::user, kCorrectiveMessage});
    }
    throw OptimizationStepError("optimizer produced no valid template in " +
                                    std::to_string(settings.max_attempts) +
                                    " attempts (last error: " + last_error + ")",
                                raw_outputs);
}

} // namespace recprompt

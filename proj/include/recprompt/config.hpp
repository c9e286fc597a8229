#pragma once

#include <filesystem>
#include <set>
#include <string>

#include <json.hpp>

#include "recprompt/errors.hpp"
#include "recprompt/llm_gateway.hpp"
#include "recprompt/prompt_engine.hpp"
#include "recprompt/recommender.hpp"
#include "recprompt/topicscore.hpp"
#include "recprompt/tuner.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

/// Everything a command run needs, resolved from defaults, an optional JSON
/// config file, and command-line flags (flags win). The API credential is
/// deliberately absent: it is read from the environment only, so it can never
/// leak into run artifacts.
struct RunConfig {
    std::string backend = "mock";
    std::string base_url = "https://api.openai.com";
    std::string cache_path;
    std::string run_dir;
    std::string strategy = "IO"; // IO or CoT
    std::string profile = "strict"; // impression filter: strict or none

    std::string recommender_model = "gpt-3.5-turbo-1106";
    std::string optimizer_model = "gpt-4-1106-preview";
    std::string evaluator_model = "gpt-4-1106-preview";
    double recommender_temperature = 0.0;
    double optimizer_temperature = 1.0;
    double evaluator_temperature = 0.0;
    int max_tokens = 1024;

    int iteration_budget = 10;
    std::string exemplar_policy = "worst";
    ObjectiveWeights weights;

    int validation_users = 100;
    int test_users = 400;
    uint64_t seed = 42;
    int min_history = 1;
    int history_limit = 50;
    int repeats = 3;

    double rate_limit_per_min = 30.0;
    int max_inflight = 4;
    int eval_concurrency = 4;
};

namespace detail {

inline void require_known_keys(const nlohmann::json& j, const std::set<std::string>& known,
                               const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!known.count(key))
            throw ConfigError("unknown config key '" + key + "' in " + where);
    }
}

} // namespace detail

/// Applies a JSON config file over `cfg`. Only present keys override; unknown
/// keys are rejected so typos fail loudly instead of silently using defaults.
inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");

    detail::require_known_keys(
        j,
        {"backend", "base_url", "cache", "run_dir", "strategy", "profile", "models",
         "temperatures", "max_tokens", "tuning", "split", "history_limit", "repeats",
         "rate_limit_per_min", "max_inflight", "eval_concurrency"},
        path.string());

    cfg.backend = j.value("backend", cfg.backend);
    cfg.base_url = j.value("base_url", cfg.base_url);
    cfg.cache_path = j.value("cache", cfg.cache_path);
    cfg.run_dir = j.value("run_dir", cfg.run_dir);
    cfg.strategy = j.value("strategy", cfg.strategy);
    cfg.profile = j.value("profile", cfg.profile);
    if (j.contains("models")) {
        const auto& m = j["models"];
        detail::require_known_keys(m, {"recommender", "optimizer", "evaluator"}, "models");
        cfg.recommender_model = m.value("recommender", cfg.recommender_model);
        cfg.optimizer_model = m.value("optimizer", cfg.optimizer_model);
        cfg.evaluator_model = m.value("evaluator", cfg.evaluator_model);
    }
    if (j.contains("temperatures")) {
        const auto& t = j["temperatures"];
        detail::require_known_keys(t, {"recommender", "optimizer", "evaluator"}, "temperatures");
        cfg.recommender_temperature = t.value("recommender", cfg.recommender_temperature);
        cfg.optimizer_temperature = t.value("optimizer", cfg.optimizer_temperature);
        cfg.evaluator_temperature = t.value("evaluator", cfg.evaluator_temperature);
    }
    cfg.max_tokens = j.value("max_tokens", cfg.max_tokens);
    if (j.contains("tuning")) {
        const auto& t = j["tuning"];
        detail::require_known_keys(t, {"iterations", "exemplar_policy", "weights"}, "tuning");
        cfg.iteration_budget = t.value("iterations", cfg.iteration_budget);
        cfg.exemplar_policy = t.value("exemplar_policy", cfg.exemplar_policy);
        if (t.contains("weights")) cfg.weights = weights_from_json(t["weights"]);
    }
    if (j.contains("split")) {
        const auto& s = j["split"];
        detail::require_known_keys(s, {"validation", "test", "seed", "min_history"}, "split");
        cfg.validation_users = s.value("validation", cfg.validation_users);
        cfg.test_users = s.value("test", cfg.test_users);
        cfg.seed = s.value("seed", cfg.seed);
        cfg.min_history = s.value("min_history", cfg.min_history);
    }
    cfg.history_limit = j.value("history_limit", cfg.history_limit);
    cfg.repeats = j.value("repeats", cfg.repeats);
    cfg.rate_limit_per_min = j.value("rate_limit_per_min", cfg.rate_limit_per_min);
    cfg.max_inflight = j.value("max_inflight", cfg.max_inflight);
    cfg.eval_concurrency = j.value("eval_concurrency", cfg.eval_concurrency);
}

inline void validate_config(const RunConfig& cfg) {
    backend_from_string(cfg.backend); // throws on unknown backend
    if (cfg.strategy != "IO" && cfg.strategy != "CoT")
        throw ConfigError("unknown strategy '" + cfg.strategy + "' (expected IO or CoT)");
    if (cfg.profile != "strict" && cfg.profile != "none")
        throw ConfigError("unknown profile '" + cfg.profile + "' (expected strict or none)");
    exemplar_policy_from_string(cfg.exemplar_policy);
    validate_weights(cfg.weights);
    if (cfg.iteration_budget < 0) throw ConfigError("iteration budget must be >= 0");
    if (cfg.validation_users < 0 || cfg.test_users < 0)
        throw ConfigError("split sizes must be >= 0");
    if (cfg.min_history < 0) throw ConfigError("min_history must be >= 0");
    if (cfg.recommender_temperature < 0 || cfg.optimizer_temperature < 0 ||
        cfg.evaluator_temperature < 0)
        throw ConfigError("temperatures must be >= 0");
    if (cfg.max_tokens <= 0) throw ConfigError("max_tokens must be positive");
    if (cfg.history_limit <= 0) throw ConfigError("history limit must be positive");
    if (cfg.repeats < 1) throw ConfigError("repeats must be >= 1");
    if (cfg.eval_concurrency < 1) throw ConfigError("eval concurrency must be >= 1");
    if (cfg.backend == "replay") {
        if (cfg.cache_path.empty())
            throw ConfigError("replay backend requires a cache file (--cache)");
        if (!std::filesystem::exists(cfg.cache_path))
            throw ConfigError("replay cache " + cfg.cache_path + " does not exist");
    }
}

inline ExperimentProfile profile_from_config(const RunConfig& cfg) {
    return cfg.profile == "strict" ? ExperimentProfile::strict() : ExperimentProfile::none();
}

inline PromptStrategy strategy_from_config(const RunConfig& cfg) {
    return cfg.strategy == "CoT" ? PromptStrategy::CoT : PromptStrategy::IO;
}

inline RecommenderSettings recommender_settings(const RunConfig& cfg) {
    RecommenderSettings s;
    s.model = cfg.recommender_model;
    s.temperature = cfg.recommender_temperature;
    s.max_tokens = cfg.max_tokens;
    s.history_limit = cfg.history_limit;
    return s;
}

inline OptimizerSettings optimizer_settings(const RunConfig& cfg) {
    OptimizerSettings s;
    s.model = cfg.optimizer_model;
    s.temperature = cfg.optimizer_temperature;
    s.max_tokens = cfg.max_tokens;
    return s;
}

inline JudgeSettings judge_settings(const RunConfig& cfg) {
    JudgeSettings s;
    s.model = cfg.evaluator_model;
    s.temperature = cfg.evaluator_temperature;
    return s;
}

inline TuneConfig tune_config(const RunConfig& cfg) {
    TuneConfig t;
    t.iteration_budget = cfg.iteration_budget;
    t.exemplar_policy = exemplar_policy_from_string(cfg.exemplar_policy);
    t.seed = cfg.seed;
    t.weights = cfg.weights;
    t.recommender = recommender_settings(cfg);
    t.optimizer = optimizer_settings(cfg);
    t.eval_concurrency = cfg.eval_concurrency;
    return t;
}

inline GatewayConfig gateway_config(const RunConfig& cfg) {
    GatewayConfig g;
    g.backend = backend_from_string(cfg.backend);
    g.base_url = cfg.base_url;
    g.cache_path = cfg.cache_path;
    g.rate_limit_per_min = cfg.rate_limit_per_min;
    g.max_inflight = cfg.max_inflight;
    return g;
}

} // namespace recprompt

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "recprompt/corpus.hpp"
#include "recprompt/errors.hpp"
#include "recprompt/llm_gateway.hpp"
#include "recprompt/metrics.hpp"
#include "recprompt/optimizer.hpp"
#include "recprompt/prompt_engine.hpp"
#include "recprompt/recommender.hpp"
#include "recprompt/util.hpp"

namespace recprompt {

/// Weights of the scalar tuning objective. The default selects
/// mean(MRR, nDCG@5); any non-negative mix of the four metrics is allowed.
struct ObjectiveWeights {
    double auc = 0.0;
    double mrr = 1.0;
    double ndcg5 = 1.0;
    double ndcg10 = 0.0;
};

inline void validate_weights(const ObjectiveWeights& w) {
    if (w.auc < 0 || w.mrr < 0 || w.ndcg5 < 0 || w.ndcg10 < 0)
        throw ConfigError("objective weights must be non-negative");
    if (w.auc + w.mrr + w.ndcg5 + w.ndcg10 <= 0)
        throw ConfigError("objective weights must select at least one metric");
}

/// Weighted mean of the aggregate metrics; the improvement test of the
/// tuning loop compares this scalar.
inline double objective(const MetricReport& report, const ObjectiveWeights& w = {}) {
    validate_weights(w);
    double total = w.auc + w.mrr + w.ndcg5 + w.ndcg10;
    return (w.auc * report.auc + w.mrr * report.mrr + w.ndcg5 * report.ndcg5 +
            w.ndcg10 * report.ndcg10) /
           total;
}

inline nlohmann::json weights_to_json(const ObjectiveWeights& w) {
    return nlohmann::json{{"auc", w.auc}, {"mrr", w.mrr}, {"ndcg5", w.ndcg5}, {"ndcg10", w.ndcg10}};
}

inline ObjectiveWeights weights_from_json(const nlohmann::json& j) {
    ObjectiveWeights w;
    w.auc = j.value("auc", 0.0);
    w.mrr = j.value("mrr", 0.0);
    w.ndcg5 = j.value("ndcg5", 0.0);
    w.ndcg10 = j.value("ndcg10", 0.0);
    validate_weights(w);
    return w;
}

/// One impression scored under a template: the raw recommendation plus the
/// effective rank of the clicked candidate.
struct EvaluatedUser {
    UserRecommendation rec;
    int clicked_index = 0; // 1-based ground-truth position in the candidate list
    int rank_of_click = 0; // worst-case n when the answer failed to parse
    int n_candidates = 0;
    UserMetrics metrics;
};

struct EvaluationOutcome {
    MetricReport report;
    std::vector<EvaluatedUser> users; // impression order
    int failed_parses = 0;
};

namespace detail {

inline EvaluatedUser evaluate_one(const TemplateInstruction& tpl, const Impression& imp,
                                  const Catalog& catalog, LlmGateway& gateway,
                                  const RecommenderSettings& settings) {
    EvaluatedUser u;
    u.rec = recommend(gateway, tpl, imp, catalog, settings);
    u.n_candidates = static_cast<int>(imp.candidates.size());
    for (size_t i = 0; i < imp.candidates.size(); ++i)
        if (imp.candidates[i].label == 1) u.clicked_index = static_cast<int>(i) + 1;
    if (u.clicked_index == 0)
        throw ProtocolError("impression " + imp.impression_id + " has no clicked candidate");

    if (u.rec.parsed.failed) {
        u.rank_of_click = u.n_candidates; // worst case: click ranked last
    } else {
        std::vector<int> labels(imp.candidates.size(), 0);
        labels[static_cast<size_t>(u.clicked_index - 1)] = 1;
        u.rank_of_click = rank_of_click(u.rec.parsed.ranking, labels);
    }
    u.metrics = user_metrics(u.rank_of_click, u.n_candidates);
    return u;
}

} // namespace detail

/// Scores one template over a set of impressions. Per-user calls run
/// concurrently up to `concurrency` threads (mock functions must therefore be
/// thread-safe); results are assembled in impression order, so the outcome is
/// independent of scheduling. A hard gateway failure aborts the whole
/// evaluation. Answers that failed to parse contribute worst-case rank n.
inline EvaluationOutcome evaluate_template(const TemplateInstruction& tpl,
                                           const std::vector<Impression>& impressions,
                                           const Catalog& catalog, LlmGateway& gateway,
                                           const RecommenderSettings& settings,
                                           int concurrency = 4) {
    if (impressions.empty()) throw ValidationError("evaluation requires at least one impression");

    EvaluationOutcome out;
    out.users.resize(impressions.size());

    size_t n_threads = std::min<size_t>(std::max(concurrency, 1), impressions.size());
    if (n_threads <= 1) {
        for (size_t i = 0; i < impressions.size(); ++i)
            out.users[i] = detail::evaluate_one(tpl, impressions[i], catalog, gateway, settings);
    } else {
        std::atomic<size_t> next{0};
        std::atomic<bool> stop{false};
        std::exception_ptr first_error;
        std::mutex error_mutex;
        auto worker = [&] {
            for (;;) {
                if (stop.load()) return;
                size_t i = next.fetch_add(1);
                if (i >= impressions.size()) return;
                try {
                    out.users[i] =
                        detail::evaluate_one(tpl, impressions[i], catalog, gateway, settings);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                    stop.store(true);
                    return;
                }
            }
        };
        std::vector<std::thread> threads;
        threads.reserve(n_threads);
        for (size_t t = 0; t < n_threads; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
        if (first_error) std::rethrow_exception(first_error);
    }

    std::vector<PerUserMetrics> per_user;
    per_user.reserve(out.users.size());
    for (const auto& u : out.users) {
        per_user.push_back(PerUserMetrics{u.rec.user_id, u.rank_of_click, u.metrics});
        if (u.rec.parsed.failed) ++out.failed_parses;
    }
    out.report = aggregate(per_user);
    return out;
}

enum class ExemplarPolicy { worst, random, best };

inline const char* exemplar_policy_name(ExemplarPolicy p) {
    switch (p) {
        case ExemplarPolicy::worst: return "worst";
        case ExemplarPolicy::random: return "random";
        default: return "best";
    }
}

inline ExemplarPolicy exemplar_policy_from_string(const std::string& s) {
    if (s == "worst") return ExemplarPolicy::worst;
    if (s == "random") return ExemplarPolicy::random;
    if (s == "best") return ExemplarPolicy::best;
    throw ConfigError("unknown exemplar policy '" + s + "' (expected worst, random, or best)");
}

/// Picks the exemplar user for the next optimization step from the most
/// recent evaluation. "worst" takes the lowest reciprocal rank, "best" the
/// highest; both break ties toward the lexicographically smallest user id.
inline size_t select_exemplar(const EvaluationOutcome& outcome, ExemplarPolicy policy,
                              DetRng& rng) {
    if (outcome.users.empty()) throw ValidationError("cannot select an exemplar from no users");
    if (policy == ExemplarPolicy::random) return rng.below(outcome.users.size());
    size_t pick = 0;
    for (size_t i = 1; i < outcome.users.size(); ++i) {
        const auto& a = outcome.users[i];
        const auto& b = outcome.users[pick];
        bool better;
        if (a.rank_of_click != b.rank_of_click) {
            better = policy == ExemplarPolicy::worst ? a.rank_of_click > b.rank_of_click
                                                     : a.rank_of_click < b.rank_of_click;
        } else {
            better = a.rec.user_id < b.rec.user_id;
        }
        if (better) pick = i;
    }
    return pick;
}

inline Exemplar make_exemplar(const EvaluatedUser& u) {
    Exemplar ex;
    ex.rendered_prompt = u.rec.prompt;
    ex.raw_answer = u.rec.answer;
    ex.clicked_index = u.clicked_index;
    ex.n_candidates = u.n_candidates;
    return ex;
}

/// One row of the tuning trace. `template_id` is empty when the optimizer
/// failed to produce a template that iteration (nothing was evaluated).
struct IterationRecord {
    int iteration = 0;
    std::string template_id;
    MetricReport validation_report;
    double objective = 0.0;
    bool accepted = false;
    std::string exemplar_user_id; // empty at iteration 0
    std::string note;
};

inline nlohmann::json iteration_to_json(const IterationRecord& r) {
    nlohmann::json j{{"iteration", r.iteration},
                     {"template_id", r.template_id},
                     {"objective", r.objective},
                     {"accepted", r.accepted},
                     {"exemplar_user_id", r.exemplar_user_id},
                     {"note", r.note}};
    if (r.validation_report.n_users > 0) j["validation"] = report_to_json(r.validation_report);
    return j;
}

inline IterationRecord iteration_from_json(const nlohmann::json& j) {
    IterationRecord r;
    r.iteration = j.at("iteration").get<int>();
    r.template_id = j.value("template_id", "");
    r.objective = j.value("objective", 0.0);
    r.accepted = j.value("accepted", false);
    r.exemplar_user_id = j.value("exemplar_user_id", "");
    r.note = j.value("note", "");
    if (j.contains("validation")) r.validation_report = report_from_json(j["validation"]);
    return r;
}

struct TuneConfig {
    int iteration_budget = 10; // optimizer consultations per run
    ExemplarPolicy exemplar_policy = ExemplarPolicy::worst;
    uint64_t seed = 42; // drives the "random" exemplar policy
    ObjectiveWeights weights;
    RecommenderSettings recommender;
    OptimizerSettings optimizer;
    int eval_concurrency = 4;
};

/// The deterministic part of the tuning configuration. Backend choice, cache
/// location, and run directory are deliberately excluded so a recorded run
/// and its replay produce identical report bytes.
inline nlohmann::json tune_config_to_json(const TuneConfig& c) {
    return nlohmann::json{
        {"iteration_budget", c.iteration_budget},
        {"exemplar_policy", exemplar_policy_name(c.exemplar_policy)},
        {"seed", c.seed},
        {"objective_weights", weights_to_json(c.weights)},
        {"recommender",
         {{"model", c.recommender.model},
          {"temperature", c.recommender.temperature},
          {"max_tokens", c.recommender.max_tokens},
          {"history_limit", c.recommender.history_limit}}},
        {"optimizer",
         {{"model", c.optimizer.model},
          {"temperature", c.optimizer.temperature},
          {"max_tokens", c.optimizer.max_tokens},
          {"max_attempts", c.optimizer.max_attempts}}}};
}

struct RunState {
    std::vector<IterationRecord> iterations;
    TemplateInstruction best_template;
    MetricReport best_report;
    double best_objective = 0.0;
    int best_iteration = 0;
    int iteration_budget = 0;
    nlohmann::json config_snapshot;
};

/// Persistence for one tuning run: append-only template and iteration logs,
/// per-iteration user outputs, and the final report. A default-constructed
/// RunDir is disabled and ignores every write.
class RunDir {
public:
    RunDir() = default;
    explicit RunDir(std::filesystem::path root) : root_(std::move(root)) {}

    bool enabled() const { return !root_.empty(); }
    const std::filesystem::path& root() const { return root_; }

    void init() const {
        if (!enabled()) return;
        std::filesystem::create_directories(root_ / "per_user");
    }

    void append_template(const TemplateInstruction& tpl) const {
        append_line("templates.jsonl", template_to_json(tpl).dump());
    }

    void append_iteration(const IterationRecord& r) const {
        append_line("iterations.jsonl", iteration_to_json(r).dump());
    }

    void write_per_user(int iteration, const EvaluationOutcome& outcome) const {
        if (!enabled()) return;
        std::ofstream out(root_ / "per_user" / (std::to_string(iteration) + ".jsonl"),
                          std::ios::trunc);
        for (const auto& u : outcome.users) {
            nlohmann::json j = recommendation_to_json(u.rec);
            j["clicked_index"] = u.clicked_index;
            j["rank_of_click"] = u.rank_of_click;
            j["auc"] = u.metrics.auc;
            j["rr"] = u.metrics.rr;
            j["ndcg5"] = u.metrics.ndcg5;
            j["ndcg10"] = u.metrics.ndcg10;
            out << j.dump() << '\n';
        }
    }

    void write_report(const nlohmann::json& report) const {
        if (!enabled()) return;
        std::ofstream out(root_ / "report.json", std::ios::trunc);
        out << report.dump(2) << '\n';
    }

    bool has_iterations() const {
        return enabled() && std::filesystem::exists(root_ / "iterations.jsonl");
    }

    std::vector<IterationRecord> load_iterations() const {
        std::vector<IterationRecord> records;
        std::ifstream in(root_ / "iterations.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            records.push_back(iteration_from_json(nlohmann::json::parse(line)));
        }
        return records;
    }

    std::vector<TemplateInstruction> load_templates() const {
        std::vector<TemplateInstruction> templates;
        std::ifstream in(root_ / "templates.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            if (trim(line).empty()) continue;
            templates.push_back(template_from_json(nlohmann::json::parse(line)));
        }
        return templates;
    }

private:
    void append_line(const char* name, const std::string& line) const {
        if (!enabled()) return;
        std::ofstream out(root_ / name, std::ios::app);
        out << line << '\n';
    }

    std::filesystem::path root_;
};

namespace detail {

inline nlohmann::json run_report_json(const RunState& state,
                                      const std::vector<Impression>& validation) {
    nlohmann::json iterations = nlohmann::json::array();
    for (const auto& r : state.iterations) iterations.push_back(iteration_to_json(r));
    return nlohmann::json{{"config", state.config_snapshot},
                          {"validation_users", validation.size()},
                          {"best",
                           {{"iteration", state.best_iteration},
                            {"template_id", state.best_template.id},
                            {"objective", state.best_objective}}},
                          {"validation_best", report_to_json(state.best_report)},
                          {"iterations", iterations}};
}

} // namespace detail

/// The Monitor loop. Iteration 0 scores the initial template and seeds the
/// best record; each following iteration asks the optimizer for a refinement
/// of the current best template (illustrated with an exemplar user drawn from
/// the most recent evaluation), scores it on the validation impressions, and
/// accepts it only on strict objective improvement. A failed optimizer step
/// is recorded and skipped. With `resume` and a run directory holding
/// previous iterations, the loop continues after the last recorded iteration
/// instead of starting over (the last evaluated template is re-scored to
/// rebuild exemplar state; the call cache makes that free).
inline RunState tune(const std::vector<Impression>& validation, const Catalog& catalog,
                     const TemplateInstruction& initial, LlmGateway& gateway,
                     const TuneConfig& config, const RunDir& run_dir = RunDir(),
                     bool resume = false) {
    if (config.iteration_budget < 0) throw ConfigError("iteration budget must be >= 0");
    validate_weights(config.weights);
    if (validation.empty()) throw ValidationError("tuning requires validation impressions");

    run_dir.init();
    DetRng rng(config.seed);

    RunState state;
    state.iteration_budget = config.iteration_budget;
    state.config_snapshot = tune_config_to_json(config);

    EvaluationOutcome last_eval;
    int start_iteration;

    if (resume && run_dir.has_iterations()) {
        auto templates = run_dir.load_templates();
        std::unordered_map<std::string, const TemplateInstruction*> by_id;
        for (const auto& t : templates) by_id[t.id] = &t;

        state.iterations = run_dir.load_iterations();
        const TemplateInstruction* last_evaluated = nullptr;
        for (const auto& r : state.iterations) {
            if (r.template_id.empty()) continue;
            auto it = by_id.find(r.template_id);
            if (it == by_id.end())
                throw ConfigError("run directory is inconsistent: iteration " +
                                  std::to_string(r.iteration) + " references template '" +
                                  r.template_id + "' not present in templates.jsonl");
            last_evaluated = it->second;
            if (r.accepted) {
                state.best_template = *it->second;
                state.best_report = r.validation_report;
                state.best_objective = r.objective;
                state.best_iteration = r.iteration;
            }
        }
        if (last_evaluated == nullptr)
            throw ConfigError("run directory has no evaluated template to resume from");
        // Burn the same random draws the original iterations consumed so a
        // resumed run continues the sequence instead of restarting it.
        if (config.exemplar_policy == ExemplarPolicy::random)
            for (size_t i = 1; i < state.iterations.size(); ++i) rng.next();
        last_eval = evaluate_template(*last_evaluated, validation, catalog, gateway,
                                      config.recommender, config.eval_concurrency);
        start_iteration = static_cast<int>(state.iterations.size());
    } else {
        last_eval = evaluate_template(initial, validation, catalog, gateway, config.recommender,
                                      config.eval_concurrency);
        IterationRecord r0;
        r0.iteration = 0;
        r0.template_id = initial.id;
        r0.validation_report = last_eval.report;
        r0.objective = objective(last_eval.report, config.weights);
        r0.accepted = true; // by convention: first objective beats the empty record
        state.iterations.push_back(r0);
        state.best_template = initial;
        state.best_report = last_eval.report;
        state.best_objective = r0.objective;
        state.best_iteration = 0;
        run_dir.append_template(initial);
        run_dir.append_iteration(r0);
        run_dir.write_per_user(0, last_eval);
        start_iteration = 1;
    }

    for (int k = start_iteration; k <= config.iteration_budget; ++k) {
        size_t pick = select_exemplar(last_eval, config.exemplar_policy, rng);
        const EvaluatedUser& exemplar_user = last_eval.users[pick];

        OptimizationContext ctx;
        ctx.refinement_instruction = kRefinementInstruction;
        ctx.current_template = state.best_template;
        ctx.exemplar = make_exemplar(exemplar_user);
        ctx.best_template = state.best_template;
        ctx.observation_instruction = kObservationInstruction;

        IterationRecord r;
        r.iteration = k;
        r.exemplar_user_id = exemplar_user.rec.user_id;
        try {
            TemplateInstruction candidate = optimize_step(ctx, gateway, config.optimizer, k);
            EvaluationOutcome outcome =
                evaluate_template(candidate, validation, catalog, gateway, config.recommender,
                                  config.eval_concurrency);
            r.template_id = candidate.id;
            r.validation_report = outcome.report;
            r.objective = objective(outcome.report, config.weights);
            r.accepted = r.objective > state.best_objective;
            if (r.accepted) {
                state.best_template = candidate;
                state.best_report = outcome.report;
                state.best_objective = r.objective;
                state.best_iteration = k;
            }
            run_dir.append_template(candidate);
            run_dir.write_per_user(k, outcome);
            last_eval = std::move(outcome);
        } catch (const OptimizationStepError& e) {
            r.accepted = false;
            r.note = e.what();
        }
        state.iterations.push_back(r);
        run_dir.append_iteration(r);
    }

    run_dir.write_report(detail::run_report_json(state, validation));
    return state;
}

/// Result of scoring the best template on the held-out test impressions.
struct FinalTestResult {
    std::vector<MetricReport> runs;
    MetricReport mean;
    std::optional<std::array<double, 4>> sd; // auc, mrr, ndcg5, ndcg10; absent for 1 run
};

inline FinalTestResult final_test(const TemplateInstruction& best,
                                  const std::vector<Impression>& test_impressions,
                                  const Catalog& catalog, LlmGateway& gateway, int repeats,
                                  const RecommenderSettings& settings, int concurrency = 4) {
    if (repeats < 1) throw ConfigError("final test needs at least one repeat");
    FinalTestResult result;
    for (int i = 0; i < repeats; ++i) {
        auto outcome =
            evaluate_template(best, test_impressions, catalog, gateway, settings, concurrency);
        result.runs.push_back(outcome.report);
    }

    result.mean.n_users = result.runs.front().n_users;
    for (const auto& r : result.runs) {
        result.mean.auc += r.auc;
        result.mean.mrr += r.mrr;
        result.mean.ndcg5 += r.ndcg5;
        result.mean.ndcg10 += r.ndcg10;
    }
    double n = static_cast<double>(result.runs.size());
    result.mean.auc /= n;
    result.mean.mrr /= n;
    result.mean.ndcg5 /= n;
    result.mean.ndcg10 /= n;

    if (repeats > 1) {
        std::array<double, 4> ss{};
        for (const auto& r : result.runs) {
            ss[0] += (r.auc - result.mean.auc) * (r.auc - result.mean.auc);
            ss[1] += (r.mrr - result.mean.mrr) * (r.mrr - result.mean.mrr);
            ss[2] += (r.ndcg5 - result.mean.ndcg5) * (r.ndcg5 - result.mean.ndcg5);
            ss[3] += (r.ndcg10 - result.mean.ndcg10) * (r.ndcg10 - result.mean.ndcg10);
        }
        for (auto& v : ss) v = std::sqrt(v / (n - 1.0));
        result.sd = ss;
    }
    return result;
}

/// Sample standard deviation is reported (the upstream "±" convention is
/// ambiguous between sd and standard error; the label says which this is).
inline nlohmann::json final_test_to_json(const FinalTestResult& r) {
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& rep : r.runs) runs.push_back(report_to_json(rep));
    nlohmann::json j{{"repeats", r.runs.size()},
                     {"runs", runs},
                     {"mean", report_to_json(r.mean)},
                     {"deviation_kind", "sample standard deviation"}};
    if (r.sd) {
        j["sd"] = {{"auc", (*r.sd)[0]},
                   {"mrr", (*r.sd)[1]},
                   {"ndcg5", (*r.sd)[2]},
                   {"ndcg10", (*r.sd)[3]}};
    }
    return j;
}

} // namespace recprompt

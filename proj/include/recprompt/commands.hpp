#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "recprompt/baselines.hpp"
#include "recprompt/config.hpp"
#include "recprompt/corpus.hpp"
#include "recprompt/errors.hpp"
#include "recprompt/metrics.hpp"
#include "recprompt/mock_backend.hpp"
#include "recprompt/topicscore.hpp"
#include "recprompt/tuner.hpp"

namespace recprompt {

/// Builds the gateway for commands that talk to a model. Only these command
/// paths construct one; everything else stays off the network by
/// construction. Tests inject an instrumented transport here.
inline std::unique_ptr<LlmGateway> make_gateway(const RunConfig& cfg,
                                                std::shared_ptr<Transport> transport = nullptr) {
    auto gateway = std::make_unique<LlmGateway>(gateway_config(cfg), std::move(transport));
    if (backend_from_string(cfg.backend) == Backend::mock) gateway->set_mock(default_mock());
    return gateway;
}

inline CatalogParseResult load_catalog_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open news file " + path);
    return parse_news_catalog(in);
}

inline BehaviorParseResult load_behaviors_file(const std::string& path, const Catalog& catalog,
                                               const ExperimentProfile& profile) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open behaviors file " + path);
    return parse_behaviors(in, catalog, profile);
}

inline nlohmann::json load_json_file(const std::string& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("file not found: " + path);
    nlohmann::json j = nlohmann::json::parse(read_text_file(path), nullptr, false);
    if (j.is_discarded()) throw ConfigError(path + " is not valid JSON");
    return j;
}

inline EvaluationSplit resolve_split(const RunConfig& cfg, const std::string& split_path,
                                     const std::vector<Impression>& impressions) {
    if (!split_path.empty()) return split_from_manifest(load_json_file(split_path), impressions);
    return sample_split(impressions, cfg.seed, static_cast<size_t>(cfg.validation_users),
                        static_cast<size_t>(cfg.test_users),
                        static_cast<size_t>(cfg.min_history));
}

/// Resolves a template argument: "initial" (config strategy), "initial-io",
/// "initial-cot", "best:<run-dir>" (best accepted template of a recorded
/// run), or a path to a template JSON record.
inline TemplateInstruction resolve_template(const std::string& spec, const RunConfig& cfg) {
    if (spec.empty() || spec == "initial") return initial_template(strategy_from_config(cfg));
    if (spec == "initial-io") return initial_template(PromptStrategy::IO);
    if (spec == "initial-cot") return initial_template(PromptStrategy::CoT);
    if (spec.rfind("best:", 0) == 0) {
        RunDir dir(spec.substr(5));
        if (!dir.has_iterations())
            throw ConfigError("no recorded iterations under " + spec.substr(5));
        auto records = dir.load_iterations();
        auto templates = dir.load_templates();
        std::map<std::string, TemplateInstruction> by_id;
        for (auto& t : templates) by_id[t.id] = t;
        const IterationRecord* best = nullptr;
        for (const auto& r : records)
            if (r.accepted && !r.template_id.empty()) best = &r;
        if (best == nullptr)
            throw ConfigError("run under " + spec.substr(5) + " has no accepted template");
        auto it = by_id.find(best->template_id);
        if (it == by_id.end())
            throw ConfigError("template '" + best->template_id + "' missing from templates.jsonl");
        return it->second;
    }
    return template_from_json(load_json_file(spec));
}

inline std::vector<ExplanationRecord> load_explanations_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open explanations file " + path);
    std::vector<ExplanationRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        out.push_back(explanation_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

inline std::map<std::string, std::string> load_merge_map_file(const std::string& path) {
    if (path.empty()) return {};
    nlohmann::json j = load_json_file(path);
    if (!j.is_object())
        throw ConfigError("merge map " + path + " must be a JSON object of raw->canonical");
    std::map<std::string, std::string> out;
    for (const auto& [k, v] : j.items()) out[k] = v.get<std::string>();
    return out;
}

inline std::vector<TopicJudgment> load_judgments_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open judgments file " + path);
    std::vector<TopicJudgment> out;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        out.push_back(judgment_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

inline ConsolidationResult consolidation_for(const std::vector<ExplanationRecord>& explanations,
                                             const std::map<std::string, std::string>& merge_map) {
    std::vector<std::string> labels;
    for (const auto& rec : explanations)
        for (const auto& t : rec.topics) labels.push_back(t.label);
    return consolidate_topics(labels, merge_map);
}

// ---------------------------------------------------------------------------
// Commands. Each throws recprompt::Error subclasses; the CLI maps those to a
// single-line diagnostic and a nonzero exit code.
// ---------------------------------------------------------------------------

inline void cmd_ingest(const RunConfig& cfg, const std::string& news_path,
                       const std::string& behaviors_path, std::ostream& out) {
    auto catalog_result = load_catalog_file(news_path);
    out << "news: " << catalog_result.catalog.size() << " articles ("
        << catalog_result.duplicate_count << " duplicate ids dropped, "
        << catalog_result.issues.size() << " rejected lines)\n";
    for (const auto& issue : catalog_result.issues)
        out << "  news line " << issue.line << ": " << issue.message << "\n";

    nlohmann::json summary{{"news",
                            {{"articles", catalog_result.catalog.size()},
                             {"duplicates", catalog_result.duplicate_count},
                             {"rejected", catalog_result.issues.size()}}}};

    if (!behaviors_path.empty()) {
        auto behavior_result =
            load_behaviors_file(behaviors_path, catalog_result.catalog, profile_from_config(cfg));
        out << "behaviors: " << behavior_result.impressions.size() << " impressions kept, "
            << behavior_result.excluded_total() << " excluded ("
            << behavior_result.excluded_empty << " empty, " << behavior_result.excluded_no_positive
            << " without click, " << behavior_result.excluded_multi_positive
            << " with multiple clicks, " << behavior_result.excluded_candidate_count
            << " with off-profile candidate count), " << behavior_result.repairs.size()
            << " repairs, " << behavior_result.issues.size() << " rejected lines\n";
        for (const auto& issue : behavior_result.issues)
            out << "  behaviors line " << issue.line << ": " << issue.message << "\n";
        summary["behaviors"] = {{"impressions", behavior_result.impressions.size()},
                                {"excluded", behavior_result.excluded_total()},
                                {"repairs", behavior_result.repairs.size()},
                                {"rejected", behavior_result.issues.size()}};
    }

    if (!cfg.run_dir.empty()) {
        std::filesystem::create_directories(cfg.run_dir);
        write_text_file(std::filesystem::path(cfg.run_dir) / "ingest.json",
                        summary.dump(2) + "\n");
    }
}

inline void cmd_sample(const RunConfig& cfg, const std::string& news_path,
                       const std::string& behaviors_path, const std::string& out_path,
                       std::ostream& out) {
    auto catalog = load_catalog_file(news_path).catalog;
    auto impressions =
        load_behaviors_file(behaviors_path, catalog, profile_from_config(cfg)).impressions;
    auto split = sample_split(impressions, cfg.seed, static_cast<size_t>(cfg.validation_users),
                              static_cast<size_t>(cfg.test_users),
                              static_cast<size_t>(cfg.min_history));
    write_text_file(out_path, split_manifest(split).dump(2) + "\n");
    out << "sampled " << split.validation_users.size() << " validation + "
        << split.test_users.size() << " test users (seed " << cfg.seed << ") -> " << out_path
        << "\n";
}

inline RunState cmd_tune(const RunConfig& cfg, const std::string& news_path,
                         const std::string& behaviors_path, const std::string& split_path,
                         bool resume, std::ostream& out,
                         std::shared_ptr<Transport> transport = nullptr) {
    auto catalog = load_catalog_file(news_path).catalog;
    auto impressions =
        load_behaviors_file(behaviors_path, catalog, profile_from_config(cfg)).impressions;
    auto split = resolve_split(cfg, split_path, impressions);

    auto gateway = make_gateway(cfg, std::move(transport));
    TemplateInstruction initial = initial_template(strategy_from_config(cfg));
    RunDir run_dir{cfg.run_dir.empty() ? std::filesystem::path() : std::filesystem::path(cfg.run_dir)};

    RunState state = tune(split.validation_users, catalog, initial, *gateway, tune_config(cfg),
                          run_dir, resume);

    out << "iter  objective  accepted  exemplar\n";
    for (const auto& r : state.iterations) {
        char row[160];
        std::snprintf(row, sizeof(row), "%4d  %9.5f  %-8s  %s", r.iteration, r.objective,
                      r.iteration == 0 ? "-" : (r.accepted ? "true" : "false"),
                      r.exemplar_user_id.empty() ? "-" : r.exemplar_user_id.c_str());
        out << row;
        if (!r.note.empty()) out << "  [" << r.note << "]";
        out << "\n";
    }
    out << "best: iteration " << state.best_iteration << ", objective " << state.best_objective
        << ", template " << state.best_template.id << "\n";
    out << report_table_header() << "\n"
        << format_report_row("validation-best", state.best_report) << "\n";
    return state;
}

inline FinalTestResult cmd_evaluate(const RunConfig& cfg, const std::string& news_path,
                                    const std::string& behaviors_path,
                                    const std::string& split_path, const std::string& which,
                                    const std::string& template_spec, std::ostream& out,
                                    std::shared_ptr<Transport> transport = nullptr) {
    if (which != "test" && which != "validation")
        throw ConfigError("unknown split '" + which + "' (expected test or validation)");
    auto catalog = load_catalog_file(news_path).catalog;
    auto impressions =
        load_behaviors_file(behaviors_path, catalog, profile_from_config(cfg)).impressions;
    auto split = resolve_split(cfg, split_path, impressions);
    const auto& target = which == "validation" ? split.validation_users : split.test_users;
    if (target.empty()) throw SizingError("the " + which + " split is empty");

    TemplateInstruction tpl = resolve_template(template_spec, cfg);
    auto gateway = make_gateway(cfg, std::move(transport));
    FinalTestResult result = final_test(tpl, target, catalog, *gateway, cfg.repeats,
                                        recommender_settings(cfg), cfg.eval_concurrency);

    out << report_table_header() << "\n";
    for (size_t i = 0; i < result.runs.size(); ++i)
        out << format_report_row("run " + std::to_string(i + 1), result.runs[i]) << "\n";
    out << format_report_row("mean", result.mean) << "\n";
    if (result.sd) {
        char row[160];
        std::snprintf(row, sizeof(row), "%-16s %8s %8s %8s %8s", "sd (sample)",
                      format_pct((*result.sd)[0]).c_str(), format_pct((*result.sd)[1]).c_str(),
                      format_pct((*result.sd)[2]).c_str(), format_pct((*result.sd)[3]).c_str());
        out << row << "\n";
    }

    if (!cfg.run_dir.empty()) {
        std::filesystem::create_directories(cfg.run_dir);
        nlohmann::json artifact{{"template_id", tpl.id},
                                {"split", which},
                                {"users", target.size()},
                                {"result", final_test_to_json(result)}};
        write_text_file(std::filesystem::path(cfg.run_dir) / "evaluation.json",
                        artifact.dump(2) + "\n");

        // One extra pass (served from cache) to persist per-user outputs and
        // topic explanations for downstream explanation scoring.
        auto outcome = evaluate_template(tpl, target, catalog, *gateway,
                                         recommender_settings(cfg), cfg.eval_concurrency);
        std::ofstream per_user(std::filesystem::path(cfg.run_dir) / "per_user_eval.jsonl",
                               std::ios::trunc);
        std::ofstream explanations(std::filesystem::path(cfg.run_dir) / "explanations.jsonl",
                                   std::ios::trunc);
        for (const auto& u : outcome.users) {
            nlohmann::json j = recommendation_to_json(u.rec);
            j["rank_of_click"] = u.rank_of_click;
            per_user << j.dump() << '\n';
            explanations << explanation_to_json(explanation_from_recommendation(u.rec)).dump()
                         << '\n';
        }
    }
    return result;
}

inline MetricReport cmd_baseline(const RunConfig& cfg, const std::string& news_path,
                                 const std::string& behaviors_path, const std::string& split_path,
                                 const std::string& which, const std::string& which_split,
                                 std::ostream& out) {
    if (which != "random" && which != "mostpop" && which != "topicpop")
        throw ConfigError("unknown baseline '" + which +
                          "' (expected random, mostpop, or topicpop)");
    if (which_split != "test" && which_split != "validation")
        throw ConfigError("unknown split '" + which_split + "' (expected test or validation)");

    auto catalog = load_catalog_file(news_path).catalog;
    auto impressions =
        load_behaviors_file(behaviors_path, catalog, profile_from_config(cfg)).impressions;
    auto split = resolve_split(cfg, split_path, impressions);
    const auto& target = which_split == "validation" ? split.validation_users : split.test_users;
    if (target.empty()) throw SizingError("the " + which_split + " split is empty");

    // Popularity counts cover every parsed impression; a production setup
    // would count a separate training period, which this corpus lacks.
    PopularityTable table = build_popularity(impressions, catalog);

    std::ofstream per_user;
    if (!cfg.run_dir.empty()) {
        std::filesystem::create_directories(cfg.run_dir);
        per_user.open(std::filesystem::path(cfg.run_dir) / ("baseline_" + which + ".jsonl"),
                      std::ios::trunc);
    }

    std::vector<PerUserMetrics> users;
    for (const auto& imp : target) {
        std::vector<int> perm;
        if (which == "random")
            perm = random_rank(static_cast<int>(imp.candidates.size()),
                               fnv1a64(imp.user_id) ^ cfg.seed);
        else if (which == "mostpop")
            perm = mostpop_rank(imp.candidates, table);
        else
            perm = topicpop_rank(imp.candidates, table, catalog);

        std::vector<int> labels;
        labels.reserve(imp.candidates.size());
        for (const auto& c : imp.candidates) labels.push_back(c.label);
        int rank = rank_of_click(perm, labels);
        users.push_back(
            PerUserMetrics{imp.user_id, rank,
                           user_metrics(rank, static_cast<int>(imp.candidates.size()))});
        if (per_user.is_open()) {
            per_user << nlohmann::json{{"user_id", imp.user_id},
                                       {"impression_id", imp.impression_id},
                                       {"ranking", perm},
                                       {"rank_of_click", rank}}
                            .dump()
                     << '\n';
        }
    }
    MetricReport report = aggregate(users, false);
    out << report_table_header() << "\n" << format_report_row(which, report) << "\n";
    return report;
}

inline JudgeRunResult cmd_topicscore_judge(const RunConfig& cfg,
                                           const std::string& explanations_path,
                                           const std::string& news_path,
                                           const std::string& merge_path,
                                           const std::string& out_path, std::ostream& out,
                                           std::shared_ptr<Transport> transport = nullptr) {
    auto catalog = load_catalog_file(news_path).catalog;
    auto explanations = load_explanations_file(explanations_path);
    auto consolidation = consolidation_for(explanations, load_merge_map_file(merge_path));

    auto gateway = make_gateway(cfg, std::move(transport));
    JudgeRunResult result =
        llm_judge_all(explanations, consolidation, catalog, *gateway, judge_settings(cfg));

    std::ofstream sink(out_path, std::ios::trunc);
    if (!sink) throw ConfigError("cannot write judgments to " + out_path);
    for (const auto& j : result.judgments) sink << judgment_to_json(j).dump() << '\n';

    out << "judged " << result.judgments.size() << " (topic, article) pairs -> " << out_path
        << "\n";
    if (!result.unjudged.empty()) {
        out << result.unjudged.size() << " pairs could not be judged:\n";
        for (const auto& [label, news_id] : result.unjudged)
            out << "  '" << label << "' on " << news_id << "\n";
    }
    return result;
}

inline std::vector<TopicJudgment> cmd_topicscore_annotate(
    const std::string& explanations_path, const std::string& news_path,
    const std::string& merge_path, const std::string& annotator_id,
    const std::string& progress_path, std::istream& in, std::ostream& out) {
    auto catalog = load_catalog_file(news_path).catalog;
    auto explanations = load_explanations_file(explanations_path);
    auto consolidation = consolidation_for(explanations, load_merge_map_file(merge_path));
    auto items = annotation_items(explanations, consolidation, catalog);
    return annotation_session(items, annotator_id, in, out, progress_path);
}

inline std::vector<JudgeScore> cmd_topicscore_report(const std::string& explanations_path,
                                                     const std::string& merge_path,
                                                     const std::vector<std::string>& judgment_paths,
                                                     bool human_average,
                                                     const std::string& out_path,
                                                     std::ostream& out) {
    auto explanations = load_explanations_file(explanations_path);
    auto consolidation = consolidation_for(explanations, load_merge_map_file(merge_path));

    std::map<std::string, std::vector<TopicJudgment>> grouped;
    for (const auto& path : judgment_paths)
        for (auto& j : load_judgments_file(path)) grouped[j.judge].push_back(std::move(j));

    std::map<std::string, JudgmentSet> judges;
    std::vector<std::vector<TopicJudgment>> human_lists;
    for (const auto& [name, list] : grouped) {
        judges.emplace(name, judgment_set(list));
        if (name.rfind("human:", 0) == 0) human_lists.push_back(list);
    }
    if (human_average && !human_lists.empty())
        judges.emplace("human:average", average_judgments(human_lists));

    auto scores = topicscore_report(judges, explanations, consolidation);

    char header[160];
    std::snprintf(header, sizeof(header), "%-24s %12s %13s %9s", "Judge", "Correctness",
                  "Completeness", "Coverage");
    out << header << "\n";
    for (const auto& s : scores) {
        char row[160];
        std::snprintf(row, sizeof(row), "%-24s %12.4f %13.4f %9.4f", s.judge.c_str(),
                      s.correctness, s.completeness, s.coverage);
        out << row << "\n";
    }

    if (!out_path.empty()) {
        nlohmann::json payload{{"judges", nlohmann::json::array()}};
        for (const auto& s : scores) payload["judges"].push_back(judge_score_to_json(s));
        write_text_file(out_path, payload.dump(2) + "\n");
        out << "wrote " << out_path << "\n";
    }
    return scores;
}

inline void cmd_cache_stats(const std::string& cache_path, std::ostream& out) {
    std::ifstream in(cache_path);
    if (!in) throw ConfigError("cannot open cache file " + cache_path);
    size_t entries = 0;
    std::map<std::string, size_t> by_model;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        ++entries;
        ++by_model[j.value("model", "unknown")];
    }
    out << nlohmann::json{{"path", cache_path}, {"entries", entries}, {"by_model", by_model}}
               .dump(2)
        << "\n";
}

inline void cmd_cache_export(const std::string& cache_path, const std::string& out_path,
                             std::ostream& out) {
    std::ifstream in(cache_path);
    if (!in) throw ConfigError("cannot open cache file " + cache_path);
    nlohmann::json entries = nlohmann::json::array();
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (!j.is_discarded()) entries.push_back(std::move(j));
    }
    std::string text = entries.dump(2) + "\n";
    if (out_path.empty())
        out << text;
    else {
        write_text_file(out_path, text);
        out << "exported " << entries.size() << " entries -> " << out_path << "\n";
    }
}

} // namespace recprompt

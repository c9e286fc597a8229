// Command-line front end. Every subcommand resolves its settings as
// flags > config file > built-in defaults, then delegates to the command
// functions in recprompt/commands.hpp. Failures print a single-line
// diagnostic and exit nonzero.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "recprompt/commands.hpp"

namespace {

// Mutable flag storage plus the CLI11 option handles needed to tell "flag
// was given" apart from "flag left at its default".
struct FlagBag {
    recprompt::RunConfig values;
    std::string config_path;
    std::vector<std::pair<CLI::Option*, std::function<void(recprompt::RunConfig&)>>> overlays;

    template <typename T>
    void bind(CLI::App* cmd, const std::string& name, T& slot, T recprompt::RunConfig::*member,
              const std::string& help) {
        CLI::Option* opt = cmd->add_option(name, slot, help);
        overlays.emplace_back(opt, [&slot, member](recprompt::RunConfig& cfg) {
            cfg.*member = slot;
        });
    }

    // Final precedence: defaults, then config file, then explicit flags.
    recprompt::RunConfig resolve() const {
        recprompt::RunConfig cfg;
        if (!config_path.empty()) recprompt::apply_config_file(cfg, config_path);
        for (const auto& [opt, apply] : overlays)
            if (opt->count() > 0) apply(cfg);
        recprompt::validate_config(cfg);
        return cfg;
    }
};

void add_config_options(CLI::App* cmd, FlagBag& bag) {
    cmd->add_option("--config", bag.config_path, "JSON config file (flags override it)");
    auto& v = bag.values;
    bag.bind(cmd, "--backend", v.backend, &recprompt::RunConfig::backend,
             "live, mock, or replay");
    bag.bind(cmd, "--base-url", v.base_url, &recprompt::RunConfig::base_url,
             "API base URL for the live backend");
    bag.bind(cmd, "--cache", v.cache_path, &recprompt::RunConfig::cache_path,
             "response cache file (JSONL)");
    bag.bind(cmd, "--run-dir", v.run_dir, &recprompt::RunConfig::run_dir,
             "directory for run artifacts");
    bag.bind(cmd, "--strategy", v.strategy, &recprompt::RunConfig::strategy,
             "initial template style: IO or CoT");
    bag.bind(cmd, "--profile", v.profile, &recprompt::RunConfig::profile,
             "impression filter: strict (10 candidates, 1 click) or none");
    bag.bind(cmd, "--recommender-model", v.recommender_model,
             &recprompt::RunConfig::recommender_model, "model for ranking requests");
    bag.bind(cmd, "--optimizer-model", v.optimizer_model, &recprompt::RunConfig::optimizer_model,
             "model for template refinement");
    bag.bind(cmd, "--evaluator-model", v.evaluator_model, &recprompt::RunConfig::evaluator_model,
             "model for topic judging");
    bag.bind(cmd, "--recommender-temperature", v.recommender_temperature,
             &recprompt::RunConfig::recommender_temperature, "sampling temperature, ranking");
    bag.bind(cmd, "--optimizer-temperature", v.optimizer_temperature,
             &recprompt::RunConfig::optimizer_temperature, "sampling temperature, refinement");
    bag.bind(cmd, "--evaluator-temperature", v.evaluator_temperature,
             &recprompt::RunConfig::evaluator_temperature, "sampling temperature, judging");
    bag.bind(cmd, "--max-tokens", v.max_tokens, &recprompt::RunConfig::max_tokens,
             "completion token cap");
    bag.bind(cmd, "--l,--iterations", v.iteration_budget, &recprompt::RunConfig::iteration_budget,
             "tuning iteration budget");
    bag.bind(cmd, "--exemplar-policy", v.exemplar_policy, &recprompt::RunConfig::exemplar_policy,
             "worst, random, or first-failure");
    bag.bind(cmd, "--validation-users", v.validation_users,
             &recprompt::RunConfig::validation_users, "validation split size");
    bag.bind(cmd, "--test-users", v.test_users, &recprompt::RunConfig::test_users,
             "test split size");
    bag.bind(cmd, "--seed", v.seed, &recprompt::RunConfig::seed, "split/permutation seed");
    bag.bind(cmd, "--min-history", v.min_history, &recprompt::RunConfig::min_history,
             "minimum history length for split eligibility");
    bag.bind(cmd, "--history-limit", v.history_limit, &recprompt::RunConfig::history_limit,
             "most-recent history items rendered into prompts");
    bag.bind(cmd, "--repeats", v.repeats, &recprompt::RunConfig::repeats,
             "evaluation repeats for mean and sd");
    bag.bind(cmd, "--rate-limit", v.rate_limit_per_min, &recprompt::RunConfig::rate_limit_per_min,
             "live requests per minute");
    bag.bind(cmd, "--max-inflight", v.max_inflight, &recprompt::RunConfig::max_inflight,
             "live concurrent request cap");
    bag.bind(cmd, "--concurrency", v.eval_concurrency, &recprompt::RunConfig::eval_concurrency,
             "evaluation worker threads");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Self-tuning LLM news recommendation pipeline"};
    app.require_subcommand(1);

    FlagBag bag;
    std::string news_path, behaviors_path, split_path;
    std::string sample_out = "split.json", report_out, export_out;
    std::string which = "test", baseline = "topicpop", template_spec = "initial";
    std::string explanations_path, merge_path, annotator, progress_path = "annotations.jsonl";
    std::string judgments_out = "judgments.jsonl";
    std::vector<std::string> judgment_paths;
    bool resume = false, human_average = false;

    auto* ingest = app.add_subcommand("ingest", "Parse news/behaviors files and report stats");
    ingest->add_option("--news", news_path, "news.tsv path")->required();
    ingest->add_option("--behaviors", behaviors_path, "behaviors.tsv path");
    add_config_options(ingest, bag);

    auto* sample = app.add_subcommand("sample", "Draw the validation/test user split");
    sample->add_option("--news", news_path)->required();
    sample->add_option("--behaviors", behaviors_path)->required();
    sample->add_option("--out", sample_out, "split manifest path")->capture_default_str();
    add_config_options(sample, bag);

    auto* tune = app.add_subcommand("tune", "Run the template tuning loop");
    tune->add_option("--news", news_path)->required();
    tune->add_option("--behaviors", behaviors_path)->required();
    tune->add_option("--split", split_path, "split manifest (sampled fresh when omitted)");
    tune->add_flag("--resume", resume, "continue a partially recorded run");
    add_config_options(tune, bag);

    auto* evaluate = app.add_subcommand("evaluate", "Score a template on a user split");
    evaluate->add_option("--news", news_path)->required();
    evaluate->add_option("--behaviors", behaviors_path)->required();
    evaluate->add_option("--split", split_path);
    evaluate->add_option("--on", which, "test or validation")->capture_default_str();
    evaluate->add_option("--template", template_spec,
                         "initial | initial-io | initial-cot | best:<run-dir> | <file.json>");
    add_config_options(evaluate, bag);

    auto* baseline_cmd = app.add_subcommand("baseline", "Score a non-LLM ranker");
    baseline_cmd->add_option("--news", news_path)->required();
    baseline_cmd->add_option("--behaviors", behaviors_path)->required();
    baseline_cmd->add_option("--split", split_path);
    baseline_cmd->add_option("--which", baseline, "random, mostpop, or topicpop")->required();
    baseline_cmd->add_option("--on", which)->capture_default_str();
    add_config_options(baseline_cmd, bag);

    auto* topicscore = app.add_subcommand("topicscore", "Explanation-quality scoring");
    topicscore->require_subcommand(1);

    auto* judge = topicscore->add_subcommand("judge", "Judge topics with the evaluator model");
    judge->add_option("--explanations", explanations_path)->required();
    judge->add_option("--news", news_path)->required();
    judge->add_option("--merge", merge_path, "topic merge map (JSON object)");
    judge->add_option("--out", judgments_out)->capture_default_str();
    add_config_options(judge, bag);

    auto* annotate = topicscore->add_subcommand("annotate", "Annotate topics interactively");
    annotate->add_option("--explanations", explanations_path)->required();
    annotate->add_option("--news", news_path)->required();
    annotate->add_option("--merge", merge_path);
    annotate->add_option("--annotator", annotator, "annotator id")->required();
    annotate->add_option("--progress", progress_path, "resumable judgment log")
        ->capture_default_str();

    auto* report = topicscore->add_subcommand("report", "Correctness/completeness per judge");
    report->add_option("--explanations", explanations_path)->required();
    report->add_option("--merge", merge_path);
    report->add_option("--judgments", judgment_paths, "judgment JSONL files")->required();
    report->add_flag("--human-average", human_average, "add an averaged human judge");
    report->add_option("--out", report_out, "plot payload JSON path");

    auto* cache = app.add_subcommand("cache", "Inspect the response cache");
    cache->require_subcommand(1);
    std::string cache_file;
    auto* stats = cache->add_subcommand("stats", "Entry counts by model");
    stats->add_option("--cache", cache_file)->required();
    auto* cache_export = cache->add_subcommand("export", "Dump entries as a JSON array");
    cache_export->add_option("--cache", cache_file)->required();
    cache_export->add_option("--out", export_out, "output path (stdout when omitted)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*ingest) {
            recprompt::cmd_ingest(bag.resolve(), news_path, behaviors_path, std::cout);
        } else if (*sample) {
            recprompt::cmd_sample(bag.resolve(), news_path, behaviors_path, sample_out,
                                  std::cout);
        } else if (*tune) {
            recprompt::cmd_tune(bag.resolve(), news_path, behaviors_path, split_path, resume,
                                std::cout);
        } else if (*evaluate) {
            recprompt::cmd_evaluate(bag.resolve(), news_path, behaviors_path, split_path, which,
                                    template_spec, std::cout);
        } else if (*baseline_cmd) {
            recprompt::cmd_baseline(bag.resolve(), news_path, behaviors_path, split_path, baseline,
                                    which, std::cout);
        } else if (*judge) {
            recprompt::cmd_topicscore_judge(bag.resolve(), explanations_path, news_path,
                                            merge_path, judgments_out, std::cout);
        } else if (*annotate) {
            recprompt::cmd_topicscore_annotate(explanations_path, news_path, merge_path, annotator,
                                               progress_path, std::cin, std::cout);
        } else if (*report) {
            recprompt::cmd_topicscore_report(explanations_path, merge_path, judgment_paths,
                                             human_average, report_out, std::cout);
        } else if (*stats) {
            recprompt::cmd_cache_stats(cache_file, std::cout);
        } else if (*cache_export) {
            recprompt::cmd_cache_export(cache_file, export_out, std::cout);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

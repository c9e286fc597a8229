#include <doctest.h>

#include <recprompt/baselines.hpp>
#include <recprompt/commands.hpp>
#include <recprompt/config.hpp>
#include <recprompt/optimizer.hpp>
#include <recprompt/tuner.hpp>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

using namespace recprompt;

namespace {

// A catalog of 12 candidate articles plus one history article, and a single
// impression whose clicked candidate is C1. With an AUC-only objective the
// validation score is a pure function of where C1 lands: auc = (12 - r) / 11.
struct ScriptedWorld {
    Catalog catalog;
    std::vector<Impression> validation;

    explicit ScriptedWorld(int n_users = 1) {
        std::string tsv = "H1\thome\thome\tThe history article\n";
        for (int i = 1; i <= 12; ++i)
            tsv += "N" + std::to_string(i) + "\tcat" + std::to_string(i) + "\tsub\tCandidate story " +
                   std::to_string(i) + "\n";
        catalog = parse_news_catalog(tsv).catalog;

        for (int u = 1; u <= n_users; ++u) {
            Impression imp;
            imp.impression_id = std::to_string(u);
            imp.user_id = "U" + std::to_string(u);
            imp.history = {"H1"};
            for (int i = 1; i <= 12; ++i)
                imp.candidates.push_back({"N" + std::to_string(i), i == 1 ? 1 : 0});
            validation.push_back(imp);
        }
    }
};

// Reads the "RANK=<r>" tag a scripted template carries and answers with the
// permutation that puts C1 exactly at position r.
std::string scripted_recommender_answer(const std::string& prompt, int n) {
    size_t pos = prompt.find("RANK=");
    if (pos == std::string::npos) throw std::logic_error("scripted prompt lacks a RANK tag");
    int rank = std::stoi(prompt.substr(pos + 5));
    std::string answer = "<START>";
    int next_other = 2;
    for (int slot = 1; slot <= n; ++slot) {
        if (slot > 1) answer += ", ";
        if (slot == rank)
            answer += "C1";
        else
            answer += "C" + std::to_string(next_other++);
    }
    answer += "<END>";
    return answer;
}

std::string rank_template_text(int rank) {
    return "Rank them (RANK=" + std::to_string(rank) + ") using ${history} and ${candidate}.";
}

// Optimizer that walks a fixed RANK sequence; recommender obeys the RANK tag.
MockFn scripted_mock(std::vector<int> sequence,
                     std::shared_ptr<std::atomic<int>> optimizer_calls,
                     std::shared_ptr<std::vector<std::string>> optimizer_prompts = nullptr) {
    return [=](const ChatRequest& req) -> std::string {
        if (req.role_tag == RoleTag::optimizer) {
            if (optimizer_prompts) optimizer_prompts->push_back(req.messages.back().content);
            int k = (*optimizer_calls)++;
            int rank = sequence[static_cast<size_t>(k) % sequence.size()];
            return std::string(kTemplateStartMarker) + "\n" + rank_template_text(rank) + "\n" +
                   kTemplateEndMarker;
        }
        return scripted_recommender_answer(req.messages.back().content, 12);
    };
}

TuneConfig auc_only_config(int budget) {
    TuneConfig config;
    config.iteration_budget = budget;
    config.weights = {1.0, 0.0, 0.0, 0.0};
    config.eval_concurrency = 1;
    return config;
}

std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("recprompt-test-" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Impression make_impression(const std::string& user, const std::vector<std::string>& history,
                           const std::vector<std::string>& candidates, size_t clicked) {
    Impression imp;
    imp.impression_id = user + "-imp";
    imp.user_id = user;
    imp.history = history;
    for (size_t i = 0; i < candidates.size(); ++i)
        imp.candidates.push_back({candidates[i], i == clicked ? 1 : 0});
    return imp;
}

} // namespace

TEST_CASE("the objective is a normalized weighted metric mix") {
    MetricReport r;
    r.auc = 0.8;
    r.mrr = 0.5;
    r.ndcg5 = 0.6;
    r.ndcg10 = 0.7;
    CHECK(objective(r) == doctest::Approx((0.5 + 0.6) / 2)); // default: mrr + ndcg5
    CHECK(objective(r, {1, 0, 0, 0}) == doctest::Approx(0.8));
    CHECK(objective(r, {1, 1, 1, 1}) == doctest::Approx((0.8 + 0.5 + 0.6 + 0.7) / 4));
    CHECK(objective(r, {3, 0, 0, 1}) == doctest::Approx((3 * 0.8 + 0.7) / 4));

    CHECK_THROWS_AS(validate_weights({0, 0, 0, 0}), ConfigError);
    CHECK_THROWS_AS(validate_weights({-1, 1, 0, 0}), ConfigError);
    CHECK_NOTHROW(validate_weights({0, 1, 1, 0}));
}

TEST_CASE("exemplar selection follows the policy and breaks ties by user id") {
    EvaluationOutcome outcome;
    auto add = [&](const std::string& user, int rank) {
        EvaluatedUser u;
        u.rec.user_id = user;
        u.rank_of_click = rank;
        u.n_candidates = 10;
        outcome.users.push_back(u);
    };
    add("U3", 4);
    add("U1", 9);
    add("U2", 9);
    add("U4", 1);

    DetRng rng(1);
    // Worst click rank 9 is shared by U1 and U2; the smaller id wins.
    CHECK(select_exemplar(outcome, ExemplarPolicy::worst, rng) == 1);
    CHECK(select_exemplar(outcome, ExemplarPolicy::best, rng) == 3);

    // The random policy draws reproducibly from the seeded generator.
    DetRng rng_a(7), rng_b(7);
    CHECK(select_exemplar(outcome, ExemplarPolicy::random, rng_a) ==
          select_exemplar(outcome, ExemplarPolicy::random, rng_b));

    EvaluationOutcome empty;
    CHECK_THROWS_AS(select_exemplar(empty, ExemplarPolicy::worst, rng), ValidationError);
}

TEST_CASE("exemplar policies parse and print consistently") {
    for (const char* name : {"worst", "random", "best"})
        CHECK(std::string(exemplar_policy_name(exemplar_policy_from_string(name))) == name);
    CHECK_THROWS_AS(exemplar_policy_from_string("median"), ConfigError);
}

TEST_CASE("an optimization step retries with a corrective message") {
    OptimizationContext ctx;
    ctx.current_template = make_template("cur ${history} ${candidate}", "cur", "t");
    ctx.best_template = ctx.current_template;
    ctx.exemplar.rendered_prompt = "prompt";
    ctx.exemplar.raw_answer = "answer";
    ctx.exemplar.clicked_index = 2;
    ctx.exemplar.n_candidates = 4;

    LlmGateway gateway(GatewayConfig{});
    auto seen = std::make_shared<std::vector<ChatRequest>>();
    gateway.set_mock([seen](const ChatRequest& req) -> std::string {
        seen->push_back(req);
        if (seen->size() == 1) return "I refuse to use markers.";
        return std::string("<START_TEMPLATE>better ${history} ${candidate}<END_TEMPLATE>");
    });

    OptimizerSettings settings;
    TemplateInstruction result = optimize_step(ctx, gateway, settings, 7);
    CHECK(result.id == "optimizer-iter-7");
    CHECK(result.provenance == "optimizer@iteration-7");
    CHECK(result.text == "better ${history} ${candidate}");

    REQUIRE(seen->size() == 2);
    CHECK((*seen)[0].messages.size() == 1);
    // The retry continues the same conversation: failed answer + correction.
    REQUIRE((*seen)[1].messages.size() == 3);
    CHECK((*seen)[1].messages[1].role == MessageRole::assistant);
    CHECK((*seen)[1].messages[1].content == "I refuse to use markers.");
    CHECK((*seen)[1].messages[2].content == std::string(kCorrectiveMessage));
}

TEST_CASE("a hopeless optimizer surfaces every raw output") {
    OptimizationContext ctx;
    ctx.current_template = make_template("cur ${history} ${candidate}", "cur", "t");
    ctx.best_template = ctx.current_template;
    ctx.exemplar.rendered_prompt = "p";
    ctx.exemplar.raw_answer = "a";
    ctx.exemplar.clicked_index = 1;
    ctx.exemplar.n_candidates = 2;

    LlmGateway gateway(GatewayConfig{});
    gateway.set_mock([](const ChatRequest& req) {
        return "garbage #" + std::to_string(req.messages.size());
    });

    OptimizerSettings settings;
    settings.max_attempts = 3;
    try {
        optimize_step(ctx, gateway, settings, 1);
        FAIL("expected OptimizationStepError");
    } catch (const OptimizationStepError& e) {
        CHECK(std::string(e.what()).find("optimizer produced no valid template in 3 attempts") !=
              std::string::npos);
        REQUIRE(e.raw_outputs().size() == 3);
        CHECK(e.raw_outputs()[0] == "garbage #1");
        CHECK(e.raw_outputs()[2] == "garbage #5"); // conversation grew by 2 per retry
    }
}

TEST_CASE("template evaluation scores every impression and tolerates parse failures") {
    ScriptedWorld world;
    // Three users with distinct candidate windows (the perfect mock keys its
    // answers on the candidate titles), different clicked index each.
    std::vector<Impression> impressions;
    auto window = [](int first) {
        std::vector<std::string> ids;
        for (int i = first; i < first + 10; ++i) ids.push_back("N" + std::to_string(i));
        return ids;
    };
    impressions.push_back(make_impression("U1", {"H1"}, window(1), 0));
    impressions.push_back(make_impression("U2", {"H1"}, window(2), 3));
    impressions.push_back(make_impression("U3", {"H1"}, window(3), 7));

    GatewayConfig cfg;
    LlmGateway gateway(cfg);
    gateway.set_mock(make_perfect_mock(impressions, world.catalog));

    TemplateInstruction tpl = initial_template(PromptStrategy::IO);
    RecommenderSettings settings;
    EvaluationOutcome outcome =
        evaluate_template(tpl, impressions, world.catalog, gateway, settings, 1);
    CHECK(outcome.report.auc == 1.0);
    CHECK(outcome.report.mrr == 1.0);
    CHECK(outcome.report.ndcg5 == 1.0);
    CHECK(outcome.report.ndcg10 == 1.0);
    CHECK(outcome.failed_parses == 0);
    REQUIRE(outcome.users.size() == 3);
    CHECK(outcome.users[1].clicked_index == 4);
    CHECK(outcome.users[1].rank_of_click == 1);

    // Concurrency must not change the outcome, only the schedule.
    EvaluationOutcome wide = evaluate_template(tpl, impressions, world.catalog, gateway,
                                               settings, 4);
    CHECK(report_to_json(wide.report, true).dump() ==
          report_to_json(outcome.report, true).dump());

    CHECK_THROWS_AS(evaluate_template(tpl, {}, world.catalog, gateway, settings), ValidationError);
}

TEST_CASE("unparseable answers are scored at worst-case rank") {
    ScriptedWorld world;
    GatewayConfig cfg;
    LlmGateway gateway(cfg);
    auto calls = std::make_shared<std::atomic<int>>(0);
    gateway.set_mock([calls](const ChatRequest&) {
        ++*calls;
        return "no ranking markers anywhere";
    });

    RecommenderSettings settings;
    settings.max_parse_attempts = 3;
    EvaluationOutcome outcome = evaluate_template(initial_template(PromptStrategy::IO),
                                                  world.validation, world.catalog, gateway,
                                                  settings, 1);
    CHECK(outcome.failed_parses == 1);
    CHECK(outcome.users[0].rank_of_click == 12);
    CHECK(outcome.users[0].metrics.auc == 0.0);
    CHECK(*calls == 3); // the parse failure was re-asked up to the attempt limit
}

TEST_CASE("the tuning loop accepts only strict objective improvements") {
    ScriptedWorld world;
    // Objective trace: 0.8(initial) | 0.6 reject, 0.9 accept, 0.7 reject.
    auto optimizer_calls = std::make_shared<std::atomic<int>>(0);
    auto prompts = std::make_shared<std::vector<std::string>>();
    GatewayConfig cfg;
    LlmGateway gateway(cfg);
    gateway.set_mock(scripted_mock({5, 2, 4}, optimizer_calls, prompts));

    TemplateInstruction initial =
        make_template(rank_template_text(3), "initial-IO", "initial-IO");
    RunState state = tune(world.validation, world.catalog, initial, gateway,
                          auc_only_config(3));

    REQUIRE(state.iterations.size() == 4);
    CHECK(state.iterations[0].accepted);
    CHECK(state.iterations[0].objective == doctest::Approx(9.0 / 11)); // RANK=3 of 12
    CHECK(state.iterations[0].exemplar_user_id.empty());
    CHECK(state.iterations[0].template_id == "initial-IO");

    CHECK_FALSE(state.iterations[1].accepted);
    CHECK(state.iterations[1].objective == doctest::Approx(7.0 / 11));
    CHECK(state.iterations[1].template_id == "optimizer-iter-1");
    CHECK(state.iterations[1].exemplar_user_id == "U1");

    CHECK(state.iterations[2].accepted);
    CHECK(state.iterations[2].objective == doctest::Approx(10.0 / 11));
    CHECK_FALSE(state.iterations[3].accepted);

    CHECK(state.best_iteration == 2);
    CHECK(state.best_objective == doctest::Approx(10.0 / 11));
    CHECK(state.best_template.id == "optimizer-iter-2");
    CHECK(*optimizer_calls == 3);

    // Every optimizer prompt refines the best template known at that point:
    // the initial one for iterations 1 and 2, then the iteration-2 winner.
    REQUIRE(prompts->size() == 3);
    CHECK((*prompts)[0].find("RANK=3") != std::string::npos);
    CHECK((*prompts)[1].find("RANK=3") != std::string::npos);
    CHECK((*prompts)[2].find("RANK=2") != std::string::npos);
    // The current and best sections agree by construction.
    size_t cur = (*prompts)[2].find("# Current Template");
    size_t best = (*prompts)[2].find("# Best Template So Far");
    CHECK((*prompts)[2].find("RANK=2", cur) < best);
    CHECK((*prompts)[2].find("RANK=2", best) != std::string::npos);
}

TEST_CASE("best objective never decreases along the trace") {
    ScriptedWorld world;
    auto optimizer_calls = std::make_shared<std::atomic<int>>(0);
    GatewayConfig cfg;
    LlmGateway gateway(cfg);
    gateway.set_mock(scripted_mock({9, 4, 11, 2, 6, 3}, optimizer_calls));

    TemplateInstruction initial = make_template(rank_template_text(7), "initial-IO", "i");
    RunState state = tune(world.validation, world.catalog, initial, gateway,
                          auc_only_config(6));
    double best = -1;
    for (const auto& r : state.iterations) {
        if (r.accepted) {
            CHECK(r.objective > best);
            best = r.objective;
        } else {
            CHECK(r.objective <= best);
        }
    }
    CHECK(best == state.best_objective);
}

TEST_CASE("a failing optimizer is recorded and skipped, not fatal") {
    ScriptedWorld world;
    GatewayConfig cfg;
    LlmGateway gateway(cfg);
    gateway.set_mock([](const ChatRequest& req) -> std::string {
        if (req.role_tag == RoleTag::optimizer) return "never a template";
        return scripted_recommender_answer(req.messages.back().content, 12);
    });

    TemplateInstruction initial = make_template(rank_template_text(3), "initial-IO", "i");
    RunState state = tune(world.validation, world.catalog, initial, gateway,
                          auc_only_config(2));
    REQUIRE(state.iterations.size() == 3);
    for (int k : {1, 2}) {
        CHECK_FALSE(state.iterations[k].accepted);
        CHECK(state.iterations[k].template_id.empty());
        CHECK(state.iterations[k].note.find("no valid template") != std::string::npos);
        // A skipped iteration evaluated nothing.
        CHECK_FALSE(iteration_to_json(state.iterations[k]).contains("validation"));
    }
    CHECK(state.best_iteration == 0);
    CHECK(state.best_template.id == "initial-IO");
}

TEST_CASE("a run directory captures templates, iterations, users, and the report") {
    ScriptedWorld world;
    auto dir = scratch_dir("rundir");
    auto optimizer_calls = std::make_shared<std::atomic<int>>(0);
    GatewayConfig cfg;
    LlmGateway gateway(cfg);
    gateway.set_mock(scripted_mock({5, 2}, optimizer_calls));

    TemplateInstruction initial = make_template(rank_template_text(3), "initial-IO", "i");
    RunDir run_dir(dir);
    RunState state = tune(world.validation, world.catalog, initial, gateway,
                          auc_only_config(2), run_dir);

    CHECK(std::filesystem::exists(dir / "templates.jsonl"));
    CHECK(std::filesystem::exists(dir / "iterations.jsonl"));
    CHECK(std::filesystem::exists(dir / "report.json"));
    for (int k = 0; k <= 2; ++k)
        CHECK(std::filesystem::exists(dir / "per_user" / (std::to_string(k) + ".jsonl")));

    // The iteration log round-trips to the in-memory records.
    auto loaded = run_dir.load_iterations();
    REQUIRE(loaded.size() == state.iterations.size());
    for (size_t i = 0; i < loaded.size(); ++i)
        CHECK(iteration_to_json(loaded[i]).dump() ==
              iteration_to_json(state.iterations[i]).dump());

    // Templates: the initial one plus each evaluated proposal.
    auto templates = run_dir.load_templates();
    REQUIRE(templates.size() == 3);
    CHECK(templates[0].id == "initial-IO");
    CHECK(templates[1].id == "optimizer-iter-1");

    auto report = nlohmann::json::parse(slurp(dir / "report.json"));
    CHECK(report["best"]["iteration"] == state.best_iteration);
    CHECK(report["validation_users"] == 1);
    CHECK(report["iterations"].size() == 3);
    // Replayability: the report carries no backend, cache, or time fields.
    CHECK_FALSE(report["config"].contains("backend"));
    CHECK_FALSE(report["config"].contains("cache"));
    CHECK(slurp(dir / "report.json").find("created_at") == std::string::npos);

    std::filesystem::remove_all(dir);
}

TEST_CASE("resuming a run continues the trace a fresh run would have produced") {
    for (const char* policy : {"worst", "random"}) {
        CAPTURE(policy);
        // Three identically scored users: under the random policy the
        // recorded exemplar now depends on the rng draw sequence, so this
        // also proves a resumed run replays the draws it skipped.
        ScriptedWorld world(3);
        std::vector<int> seq{5, 2, 9, 4, 6};

        TuneConfig config = auc_only_config(5);
        config.exemplar_policy = exemplar_policy_from_string(policy);
        TemplateInstruction initial = make_template(rank_template_text(3), "initial-IO", "i");

        // Reference: one uninterrupted run over the full budget.
        auto fresh_dir = scratch_dir(std::string("fresh-") + policy);
        {
            auto calls = std::make_shared<std::atomic<int>>(0);
            LlmGateway gateway(GatewayConfig{});
            gateway.set_mock(scripted_mock(seq, calls));
            tune(world.validation, world.catalog, initial, gateway, config,
                 RunDir(fresh_dir));
        }

        // Interrupted: budget 2, then resume to 5. The optimizer script is
        // indexed by call count, so the resumed gateway continues at step 2.
        auto resumed_dir = scratch_dir(std::string("resumed-") + policy);
        {
            auto calls = std::make_shared<std::atomic<int>>(0);
            LlmGateway gateway(GatewayConfig{});
            gateway.set_mock(scripted_mock(seq, calls));
            TuneConfig short_config = config;
            short_config.iteration_budget = 2;
            tune(world.validation, world.catalog, initial, gateway, short_config,
                 RunDir(resumed_dir));

            auto resume_calls = std::make_shared<std::atomic<int>>(2);
            LlmGateway gateway2(GatewayConfig{});
            gateway2.set_mock(scripted_mock(seq, resume_calls));
            RunState resumed = tune(world.validation, world.catalog, initial, gateway2, config,
                                    RunDir(resumed_dir), true);
            CHECK(resumed.iterations.size() == 6);
        }

        CHECK(slurp(resumed_dir / "iterations.jsonl") == slurp(fresh_dir / "iterations.jsonl"));
        std::filesystem::remove_all(fresh_dir);
        std::filesystem::remove_all(resumed_dir);
    }
}

TEST_CASE("resume refuses a run directory without evaluated templates") {
    ScriptedWorld world;
    auto dir = scratch_dir("resume-broken");
    RunDir run_dir(dir);
    run_dir.init();
    IterationRecord failed;
    failed.iteration = 0;
    failed.note = "nothing evaluated";
    run_dir.append_iteration(failed);

    LlmGateway gateway(GatewayConfig{});
    gateway.set_mock(default_mock());
    TemplateInstruction initial = make_template(rank_template_text(3), "initial-IO", "i");
    CHECK_THROWS_AS(tune(world.validation, world.catalog, initial, gateway, auc_only_config(2),
                         run_dir, true),
                    ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("the final test repeats and reports spread") {
    ScriptedWorld world;
    std::vector<Impression> impressions;
    std::vector<std::string> ids;
    for (int i = 1; i <= 12; ++i) ids.push_back("N" + std::to_string(i));
    impressions.push_back(make_impression("U1", {"H1"}, ids, 0));
    impressions.push_back(make_impression("U2", {"H1"}, ids, 5));

    LlmGateway gateway(GatewayConfig{});
    gateway.set_mock(make_perfect_mock(impressions, world.catalog));
    TemplateInstruction tpl = initial_template(PromptStrategy::IO);
    RecommenderSettings settings;

    FinalTestResult result = final_test(tpl, impressions, world.catalog, gateway, 3, settings, 1);
    REQUIRE(result.runs.size() == 3);
    CHECK(result.mean.auc == doctest::Approx(result.runs[0].auc));
    REQUIRE(result.sd.has_value());
    // Deterministic backend -> no spread beyond summation rounding.
    for (double v : *result.sd) CHECK(std::abs(v) <= 1e-12);

    FinalTestResult single =
        final_test(tpl, impressions, world.catalog, gateway, 1, settings, 1);
    CHECK_FALSE(single.sd.has_value());
    nlohmann::json j = final_test_to_json(single);
    CHECK(j["repeats"] == 1);
    CHECK_FALSE(j.contains("sd"));
    CHECK(j["deviation_kind"] == "sample standard deviation");

    CHECK_THROWS_AS(final_test(tpl, impressions, world.catalog, gateway, 0, settings),
                    ConfigError);
}

TEST_CASE("popularity counts cover history and clicked candidates") {
    Catalog catalog = parse_news_catalog("N1\tsports\ts\tA\n"
                                         "N2\ttech\tt\tB\n"
                                         "N3\tsports\ts\tC\n")
                          .catalog;
    std::vector<Impression> impressions;
    impressions.push_back(make_impression("U1", {"N1", "N3"}, {"N2", "N1"}, 0));
    impressions.push_back(make_impression("U2", {"N1"}, {"N2", "N3"}, 1));

    PopularityTable table = build_popularity(impressions, catalog);
    CHECK(table.news_count("N1") == 2); // twice in history, never clicked
    CHECK(table.news_count("N2") == 1); // clicked by U1
    CHECK(table.news_count("N3") == 2); // once in history, clicked by U2
    CHECK(table.category_count("sports") == 4);
    CHECK(table.category_count("tech") == 1);

    PopularityTable clicks_only = build_popularity(impressions, catalog, false);
    CHECK(clicks_only.news_count("N1") == 0);
    CHECK(clicks_only.news_count("N2") == 1);
    CHECK(clicks_only.news_count("N3") == 1);

    PopularityTable back = popularity_from_json(popularity_to_json(table));
    CHECK(back.news_clicks == table.news_clicks);
    CHECK(back.category_clicks == table.category_clicks);
}

TEST_CASE("the random baseline is a seeded permutation") {
    std::vector<int> a = random_rank(10, 42);
    std::vector<int> b = random_rank(10, 42);
    std::vector<int> c = random_rank(10, 43);
    CHECK(a == b);
    CHECK(a != c);
    std::vector<int> sorted = a;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
    CHECK_THROWS_AS(random_rank(0, 1), ValidationError);
}

TEST_CASE("popularity baselines order candidates by their counts") {
    Catalog catalog = parse_news_catalog("N1\tsports\ts\tA\n"
                                         "N2\ttech\tt\tB\n"
                                         "N3\tsports\ts\tC\n"
                                         "N4\tfinance\tf\tD\n")
                          .catalog;
    PopularityTable table;
    table.news_clicks = {{"N1", 5}, {"N2", 2}, {"N3", 5}};
    table.category_clicks = {{"sports", 10}, {"tech", 2}};

    std::vector<Candidate> candidates{{"N2", 0}, {"N1", 1}, {"N4", 0}, {"N3", 0}};
    // By news count: N1(5)=N3(5) > N2(2) > N4(0); ties keep list order.
    CHECK(mostpop_rank(candidates, table) == std::vector<int>{2, 4, 1, 3});
    // By category count: sports(10) > tech(2) > finance(0); the two sports
    // candidates tie on category and news count, so list order decides.
    CHECK(topicpop_rank(candidates, table, catalog) == std::vector<int>{2, 4, 1, 3});

    // Different per-news counts break a category tie.
    table.news_clicks["N1"] = 1;
    CHECK(topicpop_rank(candidates, table, catalog) == std::vector<int>{4, 2, 1, 3});

    std::vector<Candidate> unknown{{"N9", 0}};
    CHECK_THROWS_AS(topicpop_rank(unknown, table, catalog), ValidationError);
    CHECK_THROWS_AS(mostpop_rank({}, table), ValidationError);
}

TEST_CASE("configuration files overlay defaults and reject unknown keys") {
    auto dir = scratch_dir("config");
    auto path = dir / "run.json";

    RunConfig cfg;
    CHECK(cfg.backend == "mock");
    CHECK(cfg.iteration_budget == 10);
    CHECK(cfg.validation_users == 100);
    CHECK(cfg.test_users == 400);
    CHECK(cfg.repeats == 3);

    write_text_file(path, nlohmann::json{
        {"backend", "replay"},
        {"strategy", "CoT"},
        {"models", {{"recommender", "m-rec"}, {"optimizer", "m-opt"}}},
        {"temperatures", {{"recommender", 0.25}}},
        {"tuning", {{"iterations", 4},
                    {"exemplar_policy", "best"},
                    {"weights", {{"auc", 1.0}, {"mrr", 0.0}, {"ndcg5", 0.0}, {"ndcg10", 0.0}}}}},
        {"split", {{"validation", 5}, {"test", 7}, {"seed", 11}, {"min_history", 2}}},
        {"repeats", 1}}.dump());

    apply_config_file(cfg, path);
    CHECK(cfg.backend == "replay");
    CHECK(cfg.strategy == "CoT");
    CHECK(cfg.recommender_model == "m-rec");
    CHECK(cfg.optimizer_model == "m-opt");
    CHECK(cfg.evaluator_model == "gpt-4-1106-preview"); // untouched default
    CHECK(cfg.recommender_temperature == 0.25);
    CHECK(cfg.optimizer_temperature == 1.0);
    CHECK(cfg.iteration_budget == 4);
    CHECK(cfg.exemplar_policy == "best");
    CHECK(cfg.weights.auc == 1.0);
    CHECK(cfg.weights.mrr == 0.0);
    CHECK(cfg.validation_users == 5);
    CHECK(cfg.test_users == 7);
    CHECK(cfg.seed == 11);
    CHECK(cfg.min_history == 2);
    CHECK(cfg.repeats == 1);

    write_text_file(path, R"({"iterations": 4})"); // belongs under "tuning"
    RunConfig fresh;
    CHECK_THROWS_AS(apply_config_file(fresh, path), ConfigError);

    write_text_file(path, R"({"tuning": {"budget": 4}})");
    CHECK_THROWS_AS(apply_config_file(fresh, path), ConfigError);

    write_text_file(path, "not json at all");
    CHECK_THROWS_AS(apply_config_file(fresh, path), ConfigError);

    CHECK_THROWS_AS(apply_config_file(fresh, dir / "absent.json"), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("config validation catches out-of-range settings") {
    RunConfig cfg;
    CHECK_NOTHROW(validate_config(cfg));

    RunConfig bad = cfg;
    bad.backend = "telepathy";
    CHECK_THROWS_AS(validate_config(bad), ConfigError);

    bad = cfg;
    bad.strategy = "XoT";
    CHECK_THROWS_AS(validate_config(bad), ConfigError);

    bad = cfg;
    bad.min_history = -1;
    CHECK_THROWS_AS(validate_config(bad), ConfigError);

    bad = cfg;
    bad.repeats = 0;
    CHECK_THROWS_AS(validate_config(bad), ConfigError);

    bad = cfg;
    bad.backend = "replay"; // requires an existing cache file
    CHECK_THROWS_AS(validate_config(bad), ConfigError);

    bad = cfg;
    bad.recommender_temperature = -0.1;
    CHECK_THROWS_AS(validate_config(bad), ConfigError);
}

TEST_CASE("config mappers carry the per-role settings through") {
    RunConfig cfg;
    cfg.strategy = "CoT";
    cfg.profile = "none";
    cfg.recommender_model = "r";
    cfg.optimizer_model = "o";
    cfg.evaluator_model = "e";
    cfg.history_limit = 9;
    cfg.max_tokens = 256;

    CHECK(strategy_from_config(cfg) == PromptStrategy::CoT);
    CHECK(profile_from_config(cfg).candidate_count == 0);
    cfg.profile = "strict";
    CHECK(profile_from_config(cfg).candidate_count == 10);
    CHECK(profile_from_config(cfg).single_positive);

    RecommenderSettings rec = recommender_settings(cfg);
    CHECK(rec.model == "r");
    CHECK(rec.history_limit == 9);
    CHECK(rec.max_tokens == 256);

    OptimizerSettings opt = optimizer_settings(cfg);
    CHECK(opt.model == "o");
    CHECK(opt.temperature == 1.0);

    JudgeSettings judge = judge_settings(cfg);
    CHECK(judge.model == "e");

    TuneConfig t = tune_config(cfg);
    CHECK(t.iteration_budget == cfg.iteration_budget);
    CHECK(t.recommender.model == "r");
    CHECK(t.optimizer.model == "o");

    GatewayConfig g = gateway_config(cfg);
    CHECK(g.backend == Backend::mock);
    CHECK(g.api_key_env == "RECPROMPT_API_KEY"); // credentials only via environment
}

TEST_CASE("missing or broken JSON inputs fail with a clear message") {
    auto dir = scratch_dir("jsonload");
    CHECK_THROWS_AS(load_json_file((dir / "absent.json").string()), ConfigError);
    write_text_file(dir / "broken.json", "{oops");
    CHECK_THROWS_AS(load_json_file((dir / "broken.json").string()), ConfigError);
    write_text_file(dir / "good.json", R"({"a": 1})");
    CHECK(load_json_file((dir / "good.json").string())["a"] == 1);
    std::filesystem::remove_all(dir);
}

TEST_CASE("template specs resolve to stock, file, and recorded templates") {
    RunConfig cfg;
    CHECK(resolve_template("", cfg).id == "initial-IO");
    CHECK(resolve_template("initial", cfg).id == "initial-IO");
    cfg.strategy = "CoT";
    CHECK(resolve_template("initial", cfg).id == "initial-CoT");
    CHECK(resolve_template("initial-io", cfg).id == "initial-IO");
    CHECK(resolve_template("initial-cot", cfg).id == "initial-CoT");

    auto dir = scratch_dir("templates");
    TemplateInstruction custom = make_template("a ${history} b ${candidate}", "custom-1", "file");
    write_text_file(dir / "tpl.json", template_to_json(custom).dump());
    TemplateInstruction loaded = resolve_template((dir / "tpl.json").string(), cfg);
    CHECK(loaded.id == "custom-1");
    CHECK(loaded.text == custom.text);

    CHECK_THROWS_AS(resolve_template((dir / "missing.json").string(), cfg), ConfigError);
    CHECK_THROWS_AS(resolve_template("best:" + (dir / "norun").string(), cfg), ConfigError);
    std::filesystem::remove_all(dir);
}

#include <catch2/catch.hpp>

#include <cstdlib>
#include <map>
#include <set>

#include "driforge/pipeline.hpp"
#include "pipeline_fixture.hpp"
#include "planted.hpp"
#include "support.hpp"

using namespace driforge;
using testsupport::fixture;
using testsupport::pipeline_toml;
using testsupport::run_full_pipeline;
using testsupport::snapshot_tree;
using testsupport::synthesize_responses;

namespace {

struct EpochPin {
    EpochPin() { setenv("SOURCE_DATE_EPOCH", "1700000000", 1); }
    ~EpochPin() { unsetenv("SOURCE_DATE_EPOCH"); }
};

} // namespace

TEST_CASE("full fixture pipeline produces nine manifests and sane artifacts", "[pipeline][slow]") {
    EpochPin pin;
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string responses = tmp.file("responses.csv");
    std::string toml_path = tmp.file("run.toml");
    testsupport::write_file(toml_path, pipeline_toml(out_dir, responses));

    run_full_pipeline(toml_path, out_dir, responses);

    std::vector<std::string> stages{"ingest", "embed", "categorize", "select", "generate",
                                    "review", "score", "validate", "report"};
    for (const auto& stage : stages) {
        fs::path dir = fs::path(out_dir) / stage;
        INFO(stage);
        REQUIRE(fs::exists(dir / "manifest.json"));
        std::size_t manifests = 0;
        for (const auto& e : fs::recursive_directory_iterator(dir))
            if (e.path().filename() == "manifest.json") ++manifests;
        CHECK(manifests == 1);
        auto m = RunManifest::load(dir / "manifest.json");
        CHECK(m.stage == stage);
        CHECK_FALSE(m.output_hashes.empty());
    }

    SECTION("ingest artifacts") {
        auto paragraphs = load_paragraphs(out_dir + "/ingest/paragraphs.jsonl");
        CHECK(paragraphs.size() >= 20);
        auto report = nlohmann::json::parse(testsupport::read_file(out_dir + "/ingest/report.json"));
        CHECK(report["read"] == 12);
        CHECK(report["kept"] == 12);
        CHECK(report["paragraphs"]["kept"] == paragraphs.size());
        CHECK(report["paragraphs"]["dropped_duplicate"] == 1); // planted shared block
    }
    SECTION("categorize and select artifacts") {
        auto table = ScoreTable::import_csv(out_dir + "/categorize/scores.csv");
        CHECK(table.category_names.size() == 2);
        auto selections = load_selections(out_dir + "/select/selections.jsonl");
        // 2 categories x (1 unscoped + 5 leanings)
        CHECK(selections.size() == 12);
    }
    SECTION("generation and review artifacts") {
        auto statements = load_statements(out_dir + "/generate/statements.jsonl");
        auto report =
            nlohmann::json::parse(testsupport::read_file(out_dir + "/generate/generation_report.json"));
        CHECK(report["considerations"] == 50); // 2 categories x 5 leanings x 5
        CHECK(report["policies"] == 25);       // general x 5 leanings x 5
        CHECK(statements.size() == 75);
        CHECK(report["missing_cells"].empty());
        // every statement's prompt hash has a stored prompt record
        std::set<std::string> prompt_hashes;
        jsonl::for_each(out_dir + "/generate/prompts.jsonl", [&](std::size_t, const nlohmann::json& rec) {
            prompt_hashes.insert(rec.at("prompt_hash").get<std::string>());
        });
        for (const auto& s : statements) CHECK(prompt_hashes.count(s.prompt_hash) == 1);

        auto instrument = SurveyInstrument::load(out_dir + "/review/instrument.json");
        CHECK(instrument.considerations.size() == 50);
        CHECK(instrument.preferences.size() == 25);
        CHECK(instrument.considerations.front() == "C1");
    }
    SECTION("score and report artifacts") {
        auto result = DriResult::load(out_dir + "/score/result_pre.json");
        CHECK(result.pair_points.size() + result.flagged.size() == 6); // C(4,2)
        CHECK(result.group >= 0.0);
        CHECK(result.group <= 1.0);
        CHECK(fs::exists(out_dir + "/score/scatter_pre.csv"));
        CHECK(fs::exists(out_dir + "/report/overlap_k3.csv"));
        CHECK(fs::exists(out_dir + "/report/overlap_k10.csv"));
        CHECK(fs::exists(out_dir + "/report/histogram_general_health_costs.csv"));
        CHECK(fs::exists(out_dir + "/report/dri_scatter_pre.csv"));
        auto stats = nlohmann::json::parse(testsupport::read_file(out_dir + "/report/pipeline_stats.json"));
        CHECK(stats["ingest"]["read"] == 12);
        auto overlap_stats =
            nlohmann::json::parse(testsupport::read_file(out_dir + "/report/overlap_stats.json"));
        CHECK(overlap_stats.contains("3"));
        CHECK(overlap_stats.contains("10"));
    }
    SECTION("validate artifacts") {
        CHECK(fs::exists(out_dir + "/validate/match_matrix.csv"));
        CHECK(fs::exists(out_dir + "/validate/candidates.csv"));
        auto candidates = testsupport::read_file(out_dir + "/validate/candidates.csv");
        // 9 reference items x 5 candidates + header
        CHECK(std::count(candidates.begin(), candidates.end(), '\n') == 1 + 9 * 5);
    }
}

TEST_CASE("pipeline is byte-identical across independent runs", "[pipeline][slow]") {
    EpochPin pin;
    testsupport::TempDir tmp;
    std::string responses = tmp.file("responses.csv"); // shared input once synthesized

    std::string out1 = tmp.file("run1");
    testsupport::write_file(tmp.file("run1.toml"), pipeline_toml(out1, responses));
    run_full_pipeline(tmp.file("run1.toml"), out1, responses);

    std::string out2 = tmp.file("run2");
    testsupport::write_file(tmp.file("run2.toml"), pipeline_toml(out2, responses));
    run_full_pipeline(tmp.file("run2.toml"), out2, responses);

    auto tree1 = snapshot_tree(out1);
    auto tree2 = snapshot_tree(out2);
    REQUIRE(tree1.size() == tree2.size());
    for (const auto& [rel, content] : tree1) {
        INFO(rel);
        REQUIRE(tree2.count(rel) == 1);
        CHECK(tree2.at(rel) == content); // byte-identical
    }
}

TEST_CASE("stages never mutate upstream artifacts", "[pipeline][slow]") {
    EpochPin pin;
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string responses = tmp.file("responses.csv");
    std::string toml_path = tmp.file("run.toml");
    testsupport::write_file(toml_path, pipeline_toml(out_dir, responses));
    auto config = RunConfig::load(toml_path);

    std::map<std::string, std::string> hashes; // stage/file -> sha
    auto record = [&](const std::string& stage) {
        for (const auto& e : fs::recursive_directory_iterator(fs::path(out_dir) / stage))
            if (e.is_regular_file())
                hashes[stage + "/" + e.path().filename().string()] = hash_file(e.path());
    };
    auto check_unchanged = [&] {
        for (const auto& [key, sha] : hashes) {
            INFO(key);
            CHECK(hash_file(fs::path(out_dir) / key) == sha);
        }
    };

    run_stage(Stage::ingest, config, false);
    record("ingest");
    run_stage(Stage::embed, config, false);
    check_unchanged();
    record("embed");
    run_stage(Stage::categorize, config, false);
    check_unchanged();
    record("categorize");
    run_stage(Stage::select, config, false);
    check_unchanged();
    record("select");
    run_stage(Stage::generate, config, false);
    check_unchanged();
    record("generate");
    run_stage(Stage::review, config, false);
    check_unchanged();
}

TEST_CASE("stage errors are actionable", "[pipeline]") {
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string toml_path = tmp.file("run.toml");
    testsupport::write_file(toml_path, pipeline_toml(out_dir, tmp.file("responses.csv")));
    auto config = RunConfig::load(toml_path);

    SECTION("running a stage before its upstream names the missing manifest") {
        try {
            run_stage(Stage::categorize, config, false);
            FAIL("expected StageError");
        } catch (const StageError& e) {
            CHECK(e.kind() == "missing_manifest");
            CHECK(std::string(e.what()).find("ingest/manifest.json") != std::string::npos);
        }
        run_stage(Stage::ingest, config, false);
        try {
            run_stage(Stage::categorize, config, false); // embed still missing
            FAIL("expected StageError");
        } catch (const StageError& e) {
            CHECK(std::string(e.what()).find("embed/manifest.json") != std::string::npos);
        }
    }
    SECTION("score without a responses file names the path") {
        run_stage(Stage::ingest, config, false);
        run_stage(Stage::embed, config, false);
        run_stage(Stage::categorize, config, false);
        run_stage(Stage::select, config, false);
        run_stage(Stage::generate, config, false);
        run_stage(Stage::review, config, false);
        try {
            run_stage(Stage::score, config, false);
            FAIL("expected StageError");
        } catch (const StageError& e) {
            CHECK(e.kind() == "missing_input");
            CHECK(std::string(e.what()).find("responses.csv") != std::string::npos);
        }
    }
}

TEST_CASE("exemplar bank feeds the nearest prior statements into prompts", "[pipeline][slow]") {
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string toml_path = tmp.file("run.toml");
    std::string toml = pipeline_toml(out_dir, tmp.file("responses.csv"));
    toml.insert(toml.find("[review]"), "exemplar_count = 1\n");          // tail of [generation]
    toml.insert(toml.find("[ingest]"), "exemplars = \"" + fixture("exemplars.jsonl") + "\"\n"); // tail of [paths]
    testsupport::write_file(toml_path, toml);
    auto config = RunConfig::load(toml_path);
    REQUIRE(config.exemplars == fixture("exemplars.jsonl"));
    REQUIRE(config.exemplar_count == 1);

    run_stage(Stage::ingest, config, false);
    run_stage(Stage::embed, config, false);
    run_stage(Stage::categorize, config, false);
    run_stage(Stage::select, config, false);
    run_stage(Stage::generate, config, false);

    // The general-costs prompt must carry the premium-burden exemplar; the
    // hospital prompt the hospital-density one; the railway exemplar neither.
    bool saw_general = false, saw_hospital = false;
    jsonl::for_each(out_dir + "/generate/prompts.jsonl", [&](std::size_t, const nlohmann::json& rec) {
        std::string category = rec.at("category").get<std::string>();
        std::string system = rec.at("system").get<std::string>();
        CHECK(system.find("Schienennetzes") == std::string::npos);
        if (category == "general_health_costs") {
            CHECK(system.find("Praemien belasten die Haushalte") != std::string::npos);
            saw_general = true;
        }
        if (category == "hospital_planning") {
            CHECK(system.find("Spitaldichte") != std::string::npos);
            saw_hospital = true;
        }
    });
    CHECK(saw_general);
    CHECK(saw_hospital);
}

TEST_CASE("report stats match an independent recount of the corpus file", "[pipeline][slow]") {
    EpochPin pin;
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string responses = tmp.file("responses.csv");
    std::string toml_path = tmp.file("run.toml");
    testsupport::write_file(toml_path, pipeline_toml(out_dir, responses));
    run_full_pipeline(toml_path, out_dir, responses);

    // Recount mean/median paragraphs per article straight from the artifact.
    std::map<std::string, std::size_t> per_article;
    for (const auto& p : load_paragraphs(out_dir + "/ingest/paragraphs.jsonl")) per_article[p.article_id]++;
    std::vector<std::size_t> counts;
    double sum = 0;
    for (auto& [id, n] : per_article) {
        counts.push_back(n);
        sum += double(n);
    }
    std::sort(counts.begin(), counts.end());
    double mean = sum / double(counts.size());
    double median = counts.size() % 2 ? double(counts[counts.size() / 2])
                                      : (double(counts[counts.size() / 2 - 1]) +
                                         double(counts[counts.size() / 2])) / 2.0;

    auto stats = nlohmann::json::parse(testsupport::read_file(out_dir + "/report/pipeline_stats.json"));
    CHECK(stats["ingest"]["paragraphs"]["mean_per_article"].get<double>() == Approx(mean).margin(1e-9));
    CHECK(stats["ingest"]["paragraphs"]["median_per_article"].get<double>() == Approx(median).margin(1e-9));
    CHECK(stats["scored_paragraphs"].get<std::size_t>() == std::size_t(sum));

    // histogram bin counts sum to the scored paragraph count
    auto hist = testsupport::read_file(out_dir + "/report/histogram_general_health_costs.csv");
    std::size_t total = 0;
    std::istringstream lines(hist);
    std::string line;
    std::getline(lines, line); // header
    while (std::getline(lines, line)) {
        auto last_comma = line.rfind(',');
        total += std::stoul(line.substr(last_comma + 1));
    }
    CHECK(total == std::size_t(sum));

    // overlap CSV is symmetric with a unit diagonal
    auto overlap_rows = csv::read_file(out_dir + "/report/overlap_k3.csv");
    REQUIRE(overlap_rows.size() == 3); // header + 2 categories
    CHECK(std::stod(overlap_rows[1][1]) == Approx(1.0));
    CHECK(std::stod(overlap_rows[2][2]) == Approx(1.0));
    CHECK(std::stod(overlap_rows[1][2]) == Approx(std::stod(overlap_rows[2][1])));
}

TEST_CASE("review without auto-keep exports the sheet and stops", "[pipeline][slow]") {
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string toml_path = tmp.file("run.toml");
    std::string toml = pipeline_toml(out_dir, tmp.file("responses.csv"));
    auto pos = toml.find("auto_keep = true");
    toml.replace(pos, std::string("auto_keep = true").size(), "auto_keep = false");
    testsupport::write_file(toml_path, toml);
    auto config = RunConfig::load(toml_path);

    run_stage(Stage::ingest, config, false);
    run_stage(Stage::embed, config, false);
    run_stage(Stage::categorize, config, false);
    run_stage(Stage::select, config, false);
    run_stage(Stage::generate, config, false);
    run_stage(Stage::review, config, false);
    CHECK(fs::exists(out_dir + "/review/sheet.csv"));
    CHECK_FALSE(fs::exists(out_dir + "/review/instrument.json"));

    // an externally decided sheet picks the flow back up
    auto statements = load_statements(out_dir + "/generate/statements.jsonl");
    std::string decided = out_dir + "/decided.csv";
    fs::copy_file(out_dir + "/review/sheet.csv", decided);
    config.decisions = decided;
    run_stage(Stage::review, config, true);
    CHECK(fs::exists(out_dir + "/review/instrument.json"));
    auto instrument = SurveyInstrument::load(out_dir + "/review/instrument.json");
    std::size_t considerations = 0;
    for (const auto& s : statements)
        if (s.role == StatementRole::consideration) ++considerations;
    CHECK(instrument.considerations.size() == considerations);
}

TEST_CASE("multi-run sampling multiplies the corpus with distinct run ids", "[pipeline][slow]") {
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string toml_path = tmp.file("run.toml");
    std::string toml = pipeline_toml(out_dir, tmp.file("responses.csv"));
    toml.insert(toml.find("[review]"), "runs = 2\n");
    testsupport::write_file(toml_path, toml);
    auto config = RunConfig::load(toml_path);
    REQUIRE(config.runs == 2);

    run_stage(Stage::ingest, config, false);
    run_stage(Stage::embed, config, false);
    run_stage(Stage::categorize, config, false);
    run_stage(Stage::select, config, false);
    run_stage(Stage::generate, config, false);

    auto statements = load_statements(out_dir + "/generate/statements.jsonl");
    CHECK(statements.size() == 2 * 75); // both runs kept, consolidation is manual
    std::set<std::string> run_ids, ids;
    for (const auto& s : statements) {
        run_ids.insert(s.run_id);
        ids.insert(s.id);
    }
    CHECK(run_ids.size() == 2);
    CHECK(ids.size() == statements.size()); // ids stay unique across runs
    auto report = nlohmann::json::parse(testsupport::read_file(out_dir + "/generate/generation_report.json"));
    CHECK(report["runs"] == 2);
    CHECK(report["considerations"] == 100);
    CHECK(report["policies"] == 50);
}

TEST_CASE("joint reduction keeps anchors and paragraphs in one space", "[pipeline]") {
    testsupport::TempDir tmp;
    auto fx = testsupport::make_planted(2, 12);
    MockEmbeddingProvider provider(384);
    EmbeddingCache cache(tmp.file("c.bin"), provider.provider_id(), provider.model_id(), 384);
    ReductionSpec spec;
    spec.method = ReductionMethod::pca;
    spec.target_dim = 6;
    auto corpus = embed_corpus_and_anchors(fx.paragraphs, fx.anchors, provider, cache, spec);
    for (const auto& cat : corpus.anchors.categories)
        for (const auto& [lang, vec] : cat.embeddings) CHECK(vec.size() == 6);
    for (const auto& vec : corpus.paragraph_vectors) CHECK(vec.size() == 6);
    // scoring still separates the planted categories in the reduced space
    auto table = score_paragraphs(corpus);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < fx.paragraphs.size(); ++i) {
        const auto& scores = table.rows.at(fx.paragraphs[i].id);
        std::size_t best = scores[0] >= scores[1] ? 0 : 1;
        if (table.category_names[best] == fx.truth[i]) ++hits;
    }
    CHECK(double(hits) / double(fx.paragraphs.size()) >= 0.9);
}

TEST_CASE("config hash mismatch detection via manifest", "[pipeline]") {
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string toml_path = tmp.file("run.toml");
    testsupport::write_file(toml_path, pipeline_toml(out_dir, tmp.file("responses.csv")));
    auto config = RunConfig::load(toml_path);
    auto manifest = run_stage(Stage::ingest, config, false);
    CHECK(manifest.config_hash == config.config_hash());
    CHECK(manifest.input_hashes.count("input") == 1);
    CHECK(manifest.input_hashes.count("keywords") == 1);
    CHECK(manifest.input_hashes.count("leanings") == 1);
}

#ifdef DRIFORGE_CLI_BIN
TEST_CASE("the installed CLI binary drives the whole pipeline", "[pipeline][cli][slow]") {
    testsupport::TempDir tmp;
    std::string out_dir = tmp.file("out");
    std::string responses = tmp.file("responses.csv");
    std::string toml_path = tmp.file("run.toml");
    testsupport::write_file(toml_path, pipeline_toml(out_dir, responses));
    auto shell = [&](const std::string& cmd) {
        std::string full = std::string(DRIFORGE_CLI_BIN) + " " + cmd + " >" + tmp.file("stdout.txt") +
                           " 2>" + tmp.file("stderr.txt");
        return std::system(full.c_str());
    };
    std::string cfg = " --config " + toml_path;

    SECTION("stage flow with explicit ingest flags") {
        int rc = shell("ingest --input " + fixture("articles.jsonl") + " --keywords " +
                       fixture("keywords.csv") + " --leanings " + fixture("leanings.csv") +
                       " --from 2018-01-01 --to 2024-08-29 --out " + out_dir);
        REQUIRE(rc == 0);
        CHECK(fs::exists(out_dir + "/ingest/paragraphs.jsonl"));
        CHECK(fs::exists(out_dir + "/ingest/manifest.json"));

        REQUIRE(shell("embed" + cfg) == 0);
        REQUIRE(shell("categorize" + cfg + " --reduction pca") == 0);
        REQUIRE(shell("select" + cfg + " --k 10") == 0);
        REQUIRE(shell("generate" + cfg + " --policy-scope general") == 0);
        REQUIRE(shell("review" + cfg) == 0);
        synthesize_responses(out_dir + "/review/instrument.json", responses);
        REQUIRE(shell("score" + cfg + " --wave pre") == 0);
        REQUIRE(shell("validate" + cfg) == 0);
        REQUIRE(shell("report" + cfg) == 0);
        for (const char* stage : {"ingest", "embed", "categorize", "select", "generate", "review",
                                  "score", "validate", "report"})
            CHECK(fs::exists(fs::path(out_dir) / stage / "manifest.json"));

        // analysis helpers over the finished run
        CHECK(shell("overlap" + cfg + " --k 5 --matrix " + tmp.file("overlap.csv")) == 0);
        CHECK(fs::exists(tmp.file("overlap.csv")));
        CHECK(shell("histogram" + cfg + " --category general_health_costs --bins 10 --csv " +
                    tmp.file("hist.csv")) == 0);
        CHECK(fs::exists(tmp.file("hist.csv")));
        CHECK(shell("dedup" + cfg + " --threshold 0.95 --report " + tmp.file("dedup.json")) == 0);
        auto dedup_report = nlohmann::json::parse(testsupport::read_file(tmp.file("dedup.json")));
        CHECK(dedup_report["threshold"] == Approx(0.95));
        CHECK(shell("validate candidates" + cfg + " --n 2 --candidates " + tmp.file("cand.csv")) == 0);
        CHECK(fs::exists(tmp.file("cand.csv")));
        CHECK(shell("validate match" + cfg + " --matrix " + tmp.file("matrix.csv")) == 0);
        CHECK(fs::exists(tmp.file("matrix.csv")));
        CHECK(shell("review export" + cfg + " --sheet " + tmp.file("sheet.csv")) == 0);
        CHECK(fs::exists(tmp.file("sheet.csv")));
        CHECK(shell("review import" + cfg + " --sheet " + tmp.file("sheet.csv") + " --instrument " +
                    tmp.file("instr.json")) == 0);
        auto imported = SurveyInstrument::load(tmp.file("instr.json"));
        CHECK(imported.considerations.size() == 50);

        // judgments-based rate via the helper
        std::string judgments = "reference_id,candidate_id,verdict,reviewer\n";
        for (const auto& r : load_reference_items(fixture("reference.jsonl")))
            judgments += r.id + ",x,good,me\n";
        testsupport::write_file(tmp.file("judgments.csv"), judgments);
        CHECK(shell("validate rate" + cfg + " --judgments " + tmp.file("judgments.csv")) == 0);
        auto rate = nlohmann::json::parse(testsupport::read_file(tmp.file("stdout.txt")));
        CHECK(rate["rate"] == Approx(1.0));
    }

    SECTION("failure paths exit nonzero with a machine-readable report") {
        int rc = shell("score --out " + out_dir + " --responses " + tmp.file("nonexistent.csv"));
        CHECK(rc != 0);
        auto err = nlohmann::json::parse(testsupport::read_file(tmp.file("stderr.txt")));
        CHECK(err["stage"] == "score");
        CHECK(err.contains("error_kind"));
        CHECK(err.contains("detail"));
        CHECK(err.contains("offending_ids"));
    }

    SECTION("delta helper compares two result files") {
        auto instrument = SurveyInstrument::load(fixture("instrument.json"));
        auto loaded = load_responses(fixture("responses.csv"), instrument);
        std::vector<SurveyResponse> pre, post;
        for (auto& r : loaded) (r.wave == Wave::pre ? pre : post).push_back(r);
        auto pre_result = group_dri(pair_points(pre, instrument), Wave::pre, "h");
        auto post_result = group_dri(pair_points(post, instrument), Wave::post, "h");
        testsupport::write_file(tmp.file("pre.json"), pre_result.to_json().dump());
        testsupport::write_file(tmp.file("post.json"), post_result.to_json().dump());
        int rc = shell("delta --pre " + tmp.file("pre.json") + " --post " + tmp.file("post.json"));
        CHECK(rc == 0);
        auto delta = nlohmann::json::parse(testsupport::read_file(tmp.file("stdout.txt")));
        CHECK(delta["group_delta"] == Approx(0.35).margin(1e-9));
    }
}
#endif

#include <catch2/catch.hpp>

#include "driforge/generation.hpp"
#include "support.hpp"

using namespace driforge;
using testsupport::fixture;

namespace {

Selection make_selection(const std::string& cat, Leaning lean, std::size_t n = 3) {
    Selection s;
    s.category = cat;
    s.leaning = lean;
    s.k = n;
    for (std::size_t i = 0; i < n; ++i) {
        s.paragraph_ids.push_back(cat + "-" + to_string(lean) + "-p" + std::to_string(i));
        s.scores.push_back(0.9 - 0.01 * double(i));
    }
    return s;
}

PromptTemplates load_templates() { return PromptTemplates::load_dir(fixture("templates")); }

// Synthetic anchor set with `n` categories, the first one general.
AnchorSet synthetic_anchors(std::size_t n) {
    AnchorSet anchors;
    for (std::size_t i = 0; i < n; ++i) {
        Category c;
        c.name = "cat" + std::to_string(i);
        c.is_general = (i == 0);
        c.variants[Language::de] = "thema " + std::to_string(i);
        anchors.categories.push_back(std::move(c));
    }
    return anchors;
}

struct MatrixFixture {
    AnchorSet anchors;
    std::vector<Selection> selections;
    std::map<std::string, std::string> texts;
};

MatrixFixture full_matrix_fixture(std::size_t categories) {
    MatrixFixture fx;
    fx.anchors = synthetic_anchors(categories);
    for (const auto& cat : fx.anchors.categories) {
        for (Leaning lean : all_leanings()) {
            auto sel = make_selection(cat.name, lean);
            for (const auto& pid : sel.paragraph_ids)
                fx.texts[pid] = "Absatz über " + cat.name + " aus Sicht " + to_string(lean);
            fx.selections.push_back(std::move(sel));
        }
    }
    return fx;
}

} // namespace

TEST_CASE("build_prompt renders every placeholder and pins the schema", "[generation]") {
    auto templates = load_templates();
    GenerationOptions opts;
    auto sel = make_selection("haushalt", Leaning::right_liberal, 4);
    std::vector<std::string> attachment{"erster Absatz", "zweiter Absatz", "dritter Absatz", "vierter"};

    auto prompt = build_prompt(StatementRole::consideration, "haushalt", Leaning::right_liberal, sel,
                               attachment, templates, opts, {"Beispielsatz eins.", "Beispielsatz zwei."});
    CHECK(prompt.system_prompt.find("{{") == std::string::npos);
    CHECK(prompt.system_prompt.find("haushalt") != std::string::npos);
    CHECK(prompt.system_prompt.find("right_liberal") != std::string::npos);
    CHECK(prompt.system_prompt.find("JSON array of 5 strings") != std::string::npos);
    CHECK(prompt.system_prompt.find("Beispielsatz eins.") != std::string::npos);
    // attachment in rank order
    auto p1 = prompt.user_prompt.find("1. erster Absatz");
    auto p2 = prompt.user_prompt.find("2. zweiter Absatz");
    auto p3 = prompt.user_prompt.find("3. dritter Absatz");
    REQUIRE(p1 != std::string::npos);
    REQUIRE(p2 != std::string::npos);
    REQUIRE(p3 != std::string::npos);
    CHECK(p1 < p2);
    CHECK(p2 < p3);

    SECTION("determinism: same inputs, same hash") {
        auto again = build_prompt(StatementRole::consideration, "haushalt", Leaning::right_liberal, sel,
                                  attachment, templates, opts, {"Beispielsatz eins.", "Beispielsatz zwei."});
        CHECK(again.prompt_hash == prompt.prompt_hash);
    }
    SECTION("different cell, different hash") {
        auto sel2 = make_selection("haushalt", Leaning::left, 4);
        auto other = build_prompt(StatementRole::consideration, "haushalt", Leaning::left, sel2, attachment,
                                  templates, opts);
        CHECK(other.prompt_hash != prompt.prompt_hash);
    }
    SECTION("policy role wording differs") {
        auto pol = build_prompt(StatementRole::policy, "haushalt", Leaning::right_liberal, sel, attachment,
                                templates, opts);
        CHECK(pol.system_prompt.find("policy options") != std::string::npos);
    }
}

TEST_CASE("build_prompt validates inputs", "[generation]") {
    auto templates = load_templates();
    GenerationOptions opts;
    auto sel = make_selection("a", Leaning::left);
    SECTION("selection must match the cell") {
        CHECK_THROWS_AS(build_prompt(StatementRole::consideration, "b", Leaning::left, sel, {"x"},
                                     templates, opts),
                        StageError);
        CHECK_THROWS_AS(build_prompt(StatementRole::consideration, "a", Leaning::right, sel, {"x"},
                                     templates, opts),
                        StageError);
    }
    SECTION("empty attachment") {
        CHECK_THROWS_AS(build_prompt(StatementRole::consideration, "a", Leaning::left, sel, {}, templates,
                                     opts),
                        StageError);
    }
    SECTION("unresolved placeholder") {
        PromptTemplates broken = templates;
        broken.considerations += "\nleftover {{mystery_field}} here";
        try {
            build_prompt(StatementRole::consideration, "a", Leaning::left, sel, {"x"}, broken, opts);
            FAIL("expected StageError");
        } catch (const StageError& e) {
            CHECK(std::string(e.what()).find("mystery_field") != std::string::npos);
        }
    }
}

TEST_CASE("generate parses, retries on schema violations, surfaces failures", "[generation]") {
    auto templates = load_templates();
    GenerationOptions opts;
    opts.backoff_ms = 1;
    auto sel = make_selection("a", Leaning::left);
    auto prompt = build_prompt(StatementRole::consideration, "a", Leaning::left, sel, {"text"}, templates, opts);

    SECTION("valid five-element array on the first call") {
        ScriptedChatClient client({R"(["s one","s two","s three","s four","s five"])"});
        auto out = generate(prompt, client, opts, "run-1");
        REQUIRE(out.size() == 5);
        CHECK(client.calls() == 1);
        for (const auto& s : out) {
            CHECK(s.category == "a");
            CHECK(s.leaning == Leaning::left);
            CHECK(s.run_id == "run-1");
            CHECK(s.prompt_hash == prompt.prompt_hash);
            CHECK_FALSE(s.id.empty());
            CHECK_FALSE(s.text.empty());
        }
        CHECK(out[0].text == "s one");
    }
    SECTION("four then five elements: two calls, correction appended") {
        ScriptedChatClient client({R"(["a","b","c","d"])", R"(["a","b","c","d","e"])"});
        auto out = generate(prompt, client, opts);
        CHECK(out.size() == 5);
        CHECK(client.calls() == 2);
        const auto& second_request = client.requests()[1];
        REQUIRE(second_request.size() == 4); // system, user, assistant echo, correction
        CHECK(second_request[3].content.find("JSON array of exactly 5") != std::string::npos);
    }
    SECTION("prose three times exhausts the retries and carries transcripts") {
        ScriptedChatClient client({"here are some thoughts", "sorry, still prose", "no json today"});
        try {
            generate(prompt, client, opts);
            FAIL("expected StageError");
        } catch (const StageError& e) {
            CHECK(e.kind() == "malformed_generation");
            CHECK(std::string(e.what()).find("no json today") != std::string::npos);
            CHECK(client.calls() == 3);
        }
    }
    SECTION("markdown-fenced arrays are accepted") {
        ScriptedChatClient client({"```json\n[\"a\",\"b\",\"c\",\"d\",\"e\"]\n```"});
        CHECK(generate(prompt, client, opts).size() == 5);
    }
    SECTION("wrong types and list markup are schema violations") {
        ScriptedChatClient client({R"([1,2,3,4,5])", R"(["- a","- b","- c","- d","- e"])",
                                   R"(["a","b","c","d","e"])"});
        auto out = generate(prompt, client, opts);
        CHECK(out.size() == 5);
        CHECK(client.calls() == 3);
    }
    SECTION("transport failures retry with backoff then surface") {
        class FlakyClient : public ChatClient {
        public:
            explicit FlakyClient(std::size_t failures) : failures_(failures) {}
            std::string model_id() const override { return "flaky"; }
            std::string complete(const std::vector<ChatMessage>&) override {
                ++calls;
                if (failures_ > 0) {
                    --failures_;
                    throw TransportError("connection reset");
                }
                return R"(["a","b","c","d","e"])";
            }
            std::size_t calls = 0;

        private:
            std::size_t failures_;
        };
        FlakyClient two_failures(2);
        CHECK(generate(prompt, two_failures, opts).size() == 5);
        CHECK(two_failures.calls == 3);

        FlakyClient always(100);
        try {
            generate(prompt, always, opts);
            FAIL("expected StageError");
        } catch (const StageError& e) {
            CHECK(e.kind() == "transport_failure");
        }
    }
}

TEST_CASE("deterministic mock chat client", "[generation]") {
    DeterministicChatClient a(5, "salt-1");
    DeterministicChatClient b(5, "salt-1");
    DeterministicChatClient c(5, "salt-2");
    std::vector<ChatMessage> msgs{{"system", "s"}, {"user", "u"}};
    CHECK(a.complete(msgs) == b.complete(msgs));
    CHECK(a.complete(msgs) != c.complete(msgs)); // different run salt, different sample
    auto parsed = nlohmann::json::parse(a.complete(msgs));
    REQUIRE(parsed.is_array());
    CHECK(parsed.size() == 5);
}

TEST_CASE("run_matrix accounting on the full 8x5 grid", "[generation]") {
    auto fx = full_matrix_fixture(8);
    auto templates = load_templates();
    GenerationOptions opts;
    DeterministicChatClient client(5);
    auto res = run_matrix(fx.anchors, fx.selections, fx.texts, templates, client, opts, "run-x");
    CHECK(res.considerations == 200); // 8 categories x 5 leanings x 5
    CHECK(res.policies == 25);        // general category x 5 leanings x 5
    CHECK(res.statements.size() == 225);
    CHECK(res.cells_run == 45);
    CHECK(res.missing_cells.empty());
    // provenance: every statement's prompt hash has a stored prompt record
    std::set<std::string> prompt_hashes;
    for (const auto& p : res.prompts) prompt_hashes.insert(p.prompt_hash);
    for (const auto& s : res.statements) CHECK(prompt_hashes.count(s.prompt_hash) == 1);
    // exact accounting: sum over executed cells of statement_count
    CHECK(res.statements.size() == res.cells_run * opts.statement_count);
    // deterministic output order: (category, leaning, role, index)
    CHECK(res.statements.front().category == "cat0");
    CHECK(res.statements.front().role == StatementRole::consideration);
    CHECK(res.statements.front().leaning == Leaning::left);
    // cat0 is general: its 10 cells interleave consideration/policy per leaning
    CHECK(res.statements[5].role == StatementRole::policy);
    CHECK(res.statements[5].leaning == Leaning::left);
    CHECK(res.statements[10].role == StatementRole::consideration);
    CHECK(res.statements[10].leaning == Leaning::left_liberal);
    // the non-general categories contribute considerations only
    CHECK(res.statements.back().category == "cat7");
    CHECK(res.statements.back().role == StatementRole::consideration);
    std::size_t last_cat_change = 0;
    for (std::size_t i = 1; i < res.statements.size(); ++i)
        if (res.statements[i].category != res.statements[i - 1].category) last_cat_change = i;
    CHECK(last_cat_change == 225 - 25); // cat7 block is the trailing 25 considerations
}

TEST_CASE("run_matrix on a single-cell fixture yields 5 + 5", "[generation]") {
    MatrixFixture fx;
    fx.anchors = synthetic_anchors(1);
    auto sel = make_selection("cat0", Leaning::centrist);
    for (const auto& pid : sel.paragraph_ids) fx.texts[pid] = "Absatz";
    fx.selections.push_back(sel);

    auto templates = load_templates();
    GenerationOptions opts;
    DeterministicChatClient client(5);
    auto res = run_matrix(fx.anchors, fx.selections, fx.texts, templates, client, opts, "run-y");
    CHECK(res.considerations == 5);
    CHECK(res.policies == 5);
    CHECK(res.missing_cells.size() == 8); // 4 leanings x 2 roles never had selections
    SECTION("strict mode turns missing cells into an error") {
        CHECK_THROWS_AS(run_matrix(fx.anchors, fx.selections, fx.texts, templates, client, opts, "run-z",
                                   PolicyScope::general, true),
                        StageError);
    }
}

TEST_CASE("run_matrix policy scope", "[generation]") {
    auto fx = full_matrix_fixture(3);
    auto templates = load_templates();
    GenerationOptions opts;
    DeterministicChatClient client(5);
    SECTION("scope all widens the policy grid") {
        auto res = run_matrix(fx.anchors, fx.selections, fx.texts, templates, client, opts, "r",
                              PolicyScope::all);
        CHECK(res.policies == 3 * 5 * 5);
    }
    SECTION("scope general without a general category is a config error") {
        for (auto& c : fx.anchors.categories) c.is_general = false;
        CHECK_THROWS_AS(
            run_matrix(fx.anchors, fx.selections, fx.texts, templates, client, opts, "r"),
            ConfigError);
    }
    SECTION("unknown paragraph ids in a selection are an error") {
        fx.texts.erase(fx.selections[0].paragraph_ids[0]);
        CHECK_THROWS_AS(run_matrix(fx.anchors, fx.selections, fx.texts, templates, client, opts, "r"),
                        StageError);
    }
}

TEST_CASE("statement JSONL round-trip", "[generation]") {
    testsupport::TempDir tmp;
    auto fx = full_matrix_fixture(1);
    auto templates = load_templates();
    GenerationOptions opts;
    DeterministicChatClient client(5);
    auto res = run_matrix(fx.anchors, fx.selections, fx.texts, templates, client, opts, "run-rt");
    {
        jsonl::Writer w(tmp.file("statements.jsonl"));
        for (const auto& s : res.statements) w.write(s.to_json());
    }
    auto loaded = load_statements(tmp.file("statements.jsonl"));
    REQUIRE(loaded.size() == res.statements.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].id == res.statements[i].id);
        CHECK(loaded[i].text == res.statements[i].text);
        CHECK(loaded[i].role == res.statements[i].role);
        CHECK(loaded[i].run_id == res.statements[i].run_id);
    }
}

TEST_CASE("near-duplicate grouping", "[generation]") {
    MockEmbeddingProvider embedder(384);
    auto mk = [](const std::string& id, const std::string& text) {
        GeneratedStatement s;
        s.id = id;
        s.text = text;
        s.role = StatementRole::consideration;
        return s;
    };

    SECTION("identical texts group together") {
        auto res = dedup_statements({mk("1", "Der Satz."), mk("2", "Der Satz.")}, embedder, 0.95);
        CHECK(res.kept.size() == 1);
        REQUIRE(res.duplicate_groups.count("1") == 1);
        CHECK(res.duplicate_groups.at("1") == std::vector<std::string>{"2"});
    }
    SECTION("distinct texts under low pairwise similarity keep everything") {
        auto res = dedup_statements({mk("1", "alpha beta gamma"), mk("2", "delta epsilon zeta"),
                                     mk("3", "eta theta iota")},
                                    embedder, 0.95);
        CHECK(res.kept.size() == 3);
        CHECK(res.duplicate_groups.empty());
    }
    SECTION("a planted paraphrase pair above 0.97 is grouped") {
        // 40 tokens, 39 shared: cosine = 39/40 = 0.975 under the bag-of-words
        // mock. Verified against the library cosine before asserting grouping.
        std::string common;
        for (int i = 0; i < 39; ++i) common += "tok" + std::to_string(i) + " ";
        std::string a = common + "uniqueA";
        std::string b = common + "uniqueB";
        auto vecs = embedder.embed({a, b});
        REQUIRE(cosine(vecs[0], vecs[1]) == Approx(0.975).margin(1e-6));
        auto res = dedup_statements({mk("1", a), mk("2", b)}, embedder, 0.97);
        CHECK(res.kept.size() == 1);
        CHECK(res.duplicate_groups.at("1") == std::vector<std::string>{"2"});
    }
    SECTION("threshold 1.0 with exact-duplicate-free input drops nothing") {
        auto res = dedup_statements({mk("1", "eins zwei"), mk("2", "eins drei"), mk("3", "vier")},
                                    embedder, 1.0);
        CHECK(res.kept.size() == 3);
    }
    SECTION("lowering the threshold never increases the kept count") {
        std::vector<GeneratedStatement> corpus;
        for (int i = 0; i < 12; ++i) {
            std::string text;
            for (int w = 0; w <= i; ++w) text += "w" + std::to_string(w) + " ";
            corpus.push_back(mk(std::to_string(i), text));
        }
        std::size_t prev = corpus.size() + 1;
        for (double t : {1.0, 0.95, 0.8, 0.6, 0.4, 0.2, 0.05}) {
            auto res = dedup_statements(corpus, embedder, t);
            CHECK(res.kept.size() <= prev);
            prev = res.kept.size();
        }
    }
    SECTION("threshold bounds") {
        CHECK_THROWS_AS(dedup_statements({}, embedder, 0.0), ConfigError);
        CHECK_THROWS_AS(dedup_statements({}, embedder, 1.5), ConfigError);
    }
}

TEST_CASE("review export/import round-trip", "[generation]") {
    testsupport::TempDir tmp;
    auto fx = full_matrix_fixture(2);
    auto templates = load_templates();
    GenerationOptions opts;
    DeterministicChatClient client(5);
    auto res = run_matrix(fx.anchors, fx.selections, fx.texts, templates, client, opts, "run-rv");
    const auto& statements = res.statements; // 50 considerations + 25 policies

    SECTION("all-keep import is the identity") {
        review_export(statements, tmp.file("sheet.csv"));
        auto instrument = review_import(tmp.file("sheet.csv"), statements);
        std::size_t considerations = 0, policies = 0;
        for (const auto& s : statements)
            (s.role == StatementRole::consideration ? considerations : policies)++;
        REQUIRE(instrument.considerations.size() == considerations);
        REQUIRE(instrument.policies.size() == policies);
        // texts preserved in corpus order; ordinal ids assigned
        std::size_t ci = 0;
        for (const auto& s : statements) {
            if (s.role != StatementRole::consideration) continue;
            CHECK(instrument.considerations[ci].text == s.text);
            CHECK(instrument.considerations[ci].source_statement_id == s.id);
            CHECK(instrument.considerations[ci].id == "C" + std::to_string(ci + 1));
            ++ci;
        }
        CHECK(instrument.policies[0].id == "P1");
    }
    SECTION("drops and edits are honored") {
        std::string sheet = "statement_id,text,category,leaning,decision,edited_text\n";
        for (std::size_t i = 0; i < statements.size(); ++i) {
            const auto& s = statements[i];
            std::string decision = (i % 3 == 0) ? "drop" : (i % 3 == 1 ? "keep" : "edit");
            std::string edited = (decision == "edit") ? "Edited " + std::to_string(i) : "";
            sheet += csv::join_row({s.id, s.text, s.category, to_string(s.leaning), decision, edited});
        }
        testsupport::write_file(tmp.file("sheet.csv"), sheet);
        auto instrument = review_import(tmp.file("sheet.csv"), statements);
        std::size_t kept = 0;
        for (std::size_t i = 0; i < statements.size(); ++i)
            if (i % 3 != 0) ++kept;
        CHECK(instrument.considerations.size() + instrument.policies.size() == kept);
        bool found_edit = false;
        for (const auto& item : instrument.considerations)
            if (item.text.rfind("Edited ", 0) == 0) found_edit = true;
        CHECK(found_edit);
    }
    SECTION("edit without edited_text is an error") {
        std::string sheet = "statement_id,text,category,leaning,decision,edited_text\n";
        for (const auto& s : statements)
            sheet += csv::join_row({s.id, s.text, s.category, to_string(s.leaning), "edit", ""});
        testsupport::write_file(tmp.file("sheet.csv"), sheet);
        CHECK_THROWS_AS(review_import(tmp.file("sheet.csv"), statements), StageError);
    }
    SECTION("unknown and missing ids are reported") {
        std::string sheet = "statement_id,text,category,leaning,decision,edited_text\n";
        sheet += csv::join_row({"not-a-real-id", "x", "c", "left", "keep", ""});
        for (std::size_t i = 1; i < statements.size(); ++i) {
            const auto& s = statements[i];
            sheet += csv::join_row({s.id, s.text, s.category, to_string(s.leaning), "keep", ""});
        }
        testsupport::write_file(tmp.file("sheet.csv"), sheet);
        try {
            review_import(tmp.file("sheet.csv"), statements);
            FAIL("expected StageError");
        } catch (const StageError& e) {
            CHECK(e.kind() == "review_mismatch");
            // both the unknown row and the missing first statement are listed
            CHECK(std::string(e.what()).find("unknown_ids=1") != std::string::npos);
            CHECK(std::string(e.what()).find("missing_ids=1") != std::string::npos);
        }
    }
    SECTION("duplicate rows are rejected") {
        std::string sheet = "statement_id,text,category,leaning,decision,edited_text\n";
        for (const auto& s : statements)
            sheet += csv::join_row({s.id, s.text, s.category, to_string(s.leaning), "keep", ""});
        const auto& s0 = statements[0];
        sheet += csv::join_row({s0.id, s0.text, s0.category, to_string(s0.leaning), "keep", ""});
        testsupport::write_file(tmp.file("sheet.csv"), sheet);
        CHECK_THROWS_AS(review_import(tmp.file("sheet.csv"), statements), StageError);
    }
}

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "driforge/categorization.hpp"
#include "driforge/config.hpp"
#include "driforge/corpus.hpp"
#include "driforge/dri.hpp"
#include "driforge/generation.hpp"
#include "driforge/http_providers.hpp"
#include "driforge/manifest.hpp"
#include "driforge/validation.hpp"

namespace driforge {

enum class Stage { ingest, embed, categorize, select, generate, review, score, validate, report };

inline std::string to_string(Stage s) {
    switch (s) {
    case Stage::ingest: return "ingest";
    case Stage::embed: return "embed";
    case Stage::categorize: return "categorize";
    case Stage::select: return "select";
    case Stage::generate: return "generate";
    case Stage::review: return "review";
    case Stage::score: return "score";
    case Stage::validate: return "validate";
    case Stage::report: return "report";
    }
    return "ingest";
}

inline std::optional<Stage> parse_stage(std::string_view s) {
    for (Stage st : {Stage::ingest, Stage::embed, Stage::categorize, Stage::select, Stage::generate,
                     Stage::review, Stage::score, Stage::validate, Stage::report})
        if (to_string(st) == s) return st;
    return std::nullopt;
}

inline const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> v{Stage::ingest, Stage::embed,  Stage::categorize,
                                      Stage::select, Stage::generate, Stage::review,
                                      Stage::score,  Stage::validate, Stage::report};
    return v;
}

// ---------------------------------------------------------------------------
// Provider wiring

inline std::unique_ptr<EmbeddingProvider> make_embedding_provider(const RunConfig& c) {
    if (c.embed_provider == "http") {
        if (c.embed_url.empty())
            throw ConfigError("embedding provider 'http' needs embedding.url or DRIFORGE_EMBED_URL");
        return std::make_unique<HttpEmbeddingProvider>(c.embed_url, c.embed_model, c.dim, c.embed_key);
    }
    return std::make_unique<MockEmbeddingProvider>(c.dim);
}

inline std::unique_ptr<ChatClient> make_chat_client(const RunConfig& c, const std::string& salt) {
    if (c.llm_provider == "http") {
        if (c.llm_url.empty()) throw ConfigError("llm provider 'http' needs generation.url or DRIFORGE_LLM_URL");
        return std::make_unique<HttpChatClient>(c.llm_url, c.llm_model, c.llm_key, c.temperature);
    }
    return std::make_unique<DeterministicChatClient>(c.statement_count, salt);
}

inline EmbeddingCache open_cache(const RunConfig& c, EmbeddingProvider& provider) {
    fs::create_directories(c.effective_cache_dir());
    std::string file = c.effective_cache_dir() + "/embeddings.bin";
    return EmbeddingCache(file, provider.provider_id(), provider.model_id(), provider.dim());
}

// Routes single embed() calls through the durable cache with batching/retry.
class CachedEmbedder : public EmbeddingProvider {
public:
    CachedEmbedder(EmbeddingProvider& inner, EmbeddingCache& cache, EmbedOptions opts)
        : inner_(inner), cache_(cache), opts_(opts) {}
    std::string provider_id() const override { return inner_.provider_id(); }
    std::string model_id() const override { return inner_.model_id(); }
    std::size_t dim() const override { return inner_.dim(); }
    std::vector<Vec> embed(const std::vector<std::string>& texts) override {
        return embed_batch(texts, inner_, cache_, opts_);
    }

private:
    EmbeddingProvider& inner_;
    EmbeddingCache& cache_;
    EmbedOptions opts_;
};

// ---------------------------------------------------------------------------
// Stage helpers

namespace detail {

inline std::string sanitize_filename(std::string_view name) {
    std::string out;
    for (char c : name)
        out.push_back((std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_');
    return out;
}

inline void write_json_file(const fs::path& path, const json& doc) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw StageError("stage_io", "cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

inline json read_json_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StageError("missing_input", "cannot open " + path.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ParseError("not valid JSON: " + path.string());
    return doc;
}

inline void require_path(const std::string& path, const std::string& what) {
    if (path.empty()) throw ConfigError("config is missing a path for " + what);
    if (!fs::exists(path)) throw StageError("missing_input", what + " not found: " + path);
}

struct ExemplarBank {
    std::vector<std::string> considerations;
    std::vector<std::string> policies;
};

// Optional prior-survey statements: JSONL {"id","text","role"}.
inline ExemplarBank load_exemplars(const std::string& path) {
    ExemplarBank bank;
    jsonl::for_each(path, [&](std::size_t line_no, const json& rec) {
        try {
            std::string text = rec.at("text").get<std::string>();
            std::string role = rec.value("role", "consideration");
            if (role == "policy") bank.policies.push_back(text);
            else bank.considerations.push_back(text);
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad exemplar record: ") + e.what(), line_no);
        }
    });
    return bank;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Stages

inline RunManifest run_stage(Stage stage, const RunConfig& config, bool force = false);

namespace stages {

inline void ingest(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs) {
    detail::require_path(c.input, "the article dump (paths.input)");
    detail::require_path(c.keywords, "the keyword list (paths.keywords)");
    detail::require_path(c.leanings, "the leaning map (paths.leanings)");
    inputs["input"] = hash_file(c.input);
    inputs["keywords"] = hash_file(c.keywords);
    inputs["leanings"] = hash_file(c.leanings);

    auto keywords = KeywordList::load_csv(c.keywords);
    auto leanings = LeaningMap::load_csv(c.leanings);
    IngestReport report;
    auto articles = driforge::ingest(c.input, c.window(), keywords, report, c.strict);
    DedupStats dedup_stats;
    auto paragraphs = build_paragraph_corpus(articles, keywords, leanings, &dedup_stats);

    {
        jsonl::Writer w(out.file("articles.jsonl").string());
        for (const auto& a : articles) w.write(article_to_json(a));
    }
    {
        jsonl::Writer w(out.file("paragraphs.jsonl").string());
        for (const auto& p : paragraphs) w.write(paragraph_to_json(p));
    }
    json rep = report.to_json();
    rep["paragraphs"] = {{"raw", dedup_stats.in},
                         {"kept", dedup_stats.kept},
                         {"dropped_duplicate", dedup_stats.dropped},
                         {"mean_per_article", dedup_stats.mean_per_article},
                         {"median_per_article", dedup_stats.median_per_article}};
    detail::write_json_file(out.file("report.json"), rep);
}

inline void embed(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs,
                  bool force) {
    require_stage(c.out_dir, "ingest", force);
    fs::path paragraphs_path = fs::path(c.out_dir) / "ingest" / "paragraphs.jsonl";
    detail::require_path(paragraphs_path.string(), "the paragraph corpus");
    inputs["paragraphs"] = hash_file(paragraphs_path);

    auto paragraphs = load_paragraphs(paragraphs_path.string());
    auto provider = make_embedding_provider(c);
    auto cache = open_cache(c, *provider);
    std::vector<std::string> texts;
    texts.reserve(paragraphs.size());
    for (const auto& p : paragraphs) texts.push_back(p.text);
    EmbedStats stats;
    embed_batch(texts, *provider, cache, c.embed_options(), &stats);
    // Export exactly the corpus vectors (the cache may hold more).
    std::set<std::string> keys;
    for (const auto& t : texts) keys.insert(EmbeddingCache::key_for(t));
    {
        jsonl::Writer w(out.file("vectors.jsonl").string());
        for (const auto& key : keys) {
            auto v = cache.get(key);
            if (v) w.write(json{{"hash", key}, {"vec", *v}});
        }
    }
    detail::write_json_file(out.file("embed_report.json"),
                            json{{"texts", stats.texts},
                                 {"cache_hits", stats.cache_hits},
                                 {"provider_calls", stats.provider_calls},
                                 {"embedded", stats.embedded},
                                 {"provider", provider->provider_id()},
                                 {"model", provider->model_id()},
                                 {"dim", provider->dim()}});
}

inline void categorize(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs,
                       bool force) {
    require_stage(c.out_dir, "ingest", force);
    require_stage(c.out_dir, "embed", force);
    fs::path paragraphs_path = fs::path(c.out_dir) / "ingest" / "paragraphs.jsonl";
    detail::require_path(paragraphs_path.string(), "the paragraph corpus");
    detail::require_path(c.anchors, "the anchor file (paths.anchors)");
    inputs["paragraphs"] = hash_file(paragraphs_path);
    inputs["anchors"] = hash_file(c.anchors);

    auto paragraphs = load_paragraphs(paragraphs_path.string());
    auto anchors = AnchorSet::load_json(c.anchors);
    auto provider = make_embedding_provider(c);
    auto cache = open_cache(c, *provider);
    auto corpus =
        embed_corpus_and_anchors(paragraphs, anchors, *provider, cache, c.reduction, c.embed_options());
    auto table = score_paragraphs(corpus, AnchorAggregation::max, c.parallelism);
    table.export_csv(out.file("scores.csv").string());
    {
        jsonl::Writer w(out.file("anchor_vectors.jsonl").string());
        for (const auto& cat : corpus.anchors.categories)
            for (const auto& [lang, vec] : cat.embeddings)
                w.write(json{{"category", cat.name},
                             {"lang", to_string(lang)},
                             {"general", cat.is_general},
                             {"vec", vec}});
    }
    detail::write_json_file(out.file("reduction.json"), c.reduction.to_json());
}

inline void select(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs,
                   bool force) {
    require_stage(c.out_dir, "categorize", force);
    fs::path scores_path = fs::path(c.out_dir) / "categorize" / "scores.csv";
    fs::path paragraphs_path = fs::path(c.out_dir) / "ingest" / "paragraphs.jsonl";
    detail::require_path(scores_path.string(), "the score table");
    detail::require_path(paragraphs_path.string(), "the paragraph corpus");
    inputs["scores"] = hash_file(scores_path);
    inputs["paragraphs"] = hash_file(paragraphs_path);

    auto table = ScoreTable::import_csv(scores_path.string());
    auto paragraphs = load_paragraphs(paragraphs_path.string());
    std::map<std::string, std::optional<Leaning>> leanings;
    for (const auto& p : paragraphs) leanings[p.id] = p.leaning;

    jsonl::Writer w(out.file("selections.jsonl").string());
    auto emit = [&](const Selection& sel) {
        for (const auto& row : selection_to_jsonl_rows(sel)) w.write(row);
    };
    for (const auto& name : table.category_names) {
        emit(select_top_k(table, name, c.k, std::nullopt, leanings));
        for (Leaning lean : c.leanings_scope) emit(select_top_k(table, name, c.k, lean, leanings));
    }
    detail::write_json_file(out.file("selection_report.json"),
                            json{{"k", c.k}, {"categories", table.category_names.size()}});
}

inline void generate(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs,
                     bool force) {
    require_stage(c.out_dir, "select", force);
    fs::path selections_path = fs::path(c.out_dir) / "select" / "selections.jsonl";
    fs::path paragraphs_path = fs::path(c.out_dir) / "ingest" / "paragraphs.jsonl";
    detail::require_path(selections_path.string(), "the selections");
    detail::require_path(paragraphs_path.string(), "the paragraph corpus");
    detail::require_path(c.anchors, "the anchor file (paths.anchors)");
    detail::require_path(c.templates, "the prompt template directory (paths.templates)");
    inputs["selections"] = hash_file(selections_path);
    inputs["paragraphs"] = hash_file(paragraphs_path);
    inputs["anchors"] = hash_file(c.anchors);

    auto selections = load_selections(selections_path.string());
    auto paragraphs = load_paragraphs(paragraphs_path.string());
    std::map<std::string, std::string> texts;
    for (const auto& p : paragraphs) texts[p.id] = p.text;
    auto anchors = AnchorSet::load_json(c.anchors);
    auto templates = PromptTemplates::load_dir(c.templates);
    auto opts = c.generation_options();

    // Optional exemplar bank, ranked per category by raw-space similarity to
    // that category's anchor.
    std::map<std::string, std::vector<std::string>> exemplars_by_category;
    if (!c.exemplars.empty()) {
        detail::require_path(c.exemplars, "the exemplar bank (paths.exemplars)");
        inputs["exemplars"] = hash_file(c.exemplars);
        auto bank = detail::load_exemplars(c.exemplars);
        if (!bank.considerations.empty()) {
            auto provider = make_embedding_provider(c);
            auto cache = open_cache(c, *provider);
            CachedEmbedder embedder(*provider, cache, c.embed_options());
            auto exemplar_vecs = embedder.embed(bank.considerations);
            for (const auto& cat : anchors.categories) {
                std::vector<std::string> anchor_texts;
                for (const auto& [lang, text] : cat.variants) anchor_texts.push_back(text);
                auto anchor_vecs = embedder.embed(anchor_texts);
                std::vector<std::pair<double, std::size_t>> ranked;
                for (std::size_t i = 0; i < exemplar_vecs.size(); ++i) {
                    double best = -2.0;
                    for (const auto& av : anchor_vecs) best = std::max(best, cosine(exemplar_vecs[i], av));
                    ranked.emplace_back(best, i);
                }
                std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
                    if (a.first != b.first) return a.first > b.first;
                    return a.second < b.second;
                });
                std::vector<std::string> top;
                for (std::size_t i = 0; i < ranked.size() && i < opts.exemplar_count; ++i)
                    top.push_back(bank.considerations[ranked[i].second]);
                exemplars_by_category[cat.name] = std::move(top);
            }
        }
    }

    std::string base_run = short_hash(c.config_hash() + inputs["selections"]).substr(0, 12);
    std::vector<GeneratedStatement> statements;
    std::vector<PromptRecord> prompt_records;
    std::set<std::string> prompt_hashes;
    std::vector<std::string> missing;
    std::size_t considerations = 0, policies = 0;
    for (std::size_t run = 1; run <= std::max<std::size_t>(1, c.runs); ++run) {
        std::string run_id = "run-" + base_run + "-" + std::to_string(run);
        auto client = make_chat_client(c, run_id);
        auto res = run_matrix(anchors, selections, texts, templates, *client, opts, run_id, c.policy_scope,
                              c.strict, exemplars_by_category.empty() ? nullptr : &exemplars_by_category);
        considerations += res.considerations;
        policies += res.policies;
        for (auto& s : res.statements) statements.push_back(std::move(s));
        for (auto& p : res.prompts)
            if (prompt_hashes.insert(p.prompt_hash).second) prompt_records.push_back(std::move(p));
        if (run == 1) missing = res.missing_cells;
    }

    {
        jsonl::Writer w(out.file("statements.jsonl").string());
        for (const auto& s : statements) w.write(s.to_json());
    }
    {
        jsonl::Writer w(out.file("prompts.jsonl").string());
        for (const auto& p : prompt_records) w.write(p.to_json());
    }
    json dedup_report;
    {
        auto provider = make_embedding_provider(c);
        auto cache = open_cache(c, *provider);
        CachedEmbedder embedder(*provider, cache, c.embed_options());
        auto dd = dedup_statements(statements, embedder, c.dedup_threshold);
        json groups = json::object();
        for (const auto& [kept, dups] : dd.duplicate_groups) groups[kept] = dups;
        dedup_report = json{{"threshold", c.dedup_threshold},
                            {"kept", dd.kept.size()},
                            {"grouped", statements.size() - dd.kept.size()},
                            {"groups", groups}};
    }
    detail::write_json_file(out.file("dedup_groups.json"), dedup_report);
    detail::write_json_file(out.file("generation_report.json"),
                            json{{"considerations", considerations},
                                 {"policies", policies},
                                 {"total", statements.size()},
                                 {"runs", std::max<std::size_t>(1, c.runs)},
                                 {"missing_cells", missing},
                                 {"model", c.llm_provider == "http" ? c.llm_model : "mock-chat"}});
}

inline void review(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs,
                   bool force) {
    require_stage(c.out_dir, "generate", force);
    fs::path statements_path = fs::path(c.out_dir) / "generate" / "statements.jsonl";
    detail::require_path(statements_path.string(), "the generated statements");
    inputs["statements"] = hash_file(statements_path);

    auto statements = load_statements(statements_path.string());
    fs::path sheet = out.file("sheet.csv");
    review_export(statements, sheet.string());

    std::string decisions_path;
    if (!c.decisions.empty()) {
        detail::require_path(c.decisions, "the review decisions sheet (review.decisions)");
        inputs["decisions"] = hash_file(c.decisions);
        decisions_path = c.decisions;
    } else if (c.auto_keep) {
        decisions_path = sheet.string();
    }
    if (decisions_path.empty()) return; // export-only round: a human edits the sheet

    auto instrument_items = review_import(decisions_path, statements);
    SurveyInstrument instrument;
    for (const auto& item : instrument_items.considerations) instrument.considerations.push_back(item.id);
    for (const auto& item : instrument_items.policies) instrument.preferences.push_back(item.id);
    instrument.scale_min = c.scale_min;
    instrument.scale_max = c.scale_max;
    instrument.ranking_mode = c.ranking_mode;
    instrument.validate();
    detail::write_json_file(out.file("instrument.json"), instrument.to_json());
    {
        jsonl::Writer w(out.file("instrument_items.jsonl").string());
        for (const auto& item : instrument_items.considerations)
            w.write(json{{"id", item.id}, {"text", item.text}, {"role", "consideration"},
                         {"source_statement_id", item.source_statement_id}});
        for (const auto& item : instrument_items.policies)
            w.write(json{{"id", item.id}, {"text", item.text}, {"role", "policy"},
                         {"source_statement_id", item.source_statement_id}});
    }
}

inline void score(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs,
                  bool force) {
    std::string instrument_path = c.effective_instrument();
    if (c.instrument.empty()) require_stage(c.out_dir, "review", force);
    detail::require_path(instrument_path, "the survey instrument");
    detail::require_path(c.responses, "the survey responses (paths.responses)");
    inputs["instrument"] = hash_file(instrument_path);
    inputs["responses"] = hash_file(c.responses);

    auto instrument = SurveyInstrument::load(instrument_path);
    auto responses = load_responses(c.responses, instrument);
    std::vector<SurveyResponse> in_wave;
    for (auto& r : responses)
        if (r.wave == c.wave) in_wave.push_back(std::move(r));
    if (in_wave.size() < 2)
        throw StageError("missing_input", "need at least 2 responses in wave '" + to_string(c.wave) +
                                              "', found " + std::to_string(in_wave.size()));
    ValidationOptions vopts;
    vopts.permissive_missing = c.permissive_missing;
    auto pairs = pair_points(in_wave, instrument, vopts);
    auto result = group_dri(pairs, c.wave, instrument.content_hash());
    detail::write_json_file(out.file("result_" + to_string(c.wave) + ".json"), result.to_json());
    export_scatter(result, out.file("scatter_" + to_string(c.wave) + ".csv").string());
}

inline void validate(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs,
                     bool force) {
    require_stage(c.out_dir, "generate", force);
    fs::path statements_path = fs::path(c.out_dir) / "generate" / "statements.jsonl";
    detail::require_path(statements_path.string(), "the generated statements");
    detail::require_path(c.reference, "the reference survey (paths.reference)");
    inputs["statements"] = hash_file(statements_path);
    inputs["reference"] = hash_file(c.reference);

    auto statements = load_statements(statements_path.string());
    auto reference = load_reference_items(c.reference);
    std::vector<std::pair<std::string, std::string>> ref_pairs, gen_pairs;
    for (const auto& r : reference) ref_pairs.emplace_back(r.id, r.text);
    for (const auto& s : statements) gen_pairs.emplace_back(s.id, s.text);

    auto provider = make_embedding_provider(c);
    auto cache = open_cache(c, *provider);
    CachedEmbedder embedder(*provider, cache, c.embed_options());
    auto matrix = match_matrix(ref_pairs, gen_pairs, embedder);
    matrix.export_csv(out.file("match_matrix.csv").string());

    {
        std::ofstream cand(out.file("candidates.csv"), std::ios::binary);
        cand << "reference_id,rank,candidate_id,score\n";
        char buf[32];
        for (const auto& rid : matrix.reference_ids) {
            auto top = top_candidates(matrix, rid, c.top_n);
            for (std::size_t i = 0; i < top.size(); ++i) {
                std::snprintf(buf, sizeof(buf), "%.9f", top[i].score);
                cand << csv::escape(rid) << ',' << (i + 1) << ',' << csv::escape(top[i].id) << ',' << buf
                     << '\n';
            }
        }
    }

    if (!c.judgments.empty()) {
        detail::require_path(c.judgments, "the judgments file (paths.judgments)");
        inputs["judgments"] = hash_file(c.judgments);
        auto judgments = load_judgments(c.judgments);
        json rates{{"all", match_rate(judgments, reference, false).to_json()}};
        bool any_general = false;
        for (const auto& r : reference) any_general |= r.general_style;
        if (any_general) rates["excluding_general"] = match_rate(judgments, reference, true).to_json();
        detail::write_json_file(out.file("match_rate.json"), rates);
    }
}

inline void report(const RunConfig& c, StageOutput& out, std::map<std::string, std::string>& inputs,
                   bool force) {
    require_stage(c.out_dir, "categorize", force);
    require_stage(c.out_dir, "select", force);
    fs::path scores_path = fs::path(c.out_dir) / "categorize" / "scores.csv";
    fs::path paragraphs_path = fs::path(c.out_dir) / "ingest" / "paragraphs.jsonl";
    fs::path ingest_report_path = fs::path(c.out_dir) / "ingest" / "report.json";
    detail::require_path(scores_path.string(), "the score table");
    inputs["scores"] = hash_file(scores_path);

    auto table = ScoreTable::import_csv(scores_path.string());
    for (const auto& name : table.category_names) {
        auto h = similarity_histogram(table, name, c.histogram_bins);
        h.export_csv(out.file("histogram_" + detail::sanitize_filename(name) + ".csv").string());
    }

    std::map<std::string, std::optional<Leaning>> leanings;
    if (fs::exists(paragraphs_path))
        for (const auto& p : load_paragraphs(paragraphs_path.string())) leanings[p.id] = p.leaning;

    json overlap_stats = json::object();
    for (std::size_t k : c.overlap_ks) {
        std::vector<Selection> pooled;
        for (const auto& name : table.category_names)
            pooled.push_back(select_top_k(table, name, k, std::nullopt, leanings));
        auto pooled_overlap = overlap_matrix(pooled);
        pooled_overlap.export_csv(out.file("overlap_k" + std::to_string(k) + ".csv").string());

        // The pooled and the per-leaning-averaged view are both reported.
        double lean_sum = 0.0;
        std::size_t lean_count = 0;
        for (Leaning lean : c.leanings_scope) {
            std::vector<Selection> scoped;
            for (const auto& name : table.category_names)
                scoped.push_back(select_top_k(table, name, k, lean, leanings));
            bool any = false;
            for (const auto& s : scoped) any |= !s.paragraph_ids.empty();
            if (!any) continue;
            lean_sum += overlap_matrix(scoped).mean_off_diagonal;
            ++lean_count;
        }
        overlap_stats[std::to_string(k)] = {
            {"pooled_mean_off_diagonal", pooled_overlap.mean_off_diagonal},
            {"per_leaning_mean_off_diagonal", lean_count ? json(lean_sum / double(lean_count)) : json(nullptr)}};
    }
    detail::write_json_file(out.file("overlap_stats.json"), overlap_stats);

    json stats = json::object();
    if (fs::exists(ingest_report_path)) stats["ingest"] = detail::read_json_file(ingest_report_path);
    stats["categories"] = table.category_names;
    stats["scored_paragraphs"] = table.rows.size();
    detail::write_json_file(out.file("pipeline_stats.json"), stats);

    for (Wave w : {Wave::pre, Wave::mid, Wave::post}) {
        fs::path result = fs::path(c.out_dir) / "score" / ("result_" + to_string(w) + ".json");
        if (!fs::exists(result)) continue;
        auto dri = DriResult::load(result.string());
        export_scatter(dri, out.file("dri_scatter_" + to_string(w) + ".csv").string());
    }
}

} // namespace stages

// Runs one stage: locks the output root, validates upstream manifests, writes
// outputs into a temp directory and atomically renames it into place with a
// manifest. Throws StageError on any failure.
inline RunManifest run_stage(Stage stage, const RunConfig& config, bool force) {
    config.validate();
    DirectoryLock lock(config.out_dir);
    std::int64_t started = manifest_now();
    StageOutput out(config.out_dir, to_string(stage));
    std::map<std::string, std::string> inputs;
    switch (stage) {
    case Stage::ingest: stages::ingest(config, out, inputs); break;
    case Stage::embed: stages::embed(config, out, inputs, force); break;
    case Stage::categorize: stages::categorize(config, out, inputs, force); break;
    case Stage::select: stages::select(config, out, inputs, force); break;
    case Stage::generate: stages::generate(config, out, inputs, force); break;
    case Stage::review: stages::review(config, out, inputs, force); break;
    case Stage::score: stages::score(config, out, inputs, force); break;
    case Stage::validate: stages::validate(config, out, inputs, force); break;
    case Stage::report: stages::report(config, out, inputs, force); break;
    }
    out.commit(inputs, config.config_hash(), started);
    return RunManifest::load(fs::path(config.out_dir) / to_string(stage) / "manifest.json");
}

} // namespace driforge

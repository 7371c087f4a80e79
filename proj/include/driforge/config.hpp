#pragma once

#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "driforge/corpus.hpp"
#include "driforge/dri.hpp"
#include "driforge/errors.hpp"
#include "driforge/generation.hpp"
#include "driforge/hash.hpp"
#include "driforge/reduce.hpp"
#include "driforge/toml.hpp"

namespace driforge {

// Declarative run configuration. Stages read everything from here; CLI flags
// override single fields, and environment variables override secrets only
// (DRIFORGE_EMBED_URL/KEY, DRIFORGE_LLM_URL/KEY).
struct RunConfig {
    // [paths]
    std::string out_dir = "out";
    std::string input;      // article dump JSONL
    std::string keywords;   // CSV keyword,language
    std::string leanings;   // CSV outlet,score
    std::string anchors;    // anchor JSON
    std::string templates;  // prompt template directory
    std::string exemplars;  // optional prior-statement bank (JSONL id/text/role)
    std::string reference;  // validation reference survey JSONL
    std::string judgments;  // optional judgments CSV
    std::string responses;  // survey responses CSV/JSONL
    std::string instrument; // survey instrument JSON; empty = the review stage output
    std::string cache_dir;  // embedding cache location; empty = <out_dir>/cache

    // [ingest]
    std::string date_from = "2018-01-01";
    std::string date_to = "2024-08-29";
    bool strict = false;

    // [embedding]
    std::string embed_provider = "mock"; // mock | http
    std::string embed_model = "hashed-bow-384";
    std::string embed_url;               // env DRIFORGE_EMBED_URL
    std::string embed_key;               // env DRIFORGE_EMBED_KEY
    std::size_t dim = 384;
    std::size_t batch_size = 64;
    std::size_t max_retries = 3;
    std::size_t backoff_ms = 100;
    std::size_t parallelism = 0; // 0 = hardware default

    // [reduction]
    ReductionSpec reduction;

    // [selection]
    std::size_t k = 500;
    std::vector<Leaning> leanings_scope = all_leanings();

    // [generation]
    std::string llm_provider = "mock"; // mock | http
    std::string llm_model = "mock-chat";
    std::string llm_url; // env DRIFORGE_LLM_URL
    std::string llm_key; // env DRIFORGE_LLM_KEY
    std::size_t statement_count = 5;
    PolicyScope policy_scope = PolicyScope::general;
    double dedup_threshold = 0.95;
    double temperature = 0.2;
    std::size_t runs = 1;
    std::size_t exemplar_count = 25;

    // [review]
    bool auto_keep = true;
    std::string decisions; // externally edited sheet, wins over auto_keep

    // [scoring]
    Wave wave = Wave::pre;
    RankingMode ranking_mode = RankingMode::strict_permutation;
    int scale_min = -4;
    int scale_max = 4;
    bool permissive_missing = false;

    // [validation]
    std::size_t top_n = 5;
    bool exclude_general = false;

    // [report]
    std::vector<std::size_t> overlap_ks = {10, 100};
    std::size_t histogram_bins = 100;

    void validate() const {
        if (k < 1) throw ConfigError("selection k must be >= 1");
        if (!(dedup_threshold > 0.0 && dedup_threshold <= 1.0))
            throw ConfigError("dedup threshold must be in (0, 1]");
        if (statement_count < 1) throw ConfigError("statement_count must be >= 1");
        if (dim == 0) throw ConfigError("embedding dim must be positive");
        if (!parse_date(date_from) || !parse_date(date_to))
            throw ConfigError("ingest dates must be YYYY-MM-DD");
        if (scale_min >= scale_max) throw ConfigError("rating scale min must be below max");
        if (embed_provider != "mock" && embed_provider != "http")
            throw ConfigError("embedding provider must be mock or http");
        if (llm_provider != "mock" && llm_provider != "http")
            throw ConfigError("llm provider must be mock or http");
        if (out_dir.empty()) throw ConfigError("out_dir must be set");
    }

    DateRange window() const { return DateRange{*parse_date(date_from), *parse_date(date_to)}; }

    std::string effective_cache_dir() const { return cache_dir.empty() ? out_dir + "/cache" : cache_dir; }
    std::string effective_instrument() const {
        return instrument.empty() ? out_dir + "/review/instrument.json" : instrument;
    }

    EmbedOptions embed_options() const {
        EmbedOptions o;
        o.batch_size = batch_size;
        o.max_attempts = max_retries;
        o.backoff_ms = backoff_ms;
        return o;
    }

    GenerationOptions generation_options() const {
        GenerationOptions o;
        o.statement_count = statement_count;
        o.max_attempts = max_retries;
        o.transport_attempts = max_retries;
        o.backoff_ms = backoff_ms;
        o.exemplar_count = exemplar_count;
        o.temperature = temperature;
        return o;
    }

    // Canonical JSON rendering; the manifest's config hash is taken over this.
    // Secrets (keys) and artifact locations (out_dir, cache_dir) never enter
    // the hash, so the same semantic run hashes identically anywhere on disk.
    json to_json() const {
        std::vector<std::string> leaning_names;
        for (auto l : leanings_scope) leaning_names.push_back(to_string(l));
        return json{
            {"paths",
             {{"input", input}, {"keywords", keywords}, {"leanings", leanings},
              {"anchors", anchors}, {"templates", templates}, {"exemplars", exemplars},
              {"reference", reference}, {"judgments", judgments}, {"responses", responses},
              {"instrument", instrument}}},
            {"ingest", {{"from", date_from}, {"to", date_to}, {"strict", strict}}},
            {"embedding",
             {{"provider", embed_provider}, {"model", embed_model}, {"url", embed_url}, {"dim", dim},
              {"batch_size", batch_size}, {"max_retries", max_retries}, {"backoff_ms", backoff_ms},
              {"parallelism", parallelism}}},
            {"reduction", reduction.to_json()},
            {"selection", {{"k", k}, {"leanings", leaning_names}}},
            {"generation",
             {{"provider", llm_provider}, {"model", llm_model}, {"url", llm_url},
              {"statement_count", statement_count},
              {"policy_scope", policy_scope == PolicyScope::general ? "general" : "all"},
              {"dedup_threshold", dedup_threshold}, {"temperature", temperature}, {"runs", runs},
              {"exemplar_count", exemplar_count}}},
            {"review", {{"auto_keep", auto_keep}, {"decisions", decisions}}},
            {"scoring",
             {{"wave", to_string(wave)},
              {"ranking_mode", ranking_mode == RankingMode::strict_permutation ? "strict_permutation" : "ties_allowed"},
              {"scale_min", scale_min}, {"scale_max", scale_max},
              {"permissive_missing", permissive_missing}}},
            {"validation", {{"top_n", top_n}, {"exclude_general", exclude_general}}},
            {"report", {{"overlap_ks", overlap_ks}, {"histogram_bins", histogram_bins}}}};
    }

    std::string config_hash() const { return sha256_hex(to_json().dump()); }

    static RunConfig from_toml(const toml::Table& t) {
        RunConfig c;
        c.out_dir = t.get_string("paths.out_dir", c.out_dir);
        c.input = t.get_string("paths.input");
        c.keywords = t.get_string("paths.keywords");
        c.leanings = t.get_string("paths.leanings");
        c.anchors = t.get_string("paths.anchors");
        c.templates = t.get_string("paths.templates");
        c.exemplars = t.get_string("paths.exemplars");
        c.reference = t.get_string("paths.reference");
        c.judgments = t.get_string("paths.judgments");
        c.responses = t.get_string("paths.responses");
        c.instrument = t.get_string("paths.instrument");
        c.cache_dir = t.get_string("paths.cache_dir");

        c.date_from = t.get_string("ingest.from", c.date_from);
        c.date_to = t.get_string("ingest.to", c.date_to);
        c.strict = t.get_bool("ingest.strict", c.strict);

        c.embed_provider = t.get_string("embedding.provider", c.embed_provider);
        c.dim = static_cast<std::size_t>(t.get_int("embedding.dim", std::int64_t(c.dim)));
        c.embed_model = t.get_string("embedding.model", "hashed-bow-" + std::to_string(c.dim));
        c.embed_url = t.get_string("embedding.url", c.embed_url);
        c.batch_size = static_cast<std::size_t>(t.get_int("embedding.batch_size", std::int64_t(c.batch_size)));
        c.max_retries = static_cast<std::size_t>(t.get_int("embedding.max_retries", std::int64_t(c.max_retries)));
        c.backoff_ms = static_cast<std::size_t>(t.get_int("embedding.backoff_ms", std::int64_t(c.backoff_ms)));
        c.parallelism = static_cast<std::size_t>(t.get_int("embedding.parallelism", std::int64_t(c.parallelism)));

        std::string method = t.get_string("reduction.method", "none");
        if (method == "none") c.reduction.method = ReductionMethod::none;
        else if (method == "pca") c.reduction.method = ReductionMethod::pca;
        else if (method == "import" || method == "external_import") c.reduction.method = ReductionMethod::external_import;
        else throw ConfigError("unknown reduction method: " + method);
        c.reduction.target_dim = static_cast<std::size_t>(t.get_int("reduction.target_dim", 50));
        c.reduction.import_path = t.get_string("reduction.import_path");
        // Provenance for externally produced reductions (recorded, not executed).
        for (const char* key : {"neighbors", "min_dist", "metric"}) {
            std::string full = std::string("reduction.") + key;
            if (t.has(full)) {
                if (auto* s = std::get_if<std::string>(&t.values.at(full))) c.reduction.params[key] = *s;
                else if (auto* i = std::get_if<std::int64_t>(&t.values.at(full)))
                    c.reduction.params[key] = std::to_string(*i);
                else if (auto* d = std::get_if<double>(&t.values.at(full)))
                    c.reduction.params[key] = std::to_string(*d);
            }
        }

        c.k = static_cast<std::size_t>(t.get_int("selection.k", std::int64_t(c.k)));
        if (t.has("selection.leanings")) {
            c.leanings_scope.clear();
            for (const auto& name : t.get_string_array("selection.leanings")) {
                auto l = parse_leaning(name);
                if (!l) throw ConfigError("unknown leaning in selection.leanings: " + name);
                c.leanings_scope.push_back(*l);
            }
        }

        c.llm_provider = t.get_string("generation.provider", c.llm_provider);
        c.llm_model = t.get_string("generation.model", c.llm_model);
        c.llm_url = t.get_string("generation.url", c.llm_url);
        c.statement_count =
            static_cast<std::size_t>(t.get_int("generation.statement_count", std::int64_t(c.statement_count)));
        std::string scope = t.get_string("generation.policy_scope", "general");
        auto ps = parse_policy_scope(scope);
        if (!ps) throw ConfigError("unknown policy scope: " + scope);
        c.policy_scope = *ps;
        c.dedup_threshold = t.get_double("generation.dedup_threshold", c.dedup_threshold);
        c.temperature = t.get_double("generation.temperature", c.temperature);
        c.runs = static_cast<std::size_t>(t.get_int("generation.runs", std::int64_t(c.runs)));
        c.exemplar_count =
            static_cast<std::size_t>(t.get_int("generation.exemplar_count", std::int64_t(c.exemplar_count)));

        c.auto_keep = t.get_bool("review.auto_keep", c.auto_keep);
        c.decisions = t.get_string("review.decisions", c.decisions);

        std::string wave = t.get_string("scoring.wave", "pre");
        auto w = parse_wave(wave);
        if (!w) throw ConfigError("unknown wave: " + wave);
        c.wave = *w;
        std::string mode = t.get_string("scoring.ranking_mode", "strict_permutation");
        auto rm = parse_ranking_mode(mode);
        if (!rm) throw ConfigError("unknown ranking_mode: " + mode);
        c.ranking_mode = *rm;
        c.scale_min = static_cast<int>(t.get_int("scoring.scale_min", c.scale_min));
        c.scale_max = static_cast<int>(t.get_int("scoring.scale_max", c.scale_max));
        c.permissive_missing = t.get_bool("scoring.permissive_missing", c.permissive_missing);

        c.top_n = static_cast<std::size_t>(t.get_int("validation.top_n", std::int64_t(c.top_n)));
        c.exclude_general = t.get_bool("validation.exclude_general", c.exclude_general);

        if (t.has("report.overlap_ks")) {
            c.overlap_ks.clear();
            for (const auto& s : t.get_string_array("report.overlap_ks"))
                c.overlap_ks.push_back(static_cast<std::size_t>(std::stoll(s)));
        }
        c.histogram_bins =
            static_cast<std::size_t>(t.get_int("report.histogram_bins", std::int64_t(c.histogram_bins)));

        c.apply_env_overrides();
        return c;
    }

    static RunConfig load(const std::string& path) { return from_toml(toml::parse_file(path)); }

    void apply_env_overrides() {
        if (const char* v = std::getenv("DRIFORGE_EMBED_URL")) embed_url = v;
        if (const char* v = std::getenv("DRIFORGE_EMBED_KEY")) embed_key = v;
        if (const char* v = std::getenv("DRIFORGE_LLM_URL")) llm_url = v;
        if (const char* v = std::getenv("DRIFORGE_LLM_KEY")) llm_key = v;
    }
};

} // namespace driforge

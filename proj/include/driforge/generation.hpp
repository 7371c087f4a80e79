#pragma once

#include <chrono>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "driforge/categorization.hpp"
#include "driforge/chat.hpp"
#include "driforge/corpus.hpp"
#include "driforge/csv.hpp"
#include "driforge/embedding.hpp"
#include "driforge/errors.hpp"
#include "driforge/hash.hpp"

namespace driforge {

enum class StatementRole { consideration, policy };

inline std::string to_string(StatementRole r) {
    return r == StatementRole::consideration ? "consideration" : "policy";
}

inline std::optional<StatementRole> parse_role(std::string_view s) {
    if (s == "consideration" || s == "considerations") return StatementRole::consideration;
    if (s == "policy") return StatementRole::policy;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// Prompt construction

struct PromptTemplates {
    std::string considerations;
    std::string policy;

    static std::string read_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open prompt template: " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        return buf.str();
    }

    // Directory with considerations.txt and policy.txt.
    static PromptTemplates load_dir(const std::string& dir) {
        PromptTemplates t;
        t.considerations = read_file(dir + "/considerations.txt");
        t.policy = read_file(dir + "/policy.txt");
        return t;
    }

    const std::string& for_role(StatementRole r) const {
        return r == StatementRole::consideration ? considerations : policy;
    }
};

struct GenerationOptions {
    std::size_t statement_count = 5;
    std::size_t max_attempts = 3;          // schema retries, correction appended
    std::size_t transport_attempts = 3;    // network retries with backoff
    std::size_t backoff_ms = 100;
    std::size_t exemplar_count = 25;       // top-m exemplars by anchor similarity
    double temperature = 0.2;              // passed through to HTTP clients
    std::string role_explanation_considerations =
        "You are writing survey consideration statements: short, neutral, self-contained sentences "
        "that each express one belief, value or reason voiced in the public debate, suitable for "
        "agreement rating on a Likert scale.";
    std::string role_explanation_policy =
        "You are writing survey policy options: short, concrete, actionable policy proposals voiced "
        "in the public debate, suitable for ranking from most to least preferred.";
};

struct PromptSpec {
    StatementRole role = StatementRole::consideration;
    std::string category;
    Leaning leaning = Leaning::centrist;
    std::string system_prompt;
    std::string user_prompt;
    std::size_t statement_count = 5;
    std::string prompt_hash;
};

namespace detail {

inline std::string render_template(std::string text, const std::map<std::string, std::string>& vars) {
    for (const auto& [key, value] : vars) {
        std::string needle = "{{" + key + "}}";
        std::size_t pos;
        while ((pos = text.find(needle)) != std::string::npos) text.replace(pos, needle.size(), value);
    }
    std::size_t open = text.find("{{");
    if (open != std::string::npos) {
        std::size_t close = text.find("}}", open);
        std::string placeholder =
            close == std::string::npos ? text.substr(open) : text.substr(open, close - open + 2);
        throw StageError("unresolved_placeholder", "prompt template placeholder not resolved: " + placeholder);
    }
    return text;
}

} // namespace detail

// Renders the system template with the role explanation, leaning instruction,
// exemplars and required output schema, and attaches the selection's
// paragraphs in rank order as the user message.
inline PromptSpec build_prompt(StatementRole role, const std::string& category, Leaning leaning,
                               const Selection& selection, const std::vector<std::string>& attachment_texts,
                               const PromptTemplates& templates, const GenerationOptions& opts,
                               const std::vector<std::string>& exemplars = {}) {
    if (selection.category != category || selection.leaning != std::optional<Leaning>(leaning))
        throw StageError("selection_mismatch", "selection (" + selection.category + ", " +
                                                   (selection.leaning ? to_string(*selection.leaning) : "none") +
                                                   ") does not match prompt cell (" + category + ", " +
                                                   to_string(leaning) + ")");
    if (attachment_texts.empty())
        throw StageError("empty_attachment", "prompt for (" + category + ", " + to_string(leaning) +
                                                 ") has no paragraphs attached");
    if (opts.statement_count < 1) throw ConfigError("statement_count must be >= 1");

    std::string exemplar_block;
    if (exemplars.empty()) {
        exemplar_block = "(no prior-survey exemplars provided)";
    } else {
        for (std::size_t i = 0; i < exemplars.size(); ++i)
            exemplar_block += std::to_string(i + 1) + ". " + exemplars[i] + "\n";
    }

    PromptSpec spec;
    spec.role = role;
    spec.category = category;
    spec.leaning = leaning;
    spec.statement_count = opts.statement_count;
    spec.system_prompt = detail::render_template(
        templates.for_role(role),
        {{"role_explanation", role == StatementRole::consideration ? opts.role_explanation_considerations
                                                                   : opts.role_explanation_policy},
         {"leaning", to_string(leaning)},
         {"category", category},
         {"statement_count", std::to_string(opts.statement_count)},
         {"exemplars", exemplar_block}});
    spec.system_prompt += "\nOutput exactly " + std::to_string(opts.statement_count) +
                          " items as a JSON array of " + std::to_string(opts.statement_count) +
                          " strings. Output only the JSON array.";

    std::string user = "Source paragraphs, most relevant first:\n";
    for (std::size_t i = 0; i < attachment_texts.size(); ++i)
        user += std::to_string(i + 1) + ". " + attachment_texts[i] + "\n";
    spec.user_prompt = std::move(user);
    spec.prompt_hash = sha256_hex(spec.system_prompt + "\x1f" + spec.user_prompt);
    return spec;
}

// ---------------------------------------------------------------------------
// Generation

struct GeneratedStatement {
    std::string id;
    StatementRole role = StatementRole::consideration;
    std::string text;
    std::string category;
    Leaning leaning = Leaning::centrist;
    std::string run_id;
    std::string prompt_hash;

    json to_json() const {
        return json{{"id", id},           {"role", to_string(role)},       {"text", text},
                    {"category", category}, {"leaning", to_string(leaning)}, {"run_id", run_id},
                    {"prompt_hash", prompt_hash}};
    }

    static GeneratedStatement from_json(const json& rec) {
        GeneratedStatement s;
        s.id = rec.at("id").get<std::string>();
        auto role = parse_role(rec.at("role").get<std::string>());
        if (!role) throw ParseError("unknown statement role");
        s.role = *role;
        s.text = rec.at("text").get<std::string>();
        s.category = rec.at("category").get<std::string>();
        auto lean = parse_leaning(rec.at("leaning").get<std::string>());
        if (!lean) throw ParseError("unknown statement leaning");
        s.leaning = *lean;
        s.run_id = rec.value("run_id", "");
        s.prompt_hash = rec.value("prompt_hash", "");
        return s;
    }
};

inline std::vector<GeneratedStatement> load_statements(const std::string& path) {
    std::vector<GeneratedStatement> out;
    jsonl::for_each(path, [&](std::size_t line_no, const json& rec) {
        try {
            out.push_back(GeneratedStatement::from_json(rec));
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad statement record: ") + e.what(), line_no);
        }
    });
    return out;
}

namespace detail {

// Accepts a bare JSON array or one wrapped in a markdown code fence.
inline std::optional<std::vector<std::string>> parse_statement_array(const std::string& content,
                                                                     std::size_t expected) {
    std::string body = trim(content);
    if (body.rfind("```", 0) == 0) {
        std::size_t first_nl = body.find('\n');
        std::size_t last_fence = body.rfind("```");
        if (first_nl != std::string::npos && last_fence > first_nl)
            body = trim(body.substr(first_nl + 1, last_fence - first_nl - 1));
    }
    json doc = json::parse(body, nullptr, false);
    if (doc.is_discarded() || !doc.is_array() || doc.size() != expected) return std::nullopt;
    std::vector<std::string> out;
    for (const auto& item : doc) {
        if (!item.is_string()) return std::nullopt;
        std::string text = trim(item.get<std::string>());
        if (text.empty()) return std::nullopt;
        // Reject obvious list markup; each item must be a single statement.
        if (text.rfind("- ", 0) == 0 || text.rfind("* ", 0) == 0) return std::nullopt;
        out.push_back(std::move(text));
    }
    return out;
}

} // namespace detail

// Calls the chat endpoint and parses the structured reply. Schema violations
// retry with an appended correction up to opts.max_attempts total attempts;
// transport failures retry with backoff, then surface.
inline std::vector<GeneratedStatement> generate(const PromptSpec& prompt, ChatClient& client,
                                                const GenerationOptions& opts = {},
                                                const std::string& run_id = "run-0",
                                                std::size_t* calls_out = nullptr) {
    std::vector<ChatMessage> messages{{"system", prompt.system_prompt}, {"user", prompt.user_prompt}};
    std::vector<std::string> transcripts;
    std::size_t calls = 0;
    for (std::size_t attempt = 0; attempt < std::max<std::size_t>(1, opts.max_attempts); ++attempt) {
        std::string content;
        bool got_response = false;
        std::string transport_error;
        for (std::size_t t = 0; t < std::max<std::size_t>(1, opts.transport_attempts); ++t) {
            if (t > 0) std::this_thread::sleep_for(std::chrono::milliseconds(opts.backoff_ms << (t - 1)));
            try {
                content = client.complete(messages);
                ++calls;
                got_response = true;
                break;
            } catch (const std::exception& e) {
                ++calls;
                transport_error = e.what();
            }
        }
        if (calls_out) *calls_out = calls;
        if (!got_response)
            throw StageError("transport_failure", "chat endpoint failed after " +
                                                      std::to_string(opts.transport_attempts) +
                                                      " attempts: " + transport_error);
        auto parsed = detail::parse_statement_array(content, prompt.statement_count);
        if (parsed) {
            std::vector<GeneratedStatement> out;
            for (std::size_t i = 0; i < parsed->size(); ++i) {
                GeneratedStatement s;
                s.role = prompt.role;
                s.text = (*parsed)[i];
                s.category = prompt.category;
                s.leaning = prompt.leaning;
                s.run_id = run_id;
                s.prompt_hash = prompt.prompt_hash;
                s.id = short_hash(run_id + "\x1f" + prompt.prompt_hash + "\x1f" + std::to_string(i) + "\x1f" +
                                  s.text);
                out.push_back(std::move(s));
            }
            return out;
        }
        transcripts.push_back(content);
        messages.push_back({"assistant", content});
        messages.push_back({"user", "Your previous reply was not a JSON array of exactly " +
                                        std::to_string(prompt.statement_count) +
                                        " strings. Reply with only that JSON array."});
    }
    std::string detail = "model never produced a valid JSON array of " +
                         std::to_string(prompt.statement_count) + " strings; raw responses:";
    for (std::size_t i = 0; i < transcripts.size(); ++i)
        detail += "\n--- attempt " + std::to_string(i + 1) + " ---\n" + transcripts[i];
    throw StageError("malformed_generation", detail, {prompt.prompt_hash});
}

// ---------------------------------------------------------------------------
// Run matrix

enum class PolicyScope { general, all };

inline std::optional<PolicyScope> parse_policy_scope(std::string_view s) {
    if (s == "general") return PolicyScope::general;
    if (s == "all") return PolicyScope::all;
    return std::nullopt;
}

struct PromptRecord {
    std::string prompt_hash;
    StatementRole role = StatementRole::consideration;
    std::string category;
    Leaning leaning = Leaning::centrist;
    std::string system_prompt;
    std::string user_prompt;

    json to_json() const {
        return json{{"prompt_hash", prompt_hash},   {"role", to_string(role)},
                    {"category", category},         {"leaning", to_string(leaning)},
                    {"system", system_prompt},      {"user", user_prompt}};
    }
};

struct RunMatrixResult {
    std::vector<GeneratedStatement> statements;
    std::vector<PromptRecord> prompts;
    std::vector<std::string> missing_cells; // "role:category:leaning"
    std::size_t cells_run = 0;
    std::size_t considerations = 0;
    std::size_t policies = 0;
};

// Runs the considerations role over every category x leaning cell and the
// policy role over the configured scope (default: the general category only,
// the only scope consistent with 25 = 5 leanings x 5 proposals).
inline RunMatrixResult run_matrix(const AnchorSet& anchors, const std::vector<Selection>& selections,
                                  const std::map<std::string, std::string>& paragraph_texts,
                                  const PromptTemplates& templates, ChatClient& client,
                                  const GenerationOptions& opts, const std::string& run_id,
                                  PolicyScope policy_scope = PolicyScope::general, bool strict = false,
                                  const std::map<std::string, std::vector<std::string>>* exemplars_by_category =
                                      nullptr) {
    anchors.validate();
    std::map<std::pair<std::string, Leaning>, const Selection*> cells;
    for (const auto& sel : selections)
        if (sel.leaning) cells[{sel.category, *sel.leaning}] = &sel;

    const Category* general = nullptr;
    for (const auto& c : anchors.categories)
        if (c.is_general) general = &c;
    if (policy_scope == PolicyScope::general && general == nullptr)
        throw ConfigError("policy scope 'general' needs a category flagged general in the anchor set");

    RunMatrixResult res;
    auto run_cell = [&](StatementRole role, const Category& cat, Leaning lean) {
        auto it = cells.find({cat.name, lean});
        if (it == cells.end() || it->second->paragraph_ids.empty()) {
            res.missing_cells.push_back(to_string(role) + ":" + cat.name + ":" + to_string(lean));
            return;
        }
        const Selection& sel = *it->second;
        std::vector<std::string> attachment;
        attachment.reserve(sel.paragraph_ids.size());
        std::vector<std::string> unknown;
        for (const auto& pid : sel.paragraph_ids) {
            auto t = paragraph_texts.find(pid);
            if (t == paragraph_texts.end()) unknown.push_back(pid);
            else attachment.push_back(t->second);
        }
        if (!unknown.empty())
            throw StageError("missing_paragraph", "selection references unknown paragraph ids", unknown);
        std::vector<std::string> exemplars;
        if (exemplars_by_category) {
            auto e = exemplars_by_category->find(cat.name);
            if (e != exemplars_by_category->end()) exemplars = e->second;
        }
        PromptSpec prompt = build_prompt(role, cat.name, lean, sel, attachment, templates, opts, exemplars);
        auto statements = generate(prompt, client, opts, run_id);
        res.prompts.push_back(
            {prompt.prompt_hash, role, cat.name, lean, prompt.system_prompt, prompt.user_prompt});
        for (auto& s : statements) {
            if (s.role == StatementRole::consideration) ++res.considerations;
            else ++res.policies;
            res.statements.push_back(std::move(s));
        }
        ++res.cells_run;
    };

    // Output order is (category, leaning, role, index), never completion time.
    for (const auto& cat : anchors.categories) {
        bool policy_here = policy_scope == PolicyScope::all || cat.is_general;
        for (Leaning lean : all_leanings()) {
            run_cell(StatementRole::consideration, cat, lean);
            if (policy_here) run_cell(StatementRole::policy, cat, lean);
        }
    }

    if (strict && !res.missing_cells.empty())
        throw StageError("missing_cells", "selections missing for required cells", res.missing_cells);
    return res;
}

// ---------------------------------------------------------------------------
// Near-duplicate grouping

struct DedupResult {
    std::vector<GeneratedStatement> kept;
    std::map<std::string, std::vector<std::string>> duplicate_groups; // kept id -> duplicate ids
};

// Greedy pass in generation order: a statement whose embedding lands within
// `threshold` cosine of an already-kept statement joins that statement's group.
inline DedupResult dedup_statements(const std::vector<GeneratedStatement>& statements,
                                    EmbeddingProvider& embedder, double threshold = 0.95) {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ConfigError("dedup threshold must be in (0, 1]");
    DedupResult res;
    if (statements.empty()) return res;
    std::vector<std::string> texts;
    texts.reserve(statements.size());
    for (const auto& s : statements) texts.push_back(s.text);
    auto vectors = embedder.embed(texts);
    std::vector<std::size_t> kept_idx;
    for (std::size_t i = 0; i < statements.size(); ++i) {
        bool duplicate = false;
        for (std::size_t k : kept_idx) {
            if (cosine(vectors[i], vectors[k]) >= threshold) {
                res.duplicate_groups[statements[k].id].push_back(statements[i].id);
                duplicate = true;
                break;
            }
        }
        if (!duplicate) {
            kept_idx.push_back(i);
            res.kept.push_back(statements[i]);
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Human review round-trip

enum class ReviewDecision { keep, drop, edit };

inline std::optional<ReviewDecision> parse_decision(std::string_view s) {
    if (s == "keep") return ReviewDecision::keep;
    if (s == "drop") return ReviewDecision::drop;
    if (s == "edit") return ReviewDecision::edit;
    return std::nullopt;
}

struct FinalItem {
    std::string id;   // stable ordinal id for the survey stage (C1.., P1..)
    std::string text;
    std::string source_statement_id;
};

struct FinalInstrument {
    std::vector<FinalItem> considerations;
    std::vector<FinalItem> policies;
};

// Writes the review sheet covering every statement exactly once, decision
// prefilled to keep, so an untouched export imports as the identity.
inline void review_export(const std::vector<GeneratedStatement>& statements, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open review sheet output: " + path);
    out << "statement_id,text,category,leaning,decision,edited_text\n";
    for (const auto& s : statements)
        out << csv::join_row({s.id, s.text, s.category, to_string(s.leaning), "keep", ""});
}

inline FinalInstrument review_import(const std::string& sheet_path,
                                     const std::vector<GeneratedStatement>& statements) {
    std::map<std::string, const GeneratedStatement*> by_id;
    for (const auto& s : statements) by_id[s.id] = &s;

    auto rows = csv::read_file(sheet_path);
    if (rows.empty()) throw ParseError("empty review sheet: " + sheet_path);
    std::size_t start = 0;
    if (!rows[0].empty() && rows[0][0] == "statement_id") start = 1;

    std::vector<std::string> unknown, duplicated, malformed;
    std::set<std::string> seen;
    FinalInstrument instrument;
    for (std::size_t r = start; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() < 6) {
            malformed.push_back("row " + std::to_string(r + 1) + ": needs 6 columns");
            continue;
        }
        const std::string& id = row[0];
        auto stmt = by_id.find(id);
        if (stmt == by_id.end()) {
            unknown.push_back(id);
            continue;
        }
        if (!seen.insert(id).second) {
            duplicated.push_back(id);
            continue;
        }
        auto decision = parse_decision(trim(row[4]));
        if (!decision) {
            malformed.push_back("row " + std::to_string(r + 1) + ": unknown decision '" + row[4] + "'");
            continue;
        }
        if (*decision == ReviewDecision::drop) continue;
        std::string text = stmt->second->text;
        if (*decision == ReviewDecision::edit) {
            if (trim(row[5]).empty()) {
                malformed.push_back("row " + std::to_string(r + 1) + ": edit without edited_text");
                continue;
            }
            text = row[5];
        }
        FinalItem item{"", text, id};
        if (stmt->second->role == StatementRole::consideration) instrument.considerations.push_back(item);
        else instrument.policies.push_back(item);
    }

    std::vector<std::string> missing;
    for (const auto& s : statements)
        if (!seen.count(s.id)) missing.push_back(s.id);

    if (!unknown.empty() || !duplicated.empty() || !missing.empty() || !malformed.empty()) {
        std::string detail = "review sheet discrepancies:";
        auto add = [&](const char* label, const std::vector<std::string>& v) {
            if (v.empty()) return;
            detail += std::string(" ") + label + "=" + std::to_string(v.size());
        };
        add("unknown_ids", unknown);
        add("duplicate_rows", duplicated);
        add("missing_ids", missing);
        add("malformed_rows", malformed);
        std::vector<std::string> ids = unknown;
        ids.insert(ids.end(), duplicated.begin(), duplicated.end());
        ids.insert(ids.end(), missing.begin(), missing.end());
        for (const auto& m : malformed) detail += "; " + m;
        throw StageError("review_mismatch", detail, ids);
    }

    for (std::size_t i = 0; i < instrument.considerations.size(); ++i)
        instrument.considerations[i].id = "C" + std::to_string(i + 1);
    for (std::size_t i = 0; i < instrument.policies.size(); ++i)
        instrument.policies[i].id = "P" + std::to_string(i + 1);
    return instrument;
}

} // namespace driforge

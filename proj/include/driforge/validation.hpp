#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "driforge/csv.hpp"
#include "driforge/embedding.hpp"
#include "driforge/errors.hpp"
#include "driforge/jsonl.hpp"

namespace driforge {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Reference survey items

struct ReferenceItem {
    std::string id;
    std::string text;
    std::string kind;          // "consideration" | "preference"
    bool general_style = false; // reviewer-supplied flag, never inferred
};

inline std::vector<ReferenceItem> load_reference_items(const std::string& path) {
    std::vector<ReferenceItem> out;
    jsonl::for_each(path, [&](std::size_t line_no, const json& rec) {
        try {
            ReferenceItem item;
            item.id = rec.at("id").get<std::string>();
            item.text = rec.at("text").get<std::string>();
            item.kind = rec.value("kind", "consideration");
            item.general_style = rec.value("general_style", false);
            if (item.kind != "consideration" && item.kind != "preference")
                throw ParseError("kind must be consideration or preference", line_no);
            out.push_back(std::move(item));
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad reference record: ") + e.what(), line_no);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// All-pairs similarity

struct MatchMatrix {
    std::vector<std::string> reference_ids;
    std::vector<std::string> generated_ids;
    std::vector<std::vector<double>> scores; // [reference][generated]

    void export_csv(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot open match matrix output: " + path);
        out << "reference_id";
        for (const auto& g : generated_ids) out << ',' << csv::escape(g);
        out << '\n';
        char buf[32];
        for (std::size_t i = 0; i < reference_ids.size(); ++i) {
            out << csv::escape(reference_ids[i]);
            for (double s : scores[i]) {
                std::snprintf(buf, sizeof(buf), "%.9f", s);
                out << ',' << buf;
            }
            out << '\n';
        }
    }
};

// Dense cosine matrix between reference and generated statements, both sides
// embedded with the same provider/model.
inline MatchMatrix match_matrix(const std::vector<std::pair<std::string, std::string>>& reference,
                                const std::vector<std::pair<std::string, std::string>>& generated,
                                EmbeddingProvider& embedder) {
    if (reference.empty() || generated.empty())
        throw ConfigError("match_matrix needs non-empty reference and generated sets");
    std::vector<std::string> texts;
    texts.reserve(reference.size() + generated.size());
    for (const auto& [id, text] : reference) texts.push_back(text);
    for (const auto& [id, text] : generated) texts.push_back(text);
    auto vectors = embedder.embed(texts);

    MatchMatrix m;
    for (const auto& [id, text] : reference) m.reference_ids.push_back(id);
    for (const auto& [id, text] : generated) m.generated_ids.push_back(id);
    m.scores.assign(reference.size(), std::vector<double>(generated.size(), 0.0));
    for (std::size_t i = 0; i < reference.size(); ++i)
        for (std::size_t j = 0; j < generated.size(); ++j)
            m.scores[i][j] = cosine(vectors[i], vectors[reference.size() + j]);
    return m;
}

struct Candidate {
    std::string id;
    double score = 0.0;
};

// The n generated statements closest to one reference item, score-descending,
// ties broken by id.
inline std::vector<Candidate> top_candidates(const MatchMatrix& matrix, const std::string& reference_id,
                                             std::size_t n = 5) {
    if (n < 1) throw ConfigError("top_candidates needs n >= 1");
    auto it = std::find(matrix.reference_ids.begin(), matrix.reference_ids.end(), reference_id);
    if (it == matrix.reference_ids.end())
        throw StageError("unknown_reference", "no reference item with id '" + reference_id + "'");
    std::size_t row = static_cast<std::size_t>(it - matrix.reference_ids.begin());
    std::vector<Candidate> all;
    all.reserve(matrix.generated_ids.size());
    for (std::size_t j = 0; j < matrix.generated_ids.size(); ++j)
        all.push_back({matrix.generated_ids[j], matrix.scores[row][j]});
    std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.id < b.id;
    });
    if (all.size() > n) all.resize(n);
    return all;
}

// ---------------------------------------------------------------------------
// Manual match judgments

enum class Verdict { good, good_to_okay, okay, no_match };

inline std::optional<Verdict> parse_verdict(std::string_view s) {
    if (s == "good") return Verdict::good;
    if (s == "good_to_okay") return Verdict::good_to_okay;
    if (s == "okay") return Verdict::okay;
    if (s == "no_match") return Verdict::no_match;
    return std::nullopt;
}

inline std::string to_string(Verdict v) {
    switch (v) {
    case Verdict::good: return "good";
    case Verdict::good_to_okay: return "good_to_okay";
    case Verdict::okay: return "okay";
    case Verdict::no_match: return "no_match";
    }
    return "no_match";
}

struct MatchJudgment {
    std::string reference_id;
    std::string candidate_id;
    Verdict verdict = Verdict::no_match;
    std::string reviewer;
};

// CSV columns: reference_id,candidate_id,verdict,reviewer
inline std::vector<MatchJudgment> load_judgments(const std::string& path) {
    auto rows = csv::read_file(path);
    std::vector<MatchJudgment> out;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() < 3) throw ParseError("judgment row needs at least 3 columns in " + path, r + 1);
        if (r == 0 && row[0] == "reference_id") continue;
        auto verdict = parse_verdict(trim(row[2]));
        if (!verdict) throw ParseError("unknown verdict '" + row[2] + "' in " + path, r + 1);
        out.push_back({trim(row[0]), trim(row[1]), *verdict, row.size() > 3 ? trim(row[3]) : ""});
    }
    return out;
}

struct MatchRateSummary {
    std::size_t reference_count = 0;
    std::size_t matches = 0;
    double rate = 0.0;
    std::size_t excluded = 0; // general-style items left out of the filtered view

    json to_json() const {
        return json{{"reference_count", reference_count},
                    {"matches", matches},
                    {"rate", rate},
                    {"excluded", excluded}};
    }
};

// A match is any verdict in {good, good_to_okay, okay}. With exclude_general
// set, reference items flagged general_style are dropped from both numerator
// and denominator before the rate is taken.
inline MatchRateSummary match_rate(const std::vector<MatchJudgment>& judgments,
                                   const std::vector<ReferenceItem>& reference,
                                   bool exclude_general = false) {
    if (reference.empty()) throw ConfigError("match_rate needs a non-empty reference set");
    std::map<std::string, Verdict> verdicts;
    std::vector<std::string> duplicated;
    for (const auto& j : judgments) {
        auto [it, inserted] = verdicts.emplace(j.reference_id, j.verdict);
        if (!inserted) {
            if (it->second == j.verdict) continue; // duplicate-free re-submission is harmless
            duplicated.push_back(j.reference_id);
        }
    }
    if (!duplicated.empty())
        throw StageError("conflicting_judgments", "reference items judged twice with different verdicts",
                         duplicated);
    std::vector<std::string> missing, unknown;
    std::set<std::string> reference_ids;
    for (const auto& item : reference) reference_ids.insert(item.id);
    for (const auto& [id, v] : verdicts)
        if (!reference_ids.count(id)) unknown.push_back(id);
    if (!unknown.empty())
        throw StageError("unknown_reference", "judgments name ids outside the reference set", unknown);
    for (const auto& item : reference)
        if (!verdicts.count(item.id)) missing.push_back(item.id);
    if (!missing.empty())
        throw StageError("incomplete_judgments", "reference items without a verdict", missing);

    MatchRateSummary s;
    for (const auto& item : reference) {
        if (exclude_general && item.general_style) {
            ++s.excluded;
            continue;
        }
        ++s.reference_count;
        if (verdicts.at(item.id) != Verdict::no_match) ++s.matches;
    }
    if (s.reference_count == 0) throw StageError("incomplete_judgments", "no reference items left after filter");
    s.rate = static_cast<double>(s.matches) / static_cast<double>(s.reference_count);
    return s;
}

} // namespace driforge

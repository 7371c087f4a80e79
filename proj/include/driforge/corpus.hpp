#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "driforge/csv.hpp"
#include "driforge/errors.hpp"
#include "driforge/hash.hpp"
#include "driforge/jsonl.hpp"
#include "driforge/text.hpp"

namespace driforge {

using json = nlohmann::json;

enum class Language { de, fr, it };

inline std::string to_string(Language l) {
    switch (l) {
    case Language::de: return "de";
    case Language::fr: return "fr";
    case Language::it: return "it";
    }
    return "de";
}

inline std::optional<Language> parse_language(std::string_view s) {
    if (s == "de") return Language::de;
    if (s == "fr") return Language::fr;
    if (s == "it") return Language::it;
    return std::nullopt;
}

enum class Leaning { left, left_liberal, centrist, right_liberal, right };

inline std::string to_string(Leaning l) {
    switch (l) {
    case Leaning::left: return "left";
    case Leaning::left_liberal: return "left_liberal";
    case Leaning::centrist: return "centrist";
    case Leaning::right_liberal: return "right_liberal";
    case Leaning::right: return "right";
    }
    return "centrist";
}

inline std::optional<Leaning> parse_leaning(std::string_view s) {
    if (s == "left") return Leaning::left;
    if (s == "left_liberal" || s == "left-liberal") return Leaning::left_liberal;
    if (s == "centrist") return Leaning::centrist;
    if (s == "right_liberal" || s == "right-liberal") return Leaning::right_liberal;
    if (s == "right") return Leaning::right;
    return std::nullopt;
}

inline const std::vector<Leaning>& all_leanings() {
    static const std::vector<Leaning> v{Leaning::left, Leaning::left_liberal, Leaning::centrist,
                                        Leaning::right_liberal, Leaning::right};
    return v;
}

// ---------------------------------------------------------------------------
// Dates

struct Date {
    int year = 0;
    int month = 0;
    int day = 0;

    auto operator<=>(const Date&) const = default;

    std::string str() const {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", year, month, day);
        return buf;
    }
};

inline bool is_leap(int y) { return (y % 4 == 0 && y % 100 != 0) || y % 400 == 0; }

inline std::optional<Date> parse_date(std::string_view s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
    auto digits = [&](std::size_t pos, std::size_t n) -> std::optional<int> {
        int v = 0;
        for (std::size_t i = pos; i < pos + n; ++i) {
            if (s[i] < '0' || s[i] > '9') return std::nullopt;
            v = v * 10 + (s[i] - '0');
        }
        return v;
    };
    auto y = digits(0, 4), m = digits(5, 2), d = digits(8, 2);
    if (!y || !m || !d) return std::nullopt;
    if (*m < 1 || *m > 12) return std::nullopt;
    static const int mdays[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    int dim = mdays[*m - 1] + (*m == 2 && is_leap(*y) ? 1 : 0);
    if (*d < 1 || *d > dim) return std::nullopt;
    return Date{*y, *m, *d};
}

struct DateRange {
    Date from;
    Date to; // inclusive on both ends

    bool contains(const Date& d) const { return from <= d && d <= to; }
};

// ---------------------------------------------------------------------------
// Domain types

struct Article {
    std::string id;
    std::string outlet;
    Date published;
    Language language = Language::de;
    std::string title;
    std::string body;
};

struct Paragraph {
    std::string id; // derived from the normalized-text hash
    std::string article_id;
    std::string text;
    Language language = Language::de;
    std::optional<Leaning> leaning;
};

struct KeywordList {
    // Keywords stored case-folded (canonical form).
    std::vector<std::pair<std::string, Language>> entries;

    static KeywordList from_pairs(const std::vector<std::pair<std::string, Language>>& raw) {
        KeywordList kl;
        for (const auto& [kw, lang] : raw) {
            std::string folded = fold_case(trim(kw));
            if (!folded.empty()) kl.entries.emplace_back(folded, lang);
        }
        if (kl.entries.empty()) throw ConfigError("keyword list is empty");
        return kl;
    }

    // CSV columns: keyword,language. A header row is detected and skipped.
    static KeywordList load_csv(const std::string& path) {
        auto rows = csv::read_file(path);
        std::vector<std::pair<std::string, Language>> raw;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& r = rows[i];
            if (r.size() < 2) throw ParseError("keyword row needs 2 columns in " + path, i + 1);
            if (i == 0 && fold_case(trim(r[0])) == "keyword") continue;
            auto lang = parse_language(trim(r[1]));
            if (!lang) throw ParseError("unknown language '" + r[1] + "' in " + path, i + 1);
            raw.emplace_back(r[0], *lang);
        }
        return from_pairs(raw);
    }
};

struct LeaningMap {
    std::map<std::string, double> scores; // outlet -> score in [-100, 100]

    static LeaningMap load_csv(const std::string& path) {
        auto rows = csv::read_file(path);
        LeaningMap m;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& r = rows[i];
            if (r.size() < 2) throw ParseError("leaning row needs 2 columns in " + path, i + 1);
            if (i == 0 && fold_case(trim(r[0])) == "outlet") continue;
            double score = 0;
            try {
                score = std::stod(r[1]);
            } catch (const std::exception&) {
                throw ParseError("bad score '" + r[1] + "' in " + path, i + 1);
            }
            if (score < -100.0 || score > 100.0)
                throw ConfigError("leaning score out of [-100,100] for outlet '" + r[0] + "': " + r[1]);
            m.scores[trim(r[0])] = score;
        }
        return m;
    }
};

// ---------------------------------------------------------------------------
// Operations

// Case-insensitive substring match against any keyword. Substring rather than
// token match so German compounds ("Spitalfinanzierung") still hit "Spital".
inline bool keyword_match(std::string_view text, const KeywordList& keywords) {
    std::string folded = fold_case(text);
    for (const auto& [kw, lang] : keywords.entries) {
        (void)lang; // keywords from every language are tried against every text
        if (folded.find(kw) != std::string::npos) return true;
    }
    return false;
}

// Splits an article body into paragraphs on runs of blank lines. Lines that
// are whitespace-only count as blank. Single newlines stay inside a paragraph.
inline std::vector<std::string> split_paragraph_blocks(std::string_view body) {
    std::vector<std::string> blocks;
    std::string cur;
    std::size_t i = 0;
    bool pending_newline = false;
    auto flush = [&] {
        std::string t = trim(cur);
        if (!t.empty()) blocks.push_back(std::move(t));
        cur.clear();
        pending_newline = false;
    };
    while (i <= body.size()) {
        // Read one line.
        std::size_t eol = body.find('\n', i);
        bool last = (eol == std::string_view::npos);
        std::string_view line = body.substr(i, last ? body.size() - i : eol - i);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (trim(line).empty()) {
            flush();
        } else {
            if (pending_newline) cur.push_back('\n');
            cur.append(line);
            pending_newline = true;
        }
        if (last) break;
        i = eol + 1;
    }
    flush();
    return blocks;
}

inline std::string paragraph_id(std::string_view text) { return short_hash(normalize_text(text)); }

// Chunk one article into paragraphs (no keyword filtering here).
inline std::vector<Paragraph> chunk(const Article& article) {
    std::vector<Paragraph> out;
    for (auto& block : split_paragraph_blocks(article.body)) {
        Paragraph p;
        p.id = paragraph_id(block);
        p.article_id = article.id;
        p.text = std::move(block);
        p.language = article.language;
        out.push_back(std::move(p));
    }
    return out;
}

struct DedupStats {
    std::size_t in = 0;
    std::size_t kept = 0;
    std::size_t dropped = 0;
    double mean_per_article = 0.0;
    double median_per_article = 0.0;
};

// First occurrence wins; uniqueness key is the hash of the normalized text.
inline std::vector<Paragraph> dedup(const std::vector<Paragraph>& paragraphs, DedupStats* stats = nullptr) {
    std::vector<Paragraph> out;
    std::unordered_set<std::string> seen;
    std::map<std::string, std::size_t> per_article;
    for (const auto& p : paragraphs) {
        std::string key = sha256_hex(normalize_text(p.text));
        if (!seen.insert(key).second) continue;
        per_article[p.article_id]++;
        out.push_back(p);
    }
    if (stats) {
        stats->in = paragraphs.size();
        stats->kept = out.size();
        stats->dropped = paragraphs.size() - out.size();
        if (!per_article.empty()) {
            std::vector<std::size_t> counts;
            counts.reserve(per_article.size());
            double sum = 0;
            for (auto& [id, n] : per_article) {
                counts.push_back(n);
                sum += static_cast<double>(n);
            }
            std::sort(counts.begin(), counts.end());
            stats->mean_per_article = sum / static_cast<double>(counts.size());
            std::size_t mid = counts.size() / 2;
            stats->median_per_article =
                counts.size() % 2 ? static_cast<double>(counts[mid])
                                  : (static_cast<double>(counts[mid - 1]) + static_cast<double>(counts[mid])) / 2.0;
        }
    }
    return out;
}

// Maps an outlet score onto the five leaning bins. Bracket ownership:
//   left: s < -15 | left_liberal: -15 <= s <= -5 | centrist: -5 < s < 5
//   right_liberal: 5 <= s <= 15 | right: s > 15
inline Leaning leaning_from_score(double s) {
    if (s < -100.0 || s > 100.0) throw ConfigError("leaning score out of [-100,100]: " + std::to_string(s));
    if (s < -15.0) return Leaning::left;
    if (s <= -5.0) return Leaning::left_liberal;
    if (s < 5.0) return Leaning::centrist;
    if (s <= 15.0) return Leaning::right_liberal;
    return Leaning::right;
}

// Outlets absent from the map get no leaning; such paragraphs are excluded
// from leaning-scoped selection later, never from the corpus itself.
inline std::optional<Leaning> assign_leaning(const std::string& outlet, const LeaningMap& map) {
    auto it = map.scores.find(outlet);
    if (it == map.scores.end()) return std::nullopt;
    return leaning_from_score(it->second);
}

// ---------------------------------------------------------------------------
// Ingestion

struct IngestReport {
    std::size_t read = 0;
    std::size_t kept = 0;
    std::size_t dropped_date = 0;
    std::size_t dropped_keyword = 0;
    std::size_t dropped_duplicate = 0;
    std::vector<std::string> record_errors; // "line N: reason"

    json to_json() const {
        return json{{"read", read},
                    {"kept", kept},
                    {"dropped_date", dropped_date},
                    {"dropped_keyword", dropped_keyword},
                    {"dropped_duplicate", dropped_duplicate},
                    {"errors", record_errors}};
    }
};

inline std::optional<Article> article_from_json(const json& rec, std::string* error) {
    auto fail = [&](const std::string& why) -> std::optional<Article> {
        if (error) *error = why;
        return std::nullopt;
    };
    if (!rec.is_object()) return fail("record is not an object");
    for (const char* key : {"id", "outlet", "date", "lang", "title", "body"})
        if (!rec.contains(key) || !rec[key].is_string()) return fail(std::string("missing or non-string field '") + key + "'");
    Article a;
    a.id = rec["id"].get<std::string>();
    a.outlet = rec["outlet"].get<std::string>();
    auto date = parse_date(rec["date"].get<std::string>());
    if (!date) return fail("bad date '" + rec["date"].get<std::string>() + "'");
    a.published = *date;
    auto lang = parse_language(rec["lang"].get<std::string>());
    if (!lang) return fail("unknown language '" + rec["lang"].get<std::string>() + "'");
    a.language = *lang;
    a.title = rec["title"].get<std::string>();
    a.body = rec["body"].get<std::string>();
    if (a.id.empty()) return fail("empty id");
    if (trim(a.body).empty()) return fail("empty body");
    return a;
}

inline json article_to_json(const Article& a) {
    return json{{"id", a.id},     {"outlet", a.outlet}, {"date", a.published.str()},
                {"lang", to_string(a.language)}, {"title", a.title},   {"body", a.body}};
}

// Ingest a JSONL article dump: keep articles inside the window whose
// title+body contain at least one keyword; collapse duplicate ids.
inline std::vector<Article> ingest(const std::string& dump_path, const DateRange& window,
                                   const KeywordList& keywords, IngestReport& report,
                                   bool strict = false) {
    std::vector<Article> out;
    std::unordered_set<std::string> seen_ids;
    jsonl::for_each(
        dump_path,
        [&](std::size_t line_no, const json& rec) {
            ++report.read;
            std::string why;
            auto article = article_from_json(rec, &why);
            if (!article) {
                std::string msg = "line " + std::to_string(line_no) + ": " + why;
                if (strict) throw StageError("malformed_record", "ingest aborted: " + msg);
                report.record_errors.push_back(msg);
                return;
            }
            if (!window.contains(article->published)) {
                ++report.dropped_date;
                return;
            }
            if (!keyword_match(article->title + "\n" + article->body, keywords)) {
                ++report.dropped_keyword;
                return;
            }
            if (!seen_ids.insert(article->id).second) {
                ++report.dropped_duplicate;
                return;
            }
            out.push_back(std::move(*article));
            ++report.kept;
        },
        [&](std::size_t line_no, const std::string& why) {
            ++report.read;
            std::string msg = "line " + std::to_string(line_no) + ": " + why;
            if (strict) throw StageError("malformed_record", "ingest aborted: " + msg);
            report.record_errors.push_back(msg);
        });
    return out;
}

// Full article -> paragraph pass: chunk, keyword-filter each paragraph,
// dedup, attach outlet leanings.
inline std::vector<Paragraph> build_paragraph_corpus(const std::vector<Article>& articles,
                                                     const KeywordList& keywords,
                                                     const LeaningMap& leanings,
                                                     DedupStats* stats = nullptr) {
    std::vector<Paragraph> all;
    for (const auto& a : articles) {
        auto lean = assign_leaning(a.outlet, leanings);
        for (auto& p : chunk(a)) {
            if (!keyword_match(p.text, keywords)) continue;
            p.leaning = lean;
            all.push_back(std::move(p));
        }
    }
    return dedup(all, stats);
}

inline json paragraph_to_json(const Paragraph& p) {
    json j{{"id", p.id},
           {"article_id", p.article_id},
           {"text", p.text},
           {"lang", to_string(p.language)}};
    if (p.leaning) j["leaning"] = to_string(*p.leaning);
    else j["leaning"] = nullptr;
    return j;
}

inline Paragraph paragraph_from_json(const json& rec) {
    Paragraph p;
    p.id = rec.at("id").get<std::string>();
    p.article_id = rec.at("article_id").get<std::string>();
    p.text = rec.at("text").get<std::string>();
    auto lang = parse_language(rec.at("lang").get<std::string>());
    if (!lang) throw ParseError("unknown language in paragraph record");
    p.language = *lang;
    if (rec.contains("leaning") && !rec["leaning"].is_null()) {
        auto l = parse_leaning(rec["leaning"].get<std::string>());
        if (!l) throw ParseError("unknown leaning in paragraph record");
        p.leaning = l;
    }
    return p;
}

inline std::vector<Paragraph> load_paragraphs(const std::string& path) {
    std::vector<Paragraph> out;
    jsonl::for_each(path, [&](std::size_t line_no, const json& rec) {
        try {
            out.push_back(paragraph_from_json(rec));
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad paragraph record: ") + e.what(), line_no);
        }
    });
    return out;
}

} // namespace driforge

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "driforge/corpus.hpp"
#include "driforge/embedding.hpp"
#include "driforge/reduce.hpp"

namespace driforge {

// ---------------------------------------------------------------------------
// Anchors

struct Category {
    std::string name;
    bool is_general = false;
    std::map<Language, std::string> variants;   // language -> anchor text
    std::map<Language, Vec> embeddings;         // filled post-reduction
};

struct AnchorSet {
    std::vector<Category> categories;

    const Category* find(const std::string& name) const {
        for (const auto& c : categories)
            if (c.name == name) return &c;
        return nullptr;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(categories.size());
        for (const auto& c : categories) out.push_back(c.name);
        return out;
    }

    void validate() const {
        if (categories.empty()) throw ConfigError("anchor set has no categories");
        std::size_t general = 0;
        std::set<std::string> seen;
        for (const auto& c : categories) {
            if (c.name.empty()) throw ConfigError("anchor category with empty name");
            if (!seen.insert(c.name).second) throw ConfigError("duplicate anchor category: " + c.name);
            if (c.is_general) ++general;
            if (c.variants.empty()) throw ConfigError("anchor category '" + c.name + "' has no language variants");
            for (const auto& [lang, text] : c.variants)
                if (trim(text).empty())
                    throw ConfigError("anchor category '" + c.name + "' has an empty " + to_string(lang) + " variant");
        }
        if (general > 1) throw ConfigError("anchor set declares more than one general category");
    }

    // {"categories":[{"name": str, "general": bool, "variants": {"de":...}}]}
    static AnchorSet load_json(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open anchor file: " + path);
        json doc = json::parse(in, nullptr, false);
        if (doc.is_discarded()) throw ParseError("anchor file is not valid JSON: " + path);
        AnchorSet set;
        if (!doc.contains("categories") || !doc["categories"].is_array())
            throw ParseError("anchor file needs a 'categories' array: " + path);
        for (const auto& c : doc["categories"]) {
            Category cat;
            cat.name = c.at("name").get<std::string>();
            cat.is_general = c.value("general", false);
            if (!c.contains("variants") || !c["variants"].is_object())
                throw ParseError("anchor category '" + cat.name + "' needs a 'variants' object");
            for (const auto& [lang_key, text] : c["variants"].items()) {
                auto lang = parse_language(lang_key);
                if (!lang) throw ParseError("unknown language '" + lang_key + "' in anchor category " + cat.name);
                cat.variants[*lang] = text.get<std::string>();
            }
            set.categories.push_back(std::move(cat));
        }
        set.validate();
        return set;
    }
};

// ---------------------------------------------------------------------------
// Embedded corpus: paragraphs and anchors in one (optionally reduced) space

struct EmbeddedCorpus {
    std::vector<std::string> paragraph_ids;
    std::vector<Vec> paragraph_vectors;
    std::map<std::string, std::optional<Leaning>> leanings; // paragraph_id -> leaning
    AnchorSet anchors;                                      // embeddings populated
};

// Embeds paragraph texts and anchor variants together and reduces them in one
// joint call, so anchors end up in the same space as the corpus.
inline EmbeddedCorpus embed_corpus_and_anchors(const std::vector<Paragraph>& paragraphs, AnchorSet anchors,
                                               EmbeddingProvider& provider, EmbeddingCache& cache,
                                               const ReductionSpec& spec, const EmbedOptions& opts = {},
                                               EmbedStats* stats = nullptr) {
    anchors.validate();
    std::vector<std::string> texts;
    std::vector<std::string> ids;
    texts.reserve(paragraphs.size());
    for (const auto& p : paragraphs) {
        texts.push_back(p.text);
        ids.push_back(p.id);
    }
    std::vector<std::pair<std::size_t, Language>> anchor_slots; // category index, language
    for (std::size_t ci = 0; ci < anchors.categories.size(); ++ci) {
        for (const auto& [lang, text] : anchors.categories[ci].variants) {
            texts.push_back(text);
            ids.push_back("anchor:" + anchors.categories[ci].name + ":" + to_string(lang));
            anchor_slots.emplace_back(ci, lang);
        }
    }

    auto raw = embed_batch(texts, provider, cache, opts, stats);

    std::vector<std::string> zero_ids;
    for (std::size_t i = 0; i < raw.size(); ++i)
        if (is_zero_vector(raw[i])) zero_ids.push_back(ids[i]);
    if (!zero_ids.empty())
        throw StageError("zero_vector", "texts embedded to the zero vector (no usable direction)", zero_ids);

    auto reduced = reduce(raw, spec, ids);

    EmbeddedCorpus out;
    out.paragraph_ids.reserve(paragraphs.size());
    out.paragraph_vectors.reserve(paragraphs.size());
    for (std::size_t i = 0; i < paragraphs.size(); ++i) {
        out.paragraph_ids.push_back(paragraphs[i].id);
        out.paragraph_vectors.push_back(reduced[i]);
        out.leanings[paragraphs[i].id] = paragraphs[i].leaning;
    }
    for (std::size_t s = 0; s < anchor_slots.size(); ++s) {
        auto [ci, lang] = anchor_slots[s];
        anchors.categories[ci].embeddings[lang] = reduced[paragraphs.size() + s];
    }
    out.anchors = std::move(anchors);
    return out;
}

// ---------------------------------------------------------------------------
// Scoring

enum class AnchorAggregation { max, mean };

struct ScoreTable {
    std::vector<std::string> category_names;           // column order
    std::map<std::string, std::vector<double>> rows;   // paragraph_id -> score per category

    std::size_t category_index(const std::string& name) const {
        for (std::size_t i = 0; i < category_names.size(); ++i)
            if (category_names[i] == name) return i;
        throw StageError("unknown_category", "no category named '" + name + "'");
    }

    void export_csv(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot open score table output: " + path);
        out << "paragraph_id";
        for (const auto& n : category_names) out << ',' << csv::escape(n);
        out << '\n';
        for (const auto& [id, scores] : rows) {
            out << csv::escape(id);
            char buf[32];
            for (double s : scores) {
                std::snprintf(buf, sizeof(buf), "%.9f", s);
                out << ',' << buf;
            }
            out << '\n';
        }
    }

    static ScoreTable import_csv(const std::string& path) {
        auto rows = csv::read_file(path);
        if (rows.empty()) throw ParseError("empty score table: " + path);
        ScoreTable t;
        const auto& header = rows[0];
        if (header.empty() || header[0] != "paragraph_id")
            throw ParseError("score table must start with a paragraph_id column: " + path);
        t.category_names.assign(header.begin() + 1, header.end());
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            if (row.size() != header.size()) throw ParseError("ragged score table row in " + path, r + 1);
            std::vector<double> scores;
            scores.reserve(row.size() - 1);
            for (std::size_t c = 1; c < row.size(); ++c) scores.push_back(std::stod(row[c]));
            t.rows.emplace(row[0], std::move(scores));
        }
        return t;
    }
};

// Cosine of one paragraph against one category: the language variants are
// aggregated with max by default (a German paragraph should be allowed to
// match the German anchor undiluted); mean is available for sensitivity runs.
inline double category_score(const Vec& paragraph, const Category& category,
                             AnchorAggregation agg = AnchorAggregation::max) {
    double best = -2.0;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [lang, anchor_vec] : category.embeddings) {
        double c = cosine(paragraph, anchor_vec);
        best = std::max(best, c);
        sum += c;
        ++n;
    }
    if (n == 0) throw StageError("missing_embedding", "category '" + category.name + "' has no embeddings");
    return agg == AnchorAggregation::max ? best : sum / static_cast<double>(n);
}

// One row per paragraph, one column per category, in AnchorSet order.
inline ScoreTable score_paragraphs(const EmbeddedCorpus& corpus,
                                   AnchorAggregation agg = AnchorAggregation::max,
                                   std::size_t parallelism = 0) {
    if (corpus.paragraph_ids.size() != corpus.paragraph_vectors.size())
        throw StageError("missing_embedding", "paragraph ids and vectors out of step");
    ScoreTable table;
    table.category_names = corpus.anchors.names();
    const std::size_t n = corpus.paragraph_ids.size();
    std::vector<std::vector<double>> scores(n);

    std::size_t workers = parallelism ? parallelism : std::thread::hardware_concurrency();
    workers = std::max<std::size_t>(1, std::min(workers, n == 0 ? 1 : n));
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            std::vector<double> row;
            row.reserve(corpus.anchors.categories.size());
            for (const auto& cat : corpus.anchors.categories)
                row.push_back(category_score(corpus.paragraph_vectors[i], cat, agg));
            scores[i] = std::move(row);
        }
    };
    if (workers <= 1) {
        work(0, n);
    } else {
        std::vector<std::thread> threads;
        std::size_t chunk = (n + workers - 1) / workers;
        for (std::size_t w = 0; w < workers; ++w) {
            std::size_t begin = w * chunk;
            std::size_t end = std::min(n, begin + chunk);
            if (begin >= end) break;
            threads.emplace_back(work, begin, end);
        }
        for (auto& t : threads) t.join();
    }
    // Merge keyed by id: execution order never affects the table.
    for (std::size_t i = 0; i < n; ++i) table.rows[corpus.paragraph_ids[i]] = std::move(scores[i]);
    return table;
}

// ---------------------------------------------------------------------------
// Selection

struct Selection {
    std::string category;
    std::optional<Leaning> leaning;
    std::size_t k = 0;
    std::vector<std::string> paragraph_ids; // descending score, ties id-ascending
    std::vector<double> scores;
};

// Top-k paragraphs for one category, optionally restricted to one leaning.
// Paragraphs without a leaning are excluded only from leaning-scoped calls.
inline Selection select_top_k(const ScoreTable& table, const std::string& category, std::size_t k,
                              std::optional<Leaning> leaning,
                              const std::map<std::string, std::optional<Leaning>>& leanings) {
    if (k < 1) throw ConfigError("select_top_k requires k >= 1");
    std::size_t col = table.category_index(category);
    std::vector<std::pair<std::string, double>> pool;
    pool.reserve(table.rows.size());
    for (const auto& [id, scores] : table.rows) {
        if (leaning) {
            auto it = leanings.find(id);
            if (it == leanings.end() || !it->second || *it->second != *leaning) continue;
        }
        pool.emplace_back(id, scores[col]);
    }
    std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Selection sel;
    sel.category = category;
    sel.leaning = leaning;
    sel.k = k;
    for (std::size_t i = 0; i < pool.size() && i < k; ++i) {
        sel.paragraph_ids.push_back(pool[i].first);
        sel.scores.push_back(pool[i].second);
    }
    return sel;
}

inline json selection_to_jsonl_rows(const Selection& sel) {
    json rows = json::array();
    for (std::size_t i = 0; i < sel.paragraph_ids.size(); ++i) {
        json row{{"category", sel.category},
                 {"leaning", sel.leaning ? json(to_string(*sel.leaning)) : json(nullptr)},
                 {"rank", i + 1},
                 {"paragraph_id", sel.paragraph_ids[i]},
                 {"score", sel.scores[i]},
                 {"k", sel.k}};
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<Selection> load_selections(const std::string& path) {
    std::map<std::pair<std::string, std::string>, Selection> grouped;
    std::vector<std::pair<std::string, std::string>> order;
    jsonl::for_each(path, [&](std::size_t line_no, const json& rec) {
        try {
            std::string cat = rec.at("category").get<std::string>();
            std::string lean_key = rec["leaning"].is_null() ? "" : rec["leaning"].get<std::string>();
            auto key = std::make_pair(cat, lean_key);
            auto [it, inserted] = grouped.try_emplace(key);
            if (inserted) {
                it->second.category = cat;
                if (!lean_key.empty()) {
                    auto l = parse_leaning(lean_key);
                    if (!l) throw ParseError("unknown leaning '" + lean_key + "'", line_no);
                    it->second.leaning = l;
                }
                it->second.k = rec.value("k", std::size_t(0));
                order.push_back(key);
            }
            it->second.paragraph_ids.push_back(rec.at("paragraph_id").get<std::string>());
            it->second.scores.push_back(rec.at("score").get<double>());
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad selection record: ") + e.what(), line_no);
        }
    });
    std::vector<Selection> out;
    out.reserve(order.size());
    for (const auto& key : order) out.push_back(std::move(grouped[key]));
    return out;
}

// ---------------------------------------------------------------------------
// Overlap & histogram

struct OverlapResult {
    std::vector<std::string> names;
    std::vector<std::vector<double>> matrix;  // |i n j| / k
    std::vector<std::vector<double>> jaccard; // secondary statistic
    double mean_off_diagonal = 0.0;

    void export_csv(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot open overlap output: " + path);
        out << "category";
        for (const auto& n : names) out << ',' << csv::escape(n);
        out << '\n';
        char buf[32];
        for (std::size_t i = 0; i < names.size(); ++i) {
            out << csv::escape(names[i]);
            for (std::size_t j = 0; j < names.size(); ++j) {
                std::snprintf(buf, sizeof(buf), "%.6f", matrix[i][j]);
                out << ',' << buf;
            }
            out << '\n';
        }
    }
};

// entry(i,j) = |ids_i n ids_j| / k. All selections must share k and scope.
inline OverlapResult overlap_matrix(const std::vector<Selection>& selections) {
    if (selections.empty()) throw ConfigError("overlap_matrix needs at least one selection");
    std::size_t k = selections[0].k;
    const auto& scope = selections[0].leaning;
    for (const auto& s : selections) {
        if (s.k != k) throw StageError("mixed_k", "overlap_matrix: selections disagree on k");
        if (s.leaning != scope)
            throw StageError("mixed_scope", "overlap_matrix: selections disagree on leaning scope");
    }
    OverlapResult res;
    std::vector<std::set<std::string>> sets;
    for (const auto& s : selections) {
        res.names.push_back(s.category);
        sets.emplace_back(s.paragraph_ids.begin(), s.paragraph_ids.end());
    }
    std::size_t n = selections.size();
    res.matrix.assign(n, std::vector<double>(n, 0.0));
    res.jaccard.assign(n, std::vector<double>(n, 0.0));
    double off_sum = 0.0;
    std::size_t off_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            std::size_t inter = 0;
            for (const auto& id : sets[i])
                if (sets[j].count(id)) ++inter;
            std::size_t uni = sets[i].size() + sets[j].size() - inter;
            double over = static_cast<double>(inter) / static_cast<double>(k);
            double jac = uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
            res.matrix[i][j] = res.matrix[j][i] = over;
            res.jaccard[i][j] = res.jaccard[j][i] = jac;
            if (i != j) {
                off_sum += 2 * over;
                off_count += 2;
            }
        }
    }
    res.mean_off_diagonal = off_count ? off_sum / static_cast<double>(off_count) : 0.0;
    return res;
}

struct Histogram {
    std::string category;
    double min = 0.0;
    double max = 0.0;
    std::vector<std::size_t> counts;

    double bin_lo(std::size_t i) const {
        return min + (max - min) * static_cast<double>(i) / static_cast<double>(counts.size());
    }
    double bin_hi(std::size_t i) const {
        return min + (max - min) * static_cast<double>(i + 1) / static_cast<double>(counts.size());
    }

    void export_csv(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ConfigError("cannot open histogram output: " + path);
        out << "bin_lo,bin_hi,count\n";
        char buf[80];
        for (std::size_t i = 0; i < counts.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.9f,%.9f,%zu", bin_lo(i), bin_hi(i), counts[i]);
            out << buf << '\n';
        }
    }
};

// Equal-width bins over [min score, max score] of one category column.
inline Histogram similarity_histogram(const ScoreTable& table, const std::string& category,
                                      std::size_t bins = 100) {
    if (bins < 1) throw ConfigError("histogram needs bins >= 1");
    std::size_t col = table.category_index(category);
    Histogram h;
    h.category = category;
    h.counts.assign(bins, 0);
    if (table.rows.empty()) return h;
    bool first = true;
    for (const auto& [id, scores] : table.rows) {
        double s = scores[col];
        if (first || s < h.min) h.min = first ? s : std::min(h.min, s);
        if (first || s > h.max) h.max = first ? s : std::max(h.max, s);
        first = false;
    }
    double width = h.max - h.min;
    for (const auto& [id, scores] : table.rows) {
        double s = scores[col];
        std::size_t idx = 0;
        if (width > 0) {
            idx = static_cast<std::size_t>((s - h.min) / width * static_cast<double>(bins));
            if (idx >= bins) idx = bins - 1;
        }
        h.counts[idx]++;
    }
    return h;
}

} // namespace driforge

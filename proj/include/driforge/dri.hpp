#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "driforge/csv.hpp"
#include "driforge/errors.hpp"
#include "driforge/hash.hpp"
#include "driforge/jsonl.hpp"
#include "driforge/text.hpp"

namespace driforge {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Rank statistics

// Average ranks (1-based); tied values share the mean of their rank positions.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

// Pearson correlation; nullopt when either side is constant (undefined).
inline std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    if (n != y.size() || n < 2) throw ConfigError("pearson needs two equal-length vectors, n >= 2");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = x[i] - mx;
        double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

// Spearman rank correlation with average ranks for ties. A constant vector
// has no rank ordering, so the correlation is undefined (nullopt), never a
// silent zero.
inline std::optional<double> spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ConfigError("spearman needs two equal-length vectors, n >= 2");
    return pearson(average_ranks(x), average_ranks(y));
}

// ---------------------------------------------------------------------------
// Survey domain

enum class Wave { pre, mid, post };

inline std::string to_string(Wave w) {
    switch (w) {
    case Wave::pre: return "pre";
    case Wave::mid: return "mid";
    case Wave::post: return "post";
    }
    return "pre";
}

inline std::optional<Wave> parse_wave(std::string_view s) {
    if (s == "pre") return Wave::pre;
    if (s == "mid") return Wave::mid;
    if (s == "post") return Wave::post;
    return std::nullopt;
}

enum class RankingMode { strict_permutation, ties_allowed };

inline std::optional<RankingMode> parse_ranking_mode(std::string_view s) {
    if (s == "strict_permutation") return RankingMode::strict_permutation;
    if (s == "ties_allowed") return RankingMode::ties_allowed;
    return std::nullopt;
}

struct SurveyInstrument {
    std::vector<std::string> considerations; // statement ids
    std::vector<std::string> preferences;    // policy option ids
    int scale_min = -4;
    int scale_max = 4;
    RankingMode ranking_mode = RankingMode::strict_permutation;

    void validate() const {
        if (considerations.size() < 2 || preferences.size() < 2)
            throw ConfigError("instrument needs at least 2 considerations and 2 preferences");
        if (scale_min >= scale_max) throw ConfigError("instrument scale min must be below max");
        std::set<std::string> ids(considerations.begin(), considerations.end());
        for (const auto& p : preferences)
            if (!ids.insert(p).second) throw ConfigError("instrument item ids must be unique: " + p);
    }

    json to_json() const {
        return json{{"considerations", considerations},
                    {"preferences", preferences},
                    {"scale", {{"min", scale_min}, {"max", scale_max}}},
                    {"ranking_mode",
                     ranking_mode == RankingMode::strict_permutation ? "strict_permutation" : "ties_allowed"}};
    }

    std::string content_hash() const { return sha256_hex(to_json().dump()); }

    static SurveyInstrument from_json(const json& doc) {
        SurveyInstrument instr;
        instr.considerations = doc.at("considerations").get<std::vector<std::string>>();
        instr.preferences = doc.at("preferences").get<std::vector<std::string>>();
        instr.scale_min = doc.at("scale").at("min").get<int>();
        instr.scale_max = doc.at("scale").at("max").get<int>();
        if (doc.contains("ranking_mode")) {
            auto mode = parse_ranking_mode(doc["ranking_mode"].get<std::string>());
            if (!mode) throw ParseError("unknown ranking_mode");
            instr.ranking_mode = *mode;
        }
        instr.validate();
        return instr;
    }

    static SurveyInstrument load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open instrument file: " + path);
        json doc = json::parse(in, nullptr, false);
        if (doc.is_discarded()) throw ParseError("instrument file is not valid JSON: " + path);
        return from_json(doc);
    }
};

struct SurveyResponse {
    std::string participant_id;
    Wave wave = Wave::pre;
    std::map<std::string, int> consideration_ratings; // statement id -> rating
    std::map<std::string, int> preference_rankings;   // option id -> rank (1 = most preferred)
};

// Long CSV: participant_id,wave,item_id,value. Item ids decide whether a
// value is a rating or a rank.
inline std::vector<SurveyResponse> load_responses_csv(const std::string& path,
                                                      const SurveyInstrument& instrument) {
    std::set<std::string> consider(instrument.considerations.begin(), instrument.considerations.end());
    std::set<std::string> prefer(instrument.preferences.begin(), instrument.preferences.end());
    auto rows = csv::read_file(path);
    std::map<std::pair<std::string, std::string>, SurveyResponse> grouped;
    std::vector<std::pair<std::string, std::string>> order;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() < 4) throw ParseError("response row needs 4 columns in " + path, r + 1);
        if (r == 0 && fold_case(trim(row[0])) == "participant_id") continue;
        auto wave = parse_wave(trim(row[1]));
        if (!wave) throw ParseError("unknown wave '" + row[1] + "' in " + path, r + 1);
        int value = 0;
        try {
            value = std::stoi(row[3]);
        } catch (const std::exception&) {
            throw ParseError("bad value '" + row[3] + "' in " + path, r + 1);
        }
        auto key = std::make_pair(trim(row[0]), trim(row[1]));
        auto [it, inserted] = grouped.try_emplace(key);
        if (inserted) {
            it->second.participant_id = key.first;
            it->second.wave = *wave;
            order.push_back(key);
        }
        std::string item = trim(row[2]);
        if (consider.count(item)) it->second.consideration_ratings[item] = value;
        else if (prefer.count(item)) it->second.preference_rankings[item] = value;
        else throw ParseError("item '" + item + "' is not in the instrument", r + 1);
    }
    std::vector<SurveyResponse> out;
    out.reserve(order.size());
    for (const auto& key : order) out.push_back(std::move(grouped[key]));
    return out;
}

// JSONL: {"participant_id", "wave", "ratings": {id: int}, "rankings": {id: int}}
inline std::vector<SurveyResponse> load_responses_jsonl(const std::string& path) {
    std::vector<SurveyResponse> out;
    jsonl::for_each(path, [&](std::size_t line_no, const json& rec) {
        try {
            SurveyResponse r;
            r.participant_id = rec.at("participant_id").get<std::string>();
            auto wave = parse_wave(rec.at("wave").get<std::string>());
            if (!wave) throw ParseError("unknown wave", line_no);
            r.wave = *wave;
            for (const auto& [id, v] : rec.at("ratings").items()) r.consideration_ratings[id] = v.get<int>();
            for (const auto& [id, v] : rec.at("rankings").items()) r.preference_rankings[id] = v.get<int>();
            out.push_back(std::move(r));
        } catch (const ParseError&) {
            throw;
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad response record: ") + e.what(), line_no);
        }
    });
    return out;
}

inline std::vector<SurveyResponse> load_responses(const std::string& path,
                                                  const SurveyInstrument& instrument) {
    if (path.size() >= 6 && path.substr(path.size() - 6) == ".jsonl") return load_responses_jsonl(path);
    return load_responses_csv(path, instrument);
}

// ---------------------------------------------------------------------------
// Response validation

struct ValidationOptions {
    bool permissive_missing = false;
    std::size_t min_shared_items = 4; // per pair, permissive mode only
};

inline void validate_response(const SurveyResponse& r, const SurveyInstrument& instrument,
                              const ValidationOptions& opts = {}) {
    std::vector<std::string> problems;
    for (const auto& [id, rating] : r.consideration_ratings)
        if (rating < instrument.scale_min || rating > instrument.scale_max)
            problems.push_back("rating for " + id + " outside scale");
    if (!opts.permissive_missing) {
        for (const auto& id : instrument.considerations)
            if (!r.consideration_ratings.count(id)) problems.push_back("missing rating for " + id);
        for (const auto& id : instrument.preferences)
            if (!r.preference_rankings.count(id)) problems.push_back("missing ranking for " + id);
    }
    for (const auto& [id, rating] : r.consideration_ratings)
        if (std::find(instrument.considerations.begin(), instrument.considerations.end(), id) ==
            instrument.considerations.end())
            problems.push_back("rating for unknown item " + id);
    for (const auto& [id, rank] : r.preference_rankings)
        if (std::find(instrument.preferences.begin(), instrument.preferences.end(), id) ==
            instrument.preferences.end())
            problems.push_back("ranking for unknown item " + id);
    if (instrument.ranking_mode == RankingMode::strict_permutation && !opts.permissive_missing) {
        std::vector<int> ranks;
        for (const auto& [id, rank] : r.preference_rankings) ranks.push_back(rank);
        std::sort(ranks.begin(), ranks.end());
        for (std::size_t i = 0; i < ranks.size(); ++i)
            if (ranks[i] != static_cast<int>(i) + 1) {
                problems.push_back("rankings are not a permutation of 1.." + std::to_string(ranks.size()));
                break;
            }
    }
    if (!problems.empty()) {
        std::string detail = "response for participant " + r.participant_id + " invalid:";
        for (const auto& p : problems) detail += " " + p + ";";
        throw StageError("invalid_response", detail, {r.participant_id});
    }
}

// ---------------------------------------------------------------------------
// Pairwise consistency

struct PairPoint {
    std::string a; // a < b, canonical ordering
    std::string b;
    double rho_c = 0.0;
    double rho_p = 0.0;
    double distance = 0.0; // |rho_c - rho_p| / sqrt(2), perpendicular to x = y
};

struct FlaggedPair {
    std::string a;
    std::string b;
    std::string reason;
};

struct PairComputation {
    std::vector<PairPoint> points;
    std::vector<FlaggedPair> flagged;
};

// All unordered participant pairs: Spearman over aligned consideration
// ratings and preference rankings, and the perpendicular distance to the
// intersubjective-consistency line. Undefined correlations flag the pair.
inline PairComputation pair_points(const std::vector<SurveyResponse>& responses,
                                   const SurveyInstrument& instrument, const ValidationOptions& opts = {}) {
    instrument.validate();
    if (responses.size() < 2) throw ConfigError("pair_points needs at least 2 responses");
    for (const auto& r : responses) validate_response(r, instrument, opts);
    for (std::size_t i = 1; i < responses.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (responses[i].participant_id == responses[j].participant_id)
                throw StageError("duplicate_participant", "participant appears twice in one wave",
                                 {responses[i].participant_id});

    std::vector<const SurveyResponse*> ordered;
    ordered.reserve(responses.size());
    for (const auto& r : responses) ordered.push_back(&r);
    std::sort(ordered.begin(), ordered.end(),
              [](const SurveyResponse* x, const SurveyResponse* y) { return x->participant_id < y->participant_id; });

    PairComputation out;
    for (std::size_t i = 0; i < ordered.size(); ++i) {
        for (std::size_t j = i + 1; j < ordered.size(); ++j) {
            const SurveyResponse& ra = *ordered[i];
            const SurveyResponse& rb = *ordered[j];
            std::vector<double> ca, cb, pa, pb;
            for (const auto& id : instrument.considerations) {
                auto ita = ra.consideration_ratings.find(id);
                auto itb = rb.consideration_ratings.find(id);
                if (ita == ra.consideration_ratings.end() || itb == rb.consideration_ratings.end()) {
                    if (!opts.permissive_missing)
                        throw StageError("misaligned_items", "participants disagree on answered items",
                                         {ra.participant_id, rb.participant_id});
                    continue;
                }
                ca.push_back(ita->second);
                cb.push_back(itb->second);
            }
            for (const auto& id : instrument.preferences) {
                auto ita = ra.preference_rankings.find(id);
                auto itb = rb.preference_rankings.find(id);
                if (ita == ra.preference_rankings.end() || itb == rb.preference_rankings.end()) {
                    if (!opts.permissive_missing)
                        throw StageError("misaligned_items", "participants disagree on answered items",
                                         {ra.participant_id, rb.participant_id});
                    continue;
                }
                pa.push_back(ita->second);
                pb.push_back(itb->second);
            }
            if (opts.permissive_missing &&
                (ca.size() < opts.min_shared_items || pa.size() < 2)) {
                out.flagged.push_back({ra.participant_id, rb.participant_id, "insufficient_shared_items"});
                continue;
            }
            auto rho_c = spearman(ca, cb);
            auto rho_p = spearman(pa, pb);
            if (!rho_c || !rho_p) {
                out.flagged.push_back({ra.participant_id, rb.participant_id, "undefined_correlation"});
                continue;
            }
            PairPoint p;
            p.a = ra.participant_id;
            p.b = rb.participant_id;
            p.rho_c = *rho_c;
            p.rho_p = *rho_p;
            p.distance = std::abs(p.rho_c - p.rho_p) / std::sqrt(2.0);
            out.points.push_back(std::move(p));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// DRI aggregation
//
// The primitive quantity is the mean perpendicular distance to x = y; the
// index maps it onto [0, 1] as DRI = 1 - mean_distance / sqrt(2), computed as
// 1 - mean|rho_c - rho_p| / 2 (algebraically identical, numerically exact at
// the endpoints). raw_mean_distance is always reported alongside, so results
// stay comparable with any other affine scaling of the same primitive.

inline double individual_dri(const std::vector<PairPoint>& points, const std::string& participant) {
    double delta_sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : points) {
        if (p.a != participant && p.b != participant) continue;
        delta_sum += std::abs(p.rho_c - p.rho_p);
        ++n;
    }
    if (n == 0)
        throw StageError("unknown_participant", "participant '" + participant + "' appears in no pair");
    return 1.0 - (delta_sum / static_cast<double>(n)) / 2.0;
}

struct DriResult {
    Wave wave = Wave::pre;
    std::vector<PairPoint> pair_points;
    std::vector<FlaggedPair> flagged;
    std::map<std::string, double> individual;
    double group = 0.0;
    double raw_mean_distance = 0.0;
    std::string instrument_hash;

    json to_json() const {
        json pairs = json::array();
        for (const auto& p : pair_points)
            pairs.push_back(json{{"a", p.a},
                                 {"b", p.b},
                                 {"rho_c", p.rho_c},
                                 {"rho_p", p.rho_p},
                                 {"distance", p.distance}});
        json flags = json::array();
        for (const auto& f : flagged) flags.push_back(json{{"a", f.a}, {"b", f.b}, {"reason", f.reason}});
        return json{{"wave", to_string(wave)},
                    {"group", group},
                    {"raw_mean_distance", raw_mean_distance},
                    {"individual", individual},
                    {"pairs", pairs},
                    {"flagged", flags},
                    {"instrument_hash", instrument_hash}};
    }

    static DriResult from_json(const json& doc) {
        DriResult r;
        auto wave = parse_wave(doc.at("wave").get<std::string>());
        if (!wave) throw ParseError("unknown wave in result");
        r.wave = *wave;
        r.group = doc.at("group").get<double>();
        r.raw_mean_distance = doc.at("raw_mean_distance").get<double>();
        for (const auto& [id, v] : doc.at("individual").items()) r.individual[id] = v.get<double>();
        for (const auto& p : doc.at("pairs"))
            r.pair_points.push_back(PairPoint{p.at("a").get<std::string>(), p.at("b").get<std::string>(),
                                              p.at("rho_c").get<double>(), p.at("rho_p").get<double>(),
                                              p.at("distance").get<double>()});
        if (doc.contains("flagged"))
            for (const auto& f : doc["flagged"])
                r.flagged.push_back(FlaggedPair{f.at("a").get<std::string>(), f.at("b").get<std::string>(),
                                                f.at("reason").get<std::string>()});
        r.instrument_hash = doc.value("instrument_hash", "");
        return r;
    }

    static DriResult load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open DRI result file: " + path);
        json doc = json::parse(in, nullptr, false);
        if (doc.is_discarded()) throw ParseError("DRI result file is not valid JSON: " + path);
        return from_json(doc);
    }
};

inline DriResult group_dri(const PairComputation& pairs, Wave wave,
                           const std::string& instrument_hash = "") {
    if (pairs.points.empty())
        throw StageError("no_valid_pairs", "no pair has a defined correlation; nothing to aggregate");
    DriResult res;
    res.wave = wave;
    res.pair_points = pairs.points;
    res.flagged = pairs.flagged;
    res.instrument_hash = instrument_hash;

    std::set<std::string> participants;
    double dist_sum = 0.0;
    for (const auto& p : pairs.points) {
        participants.insert(p.a);
        participants.insert(p.b);
        dist_sum += p.distance;
    }
    if (participants.size() < 2)
        throw StageError("no_valid_pairs", "fewer than 2 participants with defined pairs");
    res.raw_mean_distance = dist_sum / static_cast<double>(pairs.points.size());
    double indiv_sum = 0.0;
    for (const auto& id : participants) {
        double d = individual_dri(pairs.points, id);
        res.individual[id] = d;
        indiv_sum += d;
    }
    res.group = indiv_sum / static_cast<double>(participants.size());
    return res;
}

// ---------------------------------------------------------------------------
// Pre/post comparison

struct DriDelta {
    double group_delta = 0.0;
    std::map<std::string, double> individual_delta; // participants in both waves
    std::size_t pre_only = 0;
    std::size_t post_only = 0;

    json to_json() const {
        return json{{"group_delta", group_delta},
                    {"individual_delta", individual_delta},
                    {"pre_only", pre_only},
                    {"post_only", post_only}};
    }
};

inline DriDelta dri_delta(const DriResult& pre, const DriResult& post) {
    if (!pre.instrument_hash.empty() && !post.instrument_hash.empty() &&
        pre.instrument_hash != post.instrument_hash)
        throw StageError("instrument_mismatch", "pre and post results come from different instruments");
    DriDelta d;
    std::size_t overlap = 0;
    for (const auto& [id, v] : pre.individual) {
        auto it = post.individual.find(id);
        if (it == post.individual.end()) {
            ++d.pre_only;
            continue;
        }
        d.individual_delta[id] = it->second - v;
        ++overlap;
    }
    for (const auto& [id, v] : post.individual)
        if (!pre.individual.count(id)) ++d.post_only;
    if (overlap == 0)
        throw StageError("disjoint_waves", "pre and post waves share no participants");
    if (overlap < 2)
        throw StageError("disjoint_waves", "pre and post waves share fewer than 2 participants");
    d.group_delta = post.group - pre.group;
    return d;
}

// ---------------------------------------------------------------------------
// Scatter export (one row per pair point, the x = y reference in metadata)

inline void export_scatter(const DriResult& result, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open scatter output: " + path);
    out << "# reference_line: y=x\n";
    out << "# signed_distance: (rho_p - rho_c)/sqrt(2), positive above the line\n";
    out << "a,b,rho_c,rho_p,distance,signed_distance\n";
    char buf[160];
    for (const auto& p : result.pair_points) {
        double signed_d = (p.rho_p - p.rho_c) / std::sqrt(2.0);
        std::snprintf(buf, sizeof(buf), ",%.12f,%.12f,%.12f,%.12f", p.rho_c, p.rho_p, p.distance, signed_d);
        out << csv::escape(p.a) << ',' << csv::escape(p.b) << buf << '\n';
    }
}

} // namespace driforge

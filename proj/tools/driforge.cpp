// driforge: builds DRI survey instruments from a news corpus and scores the
// completed surveys. Stages run as subcommands over a TOML run configuration
// and communicate only through files under the output directory.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "driforge/pipeline.hpp"

using json = nlohmann::json;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
    cmd->add_option("--config", flags.config_path, "run configuration (TOML)");
    cmd->add_option("--out", flags.out_dir, "pipeline output root directory");
    cmd->add_flag("--force", flags.force, "skip upstream manifest validation");
}

driforge::RunConfig load_config(const CommonFlags& flags) {
    driforge::RunConfig config;
    if (!flags.config_path.empty()) config = driforge::RunConfig::load(flags.config_path);
    else config.apply_env_overrides();
    if (!flags.out_dir.empty()) config.out_dir = flags.out_dir;
    return config;
}

int fail(const std::string& stage, const std::string& kind, const std::string& detail,
         const std::vector<std::string>& ids = {}) {
    json report{{"stage", stage}, {"error_kind", kind}, {"detail", detail}, {"offending_ids", ids}};
    std::cerr << report.dump() << "\n";
    return 1;
}

int run_guarded(const std::string& stage, const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const driforge::StageError& e) {
        return fail(stage, e.kind(), e.what(), e.offending_ids());
    } catch (const driforge::ConfigError& e) {
        return fail(stage, "config_error", e.what());
    } catch (const driforge::ParseError& e) {
        return fail(stage, "parse_error", e.what());
    } catch (const std::exception& e) {
        return fail(stage, "error", e.what());
    }
}

void write_or_print(const std::string& out_path, const std::string& content) {
    if (out_path.empty()) {
        std::cout << content;
        return;
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw driforge::ConfigError("cannot open output file: " + out_path);
    out << content;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"driforge: DRI survey construction and scoring pipeline"};
    app.require_subcommand(1);

    int exit_code = 0;
    auto run = [&](const std::string& stage, std::function<void()> body) {
        exit_code = run_guarded(stage, body);
    };

    // --- ingest ------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("ingest", "filter, chunk and dedup the article dump");
        auto flags = std::make_shared<CommonFlags>();
        auto input = std::make_shared<std::string>();
        auto keywords = std::make_shared<std::string>();
        auto leanings = std::make_shared<std::string>();
        auto from = std::make_shared<std::string>();
        auto to = std::make_shared<std::string>();
        auto strict = std::make_shared<bool>(false);
        add_common(cmd, *flags);
        cmd->add_option("--input", *input, "article dump (JSONL)");
        cmd->add_option("--keywords", *keywords, "keyword list (CSV keyword,language)");
        cmd->add_option("--leanings", *leanings, "outlet leaning map (CSV outlet,score)");
        cmd->add_option("--from", *from, "window start (YYYY-MM-DD)");
        cmd->add_option("--to", *to, "window end (YYYY-MM-DD)");
        cmd->add_flag("--strict", *strict, "abort on the first malformed record");
        cmd->callback([=, &run] {
            run("ingest", [&] {
                auto config = load_config(*flags);
                if (!input->empty()) config.input = *input;
                if (!keywords->empty()) config.keywords = *keywords;
                if (!leanings->empty()) config.leanings = *leanings;
                if (!from->empty()) config.date_from = *from;
                if (!to->empty()) config.date_to = *to;
                if (*strict) config.strict = true;
                driforge::run_stage(driforge::Stage::ingest, config, flags->force);
            });
        });
    }

    // --- embed -------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("embed", "embed the paragraph corpus into the cache");
        auto flags = std::make_shared<CommonFlags>();
        add_common(cmd, *flags);
        cmd->callback([=, &run] {
            run("embed", [&] {
                driforge::run_stage(driforge::Stage::embed, load_config(*flags), flags->force);
            });
        });
    }

    // --- categorize ----------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("categorize", "score every paragraph against the anchors");
        auto flags = std::make_shared<CommonFlags>();
        auto anchors = std::make_shared<std::string>();
        auto reduction = std::make_shared<std::string>();
        add_common(cmd, *flags);
        cmd->add_option("--anchors", *anchors, "anchor definition file (JSON)");
        cmd->add_option("--reduction", *reduction, "none | pca | import:<path>");
        cmd->callback([=, &run] {
            run("categorize", [&] {
                auto config = load_config(*flags);
                if (!anchors->empty()) config.anchors = *anchors;
                if (!reduction->empty()) {
                    if (*reduction == "none") config.reduction.method = driforge::ReductionMethod::none;
                    else if (*reduction == "pca") config.reduction.method = driforge::ReductionMethod::pca;
                    else if (reduction->rfind("import:", 0) == 0) {
                        config.reduction.method = driforge::ReductionMethod::external_import;
                        config.reduction.import_path = reduction->substr(7);
                    } else {
                        throw driforge::ConfigError("unknown --reduction value: " + *reduction);
                    }
                }
                driforge::run_stage(driforge::Stage::categorize, config, flags->force);
            });
        });
    }

    // --- select --------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("select", "pick the top-k paragraphs per category and leaning");
        auto flags = std::make_shared<CommonFlags>();
        auto k = std::make_shared<std::size_t>(0);
        auto leaning = std::make_shared<std::string>();
        add_common(cmd, *flags);
        cmd->add_option("--k", *k, "selection size per cell (default from config, 500)");
        cmd->add_option("--leaning", *leaning, "restrict to one leaning");
        cmd->callback([=, &run] {
            run("select", [&] {
                auto config = load_config(*flags);
                if (*k > 0) config.k = *k;
                if (!leaning->empty()) {
                    auto l = driforge::parse_leaning(*leaning);
                    if (!l) throw driforge::ConfigError("unknown leaning: " + *leaning);
                    config.leanings_scope = {*l};
                }
                driforge::run_stage(driforge::Stage::select, config, flags->force);
            });
        });
    }

    // --- generate ------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("generate", "generate statements and policy proposals per cell");
        auto flags = std::make_shared<CommonFlags>();
        auto anchors = std::make_shared<std::string>();
        auto templates = std::make_shared<std::string>();
        auto scope = std::make_shared<std::string>();
        auto runs = std::make_shared<std::size_t>(0);
        add_common(cmd, *flags);
        cmd->add_option("--anchors", *anchors, "anchor definition file (JSON)");
        cmd->add_option("--templates", *templates, "prompt template directory");
        cmd->add_option("--policy-scope", *scope, "general | all");
        cmd->add_option("--runs", *runs, "number of sampling runs");
        cmd->callback([=, &run] {
            run("generate", [&] {
                auto config = load_config(*flags);
                if (!anchors->empty()) config.anchors = *anchors;
                if (!templates->empty()) config.templates = *templates;
                if (!scope->empty()) {
                    auto ps = driforge::parse_policy_scope(*scope);
                    if (!ps) throw driforge::ConfigError("unknown --policy-scope: " + *scope);
                    config.policy_scope = *ps;
                }
                if (*runs > 0) config.runs = *runs;
                driforge::run_stage(driforge::Stage::generate, config, flags->force);
            });
        });
    }

    // --- dedup (helper) --------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("dedup", "group near-duplicate statements by embedding similarity");
        auto flags = std::make_shared<CommonFlags>();
        auto statements = std::make_shared<std::string>();
        auto threshold = std::make_shared<double>(0.0);
        auto out_path = std::make_shared<std::string>();
        add_common(cmd, *flags);
        cmd->add_option("--statements", *statements, "statement corpus (JSONL); default from pipeline");
        cmd->add_option("--threshold", *threshold, "cosine threshold in (0,1], default 0.95");
        cmd->add_option("--report", *out_path, "write the report here instead of stdout");
        cmd->callback([=, &run] {
            run("dedup", [&] {
                auto config = load_config(*flags);
                std::string path = statements->empty()
                                       ? config.out_dir + "/generate/statements.jsonl"
                                       : *statements;
                double t = *threshold > 0 ? *threshold : config.dedup_threshold;
                auto stmts = driforge::load_statements(path);
                auto provider = driforge::make_embedding_provider(config);
                auto dd = driforge::dedup_statements(stmts, *provider, t);
                json groups = json::object();
                for (const auto& [kept, dups] : dd.duplicate_groups) groups[kept] = dups;
                json report{{"threshold", t},
                            {"total", stmts.size()},
                            {"kept", dd.kept.size()},
                            {"grouped", stmts.size() - dd.kept.size()},
                            {"groups", groups}};
                write_or_print(*out_path, report.dump(2) + "\n");
            });
        });
    }

    // --- review --------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("review", "export the review sheet and import decisions");
        cmd->fallthrough(); // --config after `review export|import` reaches this command
        auto flags = std::make_shared<CommonFlags>();
        add_common(cmd, *flags);

        auto* exp = cmd->add_subcommand("export", "write the review sheet for the generated statements");
        auto exp_out = std::make_shared<std::string>();
        exp->add_option("--sheet", *exp_out, "sheet output path (default stdout)");

        auto* imp = cmd->add_subcommand("import", "turn a decided sheet into the survey instrument");
        auto imp_sheet = std::make_shared<std::string>();
        auto imp_out = std::make_shared<std::string>();
        imp->add_option("--sheet", *imp_sheet, "decided review sheet (CSV)")->required();
        imp->add_option("--instrument", *imp_out, "instrument output path (default stdout)");

        cmd->callback([=, &run] {
            run("review", [&] {
                auto config = load_config(*flags);
                if (exp->parsed()) {
                    auto stmts =
                        driforge::load_statements(config.out_dir + "/generate/statements.jsonl");
                    std::string path = exp_out->empty() ? "/dev/stdout" : *exp_out;
                    driforge::review_export(stmts, path);
                } else if (imp->parsed()) {
                    auto stmts =
                        driforge::load_statements(config.out_dir + "/generate/statements.jsonl");
                    auto items = driforge::review_import(*imp_sheet, stmts);
                    driforge::SurveyInstrument instrument;
                    for (const auto& i : items.considerations) instrument.considerations.push_back(i.id);
                    for (const auto& i : items.policies) instrument.preferences.push_back(i.id);
                    instrument.scale_min = config.scale_min;
                    instrument.scale_max = config.scale_max;
                    instrument.ranking_mode = config.ranking_mode;
                    instrument.validate();
                    write_or_print(*imp_out, instrument.to_json().dump(2) + "\n");
                } else {
                    driforge::run_stage(driforge::Stage::review, config, flags->force);
                }
            });
        });
    }

    // --- score ---------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("score", "compute DRI from survey responses");
        auto flags = std::make_shared<CommonFlags>();
        auto instrument = std::make_shared<std::string>();
        auto responses = std::make_shared<std::string>();
        auto wave = std::make_shared<std::string>();
        add_common(cmd, *flags);
        cmd->add_option("--instrument", *instrument, "survey instrument (JSON)");
        cmd->add_option("--responses", *responses, "responses file (CSV long form or JSONL)");
        cmd->add_option("--wave", *wave, "pre | mid | post");
        cmd->callback([=, &run] {
            run("score", [&] {
                auto config = load_config(*flags);
                if (!instrument->empty()) config.instrument = *instrument;
                if (!responses->empty()) config.responses = *responses;
                if (!wave->empty()) {
                    auto w = driforge::parse_wave(*wave);
                    if (!w) throw driforge::ConfigError("unknown wave: " + *wave);
                    config.wave = *w;
                }
                driforge::run_stage(driforge::Stage::score, config, flags->force);
            });
        });
    }

    // --- delta (helper) --------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("delta", "compare two DRI results (post minus pre)");
        auto pre = std::make_shared<std::string>();
        auto post = std::make_shared<std::string>();
        auto out_path = std::make_shared<std::string>();
        cmd->add_option("--pre", *pre, "pre-wave DRI result (JSON)")->required();
        cmd->add_option("--post", *post, "post-wave DRI result (JSON)")->required();
        cmd->add_option("--report", *out_path, "write the delta report here instead of stdout");
        cmd->callback([=, &run] {
            run("delta", [&] {
                auto d = driforge::dri_delta(driforge::DriResult::load(*pre),
                                             driforge::DriResult::load(*post));
                write_or_print(*out_path, d.to_json().dump(2) + "\n");
            });
        });
    }

    // --- validate --------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("validate", "compare generated statements against a reference survey");
        cmd->fallthrough(); // --config after `validate match|candidates|rate` reaches this command
        auto flags = std::make_shared<CommonFlags>();
        add_common(cmd, *flags);

        auto* match = cmd->add_subcommand("match", "all-pairs similarity matrix");
        auto m_reference = std::make_shared<std::string>();
        auto m_generated = std::make_shared<std::string>();
        auto m_out = std::make_shared<std::string>();
        match->add_option("--reference", *m_reference, "reference survey (JSONL)");
        match->add_option("--generated", *m_generated, "generated statements (JSONL)");
        match->add_option("--matrix", *m_out, "matrix CSV output path")->required();

        auto* cand = cmd->add_subcommand("candidates", "top-n nearest statements per reference item");
        auto c_reference = std::make_shared<std::string>();
        auto c_generated = std::make_shared<std::string>();
        auto c_n = std::make_shared<std::size_t>(0);
        auto c_out = std::make_shared<std::string>();
        cand->add_option("--reference", *c_reference, "reference survey (JSONL)");
        cand->add_option("--generated", *c_generated, "generated statements (JSONL)");
        cand->add_option("--n", *c_n, "candidates per reference item (default 5)");
        cand->add_option("--candidates", *c_out, "candidate CSV output path (default stdout)");

        auto* rate = cmd->add_subcommand("rate", "match-rate summary from manual judgments");
        auto r_judgments = std::make_shared<std::string>();
        auto r_reference = std::make_shared<std::string>();
        auto r_exclude = std::make_shared<bool>(false);
        rate->add_option("--judgments", *r_judgments, "judgments CSV")->required();
        rate->add_option("--reference", *r_reference, "reference survey (JSONL)");
        rate->add_flag("--exclude-general", *r_exclude, "drop reference items flagged general_style");

        cmd->callback([=, &run] {
            run("validate", [&] {
                auto config = load_config(*flags);
                auto load_sets = [&](const std::string& ref_path, const std::string& gen_path) {
                    std::string ref = ref_path.empty() ? config.reference : ref_path;
                    std::string gen =
                        gen_path.empty() ? config.out_dir + "/generate/statements.jsonl" : gen_path;
                    auto reference = driforge::load_reference_items(ref);
                    auto statements = driforge::load_statements(gen);
                    std::vector<std::pair<std::string, std::string>> ref_pairs, gen_pairs;
                    for (const auto& r : reference) ref_pairs.emplace_back(r.id, r.text);
                    for (const auto& s : statements) gen_pairs.emplace_back(s.id, s.text);
                    return std::make_tuple(reference, ref_pairs, gen_pairs);
                };
                if (match->parsed()) {
                    auto [reference, ref_pairs, gen_pairs] = load_sets(*m_reference, *m_generated);
                    auto provider = driforge::make_embedding_provider(config);
                    driforge::match_matrix(ref_pairs, gen_pairs, *provider).export_csv(*m_out);
                } else if (cand->parsed()) {
                    auto [reference, ref_pairs, gen_pairs] = load_sets(*c_reference, *c_generated);
                    auto provider = driforge::make_embedding_provider(config);
                    auto matrix = driforge::match_matrix(ref_pairs, gen_pairs, *provider);
                    std::size_t n = *c_n ? *c_n : config.top_n;
                    std::string content = "reference_id,rank,candidate_id,score\n";
                    char buf[32];
                    for (const auto& rid : matrix.reference_ids) {
                        auto top = driforge::top_candidates(matrix, rid, n);
                        for (std::size_t i = 0; i < top.size(); ++i) {
                            std::snprintf(buf, sizeof(buf), "%.9f", top[i].score);
                            content += rid + "," + std::to_string(i + 1) + "," + top[i].id + "," + buf + "\n";
                        }
                    }
                    write_or_print(*c_out, content);
                } else if (rate->parsed()) {
                    std::string ref = r_reference->empty() ? config.reference : *r_reference;
                    auto reference = driforge::load_reference_items(ref);
                    auto judgments = driforge::load_judgments(*r_judgments);
                    auto summary = driforge::match_rate(judgments, reference, *r_exclude);
                    std::cout << summary.to_json().dump(2) << "\n";
                } else {
                    driforge::run_stage(driforge::Stage::validate, config, flags->force);
                }
            });
        });
    }

    // --- overlap / histogram (helpers) -------------------------------------------
    {
        auto* cmd = app.add_subcommand("overlap", "category overlap matrix at a given k");
        auto flags = std::make_shared<CommonFlags>();
        auto k = std::make_shared<std::size_t>(0);
        auto out_path = std::make_shared<std::string>();
        add_common(cmd, *flags);
        cmd->add_option("--k", *k, "selection size")->required();
        cmd->add_option("--matrix", *out_path, "matrix CSV output path (default stdout)");
        cmd->callback([=, &run] {
            run("overlap", [&] {
                auto config = load_config(*flags);
                auto table =
                    driforge::ScoreTable::import_csv(config.out_dir + "/categorize/scores.csv");
                std::map<std::string, std::optional<driforge::Leaning>> leanings;
                for (const auto& p :
                     driforge::load_paragraphs(config.out_dir + "/ingest/paragraphs.jsonl"))
                    leanings[p.id] = p.leaning;
                std::vector<driforge::Selection> sels;
                for (const auto& name : table.category_names)
                    sels.push_back(driforge::select_top_k(table, name, *k, std::nullopt, leanings));
                auto overlap = driforge::overlap_matrix(sels);
                if (out_path->empty()) {
                    std::string tmp = std::filesystem::temp_directory_path() / "driforge_overlap.csv";
                    overlap.export_csv(tmp);
                    std::ifstream in(tmp);
                    std::cout << in.rdbuf();
                    std::cout << "# mean_off_diagonal: " << overlap.mean_off_diagonal << "\n";
                } else {
                    overlap.export_csv(*out_path);
                }
            });
        });
    }
    {
        auto* cmd = app.add_subcommand("histogram", "similarity histogram for one category");
        auto flags = std::make_shared<CommonFlags>();
        auto category = std::make_shared<std::string>();
        auto bins = std::make_shared<std::size_t>(100);
        auto out_path = std::make_shared<std::string>();
        add_common(cmd, *flags);
        cmd->add_option("--category", *category, "category name")->required();
        cmd->add_option("--bins", *bins, "bin count (default 100)");
        cmd->add_option("--csv", *out_path, "CSV output path (default stdout)");
        cmd->callback([=, &run] {
            run("histogram", [&] {
                auto config = load_config(*flags);
                auto table =
                    driforge::ScoreTable::import_csv(config.out_dir + "/categorize/scores.csv");
                auto h = driforge::similarity_histogram(table, *category, *bins);
                std::string path = out_path->empty() ? "/dev/stdout" : *out_path;
                h.export_csv(path);
            });
        });
    }

    // --- report -------------------------------------------------------------
    {
        auto* cmd = app.add_subcommand("report", "summary bundle: histograms, overlap, stats, scatter");
        auto flags = std::make_shared<CommonFlags>();
        add_common(cmd, *flags);
        cmd->callback([=, &run] {
            run("report", [&] {
                driforge::run_stage(driforge::Stage::report, load_config(*flags), flags->force);
            });
        });
    }

    CLI11_PARSE(app, argc, argv);
    return exit_code;
}

// peft-ser: generate corpora, train, adapt, audit parameter budgets, render reports.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error.

#include "peft/adaptation.hpp"
#include "peft/checkpoint.hpp"
#include "peft/config.hpp"
#include "peft/data.hpp"
#include "peft/experiment.hpp"
#include "peft/report.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace peft;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> fold;
    std::optional<int> jobs;
};

ExperimentConfig resolve(const Globals& g) {
    ExperimentConfig cfg = g.config.empty() ? parse_config(nlohmann::json::object(), g.seed)
                                            : load_config(g.config, g.seed);
    if (!g.out.empty()) cfg.out = g.out;
    if (g.fold) cfg.fold = *g.fold;
    if (g.jobs) cfg.jobs = *g.jobs;
    cfg.validate();
    return cfg;
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << text;
    if (!os) throw std::runtime_error("write failed: " + path);
}

void emit(const Table& t, const std::string& csv_path) {
    render_text(std::cout, t);
    std::ostringstream csv;
    render_csv(csv, t);
    write_file(csv_path, csv.str());
    std::cout << "csv: " << csv_path << "\n";
}

std::string corpus_path(const ExperimentConfig& cfg, const std::string& id) { return cfg.corpus_dir() + "/" + id + ".jsonl"; }

Corpus load_corpus(const ExperimentConfig& cfg, const std::string& id) {
    const auto path = corpus_path(cfg, id);
    if (!fs::exists(path)) throw std::runtime_error("missing corpus " + path + " (run gen-data first)");
    Corpus c = read_corpus(path);
    c.name = id;
    if (c.features() != cfg.arch.in_features) {
        throw ConfigError("corpus " + path + " has " + std::to_string(c.features()) + " features, arch expects " +
                          std::to_string(cfg.arch.in_features));
    }
    return c;
}

std::string policy_label(const FreezePolicy& p) {
    if (p.mode != TrainMode::PEFT) return to_string(p.mode);
    std::string s;
    for (auto k : kAdapterKinds) {
        if (p.of(k) == Update::absent) continue;
        if (!s.empty()) s += "+";
        s += to_string(k);
        if (p.of(k) == Update::frozen) s += "(frozen)";
    }
    return s.empty() ? "head-only" : s;
}

std::string file_label(std::string s) {
    for (auto& c : s) {
        if (c == '+') c = '_';
        else if (c == '(' || c == ')') c = '-';
    }
    return s;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const ExperimentConfig& cfg) {
    ensure_dir(cfg.corpus_dir());
    ensure_dir(cfg.out);
    Table t;
    t.header = {"corpus", "session"};
    for (auto e : kEmotions) t.header.emplace_back(to_string(e));
    t.header.emplace_back("total");
    long grand = 0;
    for (const std::string id : {"acted", "natural"}) {
        Corpus c = generate_corpus(cfg.corpus(id));
        c.name = id;
        write_corpus(corpus_path(cfg, id), c);
        std::map<int, std::array<long, kNumEmotions>> counts;
        for (const auto& u : c.utterances) ++counts[u.session][static_cast<std::size_t>(u.label)];
        for (const auto& [session, row] : counts) {
            std::vector<Cell> line{Cell(id), Cell(std::to_string(session))};
            long total = 0;
            for (long n : row) {
                line.emplace_back(std::to_string(n));
                total += n;
            }
            line.emplace_back(std::to_string(total));
            grand += total;
            t.add(std::move(line));
        }
        t.rule();
        std::cout << "wrote " << corpus_path(cfg, id) << " (" << c.size() << " utterances)\n";
    }
    emit(t, cfg.out + "/gen-data_counts.csv");
    std::cout << "total utterances: " << grand << "\n";
    return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& domain) {
    const Corpus corpus = load_corpus(cfg, domain);
    const auto folds = folds_of(cfg, corpus);
    ensure_dir(cfg.out + "/checkpoints");

    struct Job {
        std::size_t policy;
        int fold;
    };
    std::vector<Job> jobs;
    for (std::size_t p = 0; p < cfg.policies.size(); ++p) {
        for (int f : folds) jobs.push_back({p, f});
    }
    std::vector<FoldOutcome> outcomes(jobs.size());
    parallel_for(jobs.size(), cfg.jobs, [&](std::size_t i) {
        outcomes[i] = run_fold(cfg, corpus, cfg.policies[jobs[i].policy], jobs[i].fold, cfg.train.seed);
    });

    std::vector<ResultRow> rows;
    nlohmann::ordered_json doc{{"format", "peft-ser-train-results"},
                               {"version", 1},
                               {"corpus", domain},
                               {"task", to_string(cfg.train.task)},
                               {"arch", to_json(cfg.arch)},
                               {"runs", nlohmann::ordered_json::array()}};
    for (std::size_t p = 0; p < cfg.policies.size(); ++p) {
        const auto& policy = cfg.policies[p];
        ResultRow row;
        row.mode = policy.mode;
        row.adapters = cfg.adapters_for(policy);
        nlohmann::ordered_json run{{"policy", to_json(policy)}, {"label", policy_label(policy)}};
        run["folds"] = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            if (jobs[i].policy != p) continue;
            const auto& o = outcomes[i];
            row.upstream_params = o.upstream_params;
            row.folds.push_back(o.test);
            const auto path = cfg.out + "/checkpoints/" + domain + "_" + file_label(policy_label(policy)) + "_fold" +
                              std::to_string(o.fold) + ".json";
            save_checkpoint(path, o.model, cfg.train_for(policy), policy);
            run["folds"].push_back({{"fold", o.fold},
                                    {"best_epoch", o.history.best_epoch},
                                    {"acc", o.test.acc},
                                    {"ccc_v", o.test.ccc_v},
                                    {"ccc_a", o.test.ccc_a},
                                    {"ccc_d", o.test.ccc_d},
                                    {"n", o.test.n},
                                    {"checkpoint", path}});
        }
        row.mean = cv_mean(row.folds);
        run["upstream_params"] = row.upstream_params;
        doc["runs"].push_back(std::move(run));
        rows.push_back(std::move(row));
    }
    write_file(cfg.out + "/train_results.json", doc.dump(2) + "\n");
    std::cout << domain << ", " << (cfg.fold ? "fold " + std::to_string(*cfg.fold) : std::string("5-cv mean")) << "\n";
    emit(results_table(rows, cfg.train.task), cfg.out + "/train_results.csv");
    return 0;
}

int cmd_adapt(const ExperimentConfig& cfg) {
    AdaptationSetup setup;
    setup.arch = cfg.arch;
    setup.bottleneck = cfg.bottleneck;
    setup.rank = cfg.rank;
    setup.source = load_corpus(cfg, cfg.plan.source_id);
    setup.target = load_corpus(cfg, cfg.plan.target_id);
    setup.fold = cfg.fold.value_or(1);
    setup.pretrain = cfg.pretrain;
    setup.validate();

    TrainConfig tc = cfg.train_for(StagePlan::stage1_policy());
    std::vector<FreezeMatrixResult> runs(cfg.plan.seeds.size());
    parallel_for(runs.size(), cfg.jobs,
                 [&](std::size_t i) { runs[i] = freeze_matrix(setup, cfg.plan, tc, cfg.plan.seeds[i]); });

    ensure_dir(cfg.out);
    write_file(cfg.out + "/adaptation.json", adaptation_json(setup, cfg.plan, tc, runs).dump(2) + "\n");
    for (const auto& r : runs) {
        std::cout << "seed " << r.seed << "\n";
        render_text(std::cout, stage_table(r.rows, cfg.plan.source_id, cfg.plan.target_id, tc.task));
        std::cout << "\n";
    }
    std::cout << "median over " << runs.size() << " seed(s); [x] = zero-shot\n";
    emit(stage_table(median_rows(runs), cfg.plan.source_id, cfg.plan.target_id, tc.task), cfg.out + "/adaptation.csv");
    std::cout << "report: " << cfg.out << "/adaptation.json\n";
    return 0;
}

int cmd_audit(const Globals& g, bool csv_only) {
    const auto rows = audit_params();
    const Table t = audit_table(rows);
    if (csv_only) {
        render_csv(std::cout, t);
    } else {
        render_text(std::cout, t);
        std::cout << "FT counts transformer blocks only; the stand-in frontend replaces the convolutional extractor.\n";
    }
    if (!g.out.empty()) {
        ensure_dir(g.out);
        std::ostringstream csv;
        render_csv(csv, t);
        write_file(g.out + "/audit.csv", csv.str());
    }
    const bool ok = audit_passed(rows);
    if (!csv_only) std::cout << (ok ? "audit: PASS" : "audit: FAIL") << "\n";
    return ok ? 0 : 2;
}

StageRow stage_row_from_json(const nlohmann::json& j) {
    StageRow r;
    r.stage = j.at("stage").get<int>();
    r.source = j.at("source").get<std::string>();
    r.target = j.at("target").get<std::string>();
    const char* keys[] = {"ba", "lora", "ws", "wg"};
    for (std::size_t i = 0; i < 4; ++i) r.updated[i] = j.at(keys[i]).get<std::string>() == "updated";
    r.source_metric = j.at("source_metric").get<double>();
    r.target_metric = j.at("target_metric").get<double>();
    r.source_zero_shot = j.at("source_zero_shot").get<bool>();
    r.target_zero_shot = j.at("target_zero_shot").get<bool>();
    return r;
}

int cmd_report(const std::string& path, bool csv_only) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ": " + e.what());
    }
    auto show = [&](const Table& t) {
        if (csv_only) render_csv(std::cout, t);
        else render_text(std::cout, t);
    };
    const auto format = j.value("format", std::string());
    if (format == kAdaptationFormat) {
        const auto task = parse_task(j.at("train_config").at("task").get<std::string>());
        std::vector<StageRow> rows;
        for (const auto& r : j.at("median_rows")) rows.push_back(stage_row_from_json(r));
        show(stage_table(rows, j.at("source").get<std::string>(), j.at("target").get<std::string>(), task));
    } else if (format == "peft-ser-train-results") {
        const auto task = parse_task(j.at("task").get<std::string>());
        std::vector<ResultRow> rows;
        for (const auto& run : j.at("runs")) {
            ResultRow row;
            const auto policy = freeze_policy_from_json(run.at("policy"));
            row.mode = policy.mode;
            row.adapters.ba = policy.of(AdapterKind::ba) != Update::absent;
            row.adapters.lora = policy.of(AdapterKind::lora) != Update::absent;
            row.adapters.ws = policy.of(AdapterKind::ws) != Update::absent;
            row.adapters.wg = policy.of(AdapterKind::wg) != Update::absent;
            row.upstream_params = run.at("upstream_params").get<long long>();
            for (const auto& f : run.at("folds")) {
                EvalResult e;
                e.acc = f.at("acc").get<double>();
                e.ccc_v = f.at("ccc_v").get<double>();
                e.ccc_a = f.at("ccc_a").get<double>();
                e.ccc_d = f.at("ccc_d").get<double>();
                e.n = f.at("n").get<long>();
                row.folds.push_back(e);
            }
            row.mean = cv_mean(row.folds);
            rows.push_back(std::move(row));
        }
        show(results_table(rows, task));
    } else if (format == kCheckpointFormat) {
        const auto ck = checkpoint_from_json(j);
        Table t;
        t.header = {"block", "group", "shape", "trainable"};
        const auto mask = build_mask(ck.policy, ck.model);
        visit_params(ck.model, [&](const std::string& name, ParamGroup g, const Matrix& m) {
            const bool on = std::find(mask.begin(), mask.end(), name) != mask.end();
            t.add({Cell(name), Cell(to_string(g)), Cell(shape_str(m)), Cell(on ? "yes" : "no")});
        });
        show(t);
        if (!csv_only) {
            std::cout << "policy " << policy_label(ck.policy) << ", trainable upstream values "
                      << trainable_upstream(ck.policy, ck.model) << "\n";
        }
    } else {
        throw ParseError(path + ": unrecognised format '" + format + "'");
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Parameter-efficient finetuning laboratory for emotion prediction"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    app.add_option("--config", g.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Seed; overrides every seed in the config");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--fold", g.fold, "Run a single leave-one-session-out fold")->check(CLI::PositiveNumber);
    app.add_option("--jobs", g.jobs, "Parallel folds/seeds")->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen-data", "Write the acted and natural corpora as JSON-Lines");
    std::string domain = "acted";
    auto* tr = app.add_subcommand("train", "Cross-validated training of each configured policy");
    tr->add_option("--corpus", domain, "Corpus to train on")->check(CLI::IsMember({"acted", "natural"}));
    auto* ad = app.add_subcommand("adapt", "Two-stage adaptation with every stage-2 freeze mask");
    bool csv_only = false;
    auto* au = app.add_subcommand("audit-params", "Trainable-parameter audit for both upstream shapes");
    au->add_flag("--csv", csv_only, "Print CSV instead of the table");
    std::string report_path;
    auto* rep = app.add_subcommand("report", "Render a results, adaptation, or checkpoint file");
    rep->add_option("path", report_path, "JSON file written by train, adapt, or a checkpoint")->required();
    rep->add_flag("--csv", csv_only, "Print CSV instead of the table");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*au) return cmd_audit(g, csv_only);
        if (*rep) return cmd_report(report_path, csv_only);
        const ExperimentConfig cfg = resolve(g);
        if (*gen) return cmd_gen_data(cfg);
        if (*tr) return cmd_train(cfg, domain);
        if (*ad) return cmd_adapt(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

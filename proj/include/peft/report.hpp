#pragma once

// Parameter audit and table rendering. Every table is kept as cells carrying
// both a display string and a CSV string, so the human-readable and CSV
// outputs come from the same values.

#include "peft/adaptation.hpp"
#include "peft/adapters.hpp"
#include "peft/arch.hpp"
#include "peft/checkpoint.hpp"
#include "peft/metrics.hpp"
#include "peft/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace peft {

// ---------------------------------------------------------------------------
// Tables

struct Cell {
    std::string text;
    std::string csv;

    Cell() = default;
    Cell(std::string t) : text(t), csv(std::move(t)) {}
    Cell(const char* t) : Cell(std::string(t)) {}
    Cell(std::string t, std::string c) : text(std::move(t)), csv(std::move(c)) {}
};

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<Cell>> rows;
    std::vector<std::size_t> rules;  // draw a rule before these row indices

    void add(std::vector<Cell> row) {
        if (row.size() != header.size()) throw std::logic_error("table: row width does not match header");
        rows.push_back(std::move(row));
    }
    void rule() { rules.push_back(rows.size()); }
};

namespace detail {

inline std::size_t display_width(const std::string& s) {
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;  // count UTF-8 lead bytes
    return n;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

} // namespace detail

inline void render_text(std::ostream& os, const Table& t) {
    std::vector<std::size_t> w(t.header.size());
    for (std::size_t c = 0; c < w.size(); ++c) w[c] = detail::display_width(t.header[c]);
    for (const auto& r : t.rows) {
        for (std::size_t c = 0; c < w.size(); ++c) w[c] = std::max(w[c], detail::display_width(r[c].text));
    }
    std::size_t total = 0;
    for (auto x : w) total += x + 2;
    const std::string line(total > 2 ? total - 2 : 0, '-');
    auto emit = [&](auto get) {
        for (std::size_t c = 0; c < w.size(); ++c) {
            const std::string& s = get(c);
            os << s << std::string(w[c] - detail::display_width(s), ' ');
            if (c + 1 < w.size()) os << "  ";
        }
        os << '\n';
    };
    emit([&](std::size_t c) -> const std::string& { return t.header[c]; });
    os << line << '\n';
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        if (i > 0 && std::find(t.rules.begin(), t.rules.end(), i) != t.rules.end()) os << line << '\n';
        emit([&](std::size_t c) -> const std::string& { return t.rows[i][c].text; });
    }
}

inline void render_csv(std::ostream& os, const Table& t) {
    for (std::size_t c = 0; c < t.header.size(); ++c) os << (c ? "," : "") << detail::csv_escape(t.header[c]);
    os << '\n';
    for (const auto& r : t.rows) {
        for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "," : "") << detail::csv_escape(r[c].csv);
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Number formatting

inline std::string fixed(double v, int decimals) {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(decimals);
    os << v;
    return os.str();
}

/// Count at two significant figures with a K/M suffix: 1189632 -> "1.2 M", 24576 -> "25 K", 12 -> "12".
inline std::string format_count(long long n) {
    if (n < 1000) return std::to_string(n);
    const double v = static_cast<double>(n);
    const int digits = static_cast<int>(std::floor(std::log10(v))) + 1;
    const double q = std::pow(10.0, digits - 2);
    double r = std::round(v / q) * q;
    const char* suffix = r >= 1e6 ? " M" : " K";
    r /= r >= 1e6 ? 1e6 : 1e3;
    const int decimals = r < 10.0 ? 1 : 0;
    return fixed(r, decimals) + suffix;
}

/// A count as printed in a table: mantissa, decimal places shown, and a K/M scale.
struct PrintedCount {
    double mantissa = 0.0;
    int decimals = 0;
    double scale = 1.0;

    static PrintedCount parse(const std::string& s) {
        PrintedCount p;
        std::size_t pos = 0;
        p.mantissa = std::stod(s, &pos);
        const auto dot = s.find('.');
        if (dot != std::string::npos && dot < pos) p.decimals = static_cast<int>(pos - dot - 1);
        const auto rest = s.substr(pos);
        if (rest.find('M') != std::string::npos) p.scale = 1e6;
        else if (rest.find('K') != std::string::npos) p.scale = 1e3;
        return p;
    }

    /// True when `n`, rounded to the precision this figure was printed at, equals it.
    bool matches(long long n) const {
        const double f = std::pow(10.0, decimals);
        return std::llround(static_cast<double>(n) / scale * f) == std::llround(mantissa * f);
    }
};

// ---------------------------------------------------------------------------
// Parameter audit

/// Transformer-block parameters of the base encoder (the set FT updates). Frontend excluded.
inline long long block_param_count(const ArchShape& a) {
    const long long d = a.d_model;
    const long long f = a.d_ff;
    const long long attn = 4 * (d * d + d);
    const long long ff = f * d + f + d * f + d;
    const long long ln = 4 * d;
    return static_cast<long long>(a.layers) * (attn + ff + ln);
}

enum class AuditKind { adaptors, full_finetune, frozen };

struct AuditSpec {
    std::string label;
    AuditKind kind = AuditKind::adaptors;
    AdapterConfig cfg;
    std::vector<std::string> reference;  // one printed figure per preset
};

struct AuditCell {
    std::string preset;
    long long count = 0;
    long long instantiated = -1;  // count read off allocated blocks, -1 when not instantiated
    std::string reference;
    std::optional<bool> pass;     // empty for informational cells
};

struct AuditRow {
    std::string label;
    AuditKind kind = AuditKind::adaptors;
    AdapterConfig cfg;
    std::vector<AuditCell> cells;
};

struct AuditOptions {
    int bottleneck = 64;
    int rank = 24;
    /// Allocate each AdapterSet and count its blocks in addition to the closed form.
    bool instantiate = true;
};

inline std::vector<AuditSpec> reference_rows(int m, int r) {
    auto cfg = [&](bool ba, bool lora, bool ws, bool wg) { return AdapterConfig{ba, lora, ws, wg, m, r, 0.0}; };
    return {
        {"BA", AuditKind::adaptors, cfg(true, false, false, false), {"1.2 M", "3.2 M"}},
        {"LoRA", AuditKind::adaptors, cfg(false, true, false, false), {"1.3 M", "3.5 M"}},
        {"WS", AuditKind::adaptors, cfg(false, false, true, false), {"12", "24"}},
        {"WG", AuditKind::adaptors, cfg(false, false, false, true), {"9 K", "25 K"}},
        {"BA+LoRA", AuditKind::adaptors, cfg(true, true, false, false), {"2.5 M", "6.7 M"}},
        {"BA+LoRA+WS", AuditKind::adaptors, cfg(true, true, true, false), {"2.5 M", "6.7 M"}},
        {"BA+LoRA+WS+WG", AuditKind::adaptors, cfg(true, true, true, true), {"2.5 M", "6.7 M"}},
        {"FT", AuditKind::full_finetune, AdapterConfig::none(), {"90 M", "311 M"}},
        {"PT", AuditKind::frozen, AdapterConfig::none(), {"0", "0"}},
    };
}

inline std::vector<ArchShape> audit_presets() { return {presets::wav2vec2_base(), presets::hubert_large()}; }

/// Counts every reference configuration over both upstream shapes and compares with the printed figures.
/// FT cells are informational: the stand-in frontend differs from the real convolutional extractor.
inline std::vector<AuditRow> audit_params(const AuditOptions& opt = {}) {
    const auto archs = audit_presets();
    // One allocation of every kind per shape; each row sums the kinds it enables.
    std::vector<ParamCounts> allocated;
    if (opt.instantiate) {
        for (const auto& arch : archs) {
            const AdapterConfig all = AdapterConfig::all(opt.bottleneck, opt.rank);
            allocated.push_back(count_params(AdapterSet::create(arch, all, 0), arch));
        }
    }
    std::vector<AuditRow> out;
    for (const auto& spec : reference_rows(opt.bottleneck, opt.rank)) {
        AuditRow row{spec.label, spec.kind, spec.cfg, {}};
        for (std::size_t i = 0; i < archs.size(); ++i) {
            const auto& arch = archs[i];
            AuditCell cell;
            cell.preset = arch.name;
            cell.reference = spec.reference[i];
            switch (spec.kind) {
            case AuditKind::adaptors:
                cell.count = count_formula(arch, spec.cfg).total();
                if (opt.instantiate) {
                    cell.instantiated = 0;
                    for (auto k : kAdapterKinds) {
                        if (spec.cfg.enabled(k)) cell.instantiated += allocated[i].of(k);
                    }
                }
                cell.pass = PrintedCount::parse(cell.reference).matches(cell.count) &&
                            (cell.instantiated < 0 || cell.instantiated == cell.count);
                break;
            case AuditKind::full_finetune:
                cell.count = block_param_count(arch);
                break;
            case AuditKind::frozen:
                cell.count = 0;
                cell.pass = PrintedCount::parse(cell.reference).matches(0);
                break;
            }
            row.cells.push_back(std::move(cell));
        }
        out.push_back(std::move(row));
    }
    return out;
}

inline bool audit_passed(const std::vector<AuditRow>& rows) {
    for (const auto& r : rows) {
        for (const auto& c : r.cells) {
            if (c.pass && !*c.pass) return false;
        }
    }
    return true;
}

inline const char* tick(bool on) { return on ? "✓" : ""; }

inline Table audit_table(const std::vector<AuditRow>& rows) {
    Table t;
    t.header = {"BA", "LoRA", "WS", "WG"};
    const auto& first = rows.front().cells;
    for (const auto& c : first) {
        t.header.push_back(c.preset + " # param");
        t.header.push_back(c.preset + " reference");
        t.header.push_back(c.preset + " verdict");
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (i > 0 && r.kind != rows[i - 1].kind) t.rule();
        if (i == 4) t.rule();
        std::vector<Cell> line;
        if (r.kind == AuditKind::adaptors) {
            line = {Cell(tick(r.cfg.ba), r.cfg.ba ? "1" : "0"), Cell(tick(r.cfg.lora), r.cfg.lora ? "1" : "0"),
                    Cell(tick(r.cfg.ws), r.cfg.ws ? "1" : "0"), Cell(tick(r.cfg.wg), r.cfg.wg ? "1" : "0")};
        } else {
            line = {Cell(r.label, r.label), Cell("", ""), Cell("", ""), Cell("", "")};
        }
        for (const auto& c : r.cells) {
            line.emplace_back(format_count(c.count), std::to_string(c.count));
            line.emplace_back(c.reference);
            if (c.pass) line.emplace_back(*c.pass ? "PASS" : "FAIL");
            else line.emplace_back("info", "info");
        }
        t.add(std::move(line));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Training results (one row per configuration)

struct ResultRow {
    TrainMode mode = TrainMode::PEFT;
    AdapterConfig adapters;
    long long upstream_params = 0;  // trainable values upstream of the head
    std::vector<EvalResult> folds;
    EvalResult mean;
};

inline Table results_table(const std::vector<ResultRow>& rows, Task task) {
    Table t;
    t.header = {"BA", "LoRA", "WS", "WG", "# param"};
    if (task == Task::classification) t.header.push_back("Acc(%)");
    else t.header.insert(t.header.end(), {"CCC_V", "CCC_A", "CCC_D"});
    t.header.push_back("folds");
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (i > 0 && r.mode != rows[i - 1].mode) t.rule();
        std::vector<Cell> line;
        if (r.mode == TrainMode::PEFT) {
            line = {Cell(tick(r.adapters.ba), r.adapters.ba ? "1" : "0"),
                    Cell(tick(r.adapters.lora), r.adapters.lora ? "1" : "0"),
                    Cell(tick(r.adapters.ws), r.adapters.ws ? "1" : "0"),
                    Cell(tick(r.adapters.wg), r.adapters.wg ? "1" : "0")};
        } else {
            const std::string label = to_string(r.mode);
            line = {Cell(label), Cell(""), Cell(""), Cell("")};
        }
        line.emplace_back(format_count(r.upstream_params), std::to_string(r.upstream_params));
        if (task == Task::classification) {
            line.emplace_back(fixed(100.0 * r.mean.acc, 2), fixed(r.mean.acc, 6));
        } else {
            for (double v : {r.mean.ccc_v, r.mean.ccc_a, r.mean.ccc_d}) line.emplace_back(fixed(v, 3), fixed(v, 6));
        }
        line.emplace_back(std::to_string(r.folds.size()));
        t.add(std::move(line));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Adaptation reports

inline double median(std::vector<double> v) {
    if (v.empty()) throw InputError("median: empty input");
    std::sort(v.begin(), v.end());
    const auto n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Row-wise median over seeds. Every result must have the same row layout.
inline std::vector<StageRow> median_rows(const std::vector<FreezeMatrixResult>& runs) {
    if (runs.empty()) throw InputError("median_rows: no runs");
    std::vector<StageRow> out = runs.front().rows;
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::vector<double> s, t;
        for (const auto& r : runs) {
            s.push_back(r.rows.at(i).source_metric);
            t.push_back(r.rows.at(i).target_metric);
        }
        out[i].source_metric = median(s);
        out[i].target_metric = median(t);
        out[i].stage1_checksum = 0;
    }
    return out;
}

/// Table shaped like the stage matrix: Stage, Source, Target, BA/LoRA/WS/WG (✓ updated, ∗ frozen),
/// then the score on each domain. Zero-shot cells are wrapped in brackets; the CSV adds a flag column.
inline Table stage_table(const std::vector<StageRow>& rows, const std::string& source_id, const std::string& target_id,
                         Task task) {
    Table t;
    t.header = {"Stage", "Source", "Target", "BA", "LoRA", "WS", "WG", source_id, target_id, "zero-shot"};
    auto metric = [&](double v, bool zero_shot) {
        const std::string s = task == Task::classification ? fixed(100.0 * v, 2) : fixed(v, 3);
        return Cell(zero_shot ? "[" + s + "]" : s, fixed(v, 6));
    };
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        if (i > 0 && r.stage != rows[i - 1].stage) t.rule();
        std::vector<Cell> line{Cell(std::to_string(r.stage)), Cell(r.source), Cell(r.target)};
        for (bool u : r.updated) line.emplace_back(u ? "✓" : "∗", u ? "updated" : "frozen");
        line.push_back(metric(r.source_metric, r.source_zero_shot));
        line.push_back(metric(r.target_metric, r.target_zero_shot));
        const std::string zs = r.source_zero_shot ? source_id : r.target_zero_shot ? target_id : "";
        line.emplace_back(zs, zs);
        t.add(std::move(line));
    }
    return t;
}

inline Json to_json(const StageRow& r) {
    return Json{{"stage", r.stage},
                {"source", r.source},
                {"target", r.target},
                {"ba", to_string(r.updated[0] ? Update::updated : Update::frozen)},
                {"lora", to_string(r.updated[1] ? Update::updated : Update::frozen)},
                {"ws", to_string(r.updated[2] ? Update::updated : Update::frozen)},
                {"wg", to_string(r.updated[3] ? Update::updated : Update::frozen)},
                {"source_metric", r.source_metric},
                {"target_metric", r.target_metric},
                {"source_zero_shot", r.source_zero_shot},
                {"target_zero_shot", r.target_zero_shot},
                {"stage1_checksum", r.stage1_checksum}};
}

inline Json to_json(const AdaptationReport& r) {
    return Json{{"source", r.source_id},
                {"target", r.target_id},
                {"stage2_freeze", Json{{"ba", r.stage2_freeze.ba}, {"lora", r.stage2_freeze.lora}}},
                {"seed", r.seed},
                {"zero_shot_target", r.zero_shot_target},
                {"stage1_source", r.stage1_source},
                {"stage1_target", r.stage1_target},
                {"stage2_source", r.stage2_source},
                {"stage2_target", r.stage2_target},
                {"forgetting", r.forgetting},
                {"stage1_checksum", r.stage1_checksum},
                {"stage2_checksum", r.stage2_checksum}};
}

inline constexpr const char* kAdaptationFormat = "peft-ser-adaptation";

/// Self-describing adaptation report: settings, every seed's rows and stage-2 reports, and the medians.
inline Json adaptation_json(const AdaptationSetup& setup, const StagePlan& plan, const TrainConfig& cfg,
                            const std::vector<FreezeMatrixResult>& runs) {
    Json j;
    j["format"] = kAdaptationFormat;
    j["version"] = 1;
    j["arch"] = to_json(setup.arch);
    j["bottleneck"] = setup.bottleneck;
    j["rank"] = setup.rank;
    j["fold"] = setup.fold;
    j["source"] = plan.source_id;
    j["target"] = plan.target_id;
    j["train_config"] = to_json(cfg);
    j["pretrain"] = Json{{"epochs", setup.pretrain.epochs},
                         {"lr", setup.pretrain.lr},
                         {"mask_ratio", setup.pretrain.mask_ratio},
                         {"batch_size", setup.pretrain.batch_size}};
    Json seeds = Json::array();
    for (const auto& run : runs) {
        Json s{{"seed", run.seed}};
        s["rows"] = Json::array();
        for (const auto& r : run.rows) s["rows"].push_back(to_json(r));
        s["reports"] = Json::array();
        for (const auto& r : run.reports) s["reports"].push_back(to_json(r));
        seeds.push_back(std::move(s));
    }
    j["seeds"] = std::move(seeds);
    if (!runs.empty()) {
        Json med = Json::array();
        for (const auto& r : median_rows(runs)) med.push_back(to_json(r));
        j["median_rows"] = std::move(med);
    }
    return j;
}

} // namespace peft

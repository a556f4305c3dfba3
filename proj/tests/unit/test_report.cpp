#include "peft/checkpoint.hpp"
#include "peft/config.hpp"
#include "peft/report.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

using namespace peft;

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

} // namespace

TEST(FormatCount, Examples) {
    EXPECT_EQ(format_count(12), "12");
    EXPECT_EQ(format_count(9216), "9.2 K");
    EXPECT_EQ(format_count(24576), "25 K");
    EXPECT_EQ(format_count(1189632), "1.2 M");
    EXPECT_EQ(format_count(6735384), "6.7 M");
    EXPECT_EQ(format_count(0), "0");
}

TEST(PrintedCount, MatchesAtPrintedPrecision) {
    EXPECT_TRUE(PrintedCount::parse("1.2 M").matches(1189632));
    EXPECT_FALSE(PrintedCount::parse("1.3 M").matches(1189632));
    EXPECT_TRUE(PrintedCount::parse("9 K").matches(9216));
    EXPECT_TRUE(PrintedCount::parse("25 K").matches(24576));
    EXPECT_TRUE(PrintedCount::parse("12").matches(12));
    EXPECT_FALSE(PrintedCount::parse("12").matches(13));
}

TEST(Audit, EveryCheckedCellPasses) {
    const auto rows = audit_params();
    ASSERT_EQ(rows.size(), 9u);
    EXPECT_TRUE(audit_passed(rows));
    for (const auto& r : rows) {
        for (const auto& c : r.cells) {
            if (r.kind == AuditKind::adaptors) EXPECT_EQ(c.instantiated, c.count) << r.label << " " << c.preset;
        }
    }
    EXPECT_EQ(rows[6].cells[1].count, 6735384);
    EXPECT_FALSE(rows[7].cells[0].pass.has_value());
}

TEST(Audit, WrongRankFails) {
    AuditOptions opt;
    opt.rank = 8;
    EXPECT_FALSE(audit_passed(audit_params(opt)));
}

TEST(Table, TextAndCsvCarrySameValues) {
    const auto rows = audit_params();
    const Table t = audit_table(rows);
    std::ostringstream text, csv;
    render_text(text, t);
    render_csv(csv, t);
    std::istringstream lines(csv.str());
    std::string line;
    std::getline(lines, line);
    EXPECT_EQ(split_csv_line(line), t.header);
    std::size_t n = 0;
    while (std::getline(lines, line)) {
        const auto cells = split_csv_line(line);
        ASSERT_EQ(cells.size(), t.header.size());
        for (std::size_t k = 0; k < cells.size(); ++k) EXPECT_EQ(cells[k], t.rows[n][k].csv);
        ++n;
    }
    EXPECT_EQ(n, t.rows.size());
    for (const auto& r : t.rows) {
        for (const auto& c : r) EXPECT_NE(text.str().find(c.text), std::string::npos) << c.text;
    }
    EXPECT_EQ(t.rows[0][4].csv, "1189632");
}

TEST(Table, CsvEscaping) {
    Table t;
    t.header = {"a", "b"};
    t.add({Cell("x,y"), Cell("say \"hi\"")});
    std::ostringstream os;
    render_csv(os, t);
    EXPECT_EQ(os.str(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n");
    EXPECT_THROW(t.add({Cell("only one")}), std::logic_error);
}

TEST(Median, OddAndEven) {
    EXPECT_EQ(median({3, 1, 2}), 2.0);
    EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
    EXPECT_THROW(median({}), InputError);
}

TEST(Config, DefaultsAndOverrides) {
    const auto c = parse_config(nlohmann::json::object());
    EXPECT_EQ(c.arch.name, "toy");
    EXPECT_EQ(c.policies.size(), 1u);
    EXPECT_EQ(c.plan.seeds, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
    const auto j = nlohmann::json::parse(R"({"seed": 3, "train": {"epochs": 2, "seed": 9},
        "policies": ["PT", "FT", {"mode": "PEFT", "ba": "frozen", "lora": "updated", "ws": "absent", "wg": "absent"}]})");
    const auto d = parse_config(j);
    EXPECT_EQ(d.train.seed, 9u);
    EXPECT_EQ(d.acted.seed, 3u);
    ASSERT_EQ(d.policies.size(), 3u);
    EXPECT_EQ(d.policies[2].of(AdapterKind::ba), Update::frozen);
    EXPECT_EQ(d.train_for(d.policies[1]).lr, 5e-5);
    const auto e = parse_config(j, 7);
    EXPECT_EQ(e.train.seed, 7u);
    EXPECT_EQ(e.acted.seed, 7u);
    EXPECT_EQ(e.plan.seeds.front(), 7u);
}

TEST(Config, RejectsUnknownAndInvalid) {
    using nlohmann::json;
    EXPECT_THROW(parse_config(json::parse(R"({"sede": 1})")), ConfigError);
    EXPECT_THROW(parse_config(json::parse(R"({"train": {"epoch": 1}})")), ConfigError);
    EXPECT_THROW(parse_config(json::parse(R"({"train": {"lr": -1}})")), ConfigError);
    EXPECT_THROW(parse_config(json::parse(R"({"train": {"epochs": "ten"}})")), ConfigError);
    EXPECT_THROW(parse_config(json::parse(R"({"arch": "bert"})")), ConfigError);
    EXPECT_THROW(parse_config(json::parse(R"({"policies": ["XT"]})")), ConfigError);
    EXPECT_THROW(parse_config(json::parse(R"({"adapters": {"bottleneck": 40}})")), ConfigError);
    EXPECT_THROW(parse_config(json::parse(R"({"plan": {"source": "acted", "target": "acted"}})")), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
    Model m = Model::create(presets::toy(), AdapterConfig::all(16, 4), Task::regression, 5);
    m.adapters.ws.w(0, 1) = 0.1 + 0.2;
    m.head.b2(0, 0) = -1.0 / 3.0;
    TrainConfig cfg;
    cfg.task = Task::regression;
    cfg.epochs = 7;
    cfg.seed = 11;
    const auto policy = FreezePolicy::peft(Update::frozen, Update::updated, Update::updated, Update::frozen);
    const auto path = (std::filesystem::temp_directory_path() / "peft_ckpt_test.json").string();
    save_checkpoint(path, m, cfg, policy);
    const auto ck = load_checkpoint(path);
    std::filesystem::remove(path);
    EXPECT_EQ(ck.policy, policy);
    EXPECT_EQ(ck.config.epochs, 7);
    EXPECT_EQ(ck.config.seed, 11u);
    EXPECT_EQ(ck.model.head.task, Task::regression);
    std::vector<Matrix> a, b;
    visit_params(m, [&](const std::string&, ParamGroup, const Matrix& p) { a.push_back(p); });
    visit_params(ck.model, [&](const std::string&, ParamGroup, const Matrix& p) { b.push_back(p); });
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_identical(a[i], b[i])) << i;
}

TEST(Checkpoint, CorruptDocumentsAreParseErrors) {
    const Model m = Model::create(presets::toy(), AdapterConfig::none(), Task::classification, 0);
    const auto good = checkpoint_json(m, TrainConfig{}, FreezePolicy::pt());
    EXPECT_NO_THROW(checkpoint_from_json(good));
    auto wrong_format = good;
    wrong_format["format"] = "other";
    EXPECT_THROW(checkpoint_from_json(wrong_format), ParseError);
    auto missing = good;
    missing["blocks"].erase(0);
    EXPECT_THROW(checkpoint_from_json(missing), ParseError);
    auto bad_shape = good;
    bad_shape["blocks"][0]["rows"] = 3;
    EXPECT_THROW(checkpoint_from_json(bad_shape), ParseError);
    auto extra = good;
    extra["blocks"].push_back(good["blocks"][0]);
    extra["blocks"].back()["name"] = "encoder.unknown";
    EXPECT_THROW(checkpoint_from_json(extra), ParseError);
    auto bad_arch = good;
    bad_arch["arch"]["heads"] = 5;
    EXPECT_THROW(checkpoint_from_json(bad_arch), ParseError);
}

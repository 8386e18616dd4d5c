#include <gtest/gtest.h>

#include <sstream>

#include "support.hpp"

using namespace fedp3e;
namespace ts = testing_support;

namespace {

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

std::string small_config_text(const std::filesystem::path& out) {
    return R"({
  "seed": 3,
  "output_dir": ")" + out.string() + R"(",
  "data": {"source": "synthetic",
           "synthetic": {"n_classes": 3, "dims": 5, "clusters_per_class": 2,
                         "cluster_spread": 0.05, "samples_per_class": 80, "seed": 2}},
  "partition": {"scenario": "severe", "clients": 3, "scaling": "global"},
  "federation": {"rounds": 3, "epochs": 1, "learning_rate": 0.01, "trigger_round": 2,
                 "model": {"hidden": [{"units": 8, "l2": 0.001}], "dropout": 0.0}},
  "runs": [{"strategy": "fedavg"}, {"strategy": "fedp3e"}]
})";
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Config, MinimalUsesDefaults) {
    auto spec = parse_config_text(R"({"runs": [{"strategy": "fedavg"}]})");
    EXPECT_EQ(spec.runs.size(), 1u);
    EXPECT_EQ(spec.runs[0].name, "fedavg");
    EXPECT_EQ(spec.clients, 3u);
    EXPECT_EQ(spec.base.rounds, 20u);
    EXPECT_EQ(spec.base.trigger_round, 6u);
    EXPECT_DOUBLE_EQ(spec.base.threshold, 0.97);
    EXPECT_DOUBLE_EQ(spec.base.noise_sigma, 0.01);
    EXPECT_EQ(spec.base.train.epochs, 15u);
    EXPECT_EQ(spec.base.train.batch_size, 32u);
    EXPECT_DOUBLE_EQ(spec.base.train.adam.learning_rate, 1e-4);
    EXPECT_EQ(spec.source, DataSource::synthetic);
}

TEST(Config, ThresholdOutOfRange) {
    auto msg = error_of([] {
        parse_config_text(R"({"federation": {"threshold": 1.5}, "runs": [{"strategy": "fedavg"}]})");
    });
    EXPECT_NE(msg.find("threshold must be in (0,1]"), std::string::npos) << msg;
}

TEST(Config, UnknownKeyNamed) {
    auto msg = error_of([] {
        parse_config_text(R"({"federation": {"round": 3}, "runs": [{"strategy": "fedavg"}]})");
    });
    EXPECT_NE(msg.find("unknown key 'federation.round'"), std::string::npos) << msg;
}

TEST(Config, WrongType) {
    auto msg = error_of([] { parse_config_text(R"({"seed": "x", "runs": [{"strategy": "fedavg"}]})"); });
    EXPECT_NE(msg.find("wrong type"), std::string::npos) << msg;
}

TEST(Config, ParseErrorReportsLine) {
    auto msg = error_of([] { parse_config_text("{\n  \"seed\": 1,\n  \"runs\": [,]\n}"); });
    EXPECT_NE(msg.find("config parse error at line 3"), std::string::npos) << msg;
}

TEST(Config, FedProxNeedsMu) {
    EXPECT_THROW(parse_config_text(R"({"runs": [{"strategy": "fedprox"}]})"), Error);
    EXPECT_THROW(parse_config_text(R"({"runs": [{"strategy": "fedavg"}, {"strategy": "fedavg"}]})"), Error);
}

TEST(Config, SevereFixtureRoundTrips) {
    auto spec = parse_config(std::filesystem::path(FEDP3E_SOURCE_DIR) / "configs" / "severe_nonidd.json");
    ASSERT_EQ(spec.runs.size(), 3u);
    EXPECT_EQ(spec.scenario, Scenario::severe_non_iid);
    EXPECT_EQ(spec.runs[1].strategy, Strategy::fedprox);
    EXPECT_DOUBLE_EQ(spec.runs[1].prox_mu, 0.1);
    auto again = parse_config_json(nlohmann::json::parse(to_json(spec).dump()));
    EXPECT_TRUE(again == spec);
}

TEST(Config, AllFixturesParse) {
    for (const char* name : {"iid.json", "light_nonidd.json", "severe_nonidd.json"}) {
        EXPECT_NO_THROW(parse_config(std::filesystem::path(FEDP3E_SOURCE_DIR) / "configs" / name)) << name;
    }
}

TEST(Config, MissingFile) { EXPECT_THROW(parse_config("/nonexistent/cfg.json"), Error); }

TEST(SelectRuns, FiltersByNameOrStrategy) {
    auto spec = parse_config(std::filesystem::path(FEDP3E_SOURCE_DIR) / "configs" / "severe_nonidd.json");
    auto a = spec;
    select_runs(a, {"fedp3e", "fedavg"});
    ASSERT_EQ(a.runs.size(), 2u);
    EXPECT_EQ(a.runs[0].strategy, Strategy::fedp3e);
    auto b = spec;
    EXPECT_THROW(select_runs(b, {"bogus"}), Error);
}

TEST(Run, WritesOutputsAndIsReproducible) {
    auto dir = ts::fresh_dir("runner_a");
    auto spec = parse_config_text(small_config_text(dir));
    std::ostringstream log;
    auto outcomes = run(spec, &log);
    ASSERT_EQ(outcomes.size(), 2u);

    const auto csv = ts::read_file(dir / "metrics_fedp3e.csv");
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "round,accuracy,precision,recall,f1,loss,up_floats,down_floats,exchange");
    EXPECT_EQ(line_count(csv), 1u + 3u);
    EXPECT_TRUE(std::filesystem::exists(dir / "metrics_fedavg.csv"));
    EXPECT_EQ(line_count(ts::read_file(dir / "comparison.csv")), 3u);

    auto summary = nlohmann::json::parse(ts::read_file(dir / "summary.json"));
    EXPECT_EQ(summary["runs"]["fedp3e"]["exchange_round"], 2);
    EXPECT_TRUE(summary["runs"]["fedavg"]["exchange_round"].is_null());
    EXPECT_EQ(summary["d_x"], 5);

    auto dir2 = ts::fresh_dir("runner_b");
    auto spec2 = parse_config_text(small_config_text(dir2));
    run(spec2, nullptr);
    for (const char* f : {"metrics_fedavg.csv", "metrics_fedp3e.csv", "comparison.csv"}) {
        EXPECT_EQ(ts::read_file(dir / f), ts::read_file(dir2 / f)) << f;
    }
}

TEST(Run, CsvSourceFromFixture) {
    auto dir = ts::fresh_dir("runner_csv");
    const std::string text = R"({
  "output_dir": ")" + dir.string() + R"(",
  "data": {"source": "csv_dir", "path": ")" + (std::filesystem::path(FEDP3E_TEST_DATA) / "csv3").string() +
                             R"(", "feature_count": 5},
  "partition": {"scenario": "iid", "clients": 1, "train_fraction": 0.5},
  "federation": {"rounds": 1, "epochs": 1, "trigger_round": 1,
                 "model": {"hidden": [{"units": 4, "l2": 0.0}], "dropout": 0.0}},
  "runs": [{"strategy": "fedavg"}]
})";
    auto outcomes = run(parse_config_text(text), nullptr);
    ASSERT_EQ(outcomes.size(), 1u);
    EXPECT_EQ(outcomes[0].result.d_x, 5u);
}

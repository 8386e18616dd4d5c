#include <gtest/gtest.h>

#include <cstdlib>

#include "support.hpp"

using namespace fedp3e;
namespace ts = testing_support;

namespace {

std::vector<SiloData> small_silos(Scenario scenario = Scenario::severe_non_iid, std::uint64_t data_seed = 3) {
    auto ds = synthesize({3, 6, 2, 0.05, 150, data_seed});
    PreparationOptions prep;
    prep.scaling = ScalingMode::global;
    return prepare_silos(ds, make_plan(scenario, ds, 3), prep, 11);
}

FederationConfig small_config(Strategy s) {
    FederationConfig cfg;
    cfg.strategy = s;
    cfg.rounds = 4;
    cfg.trigger_round = 2;
    cfg.model = {0, {{16, 0.001}}, 0.0, 0};
    cfg.train.epochs = 2;
    cfg.train.adam.learning_rate = 1e-2;
    cfg.seed = 5;
    if (s == Strategy::fedprox) cfg.prox_mu = 0.1;
    return cfg;
}

ModelParams filled(const ModelSpec& spec, double value) {
    auto p = build_model(spec, 0);
    p.for_each_tensor([&](const TensorView& t) { std::fill(t.data.begin(), t.data.end(), value); });
    return p;
}

std::vector<double> all_values(const ModelParams& p) {
    std::vector<double> v;
    p.for_each_tensor([&](const ConstTensorView& t) { v.insert(v.end(), t.data.begin(), t.data.end()); });
    return v;
}

RoundMetrics with_accuracy(std::size_t round, double acc) {
    RoundMetrics r;
    r.round = round;
    r.global.accuracy = acc;
    return r;
}

void expect_same_run(const RunResult& a, const RunResult& b) {
    ASSERT_EQ(a.rounds.size(), b.rounds.size());
    for (std::size_t i = 0; i < a.rounds.size(); ++i) {
        EXPECT_EQ(a.rounds[i].global, b.rounds[i].global) << "round " << i + 1;
        EXPECT_EQ(a.rounds[i].up_floats, b.rounds[i].up_floats);
        EXPECT_EQ(a.rounds[i].exchange_triggered, b.rounds[i].exchange_triggered);
    }
    EXPECT_EQ(all_values(a.final_model), all_values(b.final_model));
}

const ModelSpec kTiny{4, {{3, 0.0}}, 0.0, 2};

}  // namespace

TEST(FedAvgAggregate, SingleClientIsIdentity) {
    auto p = build_model(kTiny, 9);
    std::vector<ClientUpdate> u{{p, 17}};
    EXPECT_EQ(all_values(fedavg_aggregate(u)), all_values(p));
}

TEST(FedAvgAggregate, EqualWeightsGiveMidpoint) {
    std::vector<ClientUpdate> u{{filled(kTiny, 1.0), 10}, {filled(kTiny, 3.0), 10}};
    for (double v : all_values(fedavg_aggregate(u))) EXPECT_DOUBLE_EQ(v, 2.0);
}

TEST(FedAvgAggregate, SizeWeighting) {
    std::vector<ClientUpdate> u{{filled(kTiny, 0.0), 1}, {filled(kTiny, 4.0), 3}};
    for (double v : all_values(fedavg_aggregate(u))) EXPECT_DOUBLE_EQ(v, 3.0);
}

TEST(FedAvgAggregate, MatchesTwoLoopOracle) {
    std::vector<ClientUpdate> u;
    const std::vector<std::size_t> n{120, 7, 300, 45};
    for (std::size_t k = 0; k < n.size(); ++k) u.push_back({build_model(kTiny, 100 + k), n[k]});
    const double total = 472.0;
    std::vector<std::vector<double>> flat;
    for (const auto& x : u) flat.push_back(all_values(x.params));
    std::vector<double> expected(flat[0].size(), 0.0);
    for (std::size_t j = 0; j < expected.size(); ++j)
        for (std::size_t k = 0; k < u.size(); ++k) expected[j] += static_cast<double>(n[k]) / total * flat[k][j];
    EXPECT_EQ(all_values(fedavg_aggregate(u)), expected);
}

TEST(FedAvgAggregate, Errors) {
    std::vector<ClientUpdate> none;
    EXPECT_THROW(fedavg_aggregate(none), Error);
    std::vector<ClientUpdate> mismatch{{build_model(kTiny, 0), 1}, {build_model({4, {{5, 0.0}}, 0.0, 2}, 0), 1}};
    EXPECT_THROW(fedavg_aggregate(mismatch), Error);
    std::vector<ClientUpdate> zero{{build_model(kTiny, 0), 0}, {build_model(kTiny, 1), 0}};
    EXPECT_THROW(fedavg_aggregate(zero), Error);
}

TEST(Trigger, BelowThresholdFires) {
    FederationConfig cfg;
    cfg.strategy = Strategy::fedp3e;
    std::vector<RoundMetrics> h;
    for (std::size_t r = 1; r <= 5; ++r) h.push_back(with_accuracy(r, 0.96));
    EXPECT_TRUE(should_trigger_exchange(h, cfg, 6));
    EXPECT_FALSE(should_trigger_exchange(h, cfg, 7));
}

TEST(Trigger, AboveThresholdDoesNot) {
    FederationConfig cfg;
    cfg.strategy = Strategy::fedp3e;
    std::vector<RoundMetrics> h;
    for (std::size_t r = 1; r <= 5; ++r) h.push_back(with_accuracy(r, 0.98));
    EXPECT_FALSE(should_trigger_exchange(h, cfg, 6));
}

TEST(Trigger, UsesMeanOfWindow) {
    FederationConfig cfg;
    cfg.strategy = Strategy::fedp3e;
    std::vector<RoundMetrics> h{with_accuracy(1, 0.90), with_accuracy(2, 1.0), with_accuracy(3, 1.0),
                                with_accuracy(4, 1.0), with_accuracy(5, 1.0)};
    EXPECT_FALSE(should_trigger_exchange(h, cfg, 6));  // mean 0.98
    h[0].global.accuracy = 0.80;
    EXPECT_TRUE(should_trigger_exchange(h, cfg, 6));  // mean 0.96
}

TEST(Trigger, OtherStrategiesNeverFire) {
    FederationConfig cfg;
    std::vector<RoundMetrics> h(5, with_accuracy(1, 0.1));
    EXPECT_FALSE(should_trigger_exchange(h, cfg, 6));
    cfg.strategy = Strategy::fedprox;
    EXPECT_FALSE(should_trigger_exchange(h, cfg, 6));
}

TEST(Trigger, FirstRoundTriggerHasEmptyWindow) {
    FederationConfig cfg;
    cfg.strategy = Strategy::fedp3e;
    cfg.trigger_round = 1;
    EXPECT_TRUE(should_trigger_exchange({}, cfg, 1));
}

TEST(FederationConfig, Validation) {
    FederationConfig cfg;
    cfg.threshold = 1.5;
    try {
        cfg.validate();
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("threshold must be in (0,1]"), std::string::npos);
    }
    cfg = {};
    cfg.strategy = Strategy::fedprox;
    EXPECT_THROW(cfg.validate(), Error);
    cfg = {};
    cfg.trigger_round = 21;
    EXPECT_THROW(cfg.validate(), Error);
}

TEST(RunFederation, FedAvgTrafficIsModelOnly) {
    auto silos = small_silos();
    auto run = run_federation(small_config(Strategy::fedavg), silos);
    ASSERT_EQ(run.rounds.size(), 4u);
    EXPECT_EQ(run.d_w, run.final_model.trainable_count());
    for (const auto& r : run.rounds) {
        EXPECT_EQ(r.up_floats, 3 * run.d_w);
        EXPECT_EQ(r.down_floats, 3 * run.d_w);
        EXPECT_FALSE(r.exchange_triggered);
    }
    EXPECT_FALSE(run.exchange_round().has_value());
}

TEST(RunFederation, FedP3EExchangesExactlyOnce) {
    auto silos = small_silos();
    auto run = run_federation(small_config(Strategy::fedp3e), silos);
    ASSERT_EQ(run.exchange_round(), std::optional<std::size_t>(2));
    std::size_t triggered = 0;
    for (const auto& r : run.rounds) triggered += r.exchange_triggered ? 1 : 0;
    EXPECT_EQ(triggered, 1u);
    const auto& r2 = run.rounds[1];
    ASSERT_TRUE(r2.exchange.has_value());
    std::size_t uploads = 0;
    for (auto f : r2.exchange->upload_vector_floats) uploads += f;
    EXPECT_EQ(r2.up_floats, 3 * run.d_w + uploads);
    EXPECT_EQ(r2.down_floats, 3 * run.d_w + 3 * r2.exchange->download_vector_floats);
    EXPECT_EQ(r2.exchange->global_per_class.size(), 3u);
    for (auto rows : r2.exchange->synthetic_rows) EXPECT_GT(rows, 0u);
    EXPECT_EQ(run.rounds[0].up_floats, 3 * run.d_w);
}

TEST(RunFederation, PayloadCountsAgreeWithAnalyticForm) {
    auto run = run_federation(small_config(Strategy::fedp3e), small_silos());
    auto report = comm_cost_report(run, {run.d_w, run.d_x, 1, 1, 1, 1});
    EXPECT_EQ(report.uploads.size(), 3u);
    ASSERT_TRUE(report.download.has_value());
    EXPECT_TRUE(report.payloads_match);
}

TEST(RunFederation, BitIdenticalReruns) {
    auto silos = small_silos();
    auto cfg = small_config(Strategy::fedp3e);
    expect_same_run(run_federation(cfg, silos), run_federation(cfg, silos));
}

TEST(RunFederation, WorkerCountDoesNotChangeResults) {
    auto silos = small_silos();
    auto cfg = small_config(Strategy::fedp3e);
    const char* old = std::getenv("FEDP3E_MAX_WORKERS");
    const std::string saved = old ? old : "";
    ::setenv("FEDP3E_MAX_WORKERS", "1", 1);
    auto serial = run_federation(cfg, silos);
    ::setenv("FEDP3E_MAX_WORKERS", "3", 1);
    auto threaded = run_federation(cfg, silos);
    if (old) ::setenv("FEDP3E_MAX_WORKERS", saved.c_str(), 1);
    else ::unsetenv("FEDP3E_MAX_WORKERS");
    expect_same_run(serial, threaded);
}

TEST(RunFederation, ClientErrorsCarryRoundAndClient) {
    auto silos = small_silos();
    silos[1].train.labels[0] = 7;
    try {
        run_federation(small_config(Strategy::fedavg), silos);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("round 1, client 1"), std::string::npos) << e.what();
    }
}

TEST(RunFederation, SiloCountMustMatch) {
    auto silos = small_silos();
    silos.pop_back();
    EXPECT_THROW(run_federation(small_config(Strategy::fedavg), silos), Error);
}

TEST(RunFederation, ProximalTermReducesDrift) {
    int violations = 0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        auto silos = small_silos(Scenario::severe_non_iid, 20 + s);
        auto avg = small_config(Strategy::fedavg);
        avg.rounds = 1;
        avg.trigger_round = 1;
        avg.seed = s;
        auto prox = avg;
        prox.strategy = Strategy::fedprox;
        prox.prox_mu = 10.0;
        const double d_avg = run_federation(avg, silos).rounds[0].mean_drift;
        const double d_prox = run_federation(prox, silos).rounds[0].mean_drift;
        if (!(d_prox < d_avg)) ++violations;
    }
    EXPECT_LE(violations, 1);
}

TEST(RunFederation, CheckpointsPerRound) {
    auto dir = ts::fresh_dir("checkpoints");
    auto cfg = small_config(Strategy::fedavg);
    cfg.rounds = 2;
    cfg.trigger_round = 1;
    cfg.checkpoint_dir = dir;
    auto run = run_federation(cfg, small_silos());
    EXPECT_TRUE(std::filesystem::exists(dir / "round_001.fp3e"));
    ASSERT_TRUE(std::filesystem::exists(dir / "round_002.fp3e"));
    EXPECT_EQ(all_values(load_params(dir / "round_002.fp3e")), all_values(run.final_model));
}

TEST(RunFederation, UniformWeightingIsMeanOfClients) {
    auto cfg = small_config(Strategy::fedavg);
    cfg.rounds = 1;
    cfg.trigger_round = 1;
    cfg.weighting = GlobalWeighting::uniform;
    auto run = run_federation(cfg, small_silos());
    const auto& r = run.rounds[0];
    double mean = 0;
    for (const auto& c : r.clients) mean += c.accuracy / 3.0;
    EXPECT_NEAR(r.global.accuracy, mean, 1e-12);
}

TEST(RunFederation, PooledWeightingUsesSummedConfusion) {
    auto cfg = small_config(Strategy::fedavg);
    cfg.rounds = 1;
    cfg.trigger_round = 1;
    auto run = run_federation(cfg, small_silos());
    const auto& r = run.rounds[0];
    std::size_t correct = 0, total = 0;
    for (const auto& c : r.clients) {
        for (std::size_t i = 0; i < c.confusion.size(); ++i) {
            correct += c.confusion[i][i];
            for (auto v : c.confusion[i]) total += v;
        }
    }
    EXPECT_EQ(r.global.n_samples, total);
    EXPECT_DOUBLE_EQ(r.global.accuracy, static_cast<double>(correct) / static_cast<double>(total));
}

TEST(CommCost, ReferenceArithmetic) {
    auto r = comm_cost_report({23683, 115, 3, 4, 3, 3});
    EXPECT_EQ(r.upload_floats, 1035u);
    EXPECT_EQ(r.download_floats, 1380u);
    EXPECT_EQ(r.model_floats, 23683u);
    EXPECT_NEAR(100.0 * r.upload_ratio, 4.37, 0.005);
    EXPECT_NEAR(100.0 * r.download_ratio, 5.83, 0.005);
    EXPECT_NEAR(100.0 * r.total_ratio, 10.197, 0.0005);
    EXPECT_TRUE(r.uploads.empty());
}

TEST(CommCost, ZeroModelRejected) { EXPECT_THROW(comm_cost_report(CommCostInputs{}), Error); }

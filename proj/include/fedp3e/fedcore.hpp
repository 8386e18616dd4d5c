#pragma once

// Federation orchestrator. One simulated server and K clients run FedAvg,
// FedProx or FedP3E for T rounds, and every round records metrics and the
// number of floats moved in each direction.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedp3e/datakit.hpp"
#include "fedp3e/gmmproto.hpp"
#include "fedp3e/neuralnet.hpp"
#include "fedp3e/parallel.hpp"
#include "fedp3e/protoagg.hpp"
#include "fedp3e/random.hpp"
#include "fedp3e/smoteaug.hpp"
#include "fedp3e/types.hpp"

namespace fedp3e {

enum class Strategy { fedavg, fedprox, fedp3e };

inline std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::fedavg: return "fedavg";
        case Strategy::fedprox: return "fedprox";
        case Strategy::fedp3e: return "fedp3e";
    }
    return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
    if (s == "fedavg") return Strategy::fedavg;
    if (s == "fedprox") return Strategy::fedprox;
    if (s == "fedp3e") return Strategy::fedp3e;
    throw Error("unknown strategy '" + s + "' (expected fedavg, fedprox or fedp3e)");
}

/// How per-client test results combine into the global figure.
enum class GlobalWeighting { test_size, uniform };

inline std::string to_string(GlobalWeighting w) { return w == GlobalWeighting::test_size ? "test_size" : "uniform"; }

inline GlobalWeighting weighting_from_string(const std::string& s) {
    if (s == "test_size") return GlobalWeighting::test_size;
    if (s == "uniform") return GlobalWeighting::uniform;
    throw Error("unknown global weighting '" + s + "' (expected test_size or uniform)");
}

struct FederationConfig {
    Strategy strategy = Strategy::fedavg;
    std::size_t clients = 3;
    std::size_t rounds = 20;
    double threshold = 0.97;
    std::size_t trigger_round = 6;
    double noise_sigma = 0.01;
    double prox_mu = 0.0;
    // input_dim / output_classes of 0 are taken from the data.
    ModelSpec model = ModelSpec::reference(0, 0);
    TrainConfig train;  // train.epochs is E; train.prox_mu and train.seed are set per round
    AugmentationPolicy augmentation;
    PrototypeOptions prototypes;
    AggregationOptions aggregation;
    GlobalWeighting weighting = GlobalWeighting::test_size;
    bool aggregate_bn_stats = true;
    bool reset_optimizer_each_round = false;
    std::uint64_t seed = 0;
    std::filesystem::path checkpoint_dir;  // empty: no checkpoints

    void validate() const {
        require(clients >= 1, "federation: clients must be >= 1");
        require(rounds >= 1, "federation: rounds must be >= 1");
        require(threshold > 0.0 && threshold <= 1.0, "threshold must be in (0,1]");
        require(trigger_round >= 1 && trigger_round <= rounds, "trigger_round must satisfy 1 <= r* <= rounds");
        require(prox_mu >= 0.0, "prox_mu must be >= 0");
        require(strategy != Strategy::fedprox || prox_mu > 0.0, "fedprox requires prox_mu > 0");
        require(noise_sigma >= 0.0, "noise_sigma must be >= 0");
        require(prototypes.k_max >= 1, "prototypes: k_max must be >= 1");
        require(aggregation.max_batch >= 1 && aggregation.iterations >= 1,
                "aggregation: max_batch and iterations must be >= 1");
        require(aggregation.rule.den >= 1 && aggregation.rule.cap >= 1, "aggregation: invalid centroid rule");
        train.validate();
        augmentation.validate();
    }
};

/// What happened during the one-shot prototype exchange.
struct ExchangeRecord {
    std::vector<std::size_t> prototypes_per_client;    // uploaded vectors
    std::vector<std::size_t> classes_per_client;       // classes those vectors cover
    std::vector<std::size_t> upload_vector_floats;     // counted on the serialized payload
    std::map<int, std::size_t> global_per_class;       // L_c
    std::size_t download_vector_floats = 0;            // per client, counted on the serialized payload
    std::vector<std::size_t> synthetic_rows;
};

struct RoundMetrics {
    std::size_t round = 0;  // 1-based
    EvalReport global;
    std::vector<EvalReport> clients;
    std::size_t up_floats = 0;    // summed over clients
    std::size_t down_floats = 0;  // summed over clients
    bool exchange_triggered = false;
    double mean_drift = 0.0;  // mean over clients of ||local - broadcast|| (trainable tensors)
    std::optional<ExchangeRecord> exchange;
};

struct RunResult {
    std::vector<RoundMetrics> rounds;
    ModelParams final_model;
    std::size_t d_w = 0;
    std::size_t d_x = 0;

    std::optional<std::size_t> exchange_round() const {
        for (const auto& r : rounds) {
            if (r.exchange_triggered) {
                return r.round;
            }
        }
        return std::nullopt;
    }
};

struct RunHooks {
    std::function<void(const RoundMetrics&)> on_round;
};

struct ClientUpdate {
    ModelParams params;
    std::size_t n = 0;
};

/// Weighted mean of every tensor, running statistics included. Each element
/// is accumulated over clients in list order.
inline ModelParams fedavg_aggregate(std::span<const ClientUpdate> updates) {
    require(!updates.empty(), "fedavg_aggregate: no updates");
    std::size_t total = 0;
    for (const auto& u : updates) {
        require(u.params.same_shape(updates.front().params), "fedavg_aggregate: shape mismatch between client updates");
        total += u.n;
    }
    require(total > 0, "fedavg_aggregate: all client weights are zero");
    std::vector<double> w;
    for (const auto& u : updates) {
        w.push_back(static_cast<double>(u.n) / static_cast<double>(total));
    }
    std::vector<std::vector<std::span<const double>>> src(updates.size());
    for (std::size_t k = 0; k < updates.size(); ++k) {
        updates[k].params.for_each_tensor([&](const ConstTensorView& t) { src[k].push_back(t.data); });
    }
    ModelParams out = updates.front().params;
    std::size_t ti = 0;
    out.for_each_tensor([&](const TensorView& t) {
        for (std::size_t j = 0; j < t.data.size(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < updates.size(); ++k) {
                acc += w[k] * src[k][ti][j];
            }
            t.data[j] = acc;
        }
        ++ti;
    });
    return out;
}

/// Decision taken at the start of round t (1-based) from the rounds already
/// completed. With r* = 1 there is no history, and the mean counts as 0.
inline bool should_trigger_exchange(std::span<const RoundMetrics> history, const FederationConfig& cfg,
                                    std::size_t t) {
    if (cfg.strategy != Strategy::fedp3e || t != cfg.trigger_round) {
        return false;
    }
    for (const auto& r : history) {
        if (r.exchange_triggered) {
            return false;
        }
    }
    const std::size_t window = cfg.trigger_round - 1;
    if (window == 0) {
        return true;
    }
    if (history.size() < window) {
        return false;
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < window; ++i) {
        sum += history[i].global.accuracy;
    }
    return sum / static_cast<double>(window) < cfg.threshold;
}

namespace detail {

inline double trainable_distance(const ModelParams& a, const ModelParams& b) {
    const auto x = a.flat_trainable();
    const auto y = b.flat_trainable();
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        s += (x[i] - y[i]) * (x[i] - y[i]);
    }
    return std::sqrt(s);
}

/// Trainable tensors from `trainable`, running statistics from `stats`.
inline ModelParams with_running_stats(const ModelParams& trainable, const ModelParams& stats) {
    ModelParams out = trainable;
    for (std::size_t i = 0; i < out.hidden.size(); ++i) {
        out.hidden[i].running_mean = stats.hidden[i].running_mean;
        out.hidden[i].running_var = stats.hidden[i].running_var;
    }
    return out;
}

inline EvalReport combine_reports(const std::vector<EvalReport>& reports, GlobalWeighting weighting) {
    if (weighting == GlobalWeighting::test_size) {
        auto confusion = reports.front().confusion;
        double loss_sum = 0.0;
        for (std::size_t k = 0; k < reports.size(); ++k) {
            if (k > 0) {
                for (std::size_t i = 0; i < confusion.size(); ++i) {
                    for (std::size_t j = 0; j < confusion.size(); ++j) {
                        confusion[i][j] += reports[k].confusion[i][j];
                    }
                }
            }
            loss_sum += reports[k].mean_loss * static_cast<double>(reports[k].n_samples);
        }
        return report_from_confusion(confusion, loss_sum);
    }
    EvalReport g;
    const double k = static_cast<double>(reports.size());
    for (const auto& r : reports) {
        g.accuracy += r.accuracy / k;
        g.macro_precision += r.macro_precision / k;
        g.macro_recall += r.macro_recall / k;
        g.macro_f1 += r.macro_f1 / k;
        g.mean_loss += r.mean_loss / k;
        g.n_samples += r.n_samples;
    }
    return g;
}

inline std::string context(std::size_t round, std::size_t client, const std::string& what) {
    return "round " + std::to_string(round) + ", client " + std::to_string(client) + ": " + what;
}

}  // namespace detail

/// Runs T rounds. Each round: broadcast, optional one-shot prototype exchange,
/// parallel local training, weighted aggregation, evaluation on every client's
/// test split. Per-(round, client) seeds make the result independent of the
/// worker count.
inline RunResult run_federation(const FederationConfig& cfg_in, const std::vector<SiloData>& silos,
                                const RunHooks& hooks = {}) {
    FederationConfig cfg = cfg_in;
    cfg.validate();
    require(silos.size() == cfg.clients, "run_federation: expected " + std::to_string(cfg.clients) +
                                             " client datasets, got " + std::to_string(silos.size()));
    const std::size_t dims = silos.front().train.dims();
    const std::size_t classes = silos.front().train.num_classes();
    for (std::size_t k = 0; k < silos.size(); ++k) {
        require(!silos[k].train.empty() && !silos[k].test.empty(),
                "run_federation: client " + std::to_string(k) + " has an empty train or test split");
        require(silos[k].train.dims() == dims && silos[k].test.dims() == dims,
                "run_federation: client " + std::to_string(k) + " has a different feature dimension");
        require(silos[k].train.num_classes() == classes,
                "run_federation: client " + std::to_string(k) + " has a different class space");
    }
    if (cfg.model.input_dim == 0) cfg.model.input_dim = dims;
    if (cfg.model.output_classes == 0) cfg.model.output_classes = classes;
    require(cfg.model.input_dim == dims, "run_federation: model input_dim " + std::to_string(cfg.model.input_dim) +
                                             " does not match data dimension " + std::to_string(dims));
    require(cfg.model.output_classes >= classes, "run_federation: model has fewer outputs than data classes");
    cfg.model.validate();

    RunResult result;
    result.d_x = dims;
    ModelParams global = build_model(cfg.model, derive_seed(cfg.seed, Stream::init));
    result.d_w = global.trainable_count();
    const std::size_t d_w = result.d_w;

    std::vector<Dataset> train(silos.size());
    std::vector<ModelParams> client_stats(silos.size(), global);
    std::vector<AdamState> optim(silos.size());
    for (std::size_t k = 0; k < silos.size(); ++k) {
        train[k] = silos[k].train;
    }
    if (!cfg.checkpoint_dir.empty()) {
        std::filesystem::create_directories(cfg.checkpoint_dir);
    }

    for (std::size_t t = 1; t <= cfg.rounds; ++t) {
        RoundMetrics rm;
        rm.round = t;
        rm.up_floats = 0;
        rm.down_floats = cfg.clients * d_w;

        if (should_trigger_exchange(result.rounds, cfg, t)) {
            rm.exchange_triggered = true;
            ExchangeRecord ex;
            std::vector<PrototypeSet> uploads(cfg.clients);
            std::vector<std::size_t> serialized(cfg.clients, 0);
            parallel_for(cfg.clients, [&](std::size_t k) {
                try {
                    uploads[k] = build_client_prototypes(train[k], static_cast<int>(k), cfg.noise_sigma, cfg.prototypes,
                                                         derive_seed(cfg.seed, Stream::gmm, {k}));
                    serialized[k] = count_vector_floats(to_json(uploads[k]));
                } catch (const std::exception& e) {
                    throw Error(detail::context(t, k, e.what()));
                }
            });
            const GlobalPrototypes gp = aggregate(uploads, derive_seed(cfg.seed, Stream::kmeans), cfg.aggregation);
            ex.download_vector_floats = count_global_vector_floats(to_json(gp));
            for (std::size_t k = 0; k < cfg.clients; ++k) {
                std::set<int> cls;
                for (const auto& e : uploads[k].entries) cls.insert(e.class_id);
                ex.prototypes_per_client.push_back(uploads[k].entries.size());
                ex.classes_per_client.push_back(cls.size());
                ex.upload_vector_floats.push_back(serialized[k]);
                rm.up_floats += serialized[k];
                rm.down_floats += ex.download_vector_floats;
            }
            for (const auto& [c, vs] : gp.centroids) {
                ex.global_per_class[c] = vs.size();
            }
            ex.synthetic_rows.assign(cfg.clients, 0);
            parallel_for(cfg.clients, [&](std::size_t k) {
                try {
                    AugmentationPolicy policy = cfg.augmentation;
                    policy.seed = derive_seed(cfg.seed, Stream::smote, {k});
                    const std::size_t before = train[k].size();
                    train[k] = augment(train[k], gp, policy);
                    ex.synthetic_rows[k] = train[k].size() - before;
                } catch (const std::exception& e) {
                    throw Error(detail::context(t, k, e.what()));
                }
            });
            rm.exchange = std::move(ex);
        }

        std::vector<ClientUpdate> updates(cfg.clients);
        std::vector<double> drift(cfg.clients, 0.0);
        parallel_for(cfg.clients, [&](std::size_t k) {
            try {
                const ModelParams start = cfg.aggregate_bn_stats ? global : detail::with_running_stats(global, client_stats[k]);
                TrainConfig tc = cfg.train;
                tc.prox_mu = cfg.strategy == Strategy::fedprox ? cfg.prox_mu : 0.0;
                tc.seed = derive_seed(cfg.seed, Stream::train, {t, k});
                if (cfg.reset_optimizer_each_round) {
                    optim[k] = AdamState{};
                }
                auto local = train_local(start, train[k], tc, &start, &optim[k]);
                drift[k] = detail::trainable_distance(local.params, start);
                updates[k] = {std::move(local.params), train[k].size()};
            } catch (const std::exception& e) {
                throw Error(detail::context(t, k, e.what()));
            }
        });
        rm.up_floats += cfg.clients * d_w;
        for (double d : drift) {
            rm.mean_drift += d / static_cast<double>(cfg.clients);
        }
        if (!cfg.aggregate_bn_stats) {
            for (std::size_t k = 0; k < cfg.clients; ++k) {
                client_stats[k] = updates[k].params;
            }
        }
        global = fedavg_aggregate(updates);

        rm.clients.resize(cfg.clients);
        parallel_for(cfg.clients, [&](std::size_t k) {
            rm.clients[k] = cfg.aggregate_bn_stats
                                ? evaluate(global, silos[k].test)
                                : evaluate(detail::with_running_stats(global, client_stats[k]), silos[k].test);
        });
        rm.global = detail::combine_reports(rm.clients, cfg.weighting);

        if (!cfg.checkpoint_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof name, "round_%03zu.fp3e", t);
            save_params(cfg.checkpoint_dir / name, global);
        }
        if (hooks.on_round) {
            hooks.on_round(rm);
        }
        result.rounds.push_back(std::move(rm));
    }
    result.final_model = std::move(global);
    return result;
}

// ---------------------------------------------------------------------------
// Communication cost

struct CommCostInputs {
    std::size_t d_w = 0;
    std::size_t d_x = 0;
    std::size_t m_k = 0;        // prototypes per class uploaded by a client
    std::size_t m_k_prime = 0;  // global prototypes per class
    std::size_t classes = 0;    // classes held by a client
    std::size_t classes_global = 0;
};

struct ClientPayloadCheck {
    std::size_t client = 0;
    std::size_t analytic = 0;    // vectors x d_x
    std::size_t serialized = 0;  // floats found in the wire JSON
};

struct CommCostReport {
    std::size_t upload_floats = 0;    // |P_i|
    std::size_t download_floats = 0;  // |P^|
    std::size_t model_floats = 0;     // d_w, each direction
    double upload_ratio = 0.0;
    double download_ratio = 0.0;
    double total_ratio = 0.0;
    std::vector<ClientPayloadCheck> uploads;
    std::optional<ClientPayloadCheck> download;
    bool payloads_match = true;
};

inline CommCostReport comm_cost_report(const CommCostInputs& in) {
    require(in.d_w > 0, "comm cost: d_w must be > 0");
    CommCostReport r;
    r.model_floats = in.d_w;
    r.upload_floats = in.classes * in.m_k * in.d_x;
    r.download_floats = in.classes_global * in.m_k_prime * in.d_x;
    const double dw = static_cast<double>(in.d_w);
    r.upload_ratio = static_cast<double>(r.upload_floats) / dw;
    r.download_ratio = static_cast<double>(r.download_floats) / dw;
    r.total_ratio = static_cast<double>(r.upload_floats + r.download_floats) / dw;
    return r;
}

/// Analytic figures plus, when the run exchanged prototypes, a per-payload
/// comparison of vectors x d_x against the floats actually serialized.
inline CommCostReport comm_cost_report(const RunResult& run, const CommCostInputs& in) {
    CommCostReport r = comm_cost_report(in);
    for (const auto& rm : run.rounds) {
        if (!rm.exchange) {
            continue;
        }
        const auto& ex = *rm.exchange;
        for (std::size_t k = 0; k < ex.prototypes_per_client.size(); ++k) {
            r.uploads.push_back({k, ex.prototypes_per_client[k] * run.d_x, ex.upload_vector_floats[k]});
            r.payloads_match = r.payloads_match && r.uploads.back().analytic == r.uploads.back().serialized;
        }
        std::size_t global_vectors = 0;
        for (const auto& [_, n] : ex.global_per_class) {
            global_vectors += n;
        }
        r.download = ClientPayloadCheck{0, global_vectors * run.d_x, ex.download_vector_floats};
        r.payloads_match = r.payloads_match && r.download->analytic == r.download->serialized;
    }
    return r;
}

}  // namespace fedp3e

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedp3e/datakit.hpp"
#include "fedp3e/fedcore.hpp"
#include "fedp3e/types.hpp"

namespace fedp3e {

enum class DataSource { synthetic, csv_dir };

struct RunEntry {
    std::string name;
    Strategy strategy = Strategy::fedavg;
    double prox_mu = 0.0;
};

/// A parsed experiment file: one dataset, one partition, several runs that
/// share the base federation settings and differ in strategy / mu.
struct RunSpec {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "out";
    DataSource source = DataSource::synthetic;
    SyntheticSpec synthetic;
    std::filesystem::path csv_path;
    std::size_t csv_feature_count = 115;
    Scenario scenario = Scenario::iid;
    std::size_t clients = 3;
    PreparationOptions preparation;
    FederationConfig base;
    bool checkpoints = false;
    std::vector<RunEntry> runs;

    void validate() const {
        require(!runs.empty(), "config: at least one run is required");
        std::set<std::string> names;
        for (const auto& r : runs) {
            require(!r.name.empty(), "config: run name must not be empty");
            require(names.insert(r.name).second, "config: duplicate run name '" + r.name + "'");
            config_for(r).validate();
        }
        require(clients >= 1, "config: partition.clients must be >= 1");
        require(preparation.train_fraction > 0.0 && preparation.train_fraction < 1.0,
                "config: partition.train_fraction must be in (0,1)");
        if (source == DataSource::synthetic) {
            synthetic.validate();
        } else {
            require(!csv_path.empty(), "config: data.path is required for csv_dir");
        }
    }

    FederationConfig config_for(const RunEntry& r) const {
        FederationConfig c = base;
        c.strategy = r.strategy;
        c.prox_mu = r.prox_mu;
        c.clients = clients;
        c.seed = seed;
        c.checkpoint_dir = checkpoints ? output_dir / "checkpoints" / r.name : std::filesystem::path{};
        return c;
    }
};

namespace detail {

/// Reads keys out of one JSON object and rejects whatever is left unread.
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        require(j_.is_object(), "config: '" + display() + "' must be an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!j_.contains(key)) {
            return;
        }
        seen_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw Error("config: key '" + qualify(key) + "' has the wrong type");
        }
    }

    template <class T, class Conv>
    void get_as(const std::string& key, T& out, Conv conv) {
        std::string s;
        get(key, s);
        if (j_.contains(key)) {
            try {
                out = conv(s);
            } catch (const Error& e) {
                throw Error("config: key '" + qualify(key) + "': " + e.what());
            }
        }
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    /// A missing section reads as an empty object, so every key keeps its default.
    ObjectReader child(const std::string& key) {
        static const nlohmann::json empty = nlohmann::json::object();
        seen_.insert(key);
        return ObjectReader(j_.contains(key) ? j_.at(key) : empty, qualify(key));
    }

    const nlohmann::json& raw(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }

    std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [k, _] : j_.items()) {
            if (!seen_.contains(k)) {
                throw Error("config: unknown key '" + qualify(k) + "'");
            }
        }
    }

private:
    std::string display() const { return path_.empty() ? "<root>" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void read_model(ObjectReader r, ModelSpec& m) {
    if (r.has("hidden")) {
        m.hidden.clear();
        const auto& arr = r.raw("hidden");
        require(arr.is_array(), "config: key '" + r.qualify("hidden") + "' must be an array");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            ObjectReader h(arr[i], r.qualify("hidden") + "[" + std::to_string(i) + "]");
            HiddenSpec hs;
            h.get("units", hs.units);
            h.get("l2", hs.l2);
            h.finish();
            m.hidden.push_back(hs);
        }
    }
    r.get("dropout", m.dropout_p);
    r.get("bn_momentum", m.bn_momentum);
    r.get("bn_epsilon", m.bn_epsilon);
    r.finish();
}

inline void read_federation(ObjectReader r, RunSpec& spec) {
    auto& f = spec.base;
    r.get("rounds", f.rounds);
    r.get("epochs", f.train.epochs);
    r.get("batch_size", f.train.batch_size);
    r.get("learning_rate", f.train.adam.learning_rate);
    r.get("adam_beta1", f.train.adam.beta1);
    r.get("adam_beta2", f.train.adam.beta2);
    r.get("adam_epsilon", f.train.adam.epsilon);
    r.get("threshold", f.threshold);
    r.get("trigger_round", f.trigger_round);
    r.get("noise_sigma", f.noise_sigma);
    r.get_as("weighting", f.weighting, weighting_from_string);
    r.get("aggregate_bn_stats", f.aggregate_bn_stats);
    r.get("reset_optimizer_each_round", f.reset_optimizer_each_round);
    r.get("checkpoints", spec.checkpoints);
    if (r.has("model")) {
        read_model(r.child("model"), f.model);
    }
    if (r.has("augmentation")) {
        auto a = r.child("augmentation");
        a.get("target_fraction", f.augmentation.target_fraction);
        a.get_as("eligible", f.augmentation.eligible, eligibility_from_string);
        a.get_as("budget", f.augmentation.budget, budget_mode_from_string);
        a.finish();
    }
    if (r.has("prototypes")) {
        auto p = r.child("prototypes");
        p.get("k_max", f.prototypes.k_max);
        p.get("tol", f.prototypes.em.tol);
        p.get("max_iter", f.prototypes.em.max_iter);
        p.get("reg_floor", f.prototypes.em.reg_floor);
        p.get_as("covariance", f.prototypes.em.covariance, [](const std::string& s) {
            if (s == "diagonal") return CovarianceType::diagonal;
            if (s == "full") return CovarianceType::full;
            throw Error("unknown covariance '" + s + "' (expected diagonal or full)");
        });
        p.finish();
    }
    if (r.has("aggregation")) {
        auto a = r.child("aggregation");
        a.get("centroid_num", f.aggregation.rule.num);
        a.get("centroid_den", f.aggregation.rule.den);
        a.get("centroid_cap", f.aggregation.rule.cap);
        a.get("max_batch", f.aggregation.max_batch);
        a.get("iterations", f.aggregation.iterations);
        a.finish();
    }
    r.get("prox_mu", f.prox_mu);
    r.finish();
}

inline std::size_t line_of(const std::string& text, std::size_t byte) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
        line += text[i] == '\n' ? 1 : 0;
    }
    return line;
}

}  // namespace detail

inline RunSpec parse_config_json(const nlohmann::json& j) {
    RunSpec spec;
    detail::ObjectReader root(j, "");
    root.get("seed", spec.seed);
    std::string out;
    root.get("output_dir", out);
    if (!out.empty()) {
        spec.output_dir = out;
    }

    auto data = root.child("data");
    std::string source = "synthetic";
    data.get("source", source);
    if (source == "synthetic") {
        spec.source = DataSource::synthetic;
        if (data.has("synthetic")) {
            auto s = data.child("synthetic");
            s.get("n_classes", spec.synthetic.n_classes);
            s.get("dims", spec.synthetic.dims);
            s.get("clusters_per_class", spec.synthetic.clusters_per_class);
            s.get("cluster_spread", spec.synthetic.cluster_spread);
            s.get("samples_per_class", spec.synthetic.samples_per_class);
            s.get("seed", spec.synthetic.seed);
            s.finish();
        }
    } else if (source == "csv_dir") {
        spec.source = DataSource::csv_dir;
        std::string path;
        data.get("path", path);
        spec.csv_path = path;
        data.get("feature_count", spec.csv_feature_count);
    } else {
        throw Error("config: key 'data.source' must be synthetic or csv_dir, got '" + source + "'");
    }
    data.finish();

    if (root.has("partition")) {
        auto p = root.child("partition");
        p.get_as("scenario", spec.scenario, scenario_from_string);
        p.get("clients", spec.clients);
        p.get_as("scaling", spec.preparation.scaling, [](const std::string& s) {
            if (s == "per_client") return ScalingMode::per_client;
            if (s == "global") return ScalingMode::global;
            throw Error("unknown scaling '" + s + "' (expected per_client or global)");
        });
        p.get("train_fraction", spec.preparation.train_fraction);
        p.finish();
    }
    if (root.has("federation")) {
        detail::read_federation(root.child("federation"), spec);
    }
    require(root.has("runs"), "config: key 'runs' is required");
    const auto& runs = root.raw("runs");
    require(runs.is_array(), "config: key 'runs' must be an array");
    for (std::size_t i = 0; i < runs.size(); ++i) {
        detail::ObjectReader r(runs[i], "runs[" + std::to_string(i) + "]");
        RunEntry e;
        r.get_as("strategy", e.strategy, strategy_from_string);
        e.prox_mu = spec.base.prox_mu;
        r.get("prox_mu", e.prox_mu);
        e.name = to_string(e.strategy);
        r.get("name", e.name);
        r.finish();
        spec.runs.push_back(e);
    }
    root.finish();
    spec.validate();
    return spec;
}

inline RunSpec parse_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error("config parse error at line " + std::to_string(detail::line_of(text, e.byte)) + ": " + e.what());
    }
    return parse_config_json(j);
}

inline RunSpec parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "config: cannot open '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config_text(ss.str());
    } catch (const Error& e) {
        throw Error(path.string() + ": " + e.what());
    }
}

/// Every key, defaults included; parse_config_json(to_json(s)) reproduces s.
inline nlohmann::json to_json(const RunSpec& s) {
    using nlohmann::json;
    json data;
    if (s.source == DataSource::synthetic) {
        data = {{"source", "synthetic"},
                {"synthetic",
                 {{"n_classes", s.synthetic.n_classes},
                  {"dims", s.synthetic.dims},
                  {"clusters_per_class", s.synthetic.clusters_per_class},
                  {"cluster_spread", s.synthetic.cluster_spread},
                  {"samples_per_class", s.synthetic.samples_per_class},
                  {"seed", s.synthetic.seed}}}};
    } else {
        data = {{"source", "csv_dir"}, {"path", s.csv_path.string()}, {"feature_count", s.csv_feature_count}};
    }
    const auto& f = s.base;
    json hidden = json::array();
    for (const auto& h : f.model.hidden) {
        hidden.push_back({{"units", h.units}, {"l2", h.l2}});
    }
    json fed = {
        {"rounds", f.rounds},
        {"epochs", f.train.epochs},
        {"batch_size", f.train.batch_size},
        {"learning_rate", f.train.adam.learning_rate},
        {"adam_beta1", f.train.adam.beta1},
        {"adam_beta2", f.train.adam.beta2},
        {"adam_epsilon", f.train.adam.epsilon},
        {"threshold", f.threshold},
        {"trigger_round", f.trigger_round},
        {"noise_sigma", f.noise_sigma},
        {"prox_mu", f.prox_mu},
        {"weighting", to_string(f.weighting)},
        {"aggregate_bn_stats", f.aggregate_bn_stats},
        {"reset_optimizer_each_round", f.reset_optimizer_each_round},
        {"checkpoints", s.checkpoints},
        {"model",
         {{"hidden", hidden},
          {"dropout", f.model.dropout_p},
          {"bn_momentum", f.model.bn_momentum},
          {"bn_epsilon", f.model.bn_epsilon}}},
        {"augmentation",
         {{"target_fraction", f.augmentation.target_fraction},
          {"eligible", to_string(f.augmentation.eligible)},
          {"budget", to_string(f.augmentation.budget)}}},
        {"prototypes",
         {{"k_max", f.prototypes.k_max},
          {"tol", f.prototypes.em.tol},
          {"max_iter", f.prototypes.em.max_iter},
          {"reg_floor", f.prototypes.em.reg_floor},
          {"covariance", f.prototypes.em.covariance == CovarianceType::full ? "full" : "diagonal"}}},
        {"aggregation",
         {{"centroid_num", f.aggregation.rule.num},
          {"centroid_den", f.aggregation.rule.den},
          {"centroid_cap", f.aggregation.rule.cap},
          {"max_batch", f.aggregation.max_batch},
          {"iterations", f.aggregation.iterations}}},
    };
    json runs = json::array();
    for (const auto& r : s.runs) {
        runs.push_back({{"name", r.name}, {"strategy", to_string(r.strategy)}, {"prox_mu", r.prox_mu}});
    }
    return {{"seed", s.seed},
            {"output_dir", s.output_dir.string()},
            {"data", data},
            {"partition",
             {{"scenario", to_string(s.scenario)},
              {"clients", s.clients},
              {"scaling", s.preparation.scaling == ScalingMode::global ? "global" : "per_client"},
              {"train_fraction", s.preparation.train_fraction}}},
            {"federation", fed},
            {"runs", runs}};
}

inline bool operator==(const RunSpec& a, const RunSpec& b) { return to_json(a) == to_json(b); }

/// Keeps the runs whose name or strategy is listed. A listed strategy with no
/// matching run is added with the base settings.
inline void select_runs(RunSpec& spec, const std::vector<std::string>& wanted) {
    if (wanted.empty()) {
        return;
    }
    std::vector<RunEntry> kept;
    for (const auto& w : wanted) {
        bool matched = false;
        for (const auto& r : spec.runs) {
            if (r.name == w || to_string(r.strategy) == w) {
                matched = true;
                if (std::none_of(kept.begin(), kept.end(), [&](const RunEntry& k) { return k.name == r.name; })) {
                    kept.push_back(r);
                }
            }
        }
        if (!matched) {
            RunEntry e{w, strategy_from_string(w), spec.base.prox_mu};
            kept.push_back(e);
        }
    }
    spec.runs = std::move(kept);
    spec.validate();
}

// ---------------------------------------------------------------------------
// Execution and outputs

inline std::vector<SiloData> prepare_data(const RunSpec& spec) {
    Dataset ds;
    if (spec.source == DataSource::synthetic) {
        ds = synthesize(spec.synthetic);
    } else {
        CsvSchema schema;
        schema.feature_count = spec.csv_feature_count;
        ds = load_csv_dir(spec.csv_path, schema);
    }
    const auto plan = make_plan(spec.scenario, ds, spec.clients);
    return prepare_silos(ds, plan, spec.preparation, spec.seed);
}

inline std::string format_metrics_csv(const RunResult& run) {
    std::string out = "round,accuracy,precision,recall,f1,loss,up_floats,down_floats,exchange\n";
    char line[256];
    for (const auto& r : run.rounds) {
        std::snprintf(line, sizeof line, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%zu,%zu,%d\n", r.round, r.global.accuracy,
                      r.global.macro_precision, r.global.macro_recall, r.global.macro_f1, r.global.mean_loss,
                      r.up_floats, r.down_floats, r.exchange_triggered ? 1 : 0);
        out += line;
    }
    return out;
}

/// Comm-cost inputs read off the run: mean prototypes per (client, class) and
/// the largest per-class global count.
inline CommCostInputs observed_comm_inputs(const RunResult& run, std::size_t classes_global) {
    CommCostInputs in;
    in.d_w = run.d_w;
    in.d_x = run.d_x;
    in.classes_global = classes_global;
    for (const auto& rm : run.rounds) {
        if (!rm.exchange) {
            continue;
        }
        std::size_t vectors = 0;
        std::size_t pairs = 0;
        for (std::size_t k = 0; k < rm.exchange->prototypes_per_client.size(); ++k) {
            vectors += rm.exchange->prototypes_per_client[k];
            pairs += rm.exchange->classes_per_client[k];
            in.classes = std::max(in.classes, rm.exchange->classes_per_client[k]);
        }
        in.m_k = pairs == 0 ? 0 : static_cast<std::size_t>(std::llround(static_cast<double>(vectors) / static_cast<double>(pairs)));
        for (const auto& [_, n] : rm.exchange->global_per_class) {
            in.m_k_prime = std::max(in.m_k_prime, n);
        }
    }
    return in;
}

inline nlohmann::json comm_cost_json(const CommCostReport& r, const CommCostInputs& in) {
    nlohmann::json uploads = nlohmann::json::array();
    for (const auto& u : r.uploads) {
        uploads.push_back({{"client", u.client}, {"analytic", u.analytic}, {"serialized", u.serialized}});
    }
    nlohmann::json j = {{"d_w", in.d_w},
                        {"d_x", in.d_x},
                        {"m_k", in.m_k},
                        {"m_k_prime", in.m_k_prime},
                        {"classes_per_client", in.classes},
                        {"classes_global", in.classes_global},
                        {"upload_floats", r.upload_floats},
                        {"download_floats", r.download_floats},
                        {"upload_ratio_pct", 100.0 * r.upload_ratio},
                        {"download_ratio_pct", 100.0 * r.download_ratio},
                        {"total_ratio_pct", 100.0 * r.total_ratio},
                        {"uploads", uploads},
                        {"payloads_match", r.payloads_match}};
    if (r.download) {
        j["download"] = {{"analytic", r.download->analytic}, {"serialized", r.download->serialized}};
    }
    return j;
}

struct RunOutcome {
    RunEntry entry;
    RunResult result;
};

/// Executes every run in order and writes metrics_<name>.csv, comparison.csv
/// and summary.json under spec.output_dir.
inline std::vector<RunOutcome> run(const RunSpec& spec, std::ostream* log = &std::cerr) {
    spec.validate();
    const auto silos = prepare_data(spec);
    std::filesystem::create_directories(spec.output_dir);
    const std::size_t classes_global = silos.front().train.num_classes();

    std::vector<RunOutcome> outcomes;
    for (const auto& entry : spec.runs) {
        RunHooks hooks;
        if (log != nullptr) {
            hooks.on_round = [&](const RoundMetrics& rm) {
                char line[160];
                std::snprintf(line, sizeof line, "[%s] round %zu acc=%.4f f1=%.4f loss=%.4f%s\n", entry.name.c_str(),
                              rm.round, rm.global.accuracy, rm.global.macro_f1, rm.global.mean_loss,
                              rm.exchange_triggered ? " (prototype exchange)" : "");
                *log << line << std::flush;
            };
        }
        auto result = run_federation(spec.config_for(entry), silos, hooks);
        std::ofstream(spec.output_dir / ("metrics_" + entry.name + ".csv"), std::ios::binary) << format_metrics_csv(result);
        outcomes.push_back({entry, std::move(result)});
    }

    std::string comparison = "name,strategy,prox_mu,accuracy,precision,recall,f1,loss,exchange_round,up_floats,down_floats\n";
    nlohmann::json runs = nlohmann::json::object();
    for (const auto& o : outcomes) {
        const auto& last = o.result.rounds.back().global;
        std::size_t up = 0;
        std::size_t down = 0;
        for (const auto& r : o.result.rounds) {
            up += r.up_floats;
            down += r.down_floats;
        }
        const auto ex = o.result.exchange_round();
        char line[320];
        std::snprintf(line, sizeof line, "%s,%s,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f,%s,%zu,%zu\n", o.entry.name.c_str(),
                      to_string(o.entry.strategy).c_str(), o.entry.prox_mu, last.accuracy, last.macro_precision,
                      last.macro_recall, last.macro_f1, last.mean_loss, ex ? std::to_string(*ex).c_str() : "", up, down);
        comparison += line;

        const auto in = observed_comm_inputs(o.result, classes_global);
        nlohmann::json r = {{"strategy", to_string(o.entry.strategy)},
                            {"prox_mu", o.entry.prox_mu},
                            {"rounds", o.result.rounds.size()},
                            {"final",
                             {{"accuracy", last.accuracy},
                              {"precision", last.macro_precision},
                              {"recall", last.macro_recall},
                              {"f1", last.macro_f1},
                              {"loss", last.mean_loss}}},
                            {"total_up_floats", up},
                            {"total_down_floats", down},
                            {"exchange_round", ex ? nlohmann::json(*ex) : nlohmann::json(nullptr)},
                            {"comm_cost", comm_cost_json(comm_cost_report(o.result, in), in)}};
        runs[o.entry.name] = r;
    }
    std::ofstream(spec.output_dir / "comparison.csv", std::ios::binary) << comparison;
    nlohmann::json summary = {{"seed", spec.seed},
                              {"scenario", to_string(spec.scenario)},
                              {"clients", spec.clients},
                              {"d_w", outcomes.front().result.d_w},
                              {"d_x", outcomes.front().result.d_x},
                              {"runs", runs}};
    std::ofstream(spec.output_dir / "summary.json", std::ios::binary) << summary.dump(2) << "\n";
    return outcomes;
}

}  // namespace fedp3e

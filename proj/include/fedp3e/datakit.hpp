#pragma once

// Tabular data handling: CSV ingestion in the N-BaIoT per-device layout,
// min-max scaling, stratified splits, per-silo partitioning and synthetic
// desk-scale datasets.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedp3e/random.hpp"
#include "fedp3e/types.hpp"

namespace fedp3e {

inline std::vector<std::string> default_class_names() { return {"benign", "gafgyt", "mirai"}; }

struct Dataset {
    Matrix features;
    std::vector<int> labels;
    // Sub-class identity (attack variant / synthetic cluster). Empty when unknown.
    std::vector<int> variants;
    std::vector<std::string> class_names;

    std::size_t size() const { return labels.size(); }
    std::size_t dims() const { return static_cast<std::size_t>(features.cols()); }
    std::size_t num_classes() const { return class_names.size(); }
    bool empty() const { return labels.empty(); }
    bool has_variants() const { return !variants.empty(); }

    void validate() const {
        require(static_cast<std::size_t>(features.rows()) == labels.size(),
                "dataset: feature rows (" + std::to_string(features.rows()) + ") != labels (" +
                    std::to_string(labels.size()) + ")");
        require(variants.empty() || variants.size() == labels.size(), "dataset: variants length mismatch");
        for (int y : labels) {
            require(y >= 0 && static_cast<std::size_t>(y) < num_classes(),
                    "dataset: label " + std::to_string(y) + " outside class space of size " +
                        std::to_string(num_classes()));
        }
    }

    std::vector<std::size_t> class_counts() const {
        std::vector<std::size_t> counts(num_classes(), 0);
        for (int y : labels) {
            ++counts[static_cast<std::size_t>(y)];
        }
        return counts;
    }

    int variant(std::size_t row) const { return variants.empty() ? -1 : variants[row]; }

    /// Rows in the given order.
    Dataset subset(std::span<const std::size_t> rows) const {
        Dataset out;
        out.class_names = class_names;
        out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
        out.labels.reserve(rows.size());
        if (has_variants()) {
            out.variants.reserve(rows.size());
        }
        for (std::size_t i = 0; i < rows.size(); ++i) {
            out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
            out.labels.push_back(labels[rows[i]]);
            if (has_variants()) {
                out.variants.push_back(variants[rows[i]]);
            }
        }
        return out;
    }

    /// Row-wise concatenation; both sides must share the class space and width.
    static Dataset concat(const Dataset& a, const Dataset& b) {
        if (a.empty()) {
            return b;
        }
        if (b.empty()) {
            return a;
        }
        require(a.class_names == b.class_names, "dataset concat: class spaces differ");
        require(a.dims() == b.dims(), "dataset concat: feature widths differ");
        Dataset out;
        out.class_names = a.class_names;
        out.features.resize(static_cast<Eigen::Index>(a.size() + b.size()), a.features.cols());
        out.features.topRows(static_cast<Eigen::Index>(a.size())) = a.features;
        out.features.bottomRows(static_cast<Eigen::Index>(b.size())) = b.features;
        out.labels = a.labels;
        out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
        if (a.has_variants() || b.has_variants()) {
            auto fill = [](const Dataset& d) {
                return d.has_variants() ? d.variants : std::vector<int>(d.size(), -1);
            };
            out.variants = fill(a);
            auto vb = fill(b);
            out.variants.insert(out.variants.end(), vb.begin(), vb.end());
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// CSV ingestion

struct ClassRule {
    std::string token;  // case-insensitive substring of the file stem
    int label = 0;
};

struct CsvSchema {
    std::size_t feature_count = 115;
    std::vector<ClassRule> rules{{"benign", 0}, {"gafgyt", 1}, {"bashlite", 1}, {"mirai", 2}};
    std::vector<std::string> class_names = default_class_names();
};

namespace detail {

inline std::string to_lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            cells.push_back(trim(line.substr(start)));
            break;
        }
        cells.push_back(trim(line.substr(start, pos - start)));
        start = pos + 1;
    }
    return cells;
}

inline std::optional<double> parse_double(std::string_view cell) {
    if (!cell.empty() && cell.front() == '+') {
        cell.remove_prefix(1);
    }
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
    if (ec != std::errc{} || ptr != cell.data() + cell.size() || cell.empty()) {
        return std::nullopt;
    }
    return v;
}

}  // namespace detail

/// Loads every *.csv file in `dir` (lexicographic file order, then row order).
/// The class comes from the first rule whose token appears in the file stem;
/// the variant is the remainder of the stem after that token.
inline Dataset load_csv_dir(const std::filesystem::path& dir, const CsvSchema& schema = {}) {
    namespace fs = std::filesystem;
    require(fs::is_directory(dir), "load_csv_dir: missing directory '" + dir.string() + "'");

    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file() && detail::to_lower(entry.path().extension().string()) == ".csv") {
            files.push_back(entry.path());
        }
    }
    std::sort(files.begin(), files.end());
    require(!files.empty(), "load_csv_dir: no CSV files in '" + dir.string() + "'");

    std::vector<double> values;
    std::vector<int> labels;
    std::vector<std::string> variant_names;
    const std::size_t width = schema.feature_count;

    for (const auto& file : files) {
        const std::string stem = detail::to_lower(file.stem().string());
        const ClassRule* rule = nullptr;
        std::size_t token_end = 0;
        for (const auto& r : schema.rules) {
            auto pos = stem.find(detail::to_lower(r.token));
            if (pos != std::string::npos) {
                rule = &r;
                token_end = pos + r.token.size();
                break;
            }
        }
        require(rule != nullptr, "load_csv_dir: no class rule matches file '" + file.filename().string() + "'");
        require(rule->label >= 0 && static_cast<std::size_t>(rule->label) < schema.class_names.size(),
                "load_csv_dir: rule label out of range for '" + rule->token + "'");
        std::string variant = stem.substr(token_end);
        variant.erase(0, variant.find_first_not_of("._- "));

        std::ifstream in(file);
        require(static_cast<bool>(in), "load_csv_dir: cannot open '" + file.string() + "'");
        std::string line;
        require(static_cast<bool>(std::getline(in, line)), "load_csv_dir: '" + file.filename().string() + "' has no header row");
        auto header = detail::split_commas(line);
        require(header.size() == width, "load_csv_dir: column count mismatch in '" + file.filename().string() +
                                            "' header: expected " + std::to_string(width) + ", got " +
                                            std::to_string(header.size()));
        std::size_t row = 1;
        while (std::getline(in, line)) {
            ++row;
            if (detail::trim(line).empty()) {
                continue;
            }
            auto cells = detail::split_commas(line);
            require(cells.size() == width, "load_csv_dir: column count mismatch in '" + file.filename().string() +
                                               "' row " + std::to_string(row) + ": expected " +
                                               std::to_string(width) + ", got " + std::to_string(cells.size()));
            for (std::size_t c = 0; c < width; ++c) {
                auto v = detail::parse_double(cells[c]);
                require(v.has_value(), "load_csv_dir: non-numeric cell '" + std::string(cells[c]) + "' in '" +
                                           file.filename().string() + "' row " + std::to_string(row) +
                                           " column " + std::to_string(c + 1));
                values.push_back(*v);
            }
            labels.push_back(rule->label);
            variant_names.push_back(std::to_string(rule->label) + "/" + variant);
        }
    }

    // Variant ids: per class, index of the variant name in sorted order.
    std::map<int, std::vector<std::string>> per_class;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        per_class[labels[i]].push_back(variant_names[i]);
    }
    for (auto& [_, names] : per_class) {
        std::sort(names.begin(), names.end());
        names.erase(std::unique(names.begin(), names.end()), names.end());
    }

    Dataset ds;
    ds.class_names = schema.class_names;
    ds.features.resize(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(width));
    std::copy(values.begin(), values.end(), ds.features.data());
    ds.labels = std::move(labels);
    ds.variants.reserve(ds.labels.size());
    for (std::size_t i = 0; i < ds.labels.size(); ++i) {
        const auto& names = per_class[ds.labels[i]];
        ds.variants.push_back(static_cast<int>(std::lower_bound(names.begin(), names.end(), variant_names[i]) - names.begin()));
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Scaling and splitting

/// Column-wise (x - min) / (max - min); constant columns map to 0.
inline Dataset min_max_scale(const Dataset& ds) {
    require(!ds.empty(), "min_max_scale: empty dataset");
    Dataset out = ds;
    for (Eigen::Index c = 0; c < ds.features.cols(); ++c) {
        const double lo = ds.features.col(c).minCoeff();
        const double hi = ds.features.col(c).maxCoeff();
        const double range = hi - lo;
        for (Eigen::Index r = 0; r < ds.features.rows(); ++r) {
            out.features(r, c) = range > 0.0 ? (ds.features(r, c) - lo) / range : 0.0;
        }
    }
    return out;
}

struct Split {
    Dataset train;
    Dataset test;
};

/// Per class: max(1, floor(fraction * n_c)) rows to train after a seeded shuffle.
/// Both outputs keep the original row order.
inline Split stratified_split(const Dataset& ds, double train_fraction, std::uint64_t seed) {
    require(train_fraction > 0.0 && train_fraction < 1.0, "stratified_split: train_fraction must be in (0,1)");
    auto counts = ds.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        require(counts[c] == 0 || counts[c] >= 2, "stratified_split: class " + std::to_string(c) + " has " +
                                                      std::to_string(counts[c]) + " sample(s); need at least 2");
    }
    Rng rng = make_rng(seed, Stream::split);
    std::vector<std::size_t> train_rows;
    std::vector<std::size_t> test_rows;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) {
            continue;
        }
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (static_cast<std::size_t>(ds.labels[i]) == c) {
                rows.push_back(i);
            }
        }
        std::shuffle(rows.begin(), rows.end(), rng);
        auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(rows.size()) + 1e-9));
        n_train = std::max<std::size_t>(n_train, 1);
        train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_train));
        test_rows.insert(test_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_train), rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    return {ds.subset(train_rows), ds.subset(test_rows)};
}

// ---------------------------------------------------------------------------
// Partitioning

enum class Scenario { iid, light_non_iid, moderate_non_iid, severe_non_iid };

inline std::string to_string(Scenario s) {
    switch (s) {
        case Scenario::iid: return "iid";
        case Scenario::light_non_iid: return "light";
        case Scenario::moderate_non_iid: return "moderate";
        case Scenario::severe_non_iid: return "severe";
    }
    return "?";
}

inline Scenario scenario_from_string(const std::string& s) {
    if (s == "iid") return Scenario::iid;
    if (s == "light") return Scenario::light_non_iid;
    if (s == "moderate") return Scenario::moderate_non_iid;
    if (s == "severe") return Scenario::severe_non_iid;
    throw Error("unknown partition scenario '" + s + "' (expected iid, light, moderate or severe)");
}

struct Quota {
    int label = 0;
    int variant = -1;  // -1: any variant of the class
    std::size_t count = 0;

    bool operator==(const Quota&) const = default;
};

struct PartitionPlan {
    Scenario scenario = Scenario::iid;
    std::vector<std::vector<Quota>> clients;

    std::size_t num_clients() const { return clients.size(); }

    /// Classes with a nonzero quota for one client.
    std::vector<int> classes_of(std::size_t client) const {
        std::vector<int> out;
        for (const auto& q : clients.at(client)) {
            if (q.count > 0 && std::find(out.begin(), out.end(), q.label) == out.end()) {
                out.push_back(q.label);
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& c : clients) {
            for (const auto& q : c) {
                n += q.count;
            }
        }
        return n;
    }
};

/// Draws each client's quotas without replacement. Variant-specific quotas are
/// served before any-variant quotas so the two never compete for a row.
inline std::vector<Dataset> partition(const Dataset& ds, const PartitionPlan& plan, std::uint64_t seed) {
    ds.validate();
    Rng rng = make_rng(seed, Stream::partition);
    std::map<std::pair<int, int>, std::vector<std::size_t>> pools;  // (label, variant) -> rows
    std::map<int, std::vector<std::size_t>> class_pools;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        pools[{ds.labels[i], ds.variant(i)}].push_back(i);
        class_pools[ds.labels[i]].push_back(i);
    }
    for (auto& [_, rows] : pools) {
        std::shuffle(rows.begin(), rows.end(), rng);
    }
    for (auto& [_, rows] : class_pools) {
        std::shuffle(rows.begin(), rows.end(), rng);
    }

    std::vector<char> used(ds.size(), 0);
    std::vector<std::vector<std::size_t>> picked(plan.num_clients());
    auto take = [&](std::vector<std::size_t>& pool, std::size_t count, const Quota& q, std::size_t client) {
        std::size_t got = 0;
        for (std::size_t idx : pool) {
            if (got == count) {
                break;
            }
            if (!used[idx]) {
                used[idx] = 1;
                picked[client].push_back(idx);
                ++got;
            }
        }
        if (got < count) {
            throw Error("partition: unsatisfiable quota for client " + std::to_string(client) + ", class " +
                        std::to_string(q.label) + (q.variant >= 0 ? " variant " + std::to_string(q.variant) : "") +
                        ": short by " + std::to_string(count - got));
        }
    };
    std::vector<std::size_t> none;
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < plan.num_clients(); ++k) {
            for (const auto& q : plan.clients[k]) {
                if (q.count == 0 || (pass == 0) != (q.variant >= 0)) {
                    continue;
                }
                if (q.variant >= 0) {
                    auto it = pools.find({q.label, q.variant});
                    take(it == pools.end() ? none : it->second, q.count, q, k);
                } else {
                    auto it = class_pools.find(q.label);
                    take(it == class_pools.end() ? none : it->second, q.count, q, k);
                }
            }
        }
    }

    std::vector<Dataset> out;
    out.reserve(plan.num_clients());
    for (auto& rows : picked) {
        std::sort(rows.begin(), rows.end());
        out.push_back(ds.subset(rows));
    }
    return out;
}

/// Equal per-class shares (floor) for every client.
inline PartitionPlan make_iid_plan(const Dataset& ds, std::size_t clients) {
    require(clients >= 1, "make_iid_plan: need at least one client");
    PartitionPlan plan{Scenario::iid, std::vector<std::vector<Quota>>(clients)};
    auto counts = ds.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        for (auto& client : plan.clients) {
            client.push_back({static_cast<int>(c), -1, counts[c] / clients});
        }
    }
    return plan;
}

/// Client k holds only class k mod C; clients sharing a class split it evenly.
inline PartitionPlan make_severe_plan(const Dataset& ds, std::size_t clients) {
    require(clients >= 1, "make_severe_plan: need at least one client");
    require(ds.num_classes() >= 1, "make_severe_plan: empty class space");
    PartitionPlan plan{Scenario::severe_non_iid, std::vector<std::vector<Quota>>(clients)};
    auto counts = ds.class_counts();
    const std::size_t n_classes = counts.size();
    for (std::size_t k = 0; k < clients; ++k) {
        const std::size_t c = k % n_classes;
        const std::size_t sharing = (clients - c + n_classes - 1) / n_classes;
        plan.clients[k].push_back({static_cast<int>(c), -1, counts[c] / sharing});
    }
    return plan;
}

namespace detail {

// Variant presence per client (rows) for the two malware families, columns in
// variant order: gafgyt {combo, junk, scan, tcp, udp}, mirai {ack, scan, syn,
// udp, udpplain}. Derived from the per-device tables by OR-ing each silo's
// three devices.
using PresenceTable = std::array<std::array<std::array<bool, 5>, 2>, 3>;

inline const PresenceTable& light_presence() {
    static const PresenceTable t{{
        {{{true, false, false, true, false}, {false, true, true, true, true}}},
        {{{false, true, true, false, true}, {false, true, true, true, false}}},
        {{{true, true, false, true, true}, {true, false, false, true, true}}},
    }};
    return t;
}

inline const PresenceTable& moderate_presence() {
    static const PresenceTable t{{
        {{{true, false, false, false, true}, {true, false, true, false, false}}},
        {{{false, true, false, true, true}, {false, true, true, false, true}}},
        {{{false, false, true, false, true}, {true, false, false, true, false}}},
    }};
    return t;
}

inline PartitionPlan make_variant_plan(const Dataset& ds, std::size_t clients, Scenario scenario,
                                       const PresenceTable& table) {
    require(clients >= 1, "partition plan: need at least one client");
    require(ds.has_variants(), "partition plan '" + to_string(scenario) +
                                   "' needs variant metadata (synthetic clusters or CSV variant files)");
    std::map<std::pair<int, int>, std::size_t> pool_sizes;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        ++pool_sizes[{ds.labels[i], ds.variant(i)}];
    }
    PartitionPlan plan{scenario, std::vector<std::vector<Quota>>(clients)};
    for (const auto& [key, n] : pool_sizes) {
        const auto [label, variant] = key;
        std::vector<std::size_t> holders;
        for (std::size_t k = 0; k < clients; ++k) {
            bool present = true;
            if (label > 0) {
                const std::size_t family = (static_cast<std::size_t>(label) - 1) % 2;
                const std::size_t column = static_cast<std::size_t>(std::max(variant, 0)) % 5;
                present = table[k % 3][family][column];
            }
            if (present) {
                holders.push_back(k);
            }
        }
        for (std::size_t k : holders) {
            plan.clients[k].push_back({label, variant, n / holders.size()});
        }
    }
    return plan;
}

}  // namespace detail

/// Benign shared by all silos; each malware variant split among the silos that
/// hold it in the light non-IID presence pattern.
inline PartitionPlan make_light_plan(const Dataset& ds, std::size_t clients) {
    return detail::make_variant_plan(ds, clients, Scenario::light_non_iid, detail::light_presence());
}

inline PartitionPlan make_moderate_plan(const Dataset& ds, std::size_t clients) {
    return detail::make_variant_plan(ds, clients, Scenario::moderate_non_iid, detail::moderate_presence());
}

inline PartitionPlan make_plan(Scenario scenario, const Dataset& ds, std::size_t clients) {
    switch (scenario) {
        case Scenario::iid: return make_iid_plan(ds, clients);
        case Scenario::light_non_iid: return make_light_plan(ds, clients);
        case Scenario::moderate_non_iid: return make_moderate_plan(ds, clients);
        case Scenario::severe_non_iid: return make_severe_plan(ds, clients);
    }
    throw Error("make_plan: unknown scenario");
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticSpec {
    std::size_t n_classes = 3;
    std::size_t dims = 10;
    std::size_t clusters_per_class = 1;
    double cluster_spread = 0.05;
    std::size_t samples_per_class = 200;
    std::uint64_t seed = 0;

    bool operator==(const SyntheticSpec&) const = default;

    void validate() const {
        require(n_classes >= 1 && dims >= 1 && clusters_per_class >= 1 && samples_per_class >= 1,
                "synthetic spec: all counts must be >= 1");
        require(cluster_spread > 0.0, "synthetic spec: cluster_spread must be > 0");
    }
};

/// Each class is a mixture of isotropic Gaussian blobs with seeded centers in
/// [0,1]^dims. The variant of a row is its blob index.
inline Dataset synthesize(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng = make_rng(spec.seed, Stream::synthesize);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, spec.cluster_spread);

    const std::size_t n = spec.n_classes * spec.samples_per_class;
    Dataset ds;
    ds.class_names = spec.n_classes == 3 ? default_class_names() : std::vector<std::string>{};
    for (std::size_t c = 0; ds.class_names.size() < spec.n_classes; ++c) {
        ds.class_names.push_back("class" + std::to_string(c));
    }
    ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(spec.dims));
    ds.labels.reserve(n);
    ds.variants.reserve(n);

    Eigen::Index row = 0;
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        Matrix centers(static_cast<Eigen::Index>(spec.clusters_per_class), static_cast<Eigen::Index>(spec.dims));
        for (Eigen::Index j = 0; j < centers.size(); ++j) {
            centers.data()[j] = unit(rng);
        }
        for (std::size_t j = 0; j < spec.clusters_per_class; ++j) {
            const std::size_t count =
                spec.samples_per_class / spec.clusters_per_class + (j < spec.samples_per_class % spec.clusters_per_class ? 1 : 0);
            for (std::size_t s = 0; s < count; ++s, ++row) {
                for (Eigen::Index d = 0; d < ds.features.cols(); ++d) {
                    ds.features(row, d) = centers(static_cast<Eigen::Index>(j), d) + noise(rng);
                }
                ds.labels.push_back(static_cast<int>(c));
                ds.variants.push_back(static_cast<int>(j));
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Silo preparation

enum class ScalingMode { per_client, global };

struct SiloData {
    Dataset train;
    Dataset test;
};

struct PreparationOptions {
    ScalingMode scaling = ScalingMode::per_client;
    double train_fraction = 0.8;
};

/// Partition, scale, then split each silo.
inline std::vector<SiloData> prepare_silos(const Dataset& ds, const PartitionPlan& plan, const PreparationOptions& opt,
                                           std::uint64_t seed) {
    const Dataset source = opt.scaling == ScalingMode::global ? min_max_scale(ds) : ds;
    auto parts = partition(source, plan, seed);
    std::vector<SiloData> silos;
    silos.reserve(parts.size());
    for (std::size_t k = 0; k < parts.size(); ++k) {
        require(!parts[k].empty(), "prepare_silos: client " + std::to_string(k) + " received no samples");
        Dataset local = opt.scaling == ScalingMode::per_client ? min_max_scale(parts[k]) : std::move(parts[k]);
        auto split = stratified_split(local, opt.train_fraction, derive_seed(seed, {k}));
        silos.push_back({std::move(split.train), std::move(split.test)});
    }
    return silos;
}

}  // namespace fedp3e

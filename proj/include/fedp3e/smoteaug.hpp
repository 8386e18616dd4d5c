#pragma once

// Client-side synthesis of under-represented classes by interpolating between
// pairs of received global prototypes.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "fedp3e/datakit.hpp"
#include "fedp3e/protoagg.hpp"
#include "fedp3e/random.hpp"
#include "fedp3e/types.hpp"

namespace fedp3e {

enum class Eligibility { missing_only, below_mean_count, all };
enum class BudgetMode { local_size, prototype_count };

inline std::string to_string(Eligibility e) {
    switch (e) {
        case Eligibility::missing_only: return "missing_only";
        case Eligibility::below_mean_count: return "below_mean_count";
        case Eligibility::all: return "all";
    }
    return "?";
}

inline Eligibility eligibility_from_string(const std::string& s) {
    if (s == "missing_only") return Eligibility::missing_only;
    if (s == "below_mean_count") return Eligibility::below_mean_count;
    if (s == "all") return Eligibility::all;
    throw Error("unknown eligibility rule '" + s + "' (expected missing_only, below_mean_count or all)");
}

inline std::string to_string(BudgetMode b) { return b == BudgetMode::local_size ? "local_size" : "prototype_count"; }

inline BudgetMode budget_mode_from_string(const std::string& s) {
    if (s == "local_size") return BudgetMode::local_size;
    if (s == "prototype_count") return BudgetMode::prototype_count;
    throw Error("unknown budget mode '" + s + "' (expected local_size or prototype_count)");
}

struct AugmentationPolicy {
    double target_fraction = 0.10;
    Eligibility eligible = Eligibility::below_mean_count;
    BudgetMode budget = BudgetMode::local_size;
    std::uint64_t seed = 0;

    bool operator==(const AugmentationPolicy&) const = default;

    void validate() const {
        require(target_fraction > 0.0 && target_fraction <= 1.0, "augmentation: target_fraction must be in (0,1]");
    }
};

/// a + lambda * (b - a), exact at both endpoints.
inline Vector smote_pair(const Vector& a, const Vector& b, double lambda) {
    require(a.size() == b.size(), "smote_pair: length mismatch (" + std::to_string(a.size()) + " vs " +
                                      std::to_string(b.size()) + ")");
    require(lambda >= 0.0 && lambda <= 1.0, "smote_pair: lambda must be in [0,1]");
    Vector out(a.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        out(i) = std::lerp(a(i), b(i), lambda);
    }
    return out;
}

struct AugmentationPlan {
    std::size_t budget = 0;
    std::map<int, std::size_t> per_class;  // synthetic rows per eligible class
};

/// Budget B = round(fraction * base), split evenly over the eligible classes
/// with the remainder going to the locally rarest one.
inline AugmentationPlan plan_augmentation(const Dataset& local, const GlobalPrototypes& gp,
                                          const AugmentationPolicy& policy) {
    policy.validate();
    require(!local.empty(), "augment: empty local dataset");
    require(!gp.centroids.empty(), "augment: global prototypes cover no class");
    const auto counts = local.class_counts();
    const double mean = static_cast<double>(local.size()) / static_cast<double>(counts.size());
    std::vector<int> eligible;
    for (std::size_t c = 0; c < counts.size(); ++c) {
        bool pick = false;
        switch (policy.eligible) {
            case Eligibility::missing_only: pick = counts[c] == 0; break;
            case Eligibility::below_mean_count: pick = static_cast<double>(counts[c]) < mean; break;
            case Eligibility::all: pick = true; break;
        }
        if (pick) {
            require(gp.count(static_cast<int>(c)) > 0,
                    "augment: class " + std::to_string(c) + " is eligible but has no global prototypes");
            eligible.push_back(static_cast<int>(c));
        }
    }
    AugmentationPlan plan;
    if (eligible.empty()) {
        return plan;
    }
    const double base = policy.budget == BudgetMode::local_size ? static_cast<double>(local.size())
                                                                : static_cast<double>(gp.total_count());
    plan.budget = static_cast<std::size_t>(std::llround(policy.target_fraction * base));
    const std::size_t share = plan.budget / eligible.size();
    int rarest = eligible.front();
    for (int c : eligible) {
        plan.per_class[c] = share;
        if (counts[static_cast<std::size_t>(c)] < counts[static_cast<std::size_t>(rarest)]) {
            rarest = c;
        }
    }
    plan.per_class[rarest] += plan.budget - share * eligible.size();
    return plan;
}

/// Appends the planned synthetic rows (variant -1). Each row interpolates a
/// seeded pair of distinct prototypes of its class with lambda ~ U(0,1); a
/// class with a single prototype gets that prototype plus N(0, sigma^2) jitter.
inline Dataset augment(const Dataset& local, const GlobalPrototypes& gp, const AugmentationPolicy& policy) {
    const auto plan = plan_augmentation(local, gp, policy);
    if (plan.budget == 0) {
        return local;
    }
    Dataset synth;
    synth.class_names = local.class_names;
    synth.features.resize(static_cast<Eigen::Index>(plan.budget), local.features.cols());
    synth.labels.reserve(plan.budget);
    synth.variants.assign(plan.budget, -1);
    Eigen::Index row = 0;
    for (const auto& [c, count] : plan.per_class) {
        const auto& protos = gp.centroids.at(c);
        Rng rng = make_rng(policy.seed, Stream::smote, {static_cast<std::uint64_t>(c)});
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> jitter(0.0, 1.0);
        for (std::size_t s = 0; s < count; ++s, ++row) {
            require(static_cast<std::size_t>(protos.front().size()) == local.dims(),
                    "augment: prototype dimension does not match local features");
            Vector x;
            if (protos.size() >= 2) {
                std::uniform_int_distribution<std::size_t> first(0, protos.size() - 1);
                std::uniform_int_distribution<std::size_t> second(0, protos.size() - 2);
                const std::size_t a = first(rng);
                std::size_t b = second(rng);
                if (b >= a) {
                    ++b;
                }
                x = smote_pair(protos[a], protos[b], unit(rng));
            } else {
                x = protos.front();
                for (Eigen::Index d = 0; d < x.size(); ++d) {
                    x(d) += gp.noise_sigma * jitter(rng);
                }
            }
            synth.features.row(row) = x.transpose();
            synth.labels.push_back(c);
        }
    }
    return Dataset::concat(local, synth);
}

}  // namespace fedp3e

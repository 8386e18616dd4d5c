#pragma once

// Server-side consolidation of uploaded prototypes: points are grouped by
// class, canonically ordered, and reclustered with mini-batch k-means into a
// small set of global prototypes per class.

#include <algorithm>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedp3e/detail/clustering.hpp"
#include "fedp3e/gmmproto.hpp"
#include "fedp3e/random.hpp"
#include "fedp3e/types.hpp"

namespace fedp3e {

/// Mini-batch k-means: k-means++ seeding, then per iteration a seeded batch
/// (without replacement) is assigned to the nearest centers, and each center
/// moves toward its points with step 1 / (points it has absorbed so far).
inline Matrix minibatch_kmeans(const Matrix& points, std::size_t k, std::size_t batch, std::size_t iters,
                               std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(points.rows());
    require(k >= 1, "minibatch_kmeans: k must be >= 1");
    require(k <= n, "minibatch_kmeans: k (" + std::to_string(k) + ") exceeds the number of points (" +
                        std::to_string(n) + ")");
    require(batch >= 1, "minibatch_kmeans: batch must be >= 1");
    batch = std::min(batch, n);
    Rng rng = make_rng(seed, Stream::kmeans);
    Matrix centers = detail::kmeans_plus_plus(points, k, rng);
    std::vector<std::size_t> counts(k, 0);
    std::vector<std::size_t> order(n);
    std::vector<std::size_t> assign(batch);
    for (std::size_t it = 0; it < iters; ++it) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = 0; i < batch; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n - 1);
            std::swap(order[i], order[pick(rng)]);
        }
        for (std::size_t i = 0; i < batch; ++i) {
            assign[i] = detail::nearest_center(centers, points.row(static_cast<Eigen::Index>(order[i])));
        }
        for (std::size_t i = 0; i < batch; ++i) {
            const std::size_t c = assign[i];
            ++counts[c];
            const double eta = 1.0 / static_cast<double>(counts[c]);
            auto center = centers.row(static_cast<Eigen::Index>(c));
            center += eta * (points.row(static_cast<Eigen::Index>(order[i])) - center);
        }
    }
    return centers;
}

/// Number of global prototypes for a class that received `received` points:
/// min(ceil(received * num / den), received, cap), at least 1.
struct CentroidRule {
    std::size_t num = 4;
    std::size_t den = 9;
    std::size_t cap = 4;

    bool operator==(const CentroidRule&) const = default;
};

inline std::size_t choose_centroid_count(std::size_t received, const CentroidRule& rule = {}) {
    require(received >= 1, "choose_centroid_count: need at least one prototype");
    require(rule.den >= 1 && rule.cap >= 1, "choose_centroid_count: invalid rule");
    const std::size_t scaled = (received * rule.num + rule.den - 1) / rule.den;
    return std::max<std::size_t>(1, std::min({scaled, received, rule.cap}));
}

struct AggregationOptions {
    CentroidRule rule;
    std::size_t max_batch = 32;
    std::size_t iterations = 100;

    bool operator==(const AggregationOptions&) const = default;
};

struct GlobalPrototypes {
    std::map<int, std::vector<Vector>> centroids;
    std::map<int, std::size_t> contributors;  // distinct clients per class
    double noise_sigma = 0.0;                 // largest sigma among the uploads

    std::vector<int> classes() const {
        std::vector<int> out;
        for (const auto& [c, _] : centroids) {
            out.push_back(c);
        }
        return out;
    }

    std::size_t count(int class_id) const {
        auto it = centroids.find(class_id);
        return it == centroids.end() ? 0 : it->second.size();
    }

    std::size_t total_count() const {
        std::size_t n = 0;
        for (const auto& [_, vs] : centroids) {
            n += vs.size();
        }
        return n;
    }

    std::size_t float_count() const {
        std::size_t n = 0;
        for (const auto& [_, vs] : centroids) {
            for (const auto& v : vs) {
                n += static_cast<std::size_t>(v.size());
            }
        }
        return n;
    }
};

/// Groups every uploaded entry by class and reclusters each class separately.
/// Per-class points are sorted lexicographically first, so the result does not
/// depend on the order the uploads arrive in.
inline GlobalPrototypes aggregate(std::span<const PrototypeSet> uploads, std::uint64_t seed,
                                  const AggregationOptions& opt = {}) {
    std::map<int, std::vector<Vector>> grouped;
    std::map<int, std::vector<int>> clients;
    GlobalPrototypes gp;
    for (const auto& ps : uploads) {
        gp.noise_sigma = std::max(gp.noise_sigma, ps.noise_sigma);
        for (const auto& e : ps.entries) {
            require(e.vec.allFinite(), "aggregate: non-finite prototype from client " + std::to_string(ps.origin_client));
            grouped[e.class_id].push_back(e.vec);
            clients[e.class_id].push_back(ps.origin_client);
        }
    }
    require(!grouped.empty(), "aggregate: no prototypes received");
    std::size_t dims = static_cast<std::size_t>(grouped.begin()->second.front().size());
    for (auto& [c, pts] : grouped) {
        std::sort(pts.begin(), pts.end(), [](const Vector& a, const Vector& b) {
            return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
        });
        Matrix m(static_cast<Eigen::Index>(pts.size()), static_cast<Eigen::Index>(dims));
        for (std::size_t i = 0; i < pts.size(); ++i) {
            require(static_cast<std::size_t>(pts[i].size()) == dims, "aggregate: prototype dimension mismatch");
            m.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
        }
        const std::size_t k = choose_centroid_count(pts.size(), opt.rule);
        const Matrix centers = minibatch_kmeans(m, k, std::min(opt.max_batch, pts.size()), opt.iterations,
                                                derive_seed(seed, Stream::kmeans, {static_cast<std::uint64_t>(c)}));
        auto& out = gp.centroids[c];
        for (Eigen::Index r = 0; r < centers.rows(); ++r) {
            out.push_back(centers.row(r).transpose());
        }
        auto& ids = clients[c];
        std::sort(ids.begin(), ids.end());
        gp.contributors[c] = static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
    }
    return gp;
}

/// {"<class>": [[...], ...], ...}
inline nlohmann::json to_json(const GlobalPrototypes& gp) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [c, vs] : gp.centroids) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& v : vs) {
            arr.push_back(std::vector<double>(v.data(), v.data() + v.size()));
        }
        j[std::to_string(c)] = arr;
    }
    return j;
}

inline GlobalPrototypes global_prototypes_from_json(const nlohmann::json& j, double noise_sigma = 0.0) {
    GlobalPrototypes gp;
    gp.noise_sigma = noise_sigma;
    for (const auto& [key, arr] : j.items()) {
        auto& out = gp.centroids[std::stoi(key)];
        for (const auto& v : arr) {
            const auto vals = v.get<std::vector<double>>();
            out.push_back(Eigen::Map<const Vector>(vals.data(), static_cast<Eigen::Index>(vals.size())));
        }
    }
    return gp;
}

inline std::size_t count_global_vector_floats(const nlohmann::json& j) {
    std::size_t n = 0;
    for (const auto& [_, arr] : j.items()) {
        for (const auto& v : arr) {
            n += v.size();
        }
    }
    return n;
}

}  // namespace fedp3e

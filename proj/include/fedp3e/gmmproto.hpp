#pragma once

// Client-side prototypes: per-class Gaussian mixtures fitted by EM, the
// component count chosen by BIC, component means extracted as prototypes and
// perturbed with isotropic Gaussian noise before upload.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedp3e/datakit.hpp"
#include "fedp3e/detail/clustering.hpp"
#include "fedp3e/random.hpp"
#include "fedp3e/types.hpp"

namespace fedp3e {

enum class CovarianceType { diagonal, full };

struct EmOptions {
    double tol = 1e-4;  // on the per-sample mean log-likelihood
    std::size_t max_iter = 200;
    double reg_floor = 1e-6;
    CovarianceType covariance = CovarianceType::diagonal;
    // Called after every E-step with the iteration index and responsibilities.
    std::function<void(std::size_t, const Eigen::MatrixXd&)> observer;
};

struct GmmModel {
    CovarianceType covariance = CovarianceType::diagonal;
    Vector weights;                         // K, on the simplex
    Matrix means;                           // K x d
    Matrix variances;                       // K x d (diagonal covariance)
    std::vector<Eigen::MatrixXd> full_covs; // K x (d x d) (full covariance)
    double log_likelihood = 0.0;            // total over the fitted samples
    std::vector<double> history;            // total log-likelihood per E-step
    std::size_t n_samples = 0;
    std::size_t iterations = 0;
    bool converged = false;

    std::size_t components() const { return static_cast<std::size_t>(means.rows()); }
    std::size_t dims() const { return static_cast<std::size_t>(means.cols()); }

    std::size_t free_parameters() const {
        const std::size_t k = components();
        const std::size_t d = dims();
        const std::size_t cov = covariance == CovarianceType::diagonal ? k * d : k * d * (d + 1) / 2;
        return (k - 1) + k * d + cov;
    }
};

/// p * ln(n) - 2 * ln(L); lower is better.
inline double bic(double log_likelihood, std::size_t free_parameters, std::size_t n) {
    return static_cast<double>(free_parameters) * std::log(static_cast<double>(n)) - 2.0 * log_likelihood;
}

inline double bic(const GmmModel& m) { return bic(m.log_likelihood, m.free_parameters(), m.n_samples); }

namespace detail {

/// Per-sample, per-component log(pi_k * N(x; mu_k, Sigma_k)).
inline Eigen::MatrixXd weighted_log_densities(const GmmModel& m, const Matrix& x) {
    const auto n = x.rows();
    const auto k = static_cast<Eigen::Index>(m.components());
    const double d = static_cast<double>(m.dims());
    const double log2pi = std::log(2.0 * std::numbers::pi);
    Eigen::MatrixXd out(n, k);
    for (Eigen::Index c = 0; c < k; ++c) {
        const double log_w = std::log(m.weights(c));
        if (m.covariance == CovarianceType::diagonal) {
            const Eigen::RowVectorXd var = m.variances.row(c);
            const double log_det = var.array().log().sum();
            const Eigen::RowVectorXd inv = var.cwiseInverse();
            for (Eigen::Index i = 0; i < n; ++i) {
                const double maha = ((x.row(i) - m.means.row(c)).array().square() * inv.array()).sum();
                out(i, c) = log_w - 0.5 * (d * log2pi + log_det + maha);
            }
        } else {
            Eigen::LLT<Eigen::MatrixXd> llt(m.full_covs[static_cast<std::size_t>(c)]);
            require(llt.info() == Eigen::Success, "em_fit: covariance not positive definite");
            const Eigen::MatrixXd l = llt.matrixL();
            const double log_det = 2.0 * l.diagonal().array().log().sum();
            for (Eigen::Index i = 0; i < n; ++i) {
                Eigen::VectorXd diff = (x.row(i) - m.means.row(c)).transpose();
                const double maha = llt.matrixL().solve(diff).squaredNorm();
                out(i, c) = log_w - 0.5 * (d * log2pi + log_det + maha);
            }
        }
    }
    return out;
}

/// Responsibilities (rows on the simplex) and the total log-likelihood.
inline double e_step(const GmmModel& m, const Matrix& x, Eigen::MatrixXd& resp) {
    resp = weighted_log_densities(m, x);
    double total = 0.0;
    for (Eigen::Index i = 0; i < resp.rows(); ++i) {
        const double mx = resp.row(i).maxCoeff();
        const double lse = mx + std::log((resp.row(i).array() - mx).exp().sum());
        resp.row(i) = (resp.row(i).array() - lse).exp().matrix();
        total += lse;
    }
    return total;
}

inline void m_step(GmmModel& m, const Matrix& x, const Eigen::MatrixXd& resp, double floor) {
    const auto k = resp.cols();
    Eigen::VectorXd nk = resp.colwise().sum().transpose();
    nk.array() += 10.0 * std::numeric_limits<double>::epsilon();
    m.weights = nk / nk.sum();
    for (Eigen::Index c = 0; c < k; ++c) {
        Eigen::RowVectorXd mu = (resp.col(c).transpose() * x) / nk(c);
        m.means.row(c) = mu;
        Matrix centered = x.rowwise() - mu;
        if (m.covariance == CovarianceType::diagonal) {
            Eigen::RowVectorXd var = (resp.col(c).transpose() * centered.array().square().matrix()) / nk(c);
            m.variances.row(c) = var.cwiseMax(floor);
        } else {
            Eigen::MatrixXd cov = (centered.transpose() * resp.col(c).asDiagonal() * centered) / nk(c);
            cov.diagonal().array() += floor;
            m.full_covs[static_cast<std::size_t>(c)] = cov;
        }
    }
}

}  // namespace detail

/// Responsibility matrix of a fitted model for the rows of x.
inline Eigen::MatrixXd responsibilities(const GmmModel& m, const Matrix& x) {
    Eigen::MatrixXd resp;
    detail::e_step(m, x, resp);
    return resp;
}

inline double log_likelihood(const GmmModel& m, const Matrix& x) {
    Eigen::MatrixXd resp;
    return detail::e_step(m, x, resp);
}

/// EM with k-means++ mean seeding, shared data variance and uniform weights at
/// start. Stops when the mean log-likelihood gain drops below tol. The returned
/// parameters are those whose log-likelihood was last evaluated.
inline GmmModel em_fit(const Matrix& x, std::size_t k, std::uint64_t seed, const EmOptions& opt = {}) {
    const auto n = static_cast<std::size_t>(x.rows());
    require(k >= 1, "em_fit: K must be >= 1");
    require(k <= n, "em_fit: K (" + std::to_string(k) + ") exceeds the number of rows (" + std::to_string(n) + ")");
    require(x.allFinite(), "em_fit: non-finite input");
    require(opt.reg_floor > 0.0, "em_fit: reg_floor must be > 0");

    Rng rng = make_rng(seed, Stream::gmm);
    GmmModel m;
    m.covariance = opt.covariance;
    m.n_samples = n;
    m.means = detail::kmeans_plus_plus(x, k, rng);
    m.weights = Vector::Constant(static_cast<Eigen::Index>(k), 1.0 / static_cast<double>(k));
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const Matrix centered = x.rowwise() - mean;
    if (opt.covariance == CovarianceType::diagonal) {
        const Eigen::RowVectorXd var = (centered.array().square().colwise().sum() / static_cast<double>(n)).matrix();
        m.variances = var.cwiseMax(opt.reg_floor).replicate(static_cast<Eigen::Index>(k), 1);
    } else {
        Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
        cov.diagonal().array() += opt.reg_floor;
        m.full_covs.assign(k, cov);
    }

    Eigen::MatrixXd resp;
    double prev = -std::numeric_limits<double>::infinity();
    for (std::size_t it = 0;; ++it) {
        const double ll = detail::e_step(m, x, resp);
        m.history.push_back(ll);
        m.log_likelihood = ll;
        m.iterations = it;
        if (opt.observer) {
            opt.observer(it, resp);
        }
        if (it > 0 && (ll - prev) / static_cast<double>(n) < opt.tol) {
            m.converged = true;
            break;
        }
        if (it == opt.max_iter) {
            break;
        }
        prev = ll;
        detail::m_step(m, x, resp, opt.reg_floor);
    }
    return m;
}

struct BicSelection {
    std::size_t best_k = 1;
    GmmModel model;
    std::vector<double> table;  // BIC for K = 1..table.size()
};

/// Fits K = 1..min(k_max, rows) and keeps the smallest BIC, ties to smaller K.
inline BicSelection select_k_bic(const Matrix& x, std::size_t k_max, std::uint64_t seed, const EmOptions& opt = {}) {
    require(x.rows() >= 1, "select_k_bic: empty input");
    require(k_max >= 1, "select_k_bic: k_max must be >= 1");
    const auto n = static_cast<std::size_t>(x.rows());
    const std::size_t upper = n < 2 ? 1 : std::min(k_max, n);
    BicSelection best;
    double best_score = std::numeric_limits<double>::infinity();
    for (std::size_t k = 1; k <= upper; ++k) {
        GmmModel m = em_fit(x, k, derive_seed(seed, {k}), opt);
        const double score = bic(m);
        best.table.push_back(score);
        if (score < best_score) {
            best_score = score;
            best.best_k = k;
            best.model = std::move(m);
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Prototypes

struct Prototype {
    int class_id = 0;
    Vector vec;

    bool operator==(const Prototype& o) const { return class_id == o.class_id && vec == o.vec; }
};

struct PrototypeSet {
    std::vector<Prototype> entries;
    double noise_sigma = 0.0;
    int origin_client = -1;

    std::size_t float_count() const {
        std::size_t n = 0;
        for (const auto& e : entries) {
            n += static_cast<std::size_t>(e.vec.size());
        }
        return n;
    }

    /// Component count per class, in class order.
    std::map<int, std::size_t> per_class() const {
        std::map<int, std::size_t> out;
        for (const auto& e : entries) {
            ++out[e.class_id];
        }
        return out;
    }

    bool operator==(const PrototypeSet&) const = default;
};

inline PrototypeSet extract_prototypes(const GmmModel& model, int class_id) {
    PrototypeSet ps;
    for (Eigen::Index j = 0; j < model.means.rows(); ++j) {
        ps.entries.push_back({class_id, model.means.row(j).transpose()});
    }
    return ps;
}

/// Adds N(0, sigma^2) to every coordinate. The noise of entry i is drawn from
/// its own stream keyed by (seed, i).
inline PrototypeSet perturb(const PrototypeSet& ps, double sigma, std::uint64_t seed) {
    require(sigma >= 0.0 && std::isfinite(sigma), "perturb: sigma must be a finite value >= 0");
    PrototypeSet out = ps;
    out.noise_sigma = sigma;
    if (sigma == 0.0) {
        return out;
    }
    for (std::size_t i = 0; i < out.entries.size(); ++i) {
        Rng rng = make_rng(seed, Stream::perturb, {i});
        std::normal_distribution<double> noise(0.0, sigma);
        for (Eigen::Index d = 0; d < out.entries[i].vec.size(); ++d) {
            out.entries[i].vec(d) += noise(rng);
        }
    }
    return out;
}

struct PrototypeOptions {
    std::size_t k_max = 5;
    EmOptions em;
};

/// The upload of one client: BIC-selected mixtures for every local class,
/// component means perturbed with sigma.
inline PrototypeSet build_client_prototypes(const Dataset& train, int client, double sigma,
                                            const PrototypeOptions& opt, std::uint64_t seed) {
    PrototypeSet all;
    all.origin_client = client;
    const auto counts = train.class_counts();
    for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0) {
            continue;
        }
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < train.size(); ++i) {
            if (static_cast<std::size_t>(train.labels[i]) == c) {
                rows.push_back(i);
            }
        }
        const Matrix xc = train.subset(rows).features;
        auto sel = select_k_bic(xc, opt.k_max, derive_seed(seed, Stream::gmm, {c}), opt.em);
        auto ps = extract_prototypes(sel.model, static_cast<int>(c));
        all.entries.insert(all.entries.end(), ps.entries.begin(), ps.entries.end());
    }
    auto out = perturb(all, sigma, derive_seed(seed, Stream::perturb));
    out.origin_client = client;
    return out;
}

inline nlohmann::json to_json(const PrototypeSet& ps) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : ps.entries) {
        entries.push_back({{"class", e.class_id}, {"vector", std::vector<double>(e.vec.data(), e.vec.data() + e.vec.size())}});
    }
    return {{"client", ps.origin_client}, {"sigma", ps.noise_sigma}, {"entries", entries}};
}

inline PrototypeSet prototype_set_from_json(const nlohmann::json& j) {
    PrototypeSet ps;
    ps.origin_client = j.at("client").get<int>();
    ps.noise_sigma = j.at("sigma").get<double>();
    for (const auto& e : j.at("entries")) {
        const auto v = e.at("vector").get<std::vector<double>>();
        ps.entries.push_back({e.at("class").get<int>(), Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()))});
    }
    return ps;
}

/// Number of vector coordinates carried by a serialized PrototypeSet.
inline std::size_t count_vector_floats(const nlohmann::json& prototype_set) {
    std::size_t n = 0;
    for (const auto& e : prototype_set.at("entries")) {
        n += e.at("vector").size();
    }
    return n;
}

}  // namespace fedp3e

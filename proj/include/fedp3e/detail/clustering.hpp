#pragma once

#include <algorithm>
#include <limits>
#include <vector>

#include "fedp3e/random.hpp"
#include "fedp3e/types.hpp"

namespace fedp3e::detail {

/// k-means++ seeding: first center uniform, the rest by squared-distance
/// weighting. When every remaining distance is zero the first unused row is taken.
inline Matrix kmeans_plus_plus(const Matrix& points, std::size_t k, Rng& rng) {
    const auto n = static_cast<std::size_t>(points.rows());
    require(k >= 1 && k <= n, "k-means++: need 1 <= k <= rows");
    Matrix centers(static_cast<Eigen::Index>(k), points.cols());
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    std::size_t pick = first(rng);
    centers.row(0) = points.row(static_cast<Eigen::Index>(pick));
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) {
        d2[i] = (points.row(static_cast<Eigen::Index>(i)) - centers.row(0)).squaredNorm();
    }
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (double v : d2) {
            total += v;
        }
        if (total > 0.0) {
            const double target = unit(rng) * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > target && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
            while (d2[pick] == 0.0 && pick > 0) {
                --pick;
            }
        } else {
            pick = c % n;
        }
        centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], (points.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(c))).squaredNorm());
        }
    }
    return centers;
}

inline std::size_t nearest_center(const Matrix& centers, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < centers.rows(); ++c) {
        const double d = (centers.row(c) - x).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<std::size_t>(c);
        }
    }
    return best;
}

}  // namespace fedp3e::detail

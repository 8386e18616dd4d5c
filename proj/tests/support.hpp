#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "fedp3e.hpp"

namespace testing_support {

inline std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("fedp3e_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream(p, std::ios::binary) << text;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline fedp3e::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    fedp3e::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = u(rng);
    }
    return m;
}

/// Isotropic blobs around the given centers, `per` rows each.
inline fedp3e::Matrix blobs(const std::vector<std::vector<double>>& centers, std::size_t per, double spread,
                            std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, spread);
    const auto d = static_cast<Eigen::Index>(centers.front().size());
    fedp3e::Matrix x(static_cast<Eigen::Index>(centers.size() * per), d);
    Eigen::Index r = 0;
    for (const auto& c : centers) {
        for (std::size_t i = 0; i < per; ++i, ++r) {
            for (Eigen::Index j = 0; j < d; ++j) {
                x(r, j) = c[static_cast<std::size_t>(j)] + noise(rng);
            }
        }
    }
    return x;
}

/// Dataset whose first feature is the row id, so rows can be traced through
/// partitioning and splitting.
inline fedp3e::Dataset tagged_dataset(const std::vector<std::size_t>& per_class, std::size_t extra_cols = 1,
                                      std::size_t variants = 0) {
    fedp3e::Dataset ds;
    ds.class_names = {};
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        ds.class_names.push_back("c" + std::to_string(c));
    }
    std::size_t n = 0;
    for (auto k : per_class) n += k;
    ds.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(1 + extra_cols));
    std::size_t r = 0;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
        for (std::size_t i = 0; i < per_class[c]; ++i, ++r) {
            ds.features(static_cast<Eigen::Index>(r), 0) = static_cast<double>(r);
            for (std::size_t j = 0; j < extra_cols; ++j) {
                ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(1 + j)) =
                    static_cast<double>(c) + 0.001 * static_cast<double>(i);
            }
            ds.labels.push_back(static_cast<int>(c));
            if (variants > 0) ds.variants.push_back(static_cast<int>(i % variants));
        }
    }
    return ds;
}

inline std::vector<std::size_t> ids_of(const fedp3e::Dataset& ds) {
    std::vector<std::size_t> ids;
    for (Eigen::Index r = 0; r < ds.features.rows(); ++r) {
        ids.push_back(static_cast<std::size_t>(ds.features(r, 0)));
    }
    return ids;
}

}  // namespace testing_support

#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace fedp3e {

/// Sample-major feature storage: one row per sample.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Error raised by every module. Messages name the offending input.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& message) {
    if (!cond) {
        throw Error(message);
    }
}

}  // namespace fedp3e

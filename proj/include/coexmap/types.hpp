#ifndef COEXMAP_TYPES_HPP
#define COEXMAP_TYPES_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <Eigen/SparseCore>

namespace coexmap {

using Scalar = double;
using Index = std::ptrdiff_t;

using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
using IntVec = Eigen::Matrix<std::int64_t, Eigen::Dynamic, 1>;

// UMI counts are kept as 64-bit integers so depth sums cannot overflow.
using Count = std::int64_t;
using CountSpMat = Eigen::SparseMatrix<Count, Eigen::ColMajor, std::int64_t>;

// Error categories map onto CLI exit codes (1 config, 2 data, 3 numeric).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace coexmap

#endif

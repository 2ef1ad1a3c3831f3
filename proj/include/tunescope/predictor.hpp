#pragma once

// Black-box classifier contract: a batch of images in, one row of class
// probabilities per image out.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tunescope/error.hpp"
#include "tunescope/image.hpp"

namespace tunescope {

enum class Concurrency { concurrent_ok, serial_only };

class Predictor {
 public:
  virtual ~Predictor() = default;

  virtual std::size_t class_count() const = 0;
  virtual Concurrency concurrency() const = 0;

  // Returns images.size() x class_count() probability rows.
  virtual Eigen::MatrixXd predict(std::span<const GrayImage> images) const = 0;
};

inline bool is_probability_row(const Eigen::Ref<const Eigen::RowVectorXd>& row, double tol = 1e-6) {
  for (Eigen::Index i = 0; i < row.size(); ++i)
    if (!(row[i] >= 0.0) || !std::isfinite(row[i])) return false;
  return std::abs(row.sum() - 1.0) <= tol;
}

// Throws unless every row is a valid probability row over `classes` classes.
inline void check_probability_rows(const Eigen::MatrixXd& probs, std::size_t rows, std::size_t classes) {
  if (static_cast<std::size_t>(probs.rows()) != rows || static_cast<std::size_t>(probs.cols()) != classes)
    throw Error("predictor returned a " + std::to_string(probs.rows()) + "x" + std::to_string(probs.cols()) +
                " matrix, expected " + std::to_string(rows) + "x" + std::to_string(classes));
  for (Eigen::Index r = 0; r < probs.rows(); ++r)
    if (!is_probability_row(probs.row(r)))
      throw Error("predictor row " + std::to_string(r) + " is not a probability distribution");
}

}  // namespace tunescope

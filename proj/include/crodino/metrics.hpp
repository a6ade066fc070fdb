#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "crodino/core.hpp"

namespace crodino::metrics {

/// counts[g][p]: pixels with ground truth g predicted as p. Ignored pixels
/// are never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::int64_t num_classes, std::int64_t ignore_index = kDefaultIgnore);

  /// pred and gt are integer maps of the same shape. Throws
  /// std::out_of_range for predictions outside {0..C-1} and for ground-truth
  /// values that are neither a class nor the ignore value.
  ConfusionMatrix& accumulate(const torch::Tensor& pred, const torch::Tensor& gt);
  ConfusionMatrix& merge(const ConfusionMatrix& other);

  std::int64_t num_classes() const { return c_; }
  std::int64_t at(std::int64_t gt, std::int64_t pred) const { return counts_[gt * c_ + pred]; }
  std::int64_t& at(std::int64_t gt, std::int64_t pred) { return counts_[gt * c_ + pred]; }
  std::int64_t total() const;

  static ConfusionMatrix from_counts(const std::vector<std::vector<std::int64_t>>& rows);

 private:
  std::int64_t c_;
  std::int64_t ignore_;
  std::vector<std::int64_t> counts_;
};

struct MiouResult {
  double mean;
  std::vector<std::optional<double>> per_class;  // nullopt: empty union, excluded from the mean
};

/// IoU_c = cm[c][c] / (row_c + col_c - cm[c][c]), averaged over classes with
/// a non-empty union. Throws std::domain_error when every class is empty.
MiouResult miou(const ConfusionMatrix& cm);

}  // namespace crodino::metrics

#include "crodino/metrics.hpp"

#include <numeric>
#include <stdexcept>

namespace crodino::metrics {

ConfusionMatrix::ConfusionMatrix(std::int64_t num_classes, std::int64_t ignore_index)
    : c_(num_classes), ignore_(ignore_index), counts_(static_cast<std::size_t>(num_classes * num_classes), 0) {
  if (num_classes < 1) throw std::invalid_argument("confusion matrix needs at least one class");
}

ConfusionMatrix& ConfusionMatrix::accumulate(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) throw ShapeError("prediction and ground-truth maps must be aligned");
  auto p = pred.to(torch::kLong).contiguous().view(-1);
  auto g = gt.to(torch::kLong).contiguous().view(-1);
  const auto* pp = p.data_ptr<std::int64_t>();
  const auto* gp = g.data_ptr<std::int64_t>();
  const auto n = p.numel();
  // Validate first so a bad map leaves the matrix untouched.
  for (std::int64_t i = 0; i < n; ++i) {
    if (gp[i] == ignore_) continue;
    if (gp[i] < 0 || gp[i] >= c_) throw std::out_of_range("ground-truth label " + std::to_string(gp[i]) + " out of range");
    if (pp[i] < 0 || pp[i] >= c_) throw std::out_of_range("prediction " + std::to_string(pp[i]) + " out of range");
  }
  for (std::int64_t i = 0; i < n; ++i)
    if (gp[i] != ignore_) ++counts_[static_cast<std::size_t>(gp[i] * c_ + pp[i])];
  return *this;
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.c_ != c_) throw std::invalid_argument("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0}); }

ConfusionMatrix ConfusionMatrix::from_counts(const std::vector<std::vector<std::int64_t>>& rows) {
  ConfusionMatrix cm(static_cast<std::int64_t>(rows.size()));
  for (std::size_t g = 0; g < rows.size(); ++g) {
    if (rows[g].size() != rows.size()) throw std::invalid_argument("confusion matrix must be square");
    for (std::size_t p = 0; p < rows.size(); ++p) {
      if (rows[g][p] < 0) throw std::invalid_argument("negative count");
      cm.at(static_cast<std::int64_t>(g), static_cast<std::int64_t>(p)) = rows[g][p];
    }
  }
  return cm;
}

MiouResult miou(const ConfusionMatrix& cm) {
  const auto c = cm.num_classes();
  MiouResult r{0.0, std::vector<std::optional<double>>(static_cast<std::size_t>(c))};
  int present = 0;
  for (std::int64_t k = 0; k < c; ++k) {
    std::int64_t row = 0, col = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      row += cm.at(k, j);
      col += cm.at(j, k);
    }
    const auto inter = cm.at(k, k);
    const auto uni = row + col - inter;
    if (uni == 0) continue;
    r.per_class[static_cast<std::size_t>(k)] = static_cast<double>(inter) / static_cast<double>(uni);
    r.mean += *r.per_class[static_cast<std::size_t>(k)];
    ++present;
  }
  if (present == 0) throw std::domain_error("mIoU undefined: every class has an empty union");
  r.mean /= present;
  return r;
}

}  // namespace crodino::metrics

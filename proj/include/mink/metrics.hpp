#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mink/coords.hpp"

namespace mink::metrics {

// confusion[truth][prediction] over rows whose truth is not ignored.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_[truth * classes_ + pred]; }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_[truth * classes_ + pred]; }

  void add(std::span<const std::int32_t> truth, std::span<const std::int32_t> pred,
           std::int32_t ignore_label = kIgnoreLabel) {
    if (truth.size() != pred.size()) throw std::invalid_argument("ConfusionMatrix: truth/prediction size mismatch");
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] == ignore_label) continue;
      if (truth[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes_ || pred[i] < 0 ||
          static_cast<std::size_t>(pred[i]) >= classes_) {
        throw std::invalid_argument("ConfusionMatrix: label out of range at " + std::to_string(i));
      }
      ++at(truth[i], pred[i]);
    }
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes_ != classes_) throw std::invalid_argument("ConfusionMatrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    return *this;
  }

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

struct SegmentationScores {
  std::vector<double> iou;       // NaN for classes absent from truth and prediction
  std::vector<double> accuracy;  // NaN for classes absent from truth
  double miou = 0.0;
  double macc = 0.0;
};

// Classes absent from both truth and prediction are excluded from mIoU;
// classes absent from truth are excluded from mAcc.
inline SegmentationScores score(const ConfusionMatrix& cm) {
  const std::size_t c = cm.classes();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  SegmentationScores s;
  s.iou.assign(c, nan);
  s.accuracy.assign(c, nan);
  double iou_sum = 0.0, acc_sum = 0.0;
  std::size_t iou_n = 0, acc_n = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::uint64_t tp = cm.at(k, k), fn = 0, fp = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (j == k) continue;
      fn += cm.at(k, j);
      fp += cm.at(j, k);
    }
    const std::uint64_t uni = tp + fn + fp;
    if (uni > 0) {
      s.iou[k] = static_cast<double>(tp) / static_cast<double>(uni);
      iou_sum += s.iou[k];
      ++iou_n;
    }
    if (tp + fn > 0) {
      s.accuracy[k] = static_cast<double>(tp) / static_cast<double>(tp + fn);
      acc_sum += s.accuracy[k];
      ++acc_n;
    }
  }
  s.miou = iou_n ? iou_sum / iou_n : 0.0;
  s.macc = acc_n ? acc_sum / acc_n : 0.0;
  return s;
}

// Point predictions from voxel predictions: each point takes its voxel's row.
inline std::vector<std::int32_t> propagate_to_points(std::span<const std::int32_t> voxel_pred,
                                                     std::span<const std::size_t> point_to_row) {
  std::vector<std::int32_t> out(point_to_row.size());
  for (std::size_t i = 0; i < point_to_row.size(); ++i) {
    if (point_to_row[i] >= voxel_pred.size()) throw std::out_of_range("propagate_to_points: row out of range");
    out[i] = voxel_pred[point_to_row[i]];
  }
  return out;
}

template <class T>
std::vector<std::int32_t> argmax_rows(const Matrix<T>& logits) {
  std::vector<std::int32_t> out(logits.rows(), 0);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    out[r] = static_cast<std::int32_t>(best);
  }
  return out;
}

}  // namespace mink::metrics

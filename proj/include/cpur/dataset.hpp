#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cpur/error.hpp"
#include "cpur/numeric.hpp"

namespace cpur {

/// Features (one row per sample) with integer labels in [0, num_classes).
struct LabeledSet {
  Matrix features;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }

  void validate() const {
    if (features.rows() != labels.size()) throw Error(Errc::LengthMismatch, "features vs labels");
    if (num_classes < 2) throw Error(Errc::ConfigError, "need at least 2 classes");
    for (std::size_t y : labels) {
      if (y >= num_classes) throw Error(Errc::LabelOutOfRange, "label " + std::to_string(y));
    }
    if (!all_finite(features.data())) throw Error(Errc::NonFinite, "non-finite feature value");
  }

  /// Rows selected by `idx`, in that order.
  LabeledSet subset(std::span<const std::size_t> idx) const {
    LabeledSet out;
    out.num_classes = num_classes;
    out.features = Matrix(idx.size(), dim());
    out.labels.reserve(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const auto src = features.row(idx[r]);
      std::copy(src.begin(), src.end(), out.features.row(r).begin());
      out.labels.push_back(labels[idx[r]]);
    }
    return out;
  }
};

}  // namespace cpur

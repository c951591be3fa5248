// Confusion counts, accuracy and balance error rate.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dsc/tensor.hpp"

namespace dsc {

struct Confusion {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  [[nodiscard]] std::size_t positives() const { return tp + fn; }
  [[nodiscard]] std::size_t negatives() const { return tn + fp; }
  [[nodiscard]] std::size_t total() const { return tp + tn + fp + fn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// A pixel is predicted shadow iff pred >= threshold.
template <typename T>
Confusion confusion(const Tensor<T>& pred, const Tensor<T>& gt, double threshold = 0.5) {
  require_same_shape(pred.shape(), gt.shape(), "confusion");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  Confusion c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool pos = static_cast<double>(pred[i]) >= threshold;
    if (gt[i] == T(1)) {
      pos ? ++c.tp : ++c.fn;
    } else if (gt[i] == T(0)) {
      pos ? ++c.fp : ++c.tn;
    } else {
      throw ConfigError("confusion: ground truth is not binary");
    }
  }
  return c;
}

inline double accuracy(const Confusion& c) {
  if (c.total() == 0) throw ConfigError("accuracy of an empty image");
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

/// Balance error rate in percent; lower is better. Evaluated as
/// 100 (fn Nn + fp Np) / (2 Np Nn) with one rounding, so representable
/// values come out exact.
inline double ber(const Confusion& c) {
  if (c.positives() == 0 || c.negatives() == 0) {
    throw ConfigError("BER undefined: ground truth lacks one class");
  }
  const auto np = static_cast<std::uint64_t>(c.positives());
  const auto nn = static_cast<std::uint64_t>(c.negatives());
  const std::uint64_t num = 100 * (c.fn * nn + c.fp * np);
  return static_cast<double>(num) / static_cast<double>(2 * np * nn);
}

struct ImageMetrics {
  std::string id;
  Confusion counts;
  double accuracy = 0;
  std::optional<double> ber;  // empty when a class is absent from the ground truth
};

inline ImageMetrics evaluate_image(std::string id, const Confusion& c) {
  ImageMetrics m{std::move(id), c, accuracy(c), std::nullopt};
  if (c.positives() > 0 && c.negatives() > 0) m.ber = ber(c);
  return m;
}

/// Dataset-level summary: per-image means. Images without a defined BER are
/// left out of the BER mean only.
struct Summary {
  std::size_t images = 0;
  std::size_t ber_images = 0;
  double mean_accuracy = 0;
  double mean_ber = 0;
};

inline Summary summarize(const std::vector<ImageMetrics>& rows) {
  Summary s;
  for (const auto& r : rows) {
    ++s.images;
    s.mean_accuracy += r.accuracy;
    if (r.ber) {
      ++s.ber_images;
      s.mean_ber += *r.ber;
    }
  }
  if (s.images > 0) s.mean_accuracy /= static_cast<double>(s.images);
  if (s.ber_images > 0) s.mean_ber /= static_cast<double>(s.ber_images);
  return s;
}

/// CSV with columns image_id,tp,tn,fp,fn,accuracy,ber (ber blank if undefined).
inline void write_metrics_csv(std::ostream& os, const std::vector<ImageMetrics>& rows) {
  os << "image_id,tp,tn,fp,fn,accuracy,ber\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.id << ',' << r.counts.tp << ',' << r.counts.tn << ',' << r.counts.fp << ','
       << r.counts.fn << ',' << r.accuracy << ',';
    if (r.ber) os << *r.ber;
    os << '\n';
  }
}

}  // namespace dsc

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>

namespace ddunet {

enum class Aggregation { per_image_mean, global };

std::string to_string(Aggregation aggregation);
Aggregation parse_aggregation(const std::string& text);

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double f_measure = 0.0;
  double miou = 0.0;
  double iou_cloud = 0.0;
  double iou_sky = 0.0;
  ConfusionCounts counts;  // pooled over every image
  std::size_t n_images = 0;
  Aggregation aggregation = Aggregation::per_image_mean;

  /// `key=value` lines: acc, prec, fbeta, miou, n_images, aggregation, then
  /// iou_cloud, iou_sky, tp, fp, tn, fn.
  std::string to_text() const;
};

MetricsReport parse_metrics_report(const std::string& text);

/// Cloud = 1, sky = 0. Masks are laid out image after image, `pixels_per_image`
/// values each. A ratio whose denominator is empty is 1 when the class it
/// measures is absent from both prediction and label, else 0.
MetricsReport compute_metrics(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels,
                              std::size_t pixels_per_image, Aggregation aggregation = Aggregation::per_image_mean,
                              double beta = 1.0);

}  // namespace ddunet

#include "ddunet/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "ddunet/errors.hpp"

namespace ddunet {
namespace {

// num / den, with the empty-denominator convention.
double ratio(std::uint64_t num, std::uint64_t den, bool class_absent_everywhere) {
  if (den == 0) return class_absent_everywhere ? 1.0 : 0.0;
  return static_cast<double>(num) / static_cast<double>(den);
}

struct ImageScores {
  double accuracy, precision, f_measure, iou_cloud, iou_sky;
};

ImageScores score(const ConfusionCounts& c, double beta) {
  const bool no_cloud = c.tp + c.fp + c.fn == 0;
  const bool no_sky = c.tn + c.fp + c.fn == 0;
  ImageScores s{};
  const std::uint64_t total = c.tp + c.fp + c.tn + c.fn;
  s.accuracy = ratio(c.tp + c.tn, total, true);
  s.precision = ratio(c.tp, c.tp + c.fp, no_cloud);
  const double recall = ratio(c.tp, c.tp + c.fn, no_cloud);
  const double b2 = beta * beta;
  const double den = b2 * s.precision + recall;
  s.f_measure = den > 0.0 ? (1.0 + b2) * s.precision * recall / den : (no_cloud ? 1.0 : 0.0);
  s.iou_cloud = ratio(c.tp, c.tp + c.fp + c.fn, no_cloud);
  s.iou_sky = ratio(c.tn, c.tn + c.fp + c.fn, no_sky);
  return s;
}

}  // namespace

std::string to_string(Aggregation aggregation) {
  return aggregation == Aggregation::global ? "global" : "per_image_mean";
}

Aggregation parse_aggregation(const std::string& text) {
  if (text == "global") return Aggregation::global;
  if (text == "per_image_mean") return Aggregation::per_image_mean;
  throw ConfigError("unknown metrics aggregation '" + text + "'");
}

MetricsReport compute_metrics(std::span<const std::uint8_t> predictions, std::span<const std::uint8_t> labels,
                              std::size_t pixels_per_image, Aggregation aggregation, double beta) {
  if (predictions.size() != labels.size()) {
    throw ShapeError("metrics: " + std::to_string(predictions.size()) + " predicted pixels vs " +
                     std::to_string(labels.size()) + " label pixels");
  }
  if (pixels_per_image == 0 || predictions.size() % pixels_per_image != 0) {
    throw ShapeError("metrics: pixel count is not a whole number of images");
  }
  if (!(beta > 0.0)) throw ConfigError("metrics: beta must be positive");
  MetricsReport report;
  report.aggregation = aggregation;
  report.n_images = predictions.size() / pixels_per_image;
  if (report.n_images == 0) throw DataError("metrics: no images to evaluate");

  double sum_acc = 0, sum_prec = 0, sum_f = 0, sum_iou_c = 0, sum_iou_s = 0;
  for (std::size_t img = 0; img < report.n_images; ++img) {
    ConfusionCounts c;
    for (std::size_t i = img * pixels_per_image; i < (img + 1) * pixels_per_image; ++i) {
      const std::uint8_t p = predictions[i], y = labels[i];
      if (p > 1 || y > 1) {
        throw DataError("metrics: non-binary value at pixel " + std::to_string(i) + " (pred " + std::to_string(p) +
                        ", label " + std::to_string(y) + ")");
      }
      if (p && y) ++c.tp;
      else if (p) ++c.fp;
      else if (y) ++c.fn;
      else ++c.tn;
    }
    report.counts.tp += c.tp;
    report.counts.fp += c.fp;
    report.counts.tn += c.tn;
    report.counts.fn += c.fn;
    const ImageScores s = score(c, beta);
    sum_acc += s.accuracy;
    sum_prec += s.precision;
    sum_f += s.f_measure;
    sum_iou_c += s.iou_cloud;
    sum_iou_s += s.iou_sky;
  }

  if (aggregation == Aggregation::global) {
    const ImageScores s = score(report.counts, beta);
    report.accuracy = s.accuracy;
    report.precision = s.precision;
    report.f_measure = s.f_measure;
    report.iou_cloud = s.iou_cloud;
    report.iou_sky = s.iou_sky;
  } else {
    const double n = static_cast<double>(report.n_images);
    report.accuracy = sum_acc / n;
    report.precision = sum_prec / n;
    report.f_measure = sum_f / n;
    report.iou_cloud = sum_iou_c / n;
    report.iou_sky = sum_iou_s / n;
  }
  report.miou = 0.5 * (report.iou_cloud + report.iou_sky);
  return report;
}

std::string MetricsReport::to_text() const {
  std::ostringstream os;
  char buf[64];
  auto put = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << key << '=' << buf << '\n';
  };
  put("acc", accuracy);
  put("prec", precision);
  put("fbeta", f_measure);
  put("miou", miou);
  os << "n_images=" << n_images << '\n';
  os << "aggregation=" << to_string(aggregation) << '\n';
  put("iou_cloud", iou_cloud);
  put("iou_sky", iou_sky);
  os << "tp=" << counts.tp << "\nfp=" << counts.fp << "\ntn=" << counts.tn << "\nfn=" << counts.fn << '\n';
  return os.str();
}

MetricsReport parse_metrics_report(const std::string& text) {
  MetricsReport r;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "acc") r.accuracy = std::stod(value);
    else if (key == "prec") r.precision = std::stod(value);
    else if (key == "fbeta") r.f_measure = std::stod(value);
    else if (key == "miou") r.miou = std::stod(value);
    else if (key == "n_images") r.n_images = std::stoull(value);
    else if (key == "aggregation") r.aggregation = parse_aggregation(value);
    else if (key == "iou_cloud") r.iou_cloud = std::stod(value);
    else if (key == "iou_sky") r.iou_sky = std::stod(value);
    else if (key == "tp") r.counts.tp = std::stoull(value);
    else if (key == "fp") r.counts.fp = std::stoull(value);
    else if (key == "tn") r.counts.tn = std::stoull(value);
    else if (key == "fn") r.counts.fn = std::stoull(value);
  }
  return r;
}

}  // namespace ddunet

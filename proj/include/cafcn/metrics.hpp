#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cafcn/tensor.hpp"

namespace cafcn {

inline constexpr std::size_t kThresholds = 256;

/// Confusion counts of a map binarised at one threshold.
struct Confusion {
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t fn = 0;
    std::size_t tn = 0;
};

struct PrPoint {
    double precision = 0.0;
    double recall = 0.0;
};

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

/// Per-threshold confusion counts. A pixel is foreground at threshold t when
/// round(255 * s) >= t. Masks must be binary and the same size as the map.
std::array<Confusion, kThresholds> confusion_counts(const Tensor& s, const Tensor& g);

/// Precision of an empty prediction is 1. Throws ValidationError if g has no
/// foreground pixels (recall undefined).
std::vector<PrPoint> pr_curve(const Tensor& s, const Tensor& g);
/// FPR = |S and not G| / |not G| (0 when the mask is all foreground).
std::vector<RocPoint> roc_curve(const Tensor& s, const Tensor& g);

double f_beta(double precision, double recall, double beta_sq = 0.3);

enum class FBetaMode { MaxOverThresholds, Adaptive };

/// Max over the 256 thresholds, or the adaptive variant that binarises at
/// twice the mean saliency.
double f_beta_report(const Tensor& s, const Tensor& g, FBetaMode mode = FBetaMode::MaxOverThresholds,
                     double beta_sq = 0.3);

double mae(const Tensor& s, const Tensor& g);

/// Trapezoidal area, curve ordered by (fpr, tpr) and closed with (0,0) and (1,1).
double auc(std::span<const RocPoint> roc);
/// Trapezoidal area over recall, ordered by (recall asc, precision desc),
/// extended flat to recall 0 at the precision of the lowest-recall point.
double ap(std::span<const PrPoint> pr);

/// Weighted F-measure (beta^2 = 1): absolute errors reweighted by a
/// nearest-foreground dependency kernel and a distance-based importance term.
double f_beta_weighted(const Tensor& s, const Tensor& g);

/// Structure measure alpha * S_region + (1 - alpha) * S_object.
double s_measure(const Tensor& s, const Tensor& g, double alpha = 0.5);
double s_region(const Tensor& s, const Tensor& g);
double s_object(const Tensor& s, const Tensor& g);

struct MetricOptions {
    FBetaMode f_beta_mode = FBetaMode::MaxOverThresholds;
    double beta_sq = 0.3;
    double alpha = 0.5;
};

struct MetricReport {
    double f_beta = 0.0;
    double mae = 0.0;
    double auc = 0.0;
    double ap = 0.0;
    double f_beta_weighted = 0.0;
    double s_measure = 0.0;
    std::vector<PrPoint> pr_curve;   // 256 entries, index = threshold
    std::vector<RocPoint> roc_curve;
    std::size_t images = 0;
    std::size_t skipped_empty_gt = 0;  // excluded from recall-bearing averages
};

MetricReport evaluate(const Tensor& s, const Tensor& g, const MetricOptions& options = {});

/// Per-image metrics averaged arithmetically; curves averaged per threshold.
/// The max F-beta is taken over the averaged curve (adaptive F-beta is averaged).
MetricReport evaluate_dataset(std::span<const std::pair<Tensor, Tensor>> maps,
                              const MetricOptions& options = {});

/// key=value lines in fixed order.
void write_report(std::ostream& os, const MetricReport& report, const MetricOptions& options = {});
/// "threshold,precision,recall,fpr,tpr" header and 256 rows.
void write_curves_csv(std::ostream& os, const MetricReport& report);

}  // namespace cafcn

#pragma once

#include "ibca/autograd.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ibca {

/// Multi-label evaluation summary. Aggregates are percentages in [0, 100];
/// per-class vectors are fractions in [0, 1].
struct MetricsReport {
    double map = 0.0;
    double cr = 0.0;
    double cf1 = 0.0;
    double or_ = 0.0;
    double of1 = 0.0;
    double threshold = 0.5;

    std::vector<std::optional<double>> per_class_ap;  ///< empty where the class has no positives
    std::vector<double> per_class_precision;
    std::vector<double> per_class_recall;
    std::vector<double> per_class_f1;
    /// Classes with no positive labels; excluded from mAP, CR and CF1.
    std::vector<int> skipped_classes;
    std::size_t n_samples = 0;
};

/// Mean of precision at the rank of each positive; scores sorted descending,
/// ties broken by index. Returns nullopt when there are no positives.
std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels);

/// probabilities and labels are n x N_c; labels hold 0/1.
MetricsReport evaluate(const Matrix& probabilities, const Matrix& labels, double threshold = 0.5);

/// "metric value" lines followed by the per-class table.
std::string format_report(const MetricsReport& report, const std::vector<std::string>& class_names = {});
/// Header `CR,CF1,OR,OF1,mAP` and one value row.
std::string report_csv(const MetricsReport& report);
/// class,ap,precision,recall,f1 rows.
std::string per_class_csv(const MetricsReport& report, const std::vector<std::string>& class_names = {});

}  // namespace ibca

#include "ibca/metrics.hpp"

#include "ibca/errors.hpp"

#include <algorithm>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ibca {

std::optional<double> average_precision(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ShapeError("average_precision: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    std::size_t hits = 0;
    double precision_sum = 0.0;
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        if (labels[order[rank]] != 0) {
            ++hits;
            precision_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    if (hits == 0) return std::nullopt;
    return precision_sum / static_cast<double>(hits);
}

namespace {

double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

double harmonic(double p, double r) { return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

MetricsReport evaluate(const Matrix& probabilities, const Matrix& labels, double threshold) {
    if (probabilities.rows() == 0 || probabilities.cols() == 0) throw ShapeError("evaluate: empty input");
    if (probabilities.rows() != labels.rows() || probabilities.cols() != labels.cols()) {
        throw ShapeError("evaluate: probabilities and labels differ in shape");
    }
    const Eigen::Index n = probabilities.rows();
    const Eigen::Index nc = probabilities.cols();

    MetricsReport r;
    r.threshold = threshold;
    r.n_samples = static_cast<std::size_t>(n);
    r.per_class_ap.resize(static_cast<std::size_t>(nc));
    r.per_class_precision.resize(static_cast<std::size_t>(nc));
    r.per_class_recall.resize(static_cast<std::size_t>(nc));
    r.per_class_f1.resize(static_cast<std::size_t>(nc));

    double tp_all = 0.0, fp_all = 0.0, fn_all = 0.0;
    double ap_sum = 0.0, recall_sum = 0.0, f1_sum = 0.0;
    int active = 0;
    std::vector<double> scores(static_cast<std::size_t>(n));
    std::vector<int> truth(static_cast<std::size_t>(n));
    for (Eigen::Index k = 0; k < nc; ++k) {
        double tp = 0.0, fp = 0.0, fn = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const bool pos = labels(i, k) > 0.5;
            const bool pred = probabilities(i, k) >= threshold;
            tp += (pos && pred) ? 1.0 : 0.0;
            fp += (!pos && pred) ? 1.0 : 0.0;
            fn += (pos && !pred) ? 1.0 : 0.0;
            scores[static_cast<std::size_t>(i)] = probabilities(i, k);
            truth[static_cast<std::size_t>(i)] = pos ? 1 : 0;
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn;
        const auto ks = static_cast<std::size_t>(k);
        r.per_class_precision[ks] = safe_ratio(tp, tp + fp);
        r.per_class_recall[ks] = safe_ratio(tp, tp + fn);
        r.per_class_f1[ks] = harmonic(r.per_class_precision[ks], r.per_class_recall[ks]);
        r.per_class_ap[ks] = average_precision(scores, truth);
        if (!r.per_class_ap[ks]) {
            r.skipped_classes.push_back(static_cast<int>(k));
            continue;
        }
        ++active;
        ap_sum += *r.per_class_ap[ks];
        recall_sum += r.per_class_recall[ks];
        f1_sum += r.per_class_f1[ks];
    }
    if (active > 0) {
        r.map = 100.0 * ap_sum / active;
        r.cr = 100.0 * recall_sum / active;
        r.cf1 = 100.0 * f1_sum / active;
    }
    const double op = safe_ratio(tp_all, tp_all + fp_all);
    const double orc = safe_ratio(tp_all, tp_all + fn_all);
    r.or_ = 100.0 * orc;
    r.of1 = 100.0 * harmonic(op, orc);
    return r;
}

namespace {

std::string class_name(const std::vector<std::string>& names, std::size_t k) {
    return k < names.size() ? names[k] : "class_" + std::to_string(k);
}

}  // namespace

std::string format_report(const MetricsReport& report, const std::vector<std::string>& class_names) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "CR " << report.cr << "\n"
       << "CF1 " << report.cf1 << "\n"
       << "OR " << report.or_ << "\n"
       << "OF1 " << report.of1 << "\n"
       << "mAP " << report.map << "\n";
    os << std::setprecision(4);
    os << "\nclass            AP      P       R       F1\n";
    for (std::size_t k = 0; k < report.per_class_f1.size(); ++k) {
        os << std::left << std::setw(16) << class_name(class_names, k) << std::right << " ";
        if (report.per_class_ap[k]) os << std::setw(6) << *report.per_class_ap[k];
        else os << std::setw(6) << "n/a";
        os << "  " << report.per_class_precision[k] << "  " << report.per_class_recall[k] << "  "
           << report.per_class_f1[k] << "\n";
    }
    if (!report.skipped_classes.empty()) {
        os << "\nclasses without positives (excluded from mAP/CR/CF1):";
        for (int k : report.skipped_classes) os << " " << class_name(class_names, static_cast<std::size_t>(k));
        os << "\n";
    }
    return os.str();
}

std::string report_csv(const MetricsReport& report) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "CR,CF1,OR,OF1,mAP\n"
       << report.cr << "," << report.cf1 << "," << report.or_ << "," << report.of1 << "," << report.map << "\n";
    return os.str();
}

std::string per_class_csv(const MetricsReport& report, const std::vector<std::string>& class_names) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "class,ap,precision,recall,f1\n";
    for (std::size_t k = 0; k < report.per_class_f1.size(); ++k) {
        os << class_name(class_names, k) << ",";
        if (report.per_class_ap[k]) os << *report.per_class_ap[k];
        os << "," << report.per_class_precision[k] << "," << report.per_class_recall[k] << ","
           << report.per_class_f1[k] << "\n";
    }
    return os.str();
}

}  // namespace ibca

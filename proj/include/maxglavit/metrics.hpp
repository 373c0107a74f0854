#pragma once

// Confusion-matrix evaluation: accuracy, one-vs-rest precision/recall/F1 with
// weighted or macro averaging, Cohen's kappa, and the table/CSV renderers the
// CLI prints. Weighted recall is evaluated in its algebraically reduced form
// (trace/total), which is exactly the support-weighted mean of per-class
// recalls and is what makes the recall == accuracy identity hold bit-for-bit.

#include <cstdio>
#include <string>
#include <vector>

#include "common.hpp"

namespace maxglavit {

struct ConfusionMatrix {
    int64_t k = 0;
    std::vector<int64_t> counts;           // row-major; rows = true, columns = predicted
    std::vector<std::string> class_names;  // size k, or empty to label by index

    int64_t at(int64_t t, int64_t p) const { return counts[size_t(t * k + p)]; }
    int64_t& at(int64_t t, int64_t p) { return counts[size_t(t * k + p)]; }

    int64_t total() const {
        int64_t n = 0;
        for (int64_t c : counts) n += c;
        return n;
    }
    int64_t row_sum(int64_t t) const {
        int64_t n = 0;
        for (int64_t p = 0; p < k; ++p) n += at(t, p);
        return n;
    }
    int64_t col_sum(int64_t p) const {
        int64_t n = 0;
        for (int64_t t = 0; t < k; ++t) n += at(t, p);
        return n;
    }
    int64_t trace() const {
        int64_t n = 0;
        for (int64_t i = 0; i < k; ++i) n += at(i, i);
        return n;
    }
    std::string class_label(int64_t i) const {
        return class_names.empty() ? std::to_string(i) : class_names[size_t(i)];
    }
};

inline ConfusionMatrix confusion(const std::vector<int64_t>& y_true,
                                 const std::vector<int64_t>& y_pred, int64_t k,
                                 std::vector<std::string> class_names = {}) {
    check(k >= 1, "confusion: class count must be >= 1");
    check(y_true.size() == y_pred.size(),
          "confusion: label lists differ in length, " + std::to_string(y_true.size()) + " vs " +
              std::to_string(y_pred.size()));
    check(class_names.empty() || int64_t(class_names.size()) == k,
          "confusion: class_names size does not match class count");
    ConfusionMatrix cm;
    cm.k = k;
    cm.counts.assign(size_t(k * k), 0);
    cm.class_names = std::move(class_names);
    for (size_t i = 0; i < y_true.size(); ++i) {
        int64_t t = y_true[i], p = y_pred[i];
        check(t >= 0 && t < k, "confusion: true label " + std::to_string(t) +
                                   " out of range [0, " + std::to_string(k) + ")");
        check(p >= 0 && p < k, "confusion: predicted label " + std::to_string(p) +
                                   " out of range [0, " + std::to_string(k) + ")");
        ++cm.at(t, p);
    }
    return cm;
}

inline double accuracy(const ConfusionMatrix& cm) {
    int64_t n = cm.total();
    check(n > 0, "accuracy: empty confusion matrix");
    return double(cm.trace()) / double(n);
}

enum class Averaging { weighted, macro, per_class };

inline const char* averaging_name(Averaging a) {
    switch (a) {
        case Averaging::weighted: return "weighted";
        case Averaging::macro: return "macro";
        case Averaging::per_class: return "per_class";
    }
    return "weighted";
}

inline Averaging averaging_from_name(const std::string& s) {
    if (s == "weighted") return Averaging::weighted;
    if (s == "macro") return Averaging::macro;
    if (s == "per_class") return Averaging::per_class;
    throw std::invalid_argument("unknown averaging mode: " + s);
}

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    int64_t support = 0;
};

struct PrfResult {
    Averaging averaging = Averaging::weighted;
    std::vector<ClassScores> per_class;
    double precision = 0.0;  // aggregate under `averaging`
    double recall = 0.0;
    double f1 = 0.0;
};

// One-vs-rest per class; zero-denominator quantities score 0 and add a
// warning line instead of producing NaN. The `per_class` averaging mode
// reports weighted aggregates (a table row needs them either way).
inline PrfResult precision_recall_f1(const ConfusionMatrix& cm,
                                     Averaging averaging = Averaging::weighted,
                                     std::vector<std::string>* warnings = nullptr) {
    int64_t n = cm.total();
    check(n > 0, "precision_recall_f1: empty confusion matrix");
    auto warn = [&](const std::string& msg) {
        if (warnings) warnings->push_back(msg);
    };
    PrfResult r;
    r.averaging = averaging;
    double prec_acc = 0.0, f1_acc = 0.0;          // support-weighted numerators
    double prec_macro = 0.0, rec_macro = 0.0, f1_macro = 0.0;
    for (int64_t c = 0; c < cm.k; ++c) {
        int64_t tp = cm.at(c, c);
        int64_t pred = cm.col_sum(c);   // tp + fp
        int64_t truth = cm.row_sum(c);  // tp + fn, the support
        ClassScores s;
        s.support = truth;
        if (pred > 0)
            s.precision = double(tp) / double(pred);
        else
            warn("metrics: class " + cm.class_label(c) +
                 " has no predicted samples; precision set to 0");
        if (truth > 0)
            s.recall = double(tp) / double(truth);
        else
            warn("metrics: class " + cm.class_label(c) +
                 " has no true samples; recall set to 0");
        if (s.precision + s.recall > 0.0)
            s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
        else
            warn("metrics: class " + cm.class_label(c) +
                 " has zero precision and recall; f1 set to 0");
        prec_acc += double(truth) * s.precision;
        f1_acc += double(truth) * s.f1;
        prec_macro += s.precision;
        rec_macro += s.recall;
        f1_macro += s.f1;
        r.per_class.push_back(s);
    }
    if (averaging == Averaging::macro) {
        r.precision = prec_macro / double(cm.k);
        r.recall = rec_macro / double(cm.k);
        r.f1 = f1_macro / double(cm.k);
    } else {
        r.precision = prec_acc / double(n);
        r.recall = double(cm.trace()) / double(n);  // == weighted mean of recalls, exactly
        r.f1 = f1_acc / double(n);
    }
    return r;
}

inline double cohen_kappa(const ConfusionMatrix& cm,
                          std::vector<std::string>* warnings = nullptr) {
    int64_t n = cm.total();
    check(n > 0, "cohen_kappa: empty confusion matrix");
    double p0 = double(cm.trace()) / double(n);
    double pe = 0.0;
    for (int64_t c = 0; c < cm.k; ++c)
        pe += double(cm.row_sum(c)) * double(cm.col_sum(c)) / (double(n) * double(n));
    if (pe >= 1.0) {
        if (warnings)
            warnings->push_back("metrics: degenerate chance agreement p_e = 1; kappa set to 0");
        return 0.0;
    }
    return (p0 - pe) / (1.0 - pe);
}

struct MetricReport {
    Averaging averaging = Averaging::weighted;
    std::vector<ClassScores> per_class;
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double kappa = 0.0;
    std::vector<std::string> warnings;
};

inline MetricReport compute_report(const ConfusionMatrix& cm,
                                   Averaging averaging = Averaging::weighted) {
    MetricReport rep;
    rep.averaging = averaging;
    rep.accuracy = accuracy(cm);
    PrfResult prf = precision_recall_f1(cm, averaging, &rep.warnings);
    rep.per_class = std::move(prf.per_class);
    rep.precision = prf.precision;
    rep.recall = prf.recall;
    rep.f1 = prf.f1;
    rep.kappa = cohen_kappa(cm, &rep.warnings);
    return rep;
}

namespace metrics_detail {

inline std::string fmt(const char* spec, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

inline std::string pad_left(const std::string& s, size_t width) {
    return s.size() >= width ? s : std::string(width - s.size(), ' ') + s;
}

}  // namespace metrics_detail

// Single-row summary in the published column order, percentages to 2 decimals.
inline std::string render_table(const MetricReport& rep) {
    static const char* kColumns[] = {"Accuracy", "Precision", "Recall", "F1-score",
                                     "Cohen's kappa"};
    const double values[] = {rep.accuracy, rep.precision, rep.recall, rep.f1, rep.kappa};
    std::string header, row;
    for (size_t i = 0; i < 5; ++i) {
        size_t width = std::string(kColumns[i]).size();
        if (i) {
            header += "  ";
            row += "  ";
        }
        header += kColumns[i];
        row += metrics_detail::pad_left(metrics_detail::fmt("%.2f", values[i] * 100.0), width);
    }
    return header + "\n" + row + "\n";
}

// Per-class block then aggregate block; raw fractions at full precision so the
// file parses back to identical doubles.
inline std::string render_csv(const ConfusionMatrix& cm, const MetricReport& rep) {
    std::string out = "class,precision,recall,f1,support\n";
    for (int64_t c = 0; c < cm.k; ++c) {
        const ClassScores& s = rep.per_class[size_t(c)];
        out += cm.class_label(c) + "," + metrics_detail::fmt("%.17g", s.precision) + "," +
               metrics_detail::fmt("%.17g", s.recall) + "," +
               metrics_detail::fmt("%.17g", s.f1) + "," + std::to_string(s.support) + "\n";
    }
    out += "\nmetric,value\n";
    out += "accuracy," + metrics_detail::fmt("%.17g", rep.accuracy) + "\n";
    out += "precision," + metrics_detail::fmt("%.17g", rep.precision) + "\n";
    out += "recall," + metrics_detail::fmt("%.17g", rep.recall) + "\n";
    out += "f1," + metrics_detail::fmt("%.17g", rep.f1) + "\n";
    out += "kappa," + metrics_detail::fmt("%.17g", rep.kappa) + "\n";
    return out;
}

struct RenderedReport {
    std::string table;
    std::string csv;
};

inline RenderedReport render_report(const ConfusionMatrix& cm,
                                    Averaging averaging = Averaging::weighted) {
    MetricReport rep = compute_report(cm, averaging);
    return {render_table(rep), render_csv(cm, rep)};
}

}  // namespace maxglavit

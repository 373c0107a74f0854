#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <sstream>

#include "helpers.hpp"
#include "maxglavit/metrics.hpp"

using namespace maxglavit;
using mg_test::expect_throws_with;

namespace {

ConfusionMatrix make_cm(int64_t k, std::vector<int64_t> counts,
                        std::vector<std::string> names = {}) {
    ConfusionMatrix cm;
    cm.k = k;
    cm.counts = std::move(counts);
    cm.class_names = std::move(names);
    return cm;
}

// Brute-force per-sample counting oracle: works from the raw label vectors,
// never from the ConfusionMatrix type under test.
struct OracleScores {
    std::vector<double> precision, recall, f1;
    std::vector<int64_t> support;
    double acc = 0, w_prec = 0, w_rec = 0, w_f1 = 0;
    double m_prec = 0, m_rec = 0, m_f1 = 0;
    double kappa = 0;
};

OracleScores brute_force(const std::vector<int64_t>& yt, const std::vector<int64_t>& yp,
                         int64_t k) {
    OracleScores o;
    int64_t n = int64_t(yt.size());
    int64_t agree = 0;
    for (size_t i = 0; i < yt.size(); ++i)
        if (yt[i] == yp[i]) ++agree;
    o.acc = double(agree) / double(n);
    for (int64_t c = 0; c < k; ++c) {
        int64_t tp = 0, fp = 0, fn = 0;
        for (size_t i = 0; i < yt.size(); ++i) {
            if (yt[i] == c && yp[i] == c) ++tp;
            if (yt[i] != c && yp[i] == c) ++fp;
            if (yt[i] == c && yp[i] != c) ++fn;
        }
        double p = tp + fp > 0 ? double(tp) / double(tp + fp) : 0.0;
        double r = tp + fn > 0 ? double(tp) / double(tp + fn) : 0.0;
        double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
        o.precision.push_back(p);
        o.recall.push_back(r);
        o.f1.push_back(f);
        o.support.push_back(tp + fn);
        o.w_prec += double(tp + fn) / double(n) * p;
        o.w_rec += double(tp + fn) / double(n) * r;
        o.w_f1 += double(tp + fn) / double(n) * f;
        o.m_prec += p / double(k);
        o.m_rec += r / double(k);
        o.m_f1 += f / double(k);
    }
    double pe = 0;
    for (int64_t c = 0; c < k; ++c) {
        int64_t row = 0, col = 0;
        for (size_t i = 0; i < yt.size(); ++i) {
            if (yt[i] == c) ++row;
            if (yp[i] == c) ++col;
        }
        pe += double(row) * double(col) / (double(n) * double(n));
    }
    o.kappa = pe >= 1.0 ? 0.0 : (o.acc - pe) / (1.0 - pe);
    return o;
}

}  // namespace

TEST(Confusion, HandTallyAndErrors) {
    ConfusionMatrix cm = confusion({0, 0, 1, 1}, {0, 1, 1, 1}, 2);
    EXPECT_EQ(cm.counts, (std::vector<int64_t>{1, 1, 0, 2}));
    EXPECT_EQ(cm.total(), 4);
    EXPECT_EQ(cm.trace(), 3);
    EXPECT_EQ(cm.row_sum(0), 2);
    EXPECT_EQ(cm.col_sum(1), 3);

    ConfusionMatrix diag = confusion({0, 1, 2, 2}, {0, 1, 2, 2}, 3);
    for (int64_t t = 0; t < 3; ++t)
        for (int64_t p = 0; p < 3; ++p)
            if (t != p) EXPECT_EQ(diag.at(t, p), 0);

    ConfusionMatrix empty = confusion({}, {}, 2);
    EXPECT_EQ(empty.total(), 0);

    expect_throws_with([] { confusion({0, 1}, {0}, 2); }, "differ in length");
    expect_throws_with([] { confusion({0, 2}, {0, 1}, 2); }, "true label 2 out of range");
    expect_throws_with([] { confusion({0, 1}, {0, -1}, 2); }, "predicted label -1 out of range");
}

TEST(Accuracy, HandCases) {
    EXPECT_DOUBLE_EQ(accuracy(make_cm(2, {3, 0, 0, 5})), 1.0);
    EXPECT_DOUBLE_EQ(accuracy(make_cm(2, {1, 1, 0, 2})), 0.75);
    EXPECT_DOUBLE_EQ(accuracy(make_cm(2, {0, 4, 4, 0})), 0.0);
    expect_throws_with([] { accuracy(make_cm(2, {0, 0, 0, 0})); }, "empty confusion matrix");
}

TEST(PrecisionRecallF1, FixtureByHand) {
    ConfusionMatrix cm = make_cm(2, {1, 1, 0, 2});
    PrfResult r = precision_recall_f1(cm, Averaging::per_class);
    ASSERT_EQ(r.per_class.size(), 2u);
    EXPECT_DOUBLE_EQ(r.per_class[0].precision, 1.0);
    EXPECT_DOUBLE_EQ(r.per_class[0].recall, 0.5);
    EXPECT_DOUBLE_EQ(r.per_class[0].f1, 2.0 / 3.0);
    EXPECT_EQ(r.per_class[0].support, 2);
    EXPECT_DOUBLE_EQ(r.per_class[1].precision, 2.0 / 3.0);
    EXPECT_DOUBLE_EQ(r.per_class[1].recall, 1.0);
    EXPECT_DOUBLE_EQ(r.per_class[1].f1, 0.8);
    EXPECT_EQ(r.per_class[1].support, 2);

    PrfResult w = precision_recall_f1(cm, Averaging::weighted);
    EXPECT_DOUBLE_EQ(w.recall, 0.75);
    EXPECT_DOUBLE_EQ(w.recall, accuracy(cm));
    EXPECT_DOUBLE_EQ(w.precision, (2.0 * 1.0 + 2.0 * (2.0 / 3.0)) / 4.0);

    PrfResult m = precision_recall_f1(cm, Averaging::macro);
    EXPECT_DOUBLE_EQ(m.precision, (1.0 + 2.0 / 3.0) / 2.0);
    EXPECT_DOUBLE_EQ(m.recall, 0.75);

    PrfResult perfect = precision_recall_f1(make_cm(2, {3, 0, 0, 5}), Averaging::weighted);
    EXPECT_DOUBLE_EQ(perfect.precision, 1.0);
    EXPECT_DOUBLE_EQ(perfect.recall, 1.0);
    EXPECT_DOUBLE_EQ(perfect.f1, 1.0);
}

TEST(PrecisionRecallF1, ZeroDenominatorsScoreZeroWithWarning) {
    // Class 2 never occurs and is never predicted.
    ConfusionMatrix cm = make_cm(3, {2, 0, 0, 0, 3, 0, 0, 0, 0});
    std::vector<std::string> warnings;
    PrfResult r = precision_recall_f1(cm, Averaging::weighted, &warnings);
    EXPECT_DOUBLE_EQ(r.per_class[2].precision, 0.0);
    EXPECT_DOUBLE_EQ(r.per_class[2].recall, 0.0);
    EXPECT_DOUBLE_EQ(r.per_class[2].f1, 0.0);
    ASSERT_EQ(warnings.size(), 3u);
    EXPECT_NE(warnings[0].find("precision set to 0"), std::string::npos);
    EXPECT_NE(warnings[1].find("recall set to 0"), std::string::npos);
    EXPECT_NE(warnings[2].find("f1 set to 0"), std::string::npos);

    // Class 0 exists but is never predicted: precision warning only.
    warnings.clear();
    precision_recall_f1(make_cm(2, {0, 2, 0, 2}), Averaging::weighted, &warnings);
    ASSERT_EQ(warnings.size(), 2u);
    EXPECT_NE(warnings[0].find("no predicted samples"), std::string::npos);
    EXPECT_NE(warnings[1].find("f1 set to 0"), std::string::npos);
}

TEST(CohenKappa, HandCasesAndDegenerate) {
    EXPECT_DOUBLE_EQ(cohen_kappa(make_cm(2, {3, 0, 0, 5})), 1.0);
    EXPECT_DOUBLE_EQ(cohen_kappa(make_cm(2, {1, 1, 0, 2})), 0.5);

    std::vector<std::string> warnings;
    EXPECT_DOUBLE_EQ(cohen_kappa(make_cm(2, {4, 0, 0, 0}), &warnings), 0.0);
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("kappa set to 0"), std::string::npos);

    expect_throws_with([] { cohen_kappa(make_cm(2, {0, 0, 0, 0})); }, "empty confusion matrix");
}

TEST(CohenKappa, MonteCarloIndependenceNearZero) {
    RngState rng(20260814);
    std::vector<int64_t> yt, yp;
    for (int i = 0; i < 100000; ++i) {
        yt.push_back(rng.below(3));
        yp.push_back(rng.below(3));
    }
    double kappa = cohen_kappa(confusion(yt, yp, 3));
    EXPECT_LT(std::abs(kappa), 0.02);
}

TEST(MetricsOracle, BruteForceAgreementOn200RandomVectors) {
    RngState rng(1234);
    for (int trial = 0; trial < 200; ++trial) {
        int64_t k = 2 + rng.below(4);          // K in [2, 5]
        int64_t n = 1 + rng.below(1000);       // n in [1, 1000]
        std::vector<int64_t> yt, yp;
        for (int64_t i = 0; i < n; ++i) {
            yt.push_back(rng.below(k));
            yp.push_back(rng.below(k));
        }
        ConfusionMatrix cm = confusion(yt, yp, k);
        OracleScores o = brute_force(yt, yp, k);
        MetricReport rep = compute_report(cm, Averaging::weighted);

        EXPECT_NEAR(rep.accuracy, o.acc, 1e-12);
        EXPECT_NEAR(rep.precision, o.w_prec, 1e-12);
        EXPECT_NEAR(rep.recall, o.w_rec, 1e-12);
        EXPECT_NEAR(rep.f1, o.w_f1, 1e-12);
        EXPECT_NEAR(rep.kappa, o.kappa, 1e-12);
        for (int64_t c = 0; c < k; ++c) {
            EXPECT_NEAR(rep.per_class[c].precision, o.precision[c], 1e-12);
            EXPECT_NEAR(rep.per_class[c].recall, o.recall[c], 1e-12);
            EXPECT_NEAR(rep.per_class[c].f1, o.f1[c], 1e-12);
            EXPECT_EQ(rep.per_class[c].support, o.support[c]);
        }
        PrfResult macro = precision_recall_f1(cm, Averaging::macro);
        EXPECT_NEAR(macro.precision, o.m_prec, 1e-12);
        EXPECT_NEAR(macro.recall, o.m_rec, 1e-12);
        EXPECT_NEAR(macro.f1, o.m_f1, 1e-12);

        EXPECT_GE(rep.accuracy, 0.0);
        EXPECT_LE(rep.accuracy, 1.0);
        EXPECT_GE(rep.f1, 0.0);
        EXPECT_LE(rep.f1, 1.0);
        EXPECT_GE(rep.kappa, -1.0);
        EXPECT_LE(rep.kappa, 1.0);
    }
}

TEST(MetricsOracle, WeightedRecallEqualsAccuracyOn1000RandomMatrices) {
    RngState rng(777);
    for (int trial = 0; trial < 1000; ++trial) {
        int64_t k = 2 + rng.below(4);
        ConfusionMatrix cm;
        cm.k = k;
        int64_t total = 0;
        for (int64_t i = 0; i < k * k; ++i) {
            int64_t c = rng.below(21);
            cm.counts.push_back(c);
            total += c;
        }
        if (total == 0) cm.counts[0] = 1;
        PrfResult r = precision_recall_f1(cm, Averaging::weighted);
        EXPECT_DOUBLE_EQ(r.recall, accuracy(cm)) << "trial " << trial;
    }
}

TEST(MetricsOracle, RelabelingInvariance) {
    RngState rng(555);
    ConfusionMatrix cm;
    cm.k = 4;
    for (int64_t i = 0; i < 16; ++i) cm.counts.push_back(rng.below(30));
    std::vector<int64_t> perm = {2, 0, 3, 1};
    ConfusionMatrix pm;
    pm.k = 4;
    pm.counts.assign(16, 0);
    for (int64_t t = 0; t < 4; ++t)
        for (int64_t p = 0; p < 4; ++p) pm.at(perm[t], perm[p]) = cm.at(t, p);

    MetricReport a = compute_report(cm), b = compute_report(pm);
    EXPECT_DOUBLE_EQ(a.accuracy, b.accuracy);
    EXPECT_NEAR(a.precision, b.precision, 1e-12);
    EXPECT_DOUBLE_EQ(a.recall, b.recall);
    EXPECT_NEAR(a.f1, b.f1, 1e-12);
    EXPECT_NEAR(a.kappa, b.kappa, 1e-12);
    for (int64_t c = 0; c < 4; ++c) {
        EXPECT_DOUBLE_EQ(a.per_class[c].precision, b.per_class[perm[c]].precision);
        EXPECT_DOUBLE_EQ(a.per_class[c].recall, b.per_class[perm[c]].recall);
        EXPECT_DOUBLE_EQ(a.per_class[c].f1, b.per_class[perm[c]].f1);
        EXPECT_EQ(a.per_class[c].support, b.per_class[perm[c]].support);
    }
}

TEST(RenderReport, TableColumnsInCanonicalOrder) {
    RenderedReport perfect = render_report(make_cm(3, {5, 0, 0, 0, 5, 0, 0, 0, 5}));
    std::istringstream is(perfect.table);
    std::string header, row;
    std::getline(is, header);
    std::getline(is, row);
    size_t acc = header.find("Accuracy");
    size_t prec = header.find("Precision");
    size_t rec = header.find("Recall");
    size_t f1 = header.find("F1-score");
    size_t kap = header.find("Cohen's kappa");
    ASSERT_NE(acc, std::string::npos);
    EXPECT_LT(acc, prec);
    EXPECT_LT(prec, rec);
    EXPECT_LT(rec, f1);
    EXPECT_LT(f1, kap);
    // All five columns read 100.00 for a perfect diagonal.
    size_t hits = 0, at = 0;
    while ((at = row.find("100.00", at)) != std::string::npos) {
        ++hits;
        at += 6;
    }
    EXPECT_EQ(hits, 5u);

    RenderedReport fixture = render_report(make_cm(2, {1, 1, 0, 2}));
    EXPECT_NE(fixture.table.find("75.00"), std::string::npos);  // accuracy and recall
    EXPECT_NE(fixture.table.find("50.00"), std::string::npos);  // kappa
}

TEST(RenderReport, CsvParsesBackToIdenticalValues) {
    ConfusionMatrix cm = make_cm(2, {1, 1, 0, 2}, {"advanced", "early"});
    MetricReport rep = compute_report(cm);
    std::string csv = render_csv(cm, rep);

    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "class,precision,recall,f1,support");
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        for (char ch : s) {
            if (ch == ',') {
                out.push_back(cur);
                cur.clear();
            } else
                cur += ch;
        }
        out.push_back(cur);
        return out;
    };
    for (int64_t c = 0; c < 2; ++c) {
        std::getline(is, line);
        auto f = split(line);
        ASSERT_EQ(f.size(), 5u);
        EXPECT_EQ(f[0], cm.class_label(c));
        EXPECT_EQ(std::strtod(f[1].c_str(), nullptr), rep.per_class[c].precision);
        EXPECT_EQ(std::strtod(f[2].c_str(), nullptr), rep.per_class[c].recall);
        EXPECT_EQ(std::strtod(f[3].c_str(), nullptr), rep.per_class[c].f1);
        EXPECT_EQ(std::strtoll(f[4].c_str(), nullptr, 10), rep.per_class[c].support);
    }
    std::getline(is, line);
    EXPECT_EQ(line, "");
    std::getline(is, line);
    EXPECT_EQ(line, "metric,value");
    const std::pair<std::string, double> expected[] = {{"accuracy", rep.accuracy},
                                                       {"precision", rep.precision},
                                                       {"recall", rep.recall},
                                                       {"f1", rep.f1},
                                                       {"kappa", rep.kappa}};
    for (const auto& [name, value] : expected) {
        std::getline(is, line);
        auto f = split(line);
        ASSERT_EQ(f.size(), 2u);
        EXPECT_EQ(f[0], name);
        EXPECT_EQ(std::strtod(f[1].c_str(), nullptr), value);
    }
}

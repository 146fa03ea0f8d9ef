#include <cmath>

#include "doctest.h"
#include "recticast/datagen.hpp"
#include "recticast/errors.hpp"
#include "recticast/metrics.hpp"
#include "support/metric_oracles.hpp"

using namespace recticast;
using namespace recticast::metrics;

namespace {

Tensor grid(std::size_t h, std::size_t w, std::initializer_list<std::pair<std::size_t, float>> cells) {
    Tensor t = Tensor::zeros({1, 1, h, w});
    for (auto [i, v] : cells) t.span()[i] = v;
    return t;
}

}  // namespace

TEST_CASE("binarize boundaries") {
    Tensor f({2, 2}, std::vector<float>{0.0f, 0.5f, 1.0f, static_cast<float>(74.0 / 255.0)});
    auto all = binarize(f, 0);
    CHECK(std::count(all.cells.begin(), all.cells.end(), 1) == 4);
    auto none = binarize(f, 256);
    CHECK(std::count(none.cells.begin(), none.cells.end(), 1) == 0);
    auto at = binarize(Tensor({1, 1}, std::vector<float>{static_cast<float>(128.0 / 255.0)}), 128);
    CHECK(at.at(0, 0));
}

TEST_CASE("contingency and scores") {
    auto a = binarize(grid(2, 2, {{0, 1.0f}, {1, 1.0f}}), 16);
    auto b = binarize(grid(2, 2, {{2, 1.0f}, {3, 1.0f}}), 16);
    auto same = contingency(a, a);
    CHECK(same.misses == 0);
    CHECK(same.false_alarms == 0);
    auto opposite = contingency(a, b);
    CHECK(opposite.hits == 0);
    CHECK(opposite.correct_negatives == 0);
    CHECK(csi(opposite) == 0.0);
    CHECK(csi(same) == 1.0);
    CHECK_THROWS_AS(contingency(a, binarize(grid(3, 2, {}), 16)), DimensionError);

    CHECK(csi({3, 1, 1, 0}) == doctest::Approx(0.6));
    CHECK(hss({1, 1, 1, 1}) == 0.0);
    CHECK(hss({4, 0, 0, 5}) == doctest::Approx(1.0));
    CHECK(hss({0, 3, 2, 0}) < 0.0);
    CHECK(hss({0, 3, 2, 0}) == doctest::Approx(2.0 * (0 - 6) / (3.0 * 3 + 2.0 * 2)));
    CHECK(hss({0, 0, 0, 0}) == 0.0);
    CHECK(ContingencyCounts{}.vacuous());
}

TEST_CASE("relabeling invariance") {
    // swapping which thresholds are applied, identically to both fields, leaves each score unchanged
    Rng rng(5);
    Tensor p = Tensor::zeros({1, 1, 8, 8}), g = Tensor::zeros({1, 1, 8, 8});
    for (auto& v : p.span()) v = static_cast<float>(rng.uniform());
    for (auto& v : g.span()) v = static_cast<float>(rng.uniform());
    std::vector<double> forward{16, 74, 133}, reversed{133, 74, 16};
    CHECK(pooled_csi(p, g, 1, forward) == doctest::Approx(pooled_csi(p, g, 1, reversed)).epsilon(1e-12));
    for (double th : forward) {
        auto c1 = contingency(binarize(p, th), binarize(g, th));
        auto c2 = contingency(binarize(g, th), binarize(p, th));
        CHECK(c1.hits == c2.hits);
        CHECK(csi(c1) == csi(c2));
        CHECK(hss(c1) == doctest::Approx(hss(c2)).epsilon(1e-12));
    }
}

TEST_CASE("pooled CSI") {
    auto p = grid(4, 4, {{0, 1.0f}});
    auto g = grid(4, 4, {{5, 1.0f}});
    CHECK(pooled_csi(p, g, 1, {16}) == 0.0);
    CHECK(pooled_csi(p, g, 4, {16}) == 1.0);
    CHECK(pooled_csi(g, g, 4, kDefaultThresholds) == 1.0);
    CHECK(pooled_csi(g, g, 16, kDefaultThresholds) == 1.0);
    // k = 1 is plain CSI
    CHECK(pooled_csi(p, g, 1, {16}) == csi(contingency(binarize(p, 16), binarize(g, 16))));
    // non-divisible sizes pad with zeros
    auto m = max_pool(Tensor({3, 3}, std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9}), 2);
    CHECK(m.shape() == Shape{2, 2});
    CHECK(m.span()[0] == 5.0f);
    CHECK(m.span()[3] == 9.0f);
}

TEST_CASE("metric kernels match brute-force oracles") {
    const auto rep = testing::run_metric_oracles(1000, 2024);
    INFO(rep.first_failure);
    CHECK(rep.cases == 1000);
    CHECK(rep.count_mismatches == 0);
    CHECK(rep.ratio_mismatches == 0);
    CHECK(rep.pooled_mismatches == 0);
    CHECK(rep.ssim_failures == 0);
}

TEST_CASE("SSIM closed forms") {
    Rng rng(3);
    Tensor a = Tensor::zeros({1, 1, 16, 16});
    for (auto& v : a.span()) v = static_cast<float>(rng.uniform());
    CHECK(ssim_frame(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    const double c1 = 1e-4;
    // constant images: sigma terms vanish, leaving the luminance term
    CHECK(ssim_frame(Tensor::zeros({16, 16}), Tensor::full({16, 16}, 1.0f)) == doctest::Approx(c1 / (1 + c1)));
    CHECK(ssim_frame(Tensor::full({16, 16}, 0.2f), Tensor::full({16, 16}, 0.6f)) ==
          doctest::Approx((2 * 0.2 * 0.6 + c1) / (0.04 + 0.36 + c1)).epsilon(1e-6));
    Tensor b = Tensor::zeros({1, 1, 16, 16});
    for (auto& v : b.span()) v = static_cast<float>(rng.uniform());
    CHECK(ssim_frame(a, b) == doctest::Approx(ssim_frame(b, a)).epsilon(1e-14));
    CHECK(ssim_frame(a, b) < 0.5);
}

TEST_CASE("report aggregation equals the mean over cells") {
    Rng rng(11);
    std::vector<Tensor> f, g;
    for (int s = 0; s < 3; ++s) {
        Tensor a = Tensor::zeros({4, 1, 8, 8}), b = Tensor::zeros({4, 1, 8, 8});
        for (auto& v : a.span()) v = static_cast<float>(rng.uniform());
        for (auto& v : b.span()) v = static_cast<float>(rng.uniform() * 0.8);
        f.push_back(a);
        g.push_back(b);
    }
    const std::vector<double> th{16, 133, 219};
    const auto r = evaluate(f, g, th);
    CHECK(r.leads == 4);
    double sum = 0;
    int n = 0;
    double hsum = 0;
    for (std::size_t t = 0; t < th.size(); ++t) {
        for (std::size_t l = 0; l < 4; ++l) {
            ContingencyCounts c;
            for (int s = 0; s < 3; ++s) {
                c += contingency(binarize(f[s].slice0(l, l + 1), th[t]), binarize(g[s].slice0(l, l + 1), th[t]));
            }
            if (c.vacuous()) continue;
            sum += csi(c);
            hsum += hss(c);
            ++n;
        }
    }
    CHECK(r.csi_mean(0) == doctest::Approx(sum / n).epsilon(1e-12));
    CHECK(r.hss_mean() == doctest::Approx(hsum / n).epsilon(1e-12));
    double s = 0;
    for (int k = 0; k < 3; ++k) s += ssim(f[k], g[k]);
    CHECK(r.ssim_mean() == doctest::Approx(s / 3).epsilon(1e-12));
    for (double v : {r.csi_mean(0), r.csi_mean(1), r.csi_mean(2)}) CHECK((v >= 0 && v <= 1));
    CHECK((r.hss_mean() >= -1 && r.hss_mean() <= 1));

    const auto j = r.to_json();
    for (const char* key : {"csi", "csi4", "csi16", "hss", "ssim"}) CHECK(j.contains(key));
    const auto csv = r.to_csv();
    CHECK(csv.rfind("lead,threshold,metric,value\n", 0) == 0);
}

TEST_CASE("evaluation errors and perfect forecasts") {
    CHECK_THROWS_AS(evaluate({}, {}), std::invalid_argument);
    Tensor a = Tensor::full({3, 1, 8, 8}, 0.9f);
    CHECK_THROWS_AS(evaluate({a}, {a, a}), DimensionError);
    CHECK_THROWS_AS(evaluate({a}, {Tensor::zeros({2, 1, 8, 8})}), DimensionError);
    const auto r = evaluate({a}, {a});
    CHECK(r.csi_mean(0) == 1.0);
    CHECK(r.hss_mean() == 0.0);  // no correct negatives or misses: denominator-free case
    CHECK(r.ssim_mean() == doctest::Approx(1.0));
    const auto curves = leadtime_curves({a}, {a});
    CHECK(curves.csi.size() == 3);
    for (double v : curves.csi) CHECK(v == 1.0);
    for (double v : curves.csi16) CHECK(v == 1.0);
}

TEST_CASE("persistence skill decays with lead time") {
    data::DatasetSpec spec;
    spec.train_sequences = 1;
    spec.val_sequences = 1;
    spec.test_sequences = 8;
    const auto test = data::build_dataset(spec).split("test");
    std::vector<Tensor> f, g;
    for (const auto& w : test) {
        std::vector<Tensor> reps(20, w.input.slice0(4, 5));
        f.push_back(concat0<float>(reps));
        g.push_back(w.target);
    }
    const auto curves = leadtime_curves(f, g);
    REQUIRE(curves.csi.size() == 20);
    std::vector<double> lead;
    for (int l = 1; l <= 20; ++l) lead.push_back(l);
    CHECK(spearman(lead, curves.csi) < 0);
}

TEST_CASE("spearman") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 3}, {5, 5, 5}) == 0.0);
    CHECK(spearman({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(0.8));
}

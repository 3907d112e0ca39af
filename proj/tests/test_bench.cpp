#include <array>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "p3d/bench.hpp"
#include "p3d/layers.hpp"

using namespace p3d;

TEST_CASE("conv cost closed forms match brute-force weight enumeration") {
    const CostReport r = count_conv_costs(8, 8, 3, 3, {1, 8, 4, 8, 8});
    CHECK(r.params_p3d == 784);
    CHECK(r.params_full3d == 1736);

    // enumerate every element of the weight containers one by one
    auto enumerate = [](int cin, int cout, int k, int k_t) {
        int64_t p3d = 0, full = 0;
        for (int o = 0; o < cout; ++o) {
            for (int i = 0; i < cin; ++i)
                for (int a = 0; a < k; ++a)
                    for (int b = 0; b < k; ++b) ++p3d;  // spatial taps
            ++p3d;                                      // spatial bias
            for (int i = 0; i < cout; ++i)
                for (int a = 0; a < k_t; ++a) ++p3d;    // temporal taps
            ++p3d;                                      // temporal bias
            for (int i = 0; i < cin; ++i)
                for (int a = 0; a < k; ++a)
                    for (int b = 0; b < k; ++b)
                        for (int c = 0; c < k_t; ++c) ++full;
            ++full;
        }
        return std::pair<int64_t, int64_t>{p3d, full};
    };
    for (auto [ci, co, k, kt] : std::vector<std::array<int, 4>>{
             {8, 8, 3, 3}, {4, 6, 3, 5}, {3, 16, 5, 3}, {8, 8, 1, 1}}) {
        const CostReport c = count_conv_costs(ci, co, k, kt, {1, ci, 2, 4, 4});
        const auto [p3d, full] = enumerate(ci, co, k, kt);
        CHECK(c.params_p3d == p3d);
        CHECK(c.params_full3d == full);
    }
}

TEST_CASE("counted factorized params equal a real layer's containers") {
    Rng rng(40);
    for (auto [ci, co, k, kt] : std::vector<std::array<int, 4>>{{8, 8, 3, 3}, {4, 6, 3, 5}}) {
        P3DConv conv(ci, co, k, rng);
        conv.add_temporal(kt);
        ParamMap pm;
        conv.collect(pm, "conv");
        const CostReport r = count_conv_costs(ci, co, k, kt, {1, ci, 2, 4, 4});
        CHECK(pm.total_elements() == r.params_p3d);
    }
}

TEST_CASE("flops are weights touched per element times elements") {
    const CostReport r = count_conv_costs(8, 8, 3, 3, {2, 8, 4, 8, 8});
    const int64_t elems = 2LL * 8 * 4 * 8 * 8;
    CHECK(r.flops_p3d == (8 * 9 + 1 + 8 * 3 + 1) * elems);
    CHECK(r.flops_full3d == (8 * 9 * 3 + 1) * elems);
    CHECK(r.flops_p3d < r.flops_full3d);
}

TEST_CASE("degenerate temporal kernel reduces the dense form to plain 2d") {
    const CostReport r = count_conv_costs(8, 8, 3, 1, {1, 8, 4, 8, 8});
    CHECK(r.params_full3d == 8 * 8 * 9 + 8);  // a 2d conv exactly
    // the factorized pair still pays for its pointwise temporal stage
    CHECK(r.ratio > 1.0);
}

TEST_CASE("asymptotic parameter ratio approaches (k^2 + k_t) / (k^2 k_t)") {
    const CostReport r = count_conv_costs(256, 256, 3, 3, {1, 256, 4, 8, 8});
    const double limit = 12.0 / 27.0;
    CHECK(std::fabs(r.ratio - limit) / limit < 0.02);

    for (int c : {8, 16, 32, 64, 128}) {
        const CostReport s = count_conv_costs(c, c, 3, 3, {1, c, 2, 4, 4});
        CHECK(s.params_p3d < s.params_full3d);
    }
}

TEST_CASE("cost accounting rejects bad arguments") {
    CHECK_THROWS_AS(count_conv_costs(0, 8, 3, 3, {1, 0, 2, 4, 4}), ConfigError);
    CHECK_THROWS_AS(count_conv_costs(8, 8, 2, 3, {1, 8, 2, 4, 4}), ConfigError);
    CHECK_THROWS_AS(count_conv_costs(8, 8, 3, 4, {1, 8, 2, 4, 4}), ConfigError);
    CHECK_THROWS_AS(count_conv_costs(8, 8, 3, 3, {1, 8, 4, 4}), ShapeError);
    CHECK_THROWS_AS(count_conv_costs(8, 8, 3, 3, {1, 6, 2, 4, 4}), ShapeError);
    CHECK_THROWS_AS(count_conv_costs(8, 8, 3, 3, {1, 8, 0, 4, 4}), ShapeError);
}

TEST_CASE("the cost table lists every layer with its numbers") {
    std::vector<CostReport> rows = {count_conv_costs(8, 8, 3, 3, {1, 8, 4, 8, 8}),
                                    count_conv_costs(4, 6, 3, 5, {1, 4, 2, 4, 4})};
    const std::string table = cost_table(rows);
    CHECK(table.find("params(p3d)") != std::string::npos);
    CHECK(table.find("784") != std::string::npos);
    CHECK(table.find("1736") != std::string::npos);
    CHECK(table.find("conv 4->6 k3 kt5") != std::string::npos);
}

TEST_CASE("consistency scores frozen clips zero and flicker maximally") {
    Tensor frozen = Tensor::full({1, 2, 4, 3, 3}, 0.37);
    CHECK(temporal_consistency(frozen) == 0.0);

    Tensor flicker({1, 1, 4, 2, 2});
    for (int f = 0; f < 4; ++f)
        for (int64_t i = 0; i < 4; ++i) flicker[f * 4 + i] = f % 2 == 0 ? 1.0 : -1.0;
    CHECK(temporal_consistency(flicker) == 2.0);

    Tensor single({1, 1, 1, 2, 2});
    CHECK_THROWS_AS(temporal_consistency(single), ConfigError);
    Tensor image({1, 1, 2, 2});
    CHECK_THROWS_AS(temporal_consistency(image), ShapeError);
}

TEST_CASE("consistency equals the direct pairwise mean") {
    Rng rng(41);
    Tensor video = rng.normal_tensor({2, 3, 5, 4, 4});
    double acc = 0.0;
    int64_t n = 0;
    const int64_t hw = 16;
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c)
            for (int f = 0; f < 4; ++f)
                for (int64_t i = 0; i < hw; ++i) {
                    const int64_t at = ((static_cast<int64_t>(b) * 3 + c) * 5 + f) * hw + i;
                    acc += std::fabs(video[at + hw] - video[at]);
                    ++n;
                }
    CHECK(temporal_consistency(video) == doctest::Approx(acc / n).epsilon(1e-12));
}

TEST_CASE("psnr endpoints and oracle agreement") {
    Rng rng(42);
    Tensor a = rng.normal_tensor({2, 3, 4, 4});
    CHECK(psnr(a, a) == 99.0);

    Tensor hi = Tensor::full({1, 8}, 1.0), lo = Tensor::full({1, 8}, -1.0);
    CHECK(psnr(hi, lo) == 0.0);  // mse 4 is the worst case for [-1,1] signals

    Tensor b = rng.normal_tensor(a.shape);
    double mse = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
    mse /= static_cast<double>(a.numel());
    CHECK(psnr(a, b) == doctest::Approx(10.0 * std::log10(4.0 / mse)).epsilon(1e-9));

    // microscopic error rates cap at 99 instead of exploding
    Tensor c = a;
    c[0] += 1e-9;
    CHECK(psnr(a, c) == 99.0);

    Tensor wrong({3, 3});
    CHECK_THROWS_AS(psnr(a, wrong), ShapeError);
}

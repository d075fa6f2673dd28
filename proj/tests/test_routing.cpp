// Router checks: pinned score values for all three gating kinds, sort-based
// top-k oracles, scale invariance, the zero-score sparsity property, and the
// Monte Carlo calibration of the normalized router's rescale constant.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "unipool/common.hpp"
#include "unipool/ops.hpp"
#include "unipool/router.hpp"
#include "unipool/tensor.hpp"

using namespace unipool;

namespace {

// Identity weight so route(h, ...) sees logits z = h directly.
RouterParams identity_router(RouterKind kind, int n, double c = 1.0,
                             double eps = 1e-6) {
    RouterParams p;
    p.kind = kind;
    std::vector<double> w(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) w[static_cast<size_t>(i) * n + i] = 1.0;
    p.weight = Tensor::param({n, n}, w);
    if (kind == RouterKind::norm_router) {
        p.sigma = Tensor::param({1}, {1.0});
        p.c = c;
        p.eps = eps;
    }
    return p;
}

Tensor row(std::vector<double> v) {
    const int n = static_cast<int>(v.size());
    return Tensor::from_data({1, n}, std::move(v));
}

}  // namespace

// ---------------------------------------------------------------------------
// pinned score values

TEST_CASE("normalized router on a one-hot logit row scores (c, 0, ...)") {
    const double c = 2.5;
    RouterParams p = identity_router(RouterKind::norm_router, 4, c, 0.0);
    RouterDecision d = route(row({1.0, 0.0, 0.0, 0.0}), p, 1);
    CHECK(d.scores.data()[0] == doctest::Approx(c).epsilon(1e-12));
    for (int i = 1; i < 4; ++i) CHECK(d.scores.data()[static_cast<size_t>(i)] == 0.0);
    CHECK(d.topk == std::vector<int>{0});
    CHECK(d.gates.data()[0] == doctest::Approx(c).epsilon(1e-12));
}

TEST_CASE("normalized router with all-negative logits gives zero scores and "
          "index-0 tie-break") {
    RouterParams p = identity_router(RouterKind::norm_router, 2, 1.0, 0.0);
    RouterDecision d = route(row({-1.0, -1.0}), p, 1);
    CHECK(d.scores.data()[0] == 0.0);
    CHECK(d.scores.data()[1] == 0.0);
    CHECK(d.topk == std::vector<int>{0});
    CHECK(d.gates.data()[0] == 0.0);
}

TEST_CASE("normalized router scores (3,4) as (0.6c, 0.8c) and picks index 1") {
    const double c = 1.7;
    RouterParams p = identity_router(RouterKind::norm_router, 2, c, 0.0);
    RouterDecision d = route(row({3.0, 4.0}), p, 1);
    CHECK(d.scores.data()[0] == doctest::Approx(0.6 * c).epsilon(1e-12));
    CHECK(d.scores.data()[1] == doctest::Approx(0.8 * c).epsilon(1e-12));
    CHECK(d.topk == std::vector<int>{1});
    CHECK(d.gates.data()[0] == doctest::Approx(0.8 * c).epsilon(1e-12));
}

TEST_CASE("softmax router scores (ln 2, 0) as (2/3, 1/3) with gate 2/3") {
    RouterParams p = identity_router(RouterKind::softmax, 2);
    RouterDecision d = route(row({std::log(2.0), 0.0}), p, 1);
    CHECK(d.scores.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(d.scores.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(d.topk == std::vector<int>{0});
    CHECK(d.gates.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("sigmoid router applies the elementwise logistic map") {
    RouterParams p = identity_router(RouterKind::sigmoid, 3);
    RouterDecision d = route(row({0.0, 2.0, -2.0}), p, 1);
    CHECK(d.scores.data()[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(d.scores.data()[1] ==
          doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-12));
    CHECK(d.scores.data()[2] ==
          doctest::Approx(1.0 / (1.0 + std::exp(2.0))).epsilon(1e-12));
    CHECK(d.topk == std::vector<int>{1});
}

// ---------------------------------------------------------------------------
// top-k structure

TEST_CASE("top-k matches a full-sort oracle for every kind") {
    Rng rng(7);
    for (RouterKind kind : {RouterKind::softmax, RouterKind::sigmoid,
                            RouterKind::norm_router}) {
        const int E = 12, T = 40;
        RouterParams p = identity_router(kind, E);
        std::vector<double> h(static_cast<size_t>(T) * E);
        for (auto& v : h) v = rng.gaussian();
        Tensor ht = Tensor::from_data({T, E}, h);
        for (int k : {1, 3, 12}) {
            RouterDecision d = route(ht, p, k);
            REQUIRE(static_cast<int>(d.topk.size()) == T * k);
            for (int t = 0; t < T; ++t) {
                // Oracle: indices sorted by (score desc, index asc), prefix k.
                std::vector<int> order(E);
                std::iota(order.begin(), order.end(), 0);
                const double* s = d.scores.data().data() +
                                  static_cast<size_t>(t) * E;
                std::stable_sort(order.begin(), order.end(),
                                 [&](int a, int b) { return s[a] > s[b]; });
                for (int j = 0; j < k; ++j)
                    CHECK(d.topk[static_cast<size_t>(t) * k + j] == order[j]);
            }
        }
    }
}

TEST_CASE("top-k indices are distinct per token and gates are nonnegative") {
    Rng rng(8);
    RouterParams p = identity_router(RouterKind::norm_router, 6);
    std::vector<double> h(static_cast<size_t>(30) * 6);
    for (auto& v : h) v = rng.gaussian();
    RouterDecision d = route(Tensor::from_data({30, 6}, h), p, 3);
    for (int t = 0; t < 30; ++t) {
        std::vector<int> ids(d.topk.begin() + t * 3, d.topk.begin() + t * 3 + 3);
        std::sort(ids.begin(), ids.end());
        CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
    }
    for (double g : d.gates.data()) CHECK(g >= 0.0);
}

TEST_CASE("softmax score rows sum to one within 1e-9") {
    Rng rng(9);
    RouterParams p = identity_router(RouterKind::softmax, 9);
    std::vector<double> h(static_cast<size_t>(25) * 9);
    for (auto& v : h) v = rng.gaussian();
    RouterDecision d = route(Tensor::from_data({25, 9}, h), p, 2);
    for (int t = 0; t < 25; ++t) {
        double s = 0.0;
        for (int i = 0; i < 9; ++i)
            s += d.scores.data()[static_cast<size_t>(t) * 9 + i];
        CHECK(std::fabs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("multi-select gates renormalize for softmax/sigmoid but stay raw "
          "for the normalized router") {
    Rng rng(10);
    std::vector<double> h(static_cast<size_t>(5) * 6);
    for (auto& v : h) v = rng.gaussian();
    Tensor ht = Tensor::from_data({5, 6}, h);

    for (RouterKind kind : {RouterKind::softmax, RouterKind::sigmoid}) {
        RouterDecision d = route(ht, identity_router(kind, 6), 3);
        for (int t = 0; t < 5; ++t) {
            double s = 0.0;
            for (int j = 0; j < 3; ++j)
                s += d.gates.data()[static_cast<size_t>(t) * 3 + j];
            CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
        }
    }
    const double c = 3.1;
    RouterParams np = identity_router(RouterKind::norm_router, 6, c);
    RouterDecision d = route(ht, np, 3);
    for (int t = 0; t < 5; ++t)
        for (int j = 0; j < 3; ++j) {
            const int id = d.topk[static_cast<size_t>(t) * 3 + j];
            CHECK(d.gates.data()[static_cast<size_t>(t) * 3 + j] ==
                  d.scores.data()[static_cast<size_t>(t) * 6 + id]);
        }
}

TEST_CASE("slice offset shifts selected IDs into the global frame") {
    RouterParams p = identity_router(RouterKind::softmax, 3);
    RouterDecision d = route(row({0.0, 5.0, 1.0}), p, 2, 24);
    CHECK(d.slice_offset == 24);
    CHECK(d.topk == std::vector<int>{25, 26});
}

TEST_CASE("route rejects k beyond the choice count and NaN inputs in "
          "checked mode") {
    RouterParams p = identity_router(RouterKind::softmax, 3);
    CHECK_THROWS_AS(route(row({1.0, 2.0, 3.0}), p, 4), ConfigError);
    set_checked_mode(true);
    CHECK_THROWS_AS(route(row({1.0, std::nan(""), 3.0}), p, 1), NumericError);
    set_checked_mode(false);
}

TEST_CASE("route is a pure function: identical inputs give identical bits") {
    Rng rng(11);
    RouterParams p = identity_router(RouterKind::norm_router, 8, 2.2);
    std::vector<double> h(static_cast<size_t>(16) * 8);
    for (auto& v : h) v = rng.gaussian();
    Tensor ht = Tensor::from_data({16, 8}, h);
    RouterDecision a = route(ht, p, 2);
    RouterDecision b = route(ht, p, 2);
    CHECK(a.topk == b.topk);
    for (size_t i = 0; i < a.scores.data().size(); ++i)
        CHECK(a.scores.data()[i] == b.scores.data()[i]);
    for (size_t i = 0; i < a.gates.data().size(); ++i)
        CHECK(a.gates.data()[i] == b.gates.data()[i]);
}

// ---------------------------------------------------------------------------
// scale invariance

TEST_CASE("normalized scores are invariant to positive logit scaling") {
    RouterParams p = identity_router(RouterKind::norm_router, 2, 1.3);
    SUBCASE("pinned pair (3,4) at lambda 10") {
        CHECK(norm_router_scale_invariance_check(p, row({3.0, 4.0}), 10.0, 1));
    }
    SUBCASE("pinned pair (-1,2) at lambda 0.5") {
        CHECK(norm_router_scale_invariance_check(p, row({-1.0, 2.0}), 0.5, 1));
    }
    SUBCASE("1000 random logit/scale pairs") {
        Rng rng(12);
        RouterParams p8 = identity_router(RouterKind::norm_router, 8, 2.0);
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> z(8);
            for (auto& v : z) v = rng.gaussian();
            const double lambda = 0.05 + 20.0 * rng.uniform_open();
            CHECK(norm_router_scale_invariance_check(
                p8, Tensor::from_data({1, 8}, z), lambda,
                1 + static_cast<int>(rng.bounded(8))));
        }
    }
}

// ---------------------------------------------------------------------------
// sparsity of the normalized-ReLU scoring map

TEST_CASE("about half of all scores are exactly zero on gaussian logits") {
    const int E = 64, rows = 1000, batches = 100;  // 1e5 vectors total
    RouterParams p = identity_router(RouterKind::norm_router, E);
    Rng rng(13);
    int64_t zeros = 0;
    NoGradGuard ng;
    for (int b = 0; b < batches; ++b) {
        std::vector<double> z(static_cast<size_t>(rows) * E);
        for (auto& v : z) v = rng.gaussian();
        Tensor s = scores_from_logits(Tensor::from_data({rows, E}, z), p);
        for (double v : s.data()) zeros += v == 0.0 ? 1 : 0;
    }
    const double frac =
        static_cast<double>(zeros) / (static_cast<double>(E) * rows * batches);
    CHECK(frac >= 0.48);
    CHECK(frac <= 0.52);
}

// ---------------------------------------------------------------------------
// Monte Carlo calibration

TEST_CASE("the all-positive draw with k = E evaluates to exactly one") {
    CHECK(monte_carlo_sample({1.0, 1.0, 1.0}, 3) == 1.0);
    // Any all-positive draw keeps the full mass in the top-k slice.
    CHECK(monte_carlo_sample({0.3, 2.0, 0.7, 1.1}, 4) == 1.0);
}

TEST_CASE("calibration is deterministic in the seed") {
    const double a = monte_carlo_c(8, 1, 2000, 5);
    const double b = monte_carlo_c(8, 1, 2000, 5);
    CHECK(a == b);
    CHECK(a > 0.0);
}

TEST_CASE("calibration rejects invalid shapes") {
    CHECK_THROWS_AS(monte_carlo_c(0, 1, 10, 1), ConfigError);
    CHECK_THROWS_AS(monte_carlo_c(8, 0, 10, 1), ConfigError);
    CHECK_THROWS_AS(monte_carlo_c(8, 9, 10, 1), ConfigError);
    CHECK_THROWS_AS(monte_carlo_sample({1.0, 2.0}, 3), ConfigError);
}

TEST_CASE("96-expert top-1 constant agrees with a separately coded sampler "
          "within 1 percent") {
    const int E = 96;
    const int64_t N = 100000;
    const double impl = monte_carlo_c(E, 1, N, 17);

    // Fresh sampler: different RNG (std::normal_distribution over
    // mt19937_64), different arithmetic layout.
    std::mt19937_64 eng(0xFEEDu);
    std::normal_distribution<double> normal(0.0, 1.0);
    double sum = 0.0;
    int64_t kept = 0;
    while (kept < N) {
        double norm2 = 0.0, best = -1e300;
        for (int i = 0; i < E; ++i) {
            const double x = normal(eng);
            norm2 += x * x;
            best = std::max(best, x);
        }
        if (best <= 0.0) continue;  // zero top-1 mass: redraw
        sum += std::sqrt(norm2) / best;  // 1 / (best / ||x||)
        ++kept;
    }
    const double fresh = sum / static_cast<double>(N);
    CHECK(std::fabs(impl - fresh) / fresh < 0.01);
}

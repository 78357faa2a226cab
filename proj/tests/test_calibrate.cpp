#include <doctest.h>

#include <cmath>
#include <random>

#include "dialign/calibrate.hpp"
#include "test_support.hpp"

using namespace dialign;
using dialign::testing::make_context;

namespace {

double oracle_cov(const std::vector<double>& v) {
    long double mean = 0, ss = 0;
    for (double x : v) mean += x;
    mean /= v.size();
    for (double x : v) ss += (x - mean) * (x - mean);
    if (mean == 0 || v.size() == 1) return 0.0;
    return static_cast<double>(std::sqrt(ss / v.size()) / mean);
}

const auto kOriginal = make_context({{"a", 0, "x"}, {"b", 1, "y"}}, "a", 2, "gold");

ScoredCandidate candidate(const std::string& text, double c, double r, double z) {
    ScoredCandidate s;
    s.context = with_rewritten_texts(kOriginal, std::vector<std::string>{text, "y"});
    s.response = "resp " + text;
    s.coherence = c;
    s.quality = r;
    s.rewrite_score = z;
    return s;
}

}  // namespace

TEST_CASE("cov") {
    CHECK(cov(std::vector<double>{0.5, 0.5, 0.5}) == 0.0);
    CHECK(cov(std::vector<double>{0.2, 0.4, 0.6}) == doctest::Approx(0.408248290463863).epsilon(1e-12));
    CHECK(cov(std::vector<double>{0.0, 0.0}) == 0.0);
    CHECK(cov(std::vector<double>{0.7}) == 0.0);
    CHECK_THROWS_AS(cov(std::vector<double>{}), DataError);
    CHECK(cov(std::vector<double>{3, 6, 9}) == doctest::Approx(cov(std::vector<double>{1, 2, 3})).epsilon(1e-14));
}

TEST_CASE("weights") {
    const auto eq = weights(0.3, 0.3, 0.9);
    CHECK(eq.alpha_c == 0.5);
    CHECK(eq.alpha_r == 0.5);
    const auto w = weights(0.408248290463863, 0.0, 0.9);
    const double e = std::exp(0.408248290463863 / 0.9);
    CHECK(w.alpha_c == doctest::Approx(e / (e + 1.0)).epsilon(1e-14));
    CHECK(w.alpha_c == doctest::Approx(0.6115).epsilon(1e-4));
    CHECK(weights(2.0, 0.0, 1e6).alpha_c == doctest::Approx(0.5).epsilon(1e-6));
    CHECK_THROWS_AS(weights(0.1, 0.2, 0.0), ConfigError);
    CHECK_THROWS_AS(weights(0.1, 0.2, -1.0), ConfigError);
}

TEST_CASE("rewrite_scores") {
    const std::vector<double> v{0.3, 0.3};
    const auto same = rewrite_scores(v, v, 0.9);
    for (double z : same.z) CHECK(z == doctest::Approx(0.3).epsilon(1e-15));

    const std::vector<double> c{0.2, 0.4, 0.6}, r{0.5, 0.5, 0.5};
    const auto out = rewrite_scores(c, r, 0.9);
    const double e = std::exp(oracle_cov(c) / 0.9);
    const double ac = e / (e + 1.0);
    for (int i = 0; i < 3; ++i) CHECK(out.z[i] == doctest::Approx(ac * c[i] + (1 - ac) * 0.5).epsilon(1e-14));

    const std::vector<double> c1{0.2}, r1{0.8};
    CHECK(rewrite_scores(c1, r1, 0.9).z[0] == doctest::Approx(0.5));
    CHECK_THROWS_AS(rewrite_scores(c, c1, 0.9), DataError);
}

TEST_CASE("property: calibration invariants on random inputs") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 1.0), scale(0.01, 100.0), f(0.0, 3.0), tau(0.05, 5.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto w = weights(f(rng), f(rng), tau(rng));
        CHECK(std::abs(w.alpha_c + w.alpha_r - 1.0) <= 1e-12);
        CHECK(w.alpha_c > 0.0);
        CHECK(w.alpha_r > 0.0);
    }
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> v(static_cast<std::size_t>(2 + trial % 6));
        for (auto& x : v) x = u(rng);
        const double s = scale(rng);
        std::vector<double> scaled;
        for (double x : v) scaled.push_back(x * s);
        CHECK(std::abs(cov(scaled) - cov(v)) <= 1e-9 * std::max(1.0, cov(v)));
        CHECK(std::abs(cov(v) - oracle_cov(v)) <= 1e-12);
    }
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> c(4), r(4);
        for (auto& x : c) x = u(rng);
        for (auto& x : r) x = u(rng);
        const auto out = rewrite_scores(c, r, 0.9);
        for (int i = 0; i < 4; ++i) {
            CHECK(out.z[i] >= std::min(c[i], r[i]) - 1e-15);
            CHECK(out.z[i] <= std::max(c[i], r[i]) + 1e-15);
        }
    }
}

TEST_CASE("select_pairs") {
    const std::vector<std::string> items{"i1", "i2", "i3"};
    const std::vector<double> s{0.3, 0.9, 0.5};
    const auto p = select_pairs<std::string>(items, s, kOriginal, PairKind::Response);
    REQUIRE(p);
    CHECK(p->chosen == "i2");
    CHECK(p->rejected == "i1");
    CHECK(p->chosen_score == 0.9);

    const std::vector<std::string> two{"a", "b"};
    CHECK_FALSE(select_pairs<std::string>(two, std::vector<double>{0.4, 0.4}, kOriginal, PairKind::Response));

    const auto tie = select_pairs<std::string>(items, std::vector<double>{0.4, 0.4, 0.7}, kOriginal, PairKind::Response);
    REQUIRE(tie);
    CHECK(tie->chosen == "i3");
    CHECK(tie->rejected == "i1");

    const std::vector<std::string> dup{"same", "same"};
    CHECK_FALSE(select_pairs<std::string>(dup, std::vector<double>{0.1, 0.9}, kOriginal, PairKind::Response));
    CHECK_THROWS_AS(select_pairs<std::string>(two, s, kOriginal, PairKind::Response), DataError);
}

TEST_CASE("property: selection is invariant under increasing transforms") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> coarse(0, 4);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<double> s(static_cast<std::size_t>(1 + trial % 6));
        for (auto& x : s) x = coarse(rng) / 4.0;
        std::vector<double> t;
        for (double x : s) t.push_back(std::exp(3 * x) + 2.0);
        const auto a = select_indices(s), b = select_indices(t);
        REQUIRE(a.has_value() == b.has_value());
        if (a) {
            CHECK(a->chosen == b->chosen);
            CHECK(a->rejected == b->rejected);
            CHECK(s[a->chosen] > s[a->rejected]);
        }
    }
}

TEST_CASE("build_preference_sets") {
    const std::vector<ScoredCandidate> two{candidate("p", 0.5, 0.9, 0.2), candidate("q", 0.5, 0.1, 0.8)};
    const auto sets = build_preference_sets(kOriginal, two);
    REQUIRE(sets.rewrite);
    REQUIRE(sets.response);
    CHECK(sets.rewrite->chosen_index == 1);
    CHECK(sets.rewrite->chosen == serialize_item(two[1].context));
    CHECK(sets.response->chosen_index == 0);
    CHECK(sets.response->chosen == "resp p");
    CHECK(sets.rewrite->original == kOriginal);
    CHECK(sets.rewrite->meta.at("quality_chosen") == 0.1);

    const std::vector<ScoredCandidate> one{candidate("p", 0.5, 0.9, 0.2)};
    const auto none = build_preference_sets(kOriginal, one);
    CHECK_FALSE(none.rewrite);
    CHECK_FALSE(none.response);

    const std::vector<ScoredCandidate> three{candidate("p", 0.1, 0.6, 0.35), candidate("q", 0.9, 0.2, 0.55),
                                             candidate("r", 0.4, 0.4, 0.4)};
    const auto s3 = build_preference_sets(kOriginal, three);
    std::size_t zmax = 0, zmin = 0, rmax = 0, rmin = 0;
    for (std::size_t i = 0; i < three.size(); ++i) {
        for (std::size_t j = 0; j < three.size(); ++j) {
            if (three[j].rewrite_score > three[zmax].rewrite_score) zmax = j;
            if (three[j].rewrite_score < three[zmin].rewrite_score) zmin = j;
            if (three[j].quality > three[rmax].quality) rmax = j;
            if (three[j].quality < three[rmin].quality) rmin = j;
        }
    }
    CHECK(s3.rewrite->chosen_index == zmax);
    CHECK(s3.rewrite->rejected_index == zmin);
    CHECK(s3.response->chosen_index == rmax);
    CHECK(s3.response->rejected_index == rmin);
}

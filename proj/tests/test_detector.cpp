#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "msd/detector.hpp"
#include "msd/rng.hpp"

using namespace msd;
using detector::ScoreVector;

namespace {

ScoreVector single_band(int band, double value,
                        raster::Label label = raster::Label::pristine) {
    ScoreVector s;
    s.set(band, value);
    s.label = label;
    return s;
}

std::vector<ScoreVector> pool_1_to_100(int band) {
    std::vector<ScoreVector> pool;
    for (int i = 1; i <= 100; ++i) pool.push_back(single_band(band, i));
    return pool;
}

}  // namespace

TEST_CASE("calibrate: 1..100 at far 0.1 picks 90") {
    const auto t = detector::calibrate(pool_1_to_100(0), 0.1, "unit");
    REQUIRE(t.has(0));
    CHECK(t.get(0) == doctest::Approx(90.0));
    CHECK(t.target_far == 0.1);
    CHECK(t.calibration_size == 100);
}

TEST_CASE("calibrate: far approaching 0 picks the maximum") {
    const auto t = detector::calibrate(pool_1_to_100(2), 1e-9, "unit");
    CHECK(t.get(2) == doctest::Approx(100.0));
}

TEST_CASE("calibrate: identical scores give that value with empirical FAR 0") {
    std::vector<ScoreVector> pool(25, single_band(5, 3.25));
    const auto t = detector::calibrate(pool, 0.1, "unit");
    CHECK(t.get(5) == doctest::Approx(3.25));
    std::size_t above = 0;
    for (const auto& s : pool)
        if (s.get(5) > t.get(5)) ++above;
    CHECK(above == 0);
}

TEST_CASE("calibrate rejects empty pools and generated-labeled scores") {
    CHECK_THROWS_AS(detector::calibrate({}, 0.1), detector::DetectorError);
    std::vector<ScoreVector> pool = {single_band(0, 1.0, raster::Label::generated)};
    CHECK_THROWS_AS(detector::calibrate(pool, 0.1), detector::DetectorError);
    CHECK_THROWS_AS(detector::calibrate(pool_1_to_100(0), 0.0), detector::DetectorError);
    CHECK_THROWS_AS(detector::calibrate(pool_1_to_100(0), 1.0), detector::DetectorError);
}

TEST_CASE("calibration soundness: empirical FAR never exceeds the target") {
    rng::Generator gen(61);
    for (int rep = 0; rep < 30; ++rep) {
        const int n = 20 + static_cast<int>(gen.below(300));
        const double far = gen.uniform(0.01, 0.4);
        std::vector<ScoreVector> pool;
        for (int i = 0; i < n; ++i) {
            ScoreVector s;
            s.set(0, gen.normal());
            s.set(7, std::round(gen.normal() * 4.0) / 4.0);  // with duplicates
            pool.push_back(s);
        }
        const auto t = detector::calibrate(pool, far);
        for (int band : {0, 7}) {
            std::size_t above = 0;
            for (const auto& s : pool)
                if (s.get(band) > t.get(band)) ++above;
            REQUIRE(static_cast<double>(above) / n <= far + 1e-12);
        }
    }
}

TEST_CASE("detect: strict inequality, per-band flags, aggregate") {
    std::vector<ScoreVector> pool;
    for (int i = 1; i <= 10; ++i) {
        ScoreVector s;
        s.set(0, i);
        s.set(1, 10 * i);
        pool.push_back(s);
    }
    const auto t = detector::calibrate(pool, 0.2);

    ScoreVector below;
    below.set(0, 0.5);
    below.set(1, 5.0);
    auto d = detector::detect(below, t);
    CHECK(!d.band_generated(0));
    CHECK(!d.band_generated(1));
    CHECK(!d.any_generated());

    ScoreVector at;
    at.set(0, t.get(0));  // exactly at the threshold -> pristine
    auto d2 = detector::detect(at, t);
    CHECK(!d2.band_generated(0));

    ScoreVector one_over;
    one_over.set(0, t.get(0) + 1.0);
    one_over.set(1, 0.0);
    auto d3 = detector::detect(one_over, t);
    CHECK(d3.band_generated(0));
    CHECK(!d3.band_generated(1));
    CHECK(d3.any_generated());

    ScoreVector disjoint;
    disjoint.set(5, 1.0);
    CHECK_THROWS_AS(detector::detect(disjoint, t), detector::DetectorError);
}

TEST_CASE("decision monotonicity and scale covariance") {
    rng::Generator gen(67);
    std::vector<ScoreVector> pool;
    for (int i = 0; i < 50; ++i) {
        ScoreVector s;
        for (int b = 0; b < 4; ++b) s.set(b, std::abs(gen.normal()));
        pool.push_back(s);
    }
    const auto t = detector::calibrate(pool, 0.15);

    for (int rep = 0; rep < 50; ++rep) {
        ScoreVector s;
        for (int b = 0; b < 4; ++b) s.set(b, std::abs(gen.normal()));
        const auto d = detector::detect(s, t);

        // Raising one band's score never flips that band to pristine.
        ScoreVector raised = s;
        raised.set(2, s.get(2) + 0.5);
        const auto d2 = detector::detect(raised, t);
        if (d.band_generated(2)) REQUIRE(d2.band_generated(2));

        // Scaling all scores and thresholds by a positive factor changes
        // nothing.
        const double lambda = 0.125 + gen.uniform();
        ScoreVector scaled = s;
        detector::ThresholdSet st = t;
        for (int b = 0; b < 4; ++b) {
            scaled.set(b, s.get(b) * lambda);
            st.per_band[static_cast<std::size_t>(b)] = t.get(b) * lambda;
        }
        const auto d3 = detector::detect(scaled, st);
        for (int b = 0; b < 4; ++b) REQUIRE(d3.band_generated(b) == d.band_generated(b));
    }
}

TEST_CASE("threshold set file round-trip") {
    const auto dir = std::filesystem::temp_directory_path() / "msd_thr";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    auto t = detector::calibrate(pool_1_to_100(3), 0.05, "alpha");
    t.save(dir / "t.tsv");
    const auto loaded = detector::ThresholdSet::load(dir / "t.tsv");
    CHECK(loaded.get(3) == t.get(3));
    CHECK(loaded.target_far == t.target_far);
    CHECK(loaded.calibration_size == t.calibration_size);
    CHECK(loaded.source == "alpha");
}

TEST_CASE("pca: 2-d mean-centered input is rotated, distances preserved") {
    rng::Generator gen(71);
    std::vector<ScoreVector> scores;
    std::vector<std::array<double, 2>> raw;
    for (int i = 0; i < 40; ++i) {
        raw.push_back({2.0 * gen.normal(), 0.5 * gen.normal()});
    }
    double mx = 0, my = 0;
    for (auto& p : raw) {
        mx += p[0];
        my += p[1];
    }
    mx /= raw.size();
    my /= raw.size();
    for (auto& p : raw) {
        p[0] -= mx;
        p[1] -= my;
        ScoreVector s;
        s.set(0, p[0]);
        s.set(1, p[1]);
        scores.push_back(s);
    }
    const auto pca = detector::pca_project(scores);
    for (std::size_t i = 0; i < raw.size(); ++i)
        for (std::size_t j = i + 1; j < raw.size(); ++j) {
            const double orig = std::hypot(raw[i][0] - raw[j][0], raw[i][1] - raw[j][1]);
            const double proj = std::hypot(pca.points[i][0] - pca.points[j][0],
                                           pca.points[i][1] - pca.points[j][1]);
            REQUIRE(std::abs(orig - proj) < 1e-9);
        }
}

TEST_CASE("pca: variance concentrated in one band dominates axis 1") {
    rng::Generator gen(73);
    std::vector<ScoreVector> scores;
    for (int i = 0; i < 30; ++i) {
        ScoreVector s;
        for (int b = 0; b < 13; ++b) s.set(b, b == 5 ? gen.normal() : 0.0);
        scores.push_back(s);
    }
    const auto pca = detector::pca_project(scores);
    // axis-1 loading concentrates on band 5 (position 5 of the 13 features)
    CHECK(std::abs(pca.axes[0][5]) > 0.999);
    CHECK(pca.explained_variance[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("pca matches an independent eigen-solver oracle on a random cloud") {
    rng::Generator gen(79);
    const int n = 60;
    std::vector<ScoreVector> scores;
    Eigen::MatrixXd data(n, 13);
    for (int i = 0; i < n; ++i) {
        ScoreVector s;
        for (int b = 0; b < 13; ++b) {
            const double v = gen.normal() * (1.0 + 0.3 * b) + 0.2 * b;
            s.set(b, v);
            data(i, b) = v;
        }
        scores.push_back(s);
    }
    const auto pca = detector::pca_project(scores);

    Eigen::RowVectorXd mean = data.colwise().mean();
    Eigen::MatrixXd centered = data.rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / (n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
    REQUIRE(solver.info() == Eigen::Success);
    const auto evs = solver.eigenvalues();  // ascending

    CHECK(pca.explained_variance[0] == doctest::Approx(evs(12)).epsilon(1e-9));
    CHECK(pca.explained_variance[1] == doctest::Approx(evs(11)).epsilon(1e-9));

    // Projection variance per axis equals the corresponding eigenvalue.
    for (int axis = 0; axis < 2; ++axis) {
        double m = 0;
        for (const auto& p : pca.points) m += p[static_cast<std::size_t>(axis)];
        m /= n;
        double var = 0;
        for (const auto& p : pca.points) {
            const double d = p[static_cast<std::size_t>(axis)] - m;
            var += d * d;
        }
        var /= (n - 1);
        REQUIRE(std::abs(var - pca.explained_variance[static_cast<std::size_t>(axis)]) <
                1e-6 * std::max(1.0, var));
    }
}

TEST_CASE("pca is invariant to input ordering") {
    rng::Generator gen(83);
    std::vector<ScoreVector> scores;
    for (int i = 0; i < 25; ++i) {
        ScoreVector s;
        for (int b = 0; b < 5; ++b) s.set(b, gen.normal() * (b + 1));
        scores.push_back(s);
    }
    auto shuffled = scores;
    std::reverse(shuffled.begin(), shuffled.end());

    const auto a = detector::pca_project(scores);
    const auto b = detector::pca_project(shuffled);
    for (int axis = 0; axis < 2; ++axis)
        for (std::size_t j = 0; j < a.axes[static_cast<std::size_t>(axis)].size(); ++j)
            REQUIRE(a.axes[static_cast<std::size_t>(axis)][j] ==
                    doctest::Approx(b.axes[static_cast<std::size_t>(axis)][j]).epsilon(1e-9));
}

TEST_CASE("pca rejects degenerate inputs") {
    std::vector<ScoreVector> two = {single_band(0, 1.0), single_band(0, 2.0)};
    CHECK_THROWS_AS(detector::pca_project(two), detector::DetectorError);

    std::vector<ScoreVector> identical(5, single_band(0, 1.0));
    CHECK_THROWS_AS(detector::pca_project(identical), detector::DetectorError);

    std::vector<ScoreVector> disjoint = {single_band(0, 1.0), single_band(1, 2.0),
                                         single_band(2, 3.0)};
    CHECK_THROWS_AS(detector::pca_project(disjoint), detector::DetectorError);
}

TEST_CASE("scatter export: marker counts, legend, companion table") {
    const auto dir = std::filesystem::temp_directory_path() / "msd_scatter";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);

    detector::PcaResult pca;
    std::vector<raster::Label> labels;
    rng::Generator gen(89);
    for (int i = 0; i < 20; ++i) {
        pca.points.push_back({gen.normal(), gen.normal()});
        labels.push_back(i < 10 ? raster::Label::pristine : raster::Label::generated);
    }
    detector::scatter_export(pca, labels, dir / "s.svg", dir / "s.tsv");

    std::ifstream svg_in(dir / "s.svg");
    std::string svg((std::istreambuf_iterator<char>(svg_in)), {});
    std::size_t circles = 0, crosses = 0;
    for (std::size_t pos = 0; (pos = svg.find("<circle", pos)) != std::string::npos; ++pos)
        ++circles;
    for (std::size_t pos = 0; (pos = svg.find("<path", pos)) != std::string::npos; ++pos)
        ++crosses;
    CHECK(circles == 10 + 1);  // markers + legend swatch
    CHECK(crosses == 10 + 1);
    CHECK(svg.find(">pristine<") != std::string::npos);
    CHECK(svg.find(">generated<") != std::string::npos);
    CHECK(svg.find("PC1") != std::string::npos);

    std::ifstream tsv(dir / "s.tsv");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(tsv, line))
        if (!line.empty() && line.front() != '#') ++rows;
    CHECK(rows == 20);

    // Empty input still produces a valid plot with axes and a legend.
    detector::PcaResult empty;
    detector::scatter_export(empty, {}, dir / "empty.svg", dir / "empty.tsv");
    std::ifstream empty_in(dir / "empty.svg");
    std::string esvg((std::istreambuf_iterator<char>(empty_in)), {});
    CHECK(esvg.find("<line") != std::string::npos);
    CHECK(esvg.find("</svg>") != std::string::npos);
}

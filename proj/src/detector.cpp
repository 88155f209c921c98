#include "msd/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace msd::detector {

ThresholdSet calibrate(const std::vector<ScoreVector>& pristine_scores, double target_far,
                       const std::string& source) {
    if (pristine_scores.empty()) throw DetectorError("calibration pool is empty");
    if (!(target_far > 0.0 && target_far < 1.0))
        throw DetectorError("target_far must lie in (0,1)");
    for (const auto& s : pristine_scores)
        if (s.label && *s.label != raster::Label::pristine)
            throw DetectorError("calibration pool contains a generated-labeled score");

    ThresholdSet out;
    out.target_far = target_far;
    out.calibration_size = static_cast<int>(pristine_scores.size());
    out.source = source;

    for (int band = 0; band < raster::kBandCount; ++band) {
        std::vector<double> pool;
        for (const auto& s : pristine_scores)
            if (s.has(band)) pool.push_back(s.get(band));
        if (pool.empty()) continue;
        std::sort(pool.begin(), pool.end());
        const double n = static_cast<double>(pool.size());
        // Candidates are observed values in ascending order; the count
        // strictly above pool[i] is the number of entries past the last
        // duplicate of pool[i].
        std::optional<double> threshold;
        for (std::size_t i = 0; i < pool.size(); ++i) {
            const std::size_t last = static_cast<std::size_t>(
                std::upper_bound(pool.begin(), pool.end(), pool[i]) - pool.begin());
            const double frac_above = static_cast<double>(pool.size() - last) / n;
            if (frac_above <= target_far + 1e-12) {
                threshold = pool[i];
                break;
            }
        }
        out.per_band[static_cast<std::size_t>(band)] = threshold ? *threshold : pool.back();
    }
    return out;
}

Decision detect(const ScoreVector& score, const ThresholdSet& thresholds) {
    Decision d;
    int overlap = 0;
    for (int band = 0; band < raster::kBandCount; ++band) {
        if (!score.has(band) || !thresholds.has(band)) continue;
        d.generated_flag[static_cast<std::size_t>(band)] = score.get(band) > thresholds.get(band);
        ++overlap;
    }
    if (overlap == 0) throw DetectorError("no band has both a score and a threshold");
    return d;
}

void ThresholdSet::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw DetectorError("cannot write thresholds: " + path.string());
    os << "# band\tthreshold\ttarget_far\tsource\tcalibration_size\n";
    os.precision(17);
    for (int band = 0; band < raster::kBandCount; ++band)
        if (has(band))
            os << raster::band_name(band) << '\t' << get(band) << '\t' << target_far << '\t'
               << (source.empty() ? "-" : source) << '\t' << calibration_size << '\n';
}

ThresholdSet ThresholdSet::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DetectorError("cannot open thresholds: " + path.string());
    ThresholdSet out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line.front() == '#') continue;
        std::istringstream ls(line);
        std::string band, source;
        double threshold = 0.0, far = 0.0;
        int size = 0;
        ls >> band >> threshold >> far >> source >> size;
        if (ls.fail()) throw DetectorError("malformed threshold line: " + line);
        out.per_band[static_cast<std::size_t>(raster::band_index_from_name(band))] = threshold;
        out.target_far = far;
        out.calibration_size = size;
        out.source = source == "-" ? "" : source;
    }
    return out;
}

void symmetric_eigen(const std::vector<double>& matrix, int n, std::vector<double>& eigenvalues,
                     std::vector<double>& eigenvectors) {
    std::vector<double> a = matrix;  // working copy, row-major n x n
    std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = 1.0;

    auto at = [&](std::vector<double>& m, int r, int c) -> double& {
        return m[static_cast<std::size_t>(r) * n + c];
    };

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += at(a, p, q) * at(a, p, q);
        if (off < 1e-24) break;

        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = at(a, p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = at(a, k, p), akq = at(a, k, q);
                    at(a, k, p) = c * akp - s * akq;
                    at(a, k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = at(a, p, k), aqk = at(a, q, k);
                    at(a, p, k) = c * apk - s * aqk;
                    at(a, q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = at(v, k, p), vkq = at(v, k, q);
                    at(v, k, p) = c * vkp - s * vkq;
                    at(v, k, q) = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(), [&](int x, int y) {
        return at(a, x, x) > at(a, y, y);
    });

    eigenvalues.assign(static_cast<std::size_t>(n), 0.0);
    eigenvectors.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) {
        eigenvalues[static_cast<std::size_t>(i)] = at(a, order[static_cast<std::size_t>(i)],
                                                      order[static_cast<std::size_t>(i)]);
        for (int k = 0; k < n; ++k)
            eigenvectors[static_cast<std::size_t>(i) * n + k] =
                at(v, k, order[static_cast<std::size_t>(i)]);
    }
}

PcaResult pca_project(const std::vector<ScoreVector>& scores) {
    if (scores.size() < 3) throw DetectorError("pca needs at least 3 score vectors");

    std::vector<int> bands;
    for (int band = 0; band < raster::kBandCount; ++band) {
        bool everywhere = true;
        for (const auto& s : scores)
            if (!s.has(band)) {
                everywhere = false;
                break;
            }
        if (everywhere) bands.push_back(band);
    }
    if (bands.empty()) throw DetectorError("no band is present in every score vector");

    const int d = static_cast<int>(bands.size());
    const int m = static_cast<int>(scores.size());

    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (const auto& s : scores)
        for (int j = 0; j < d; ++j) mean[static_cast<std::size_t>(j)] += s.get(bands[static_cast<std::size_t>(j)]);
    for (double& v : mean) v /= m;

    std::vector<double> centered(static_cast<std::size_t>(m) * d);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j)
            centered[static_cast<std::size_t>(i) * d + j] =
                scores[static_cast<std::size_t>(i)].get(bands[static_cast<std::size_t>(j)]) -
                mean[static_cast<std::size_t>(j)];

    std::vector<double> cov(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < m; ++i)
        for (int r = 0; r < d; ++r)
            for (int c = r; c < d; ++c)
                cov[static_cast<std::size_t>(r) * d + c] +=
                    centered[static_cast<std::size_t>(i) * d + r] *
                    centered[static_cast<std::size_t>(i) * d + c];
    for (int r = 0; r < d; ++r)
        for (int c = r; c < d; ++c) {
            cov[static_cast<std::size_t>(r) * d + c] /= (m - 1);
            cov[static_cast<std::size_t>(c) * d + r] = cov[static_cast<std::size_t>(r) * d + c];
        }

    double trace = 0.0;
    for (int r = 0; r < d; ++r) trace += cov[static_cast<std::size_t>(r) * d + r];
    if (trace <= 0.0) throw DetectorError("pca input has zero variance (all vectors identical)");

    std::vector<double> eigenvalues, eigenvectors;
    symmetric_eigen(cov, d, eigenvalues, eigenvectors);

    PcaResult out;
    out.bands = bands;
    out.axes.resize(2);
    for (int axis = 0; axis < 2 && axis < d; ++axis) {
        std::vector<double> loading(eigenvectors.begin() + static_cast<std::ptrdiff_t>(axis) * d,
                                    eigenvectors.begin() + static_cast<std::ptrdiff_t>(axis + 1) * d);
        // Sign convention: largest-magnitude loading is positive.
        int arg = 0;
        for (int j = 1; j < d; ++j)
            if (std::abs(loading[static_cast<std::size_t>(j)]) >
                std::abs(loading[static_cast<std::size_t>(arg)]))
                arg = j;
        if (loading[static_cast<std::size_t>(arg)] < 0.0)
            for (double& v : loading) v = -v;
        out.axes[static_cast<std::size_t>(axis)] = std::move(loading);
        out.explained_variance[static_cast<std::size_t>(axis)] =
            eigenvalues[static_cast<std::size_t>(axis)];
    }
    if (d == 1) {
        out.axes[1] = std::vector<double>(1, 0.0);
        out.explained_variance[1] = 0.0;
    }

    out.points.resize(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        for (int axis = 0; axis < 2; ++axis) {
            double acc = 0.0;
            const auto& loading = out.axes[static_cast<std::size_t>(axis)];
            for (int j = 0; j < static_cast<int>(loading.size()); ++j)
                acc += centered[static_cast<std::size_t>(i) * d + j] *
                       loading[static_cast<std::size_t>(j)];
            out.points[static_cast<std::size_t>(i)][static_cast<std::size_t>(axis)] = acc;
        }
    }
    return out;
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

}  // namespace

void scatter_export(const PcaResult& pca, const std::vector<raster::Label>& labels,
                    const std::filesystem::path& svg_path,
                    const std::filesystem::path& table_path) {
    if (labels.size() != pca.points.size())
        throw DetectorError("labels/points size mismatch in scatter export");

    double xmin = -1, xmax = 1, ymin = -1, ymax = 1;
    if (!pca.points.empty()) {
        xmin = ymin = 1e300;
        xmax = ymax = -1e300;
        for (const auto& p : pca.points) {
            xmin = std::min(xmin, p[0]);
            xmax = std::max(xmax, p[0]);
            ymin = std::min(ymin, p[1]);
            ymax = std::max(ymax, p[1]);
        }
        const double dx = xmax - xmin, dy = ymax - ymin;
        xmin -= 0.05 * (dx > 0 ? dx : 1.0);
        xmax += 0.05 * (dx > 0 ? dx : 1.0);
        ymin -= 0.05 * (dy > 0 ? dy : 1.0);
        ymax += 0.05 * (dy > 0 ? dy : 1.0);
    }

    const double W = 480, H = 400, ml = 60, mr = 130, mt = 20, mb = 46;
    auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto sy = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

    if (svg_path.has_parent_path()) std::filesystem::create_directories(svg_path.parent_path());
    std::ofstream svg(svg_path, std::ios::trunc);
    if (!svg) throw DetectorError("cannot write svg: " + svg_path.string());
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    // axes
    svg << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
        << H - mb << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
        << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << (ml + (W - ml - mr) / 2) << "\" y=\"" << H - 10
        << "\" font-size=\"12\" text-anchor=\"middle\">PC1</text>\n";
    svg << "<text x=\"16\" y=\"" << (mt + (H - mt - mb) / 2)
        << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << (mt + (H - mt - mb) / 2) << ")\">PC2</text>\n";
    svg << "<text x=\"" << ml << "\" y=\"" << H - mb + 16 << "\" font-size=\"10\">" << fmt(xmin)
        << "</text>\n";
    svg << "<text x=\"" << W - mr << "\" y=\"" << H - mb + 16
        << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(xmax) << "</text>\n";
    svg << "<text x=\"" << ml - 4 << "\" y=\"" << H - mb << "\" font-size=\"10\" text-anchor=\"end\">"
        << fmt(ymin) << "</text>\n";
    svg << "<text x=\"" << ml - 4 << "\" y=\"" << mt + 10
        << "\" font-size=\"10\" text-anchor=\"end\">" << fmt(ymax) << "</text>\n";

    for (std::size_t i = 0; i < pca.points.size(); ++i) {
        const double px = sx(pca.points[i][0]);
        const double py = sy(pca.points[i][1]);
        if (labels[i] == raster::Label::pristine) {
            svg << "<circle cx=\"" << px << "\" cy=\"" << py
                << "\" r=\"3\" fill=\"none\" stroke=\"#1f77b4\"/>\n";
        } else {
            svg << "<path d=\"M" << px - 3 << " " << py - 3 << " L" << px + 3 << " " << py + 3
                << " M" << px - 3 << " " << py + 3 << " L" << px + 3 << " " << py - 3
                << "\" stroke=\"#d62728\"/>\n";
        }
    }

    // legend
    const double lx = W - mr + 14, ly = mt + 12;
    svg << "<circle cx=\"" << lx << "\" cy=\"" << ly
        << "\" r=\"3\" fill=\"none\" stroke=\"#1f77b4\"/>\n";
    svg << "<text x=\"" << lx + 8 << "\" y=\"" << ly + 4 << "\" font-size=\"11\">pristine</text>\n";
    svg << "<path d=\"M" << lx - 3 << " " << ly + 15 << " L" << lx + 3 << " " << ly + 21 << " M"
        << lx - 3 << " " << ly + 21 << " L" << lx + 3 << " " << ly + 15
        << "\" stroke=\"#d62728\"/>\n";
    svg << "<text x=\"" << lx + 8 << "\" y=\"" << ly + 22
        << "\" font-size=\"11\">generated</text>\n";
    svg << "</svg>\n";

    std::ofstream table(table_path, std::ios::trunc);
    if (!table) throw DetectorError("cannot write table: " + table_path.string());
    table << "# pc1\tpc2\tlabel\n";
    table.precision(10);
    for (std::size_t i = 0; i < pca.points.size(); ++i)
        table << pca.points[i][0] << '\t' << pca.points[i][1] << '\t'
              << raster::to_string(labels[i]) << '\n';
}

}  // namespace msd::detector

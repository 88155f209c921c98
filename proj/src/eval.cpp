#include "msd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace msd::eval {

double pd_at_far(const std::vector<double>& generated_scores, double threshold) {
    if (generated_scores.empty()) throw EvalError("empty generated score list");
    std::size_t above = 0;
    for (double s : generated_scores)
        if (s > threshold) ++above;
    return static_cast<double>(above) / static_cast<double>(generated_scores.size());
}

std::pair<double, double> binomial_interval95(double p, int n) {
    if (n <= 0) throw EvalError("binomial interval needs n > 0");
    const double half = 1.959963985 * std::sqrt(std::max(p * (1.0 - p), 0.0) / n);
    return {std::max(0.0, p - half), std::min(1.0, p + half)};
}

std::string ExperimentMatrix::key(const std::string& train_id, const std::string& test_id,
                                  const std::string& detector, const std::string& band) {
    return train_id + "\x1f" + test_id + "\x1f" + detector + "\x1f" + band;
}

const Cell* ExperimentMatrix::find(const std::string& train_id, const std::string& test_id,
                                   const std::string& detector, const std::string& band) const {
    auto it = cells.find(key(train_id, test_id, detector, band));
    return it == cells.end() ? nullptr : &it->second;
}

namespace {

std::vector<detector::ScoreVector> score_split(const TileScorer& scorer, const DatasetRef& ds,
                                               raster::Split split, raster::Label label) {
    const auto entries = ds.manifest.select(split, label);
    std::vector<detector::ScoreVector> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        auto s = scorer.score(ds.store->load(e.locator));
        s.tile_ref = e.locator;
        s.label = label;
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

ExperimentMatrix cross_test(const std::map<std::string, const TileScorer*>& detectors,
                            const std::map<std::string, DatasetRef>& test_sets, double far,
                            std::uint64_t seed) {
    ExperimentMatrix matrix;
    matrix.far = far;
    matrix.seed = seed;
    for (const auto& [train_id, scorer] : detectors) matrix.train_ids.push_back(train_id);
    for (const auto& [test_id, ds] : test_sets) matrix.test_ids.push_back(test_id);

    for (const auto& [test_id, ds] : test_sets) {
        if (ds.store == nullptr) throw EvalError("dataset " + test_id + " has no tile store");
        if (ds.manifest.count(raster::Split::calibrate, raster::Label::pristine) == 0)
            throw EvalError("dataset " + test_id + " has no pristine calibration pool");
        if (ds.manifest.count(raster::Split::test, raster::Label::generated) == 0)
            throw EvalError("dataset " + test_id + " has no generated test pool");

        for (const auto& [train_id, scorer] : detectors) {
            const auto calib =
                score_split(*scorer, ds, raster::Split::calibrate, raster::Label::pristine);
            const auto thresholds = detector::calibrate(calib, far, test_id);
            const auto test =
                score_split(*scorer, ds, raster::Split::test, raster::Label::generated);

            for (int band : scorer->bands()) {
                std::vector<double> generated;
                generated.reserve(test.size());
                for (const auto& s : test)
                    if (s.has(band)) generated.push_back(s.get(band));
                if (generated.empty() || !thresholds.has(band)) continue;
                Cell cell;
                cell.pd = pd_at_far(generated, thresholds.get(band));
                std::tie(cell.ci_lo, cell.ci_hi) =
                    binomial_interval95(cell.pd, static_cast<int>(generated.size()));
                cell.n_test = static_cast<int>(generated.size());
                cell.n_calib = static_cast<int>(calib.size());
                matrix.cells[ExperimentMatrix::key(
                    train_id, test_id, scorer->kind(),
                    scorer->kind() == "binary" ? "cls" : raster::band_name(band))] = cell;
            }
        }
    }
    return matrix;
}

std::string family_of(const raster::MultispectralTile& tile) {
    const auto pos = tile.provenance.rfind(':');
    return pos == std::string::npos ? tile.provenance : tile.provenance.substr(pos + 1);
}

UnseenResult unseen_architecture_test(
    const TileScorer& oneclass, const TileScorer& binary, const DatasetRef& calibration_source,
    const DatasetRef& unseen,
    const std::vector<const raster::DatasetManifest*>& train_manifests, double far) {
    // The unseen family must not appear in any training manifest.
    std::set<std::string> unseen_families;
    for (const auto& e : unseen.manifest.select(raster::Split::test, raster::Label::generated))
        unseen_families.insert(family_of(unseen.store->load(e.locator)));
    for (const auto* m : train_manifests) {
        for (int s : {0, 1, 2}) {
            for (const auto& e :
                 m->select(static_cast<raster::Split>(s), raster::Label::generated)) {
                const auto family = family_of(calibration_source.store->load(e.locator));
                if (unseen_families.count(family))
                    throw EvalError("unseen-family overlap: training manifest " + m->name +
                                    " contains family " + family);
            }
        }
    }

    UnseenResult result;
    result.far = far;

    const auto run = [&](const TileScorer& scorer) {
        const auto calib = score_split(scorer, calibration_source, raster::Split::calibrate,
                                       raster::Label::pristine);
        const auto thresholds = detector::calibrate(calib, far, calibration_source.manifest.name);
        const auto test = score_split(scorer, unseen, raster::Split::test,
                                      raster::Label::generated);
        result.n_calib = static_cast<int>(calib.size());
        result.n_test = static_cast<int>(test.size());
        for (int band : scorer.bands()) {
            std::vector<double> generated;
            for (const auto& s : test)
                if (s.has(band)) generated.push_back(s.get(band));
            if (generated.empty() || !thresholds.has(band)) continue;
            const std::string column = scorer.kind() == "binary"
                                           ? std::string("binary")
                                           : scorer.kind() + ":" + raster::band_name(band);
            result.pd.emplace_back(column, pd_at_far(generated, thresholds.get(band)));
        }
    };
    run(oneclass);
    run(binary);
    return result;
}

namespace {

std::string fixed3(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(3) << v;
    return os.str();
}

std::vector<std::string> split_key(const std::string& key) {
    std::vector<std::string> parts;
    std::istringstream is(key);
    std::string item;
    while (std::getline(is, item, '\x1f')) parts.push_back(item);
    return parts;
}

}  // namespace

void emit_report(const Report& report, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);

    {
        std::ofstream os(out_dir / "report.tsv", std::ios::trunc);
        if (!os) throw EvalError("cannot write report.tsv");
        os << "train_id\ttest_id\tdetector\tband\tfar\tpd\tci_lo\tci_hi\tn_test\tn_calib\tseed\n";
        for (const auto& [key, cell] : report.matrix.cells) {
            const auto parts = split_key(key);
            os << parts[0] << '\t' << parts[1] << '\t' << parts[2] << '\t' << parts[3] << '\t'
               << fixed3(report.matrix.far) << '\t' << fixed3(cell.pd) << '\t'
               << fixed3(cell.ci_lo) << '\t' << fixed3(cell.ci_hi) << '\t' << cell.n_test << '\t'
               << cell.n_calib << '\t' << report.matrix.seed << '\n';
        }
        for (const auto& u : report.unseen)
            for (const auto& [column, pd] : u.pd)
                os << "-\tunseen\t" << column << "\t-\t" << fixed3(u.far) << '\t' << fixed3(pd)
                   << '\t' << fixed3(binomial_interval95(pd, std::max(1, u.n_test)).first) << '\t'
                   << fixed3(binomial_interval95(pd, std::max(1, u.n_test)).second) << '\t'
                   << u.n_test << '\t' << u.n_calib << '\t' << report.matrix.seed << '\n';
    }

    {
        std::ofstream os(out_dir / "summary.txt", std::ios::trunc);
        if (!os) throw EvalError("cannot write summary.txt");
        os << "Correct-detection probability at FAR " << fixed3(report.matrix.far) << "\n\n";

        // One grid per (detector, band) column family.
        std::set<std::pair<std::string, std::string>> columns;
        for (const auto& [key, cell] : report.matrix.cells) {
            const auto parts = split_key(key);
            columns.insert({parts[2], parts[3]});
        }
        for (const auto& [det, band] : columns) {
            os << "[" << det << (band == "cls" ? "" : " band " + band) << "]\n";
            os << std::left << std::setw(16) << "train\\test";
            for (const auto& test_id : report.matrix.test_ids)
                os << std::setw(12) << test_id;
            os << '\n';
            for (const auto& train_id : report.matrix.train_ids) {
                os << std::setw(16) << train_id;
                for (const auto& test_id : report.matrix.test_ids) {
                    const Cell* cell = report.matrix.find(train_id, test_id, det, band);
                    os << std::setw(12) << (cell ? fixed3(cell->pd) : std::string("-"));
                }
                os << '\n';
            }
            os << '\n';
        }

        for (const auto& u : report.unseen) {
            os << "[unseen-family test at FAR " << fixed3(u.far) << ", n_test=" << u.n_test
               << ", n_calib=" << u.n_calib << "]\n";
            for (const auto& [column, pd] : u.pd)
                os << std::left << std::setw(16) << column << fixed3(pd) << '\n';
            os << '\n';
        }

        if (!report.artifact_paths.empty()) {
            os << "artifacts:\n";
            for (const auto& p : report.artifact_paths) os << "  " << p << '\n';
            os << '\n';
        }
        if (!report.rerun_command.empty()) os << "rerun: " << report.rerun_command << "\n";
        if (!report.config_echo.empty()) {
            os << "config:\n";
            for (const auto& [k, v] : report.config_echo) os << "  " << k << " = " << v << '\n';
        }
    }
}

}  // namespace msd::eval

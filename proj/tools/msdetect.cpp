// msdetect: synthetic-image detection experiments on multispectral tiles.
// Subcommands wire the library pipeline into reproducible, config-driven
// runs. Exit codes: 0 success, 2 bad config, 3 missing inputs, 4 runtime
// failure.
#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "msd/config.hpp"
#include "msd/pipeline.hpp"

namespace {

constexpr int kExitBadConfig = 2;
constexpr int kExitMissingInput = 3;
constexpr int kExitRuntime = 4;

struct CommonArgs {
    std::string config_path;
    std::string out = "runs/default";
    std::uint64_t seed = 0;
    double far = -1.0;
    int tile_size = 0;
    bool per_band = false;
    bool force = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_config = true) {
    auto* opt = cmd->add_option("--config", args.config_path, "experiment config file");
    if (needs_config) opt->required();
    cmd->add_option("--out", args.out, "output directory");
    cmd->add_option("--seed", args.seed, "root seed override");
    cmd->add_option("--far", args.far, "target false-alarm rate override");
    cmd->add_option("--tile-size", args.tile_size, "tile size override");
    cmd->add_flag("--per-band", args.per_band, "train one model per band");
    cmd->add_flag("--force", args.force, "overwrite existing outputs");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"one-class detection of synthetic multispectral imagery"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string report_table;

    auto* synth = app.add_subcommand("synth", "generate pseudo-datasets from config");
    add_common(synth, args);
    auto* ingest = app.add_subcommand("ingest", "upsample, retile and filter raw scenes");
    add_common(ingest, args);
    auto* train_vqvae = app.add_subcommand("train-vqvae", "train one-class autoencoders");
    add_common(train_vqvae, args);
    auto* train_baseline = app.add_subcommand("train-baseline", "train the two-class baseline");
    add_common(train_baseline, args);
    auto* calibrate = app.add_subcommand("calibrate", "calibrate detection thresholds");
    add_common(calibrate, args);
    auto* detect = app.add_subcommand("detect", "score tiles against thresholds");
    add_common(detect, args);
    auto* evaluate = app.add_subcommand("evaluate", "run the experiment grid and emit reports");
    add_common(evaluate, args);
    auto* report = app.add_subcommand("report", "re-emit a summary from a report table");
    add_common(report, args, false);
    report->add_option("--table", report_table, "report.tsv to summarize")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        msd::pipeline::Overrides ov;
        ov.seed = args.seed;
        ov.far = args.far;
        ov.tile_size = args.tile_size;
        ov.per_band = args.per_band;
        ov.force = args.force;

        if (report->parsed()) {
            msd::pipeline::cmd_report(report_table, std::filesystem::path(args.out));
            return 0;
        }

        const auto config = msd::cfg::Config::parse_file(args.config_path);
        const auto paths = msd::pipeline::run_paths(config, args.out);
        std::filesystem::create_directories(paths.out);

        if (synth->parsed()) {
            msd::pipeline::write_echo(config, paths, "synth", ov);
            msd::pipeline::cmd_synth(config, paths, ov);
        } else if (ingest->parsed()) {
            msd::pipeline::write_echo(config, paths, "ingest", ov);
            msd::pipeline::cmd_ingest(config, paths, ov);
        } else if (train_vqvae->parsed()) {
            msd::pipeline::write_echo(config, paths, "train-vqvae", ov);
            msd::pipeline::cmd_train_vqvae(config, paths, ov);
        } else if (train_baseline->parsed()) {
            msd::pipeline::write_echo(config, paths, "train-baseline", ov);
            msd::pipeline::cmd_train_baseline(config, paths, ov);
        } else if (calibrate->parsed()) {
            msd::pipeline::write_echo(config, paths, "calibrate", ov);
            msd::pipeline::cmd_calibrate(config, paths, ov);
        } else if (detect->parsed()) {
            msd::pipeline::write_echo(config, paths, "detect", ov);
            msd::pipeline::cmd_detect(config, paths, ov);
        } else if (evaluate->parsed()) {
            msd::pipeline::write_echo(config, paths, "evaluate", ov);
            msd::pipeline::cmd_evaluate(config, paths, ov);
        }
        return 0;
    } catch (const msd::cfg::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitBadConfig;
    } catch (const msd::pipeline::MissingInputError& e) {
        std::fprintf(stderr, "missing input: %s\n", e.what());
        return kExitMissingInput;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
}

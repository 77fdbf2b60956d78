#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sgvqa/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Scene-graph VQA with self-supervised dual-view training"};
    app.set_version_flag("--version", sgvqa::kVersion);
    std::string config;
    std::vector<std::string> overrides;
    std::string out = "runs/default";
    bool force = false;
    std::optional<std::uint64_t> seed;

    app.add_option("--config", config, "experiment config (JSON); empty means defaults");
    app.add_option("--set", overrides, "override one field, key=value with a dotted key")->allow_extra_args(false)->take_all();
    app.add_option("--out", out, "output directory")->capture_default_str();
    app.add_option("--seed", seed, "sets both corpus.seed and train.seed");
    app.add_flag("--force", force, "replace existing outputs");
    app.require_subcommand(1, 1);
    app.fallthrough();

    const std::vector<std::pair<std::string, std::string>> cmds{
        {"gen-data", "generate the synthetic corpus"},
        {"train", "train a model on the corpus"},
        {"eval", "evaluate a checkpoint"},
        {"ablate", "accuracy change under disruptive augmentations"},
        {"probe", "accuracy under graph and question noise"},
        {"sweep", "train on nested fractions of the training scenes"},
        {"gradcheck", "finite-difference check of the training loss"}};
    for (const auto& [name, help] : cmds) app.add_subcommand(name, help);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        std::cerr << sgvqa::error_json("usage", e.what(), sgvqa::kExitConfig).dump() << "\n";
        return sgvqa::kExitConfig;
    }
    if (seed) {
        overrides.push_back("corpus.seed=" + std::to_string(*seed));
        overrides.push_back("train.seed=" + std::to_string(*seed));
    }
    sgvqa::RunOptions opts;
    opts.out = out;
    opts.force = force;
    return sgvqa::cli_main(app.get_subcommands().front()->get_name(), config, overrides, opts, std::cerr);
}

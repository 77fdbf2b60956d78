#pragma once

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgvqa/config.hpp"
#include "sgvqa/corpus.hpp"
#include "sgvqa/model.hpp"
#include "sgvqa/trainer.hpp"
#include "sgvqa/verify.hpp"

namespace sgvqa {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
    kExitOk = 0,
    kExitError = 1,
    kExitConfig = 2,
    kExitMissing = 3,
    kExitDivergence = 4,
    kExitExists = 5,
    kExitCheckFailed = 6,
};

/// Failure carrying an exit code and a machine-readable kind.
class CommandError : public std::runtime_error {
   public:
    CommandError(int code, std::string kind, const std::string& what, std::string path = {})
        : std::runtime_error(what), code_(code), kind_(std::move(kind)), path_(std::move(path)) {}
    int code() const { return code_; }
    const std::string& kind() const { return kind_; }
    const std::string& path() const { return path_; }

   private:
    int code_;
    std::string kind_, path_;
};

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> n{"gen-data", "train", "eval", "ablate", "probe", "sweep", "gradcheck"};
    return n;
}

struct RunOptions {
    std::filesystem::path out = "runs/default";
    bool force = false;
    std::ostream* log = &std::cout;  // human summary
};

inline json error_json(const std::string& kind, const std::string& message, int code, const std::string& path = {}) {
    json e = {{"kind", kind}, {"message", message}, {"exit_code", code}};
    if (!path.empty()) e["path"] = path;
    return {{"error", e}};
}

namespace detail {

/// The part of the config a command depends on; hashed for idempotency.
inline json command_inputs(const std::string& cmd, const ExperimentConfig& c) {
    json j = {{"command", cmd}, {"version", kVersion}};
    if (cmd == "gradcheck") {
        j["gradcheck"] = c.gradcheck;
        j["loss"] = c.train.loss;
        j["seed"] = c.train.seed;
        return j;
    }
    j["corpus"] = c.corpus;
    if (cmd == "gen-data") return j;
    j["train"] = c.train;
    if (cmd == "eval") j["eval"] = c.eval;
    if (cmd == "ablate") j["ablate"] = c.ablate;
    if (cmd == "probe") j["probe"] = c.probe;
    if (cmd == "sweep") j["sweep"] = c.sweep;
    return j;
}

inline std::string dir_name(const std::string& cmd) { return cmd == "gen-data" ? "corpus" : cmd; }

inline std::string file_hash(const std::filesystem::path& p) { return hex64(fnv1a(read_text(p))); }

/// Lists files in a directory (not recursing) with content hashes, manifest excluded.
inline json file_hashes(const std::filesystem::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.json") names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    json out = json::object();
    for (const auto& n : names) out[n] = file_hash(dir / n);
    return out;
}

enum class Freshness { missing, current, stale };

inline Freshness freshness(const std::filesystem::path& dir, const std::string& hash) {
    const auto m = dir / "manifest.json";
    if (!std::filesystem::exists(m)) return Freshness::missing;
    try {
        return json::parse(read_text(m)).at("config_hash").get<std::string>() == hash ? Freshness::current
                                                                                        : Freshness::stale;
    } catch (const json::exception&) {
        return Freshness::stale;
    }
}

inline void write_manifest(const std::filesystem::path& dir, const std::string& cmd, const ExperimentConfig& c,
                           const std::string& hash, json extra = json::object()) {
    json m = {{"format", "sgvqa-artifact"},
              {"command", cmd},
              {"config_hash", hash},
              {"seed", c.train.seed},
              {"versions", {{"sgvqa", kVersion}, {"checkpoint", kCheckpointVersion}, {"vocab_hash", vocab_hash()}}},
              {"config", c},
              {"files", file_hashes(dir)}};
    m.update(extra);
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

inline Corpus require_corpus(const std::filesystem::path& out, const ExperimentConfig& c) {
    const auto dir = out / "corpus";
    if (!std::filesystem::exists(dir / "manifest.json"))
        throw CommandError(kExitMissing, "missing_prerequisite",
                           "corpus not found at " + dir.string() + " (run gen-data first)", dir.string());
    const json m = json::parse(read_text(dir / "manifest.json"));
    const json want = c.corpus;
    if (m.at("config") != want)
        throw CommandError(kExitConfig, "stale_prerequisite",
                           "corpus at " + dir.string() + " was built from a different corpus config", dir.string());
    return load_corpus(dir);
}

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out, const ExperimentConfig& c) {
    return c.eval.checkpoint.empty() ? out / "train" / "checkpoint.json" : std::filesystem::path(c.eval.checkpoint);
}

inline ModelParams require_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw CommandError(kExitMissing, "missing_prerequisite",
                           "checkpoint not found at " + path.string() + " (run train first)", path.string());
    Checkpoint ck = load_checkpoint(path);
    if (ck.vocab_hash != vocab_hash())
        throw CommandError(kExitConfig, "vocab_mismatch",
                           "checkpoint " + path.string() + " was trained with a different vocabulary", path.string());
    return std::move(ck.params);
}

inline std::string rows_csv(const std::vector<PerturbationRow>& rows) {
    std::string s = "name,subset,count,clean,perturbed,delta\n";
    for (const auto& r : rows)
        s += r.name + "," + r.subset + "," + std::to_string(r.count) + "," + fmt(r.clean) + "," + fmt(r.perturbed) +
             "," + fmt(r.delta) + "\n";
    return s;
}

inline void print_rows(std::ostream& os, const std::vector<PerturbationRow>& rows) {
    for (const auto& r : rows)
        os << "  " << r.name << " [" << r.subset << ", n=" << r.count << "] clean " << fmt(r.clean) << " perturbed "
           << fmt(r.perturbed) << " delta " << fmt(r.delta) << "\n";
}

inline void cmd_gen_data(const ExperimentConfig& c, const std::filesystem::path& dir, std::ostream& log) {
    Corpus corpus = build_corpus(c.corpus, dir);
    log << "corpus: " << corpus.scenes.size() << " scenes, " << corpus.items.size() << " items -> " << dir.string()
        << "\n";
}

inline void cmd_train(const ExperimentConfig& c, const std::filesystem::path& out, const std::filesystem::path& dir,
                      std::ostream& log) {
    const Corpus corpus = require_corpus(out, c);
    std::string metrics = metrics_csv_header();
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochLog& e, const ModelParams& p, std::uint64_t step) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d.json", e.epoch);
        save_checkpoint({p, c.train.seed, step, vocab_hash()}, dir / name);
        if (e.val) metrics += metrics_csv_row(e.epoch, "val", *e.val, e.sup, e.prime, e.link, e.repr_std);
        log << "epoch " << e.epoch << " lr " << fmt(e.lr) << " L_sup " << fmt(e.sup) << " L_prime " << fmt(e.prime)
            << " J_e " << fmt(e.link) << " repr_std " << fmt(e.repr_std);
        if (e.val) log << " val " << fmt(e.val->overall);
        log << "\n";
    };
    TrainResult r;
    try {
        r = train(c.train, corpus, hooks);
    } catch (const DivergenceError& e) {
        write_text(dir / "metrics.csv", metrics);
        throw CommandError(kExitDivergence, "divergence", e.what());
    }
    save_checkpoint({r.params, c.train.seed, r.steps, vocab_hash()}, dir / "checkpoint.json");
    write_text(dir / "metrics.csv", metrics);
    write_text(dir / "steps.csv", steps_csv(r.step_log));
    json epochs = json::array();
    for (const auto& e : r.epochs) {
        json j = {{"epoch", e.epoch}, {"lr", e.lr},   {"L_sup", e.sup},
                  {"L_prime", e.prime}, {"J_e", e.link}, {"total", e.total}, {"repr_std", e.repr_std}};
        if (e.val) j["val"] = *e.val;
        epochs.push_back(j);
    }
    write_text(dir / "report.json",
               json({{"steps", r.steps}, {"initial_repr_std", r.initial_repr_std}, {"epochs", epochs}}).dump(2) + "\n");
    log << "trained " << r.steps << " steps -> " << (dir / "checkpoint.json").string() << "\n";
}

inline void cmd_eval(const ExperimentConfig& c, const std::filesystem::path& out, const std::filesystem::path& dir,
                     std::ostream& log) {
    const ModelParams p = require_checkpoint(checkpoint_path(out, c));
    const Corpus corpus = require_corpus(out, c);
    const Split split = split_from_string(c.eval.split);
    const auto m = evaluate(p, corpus, split, c.train.seed);
    write_text(dir / "metrics.json", json(m).dump(2) + "\n");
    std::string csv = metrics_csv_header();
    csv += metrics_csv_row(0, c.eval.split, m, 0, 0, 0,
                           representation_std(p, corpus, split, c.train.seed,
                                              static_cast<std::size_t>(c.train.repr_sample)));
    write_text(dir / "metrics.csv", csv);
    log << c.eval.split << ": overall " << fmt(m.overall) << " binary " << fmt(m.binary) << " open " << fmt(m.open)
        << " consistency " << fmt(m.consistency) << " validity " << fmt(m.validity) << " (n=" << m.count << ")\n";
}

inline std::vector<PerturbationSetup> ablate_setups(const AblateOptions& o) {
    auto s = disruptive_setups();
    s[1].perturbation.augment.jitter_fraction = o.jitter_fraction;
    s[2].perturbation.augment.noise_sigma = o.crop_sigma;
    s[2].perturbation.augment.crop_margin = o.crop_margin;
    return s;
}

inline void cmd_perturb(const std::string& cmd, const ExperimentConfig& c, const std::filesystem::path& out,
                        const std::filesystem::path& dir, std::ostream& log) {
    const ModelParams p = require_checkpoint(checkpoint_path(out, c));
    const Corpus corpus = require_corpus(out, c);
    const bool ab = cmd == "ablate";
    const auto setups = ab ? ablate_setups(c.ablate) : noise_setups(c.probe.feature_sigma, c.probe.question_noise);
    const auto rows = perturbation_report(p, corpus, split_from_string(ab ? c.ablate.split : c.probe.split),
                                         c.train.seed, setups);
    write_text(dir / "report.json", json(rows).dump(2) + "\n");
    write_text(dir / "report.csv", rows_csv(rows));
    print_rows(log, rows);
}

inline void cmd_sweep(const ExperimentConfig& c, const std::filesystem::path& out, const std::filesystem::path& dir,
                      std::ostream& log) {
    const Corpus corpus = require_corpus(out, c);
    std::vector<SweepPoint> curve;
    try {
        curve = fraction_sweep(c.train, corpus, c.sweep.fractions);
    } catch (const DivergenceError& e) {
        throw CommandError(kExitDivergence, "divergence", e.what());
    }
    write_text(dir / "curve.json", json(curve).dump(2) + "\n");
    std::string csv = "fraction,train_scenes,overall,binary,open,consistency,validity\n";
    for (const auto& pt : curve) {
        csv += fmt(pt.fraction) + "," + std::to_string(pt.train_scenes) + "," + fmt(pt.test.overall) + "," +
               fmt(pt.test.binary) + "," + fmt(pt.test.open) + "," + fmt(pt.test.consistency) + "," +
               fmt(pt.test.validity) + "\n";
        log << "fraction " << fmt(pt.fraction) << " (" << pt.train_scenes << " scenes): test " << fmt(pt.test.overall)
            << "\n";
    }
    write_text(dir / "curve.csv", csv);
}

/// Returns false when some tensor exceeds the tolerance.
inline bool cmd_gradcheck(const ExperimentConfig& c, const std::filesystem::path& dir, std::ostream& log) {
    const Preset preset = preset_from_string(c.gradcheck.preset);
    const auto configs = c.gradcheck.all_variants ? all_loss_configs() : std::vector<LossConfig>{c.train.loss};
    json records = json::array();
    double worst = 0;
    for (const auto& lc : configs) {
        const auto rep = total_loss_gradcheck(preset, lc, c.train.seed, c.gradcheck.eps,
                                              static_cast<std::size_t>(c.gradcheck.max_coords),
                                              static_cast<std::size_t>(c.gradcheck.items));
        for (const auto& p : rep.params)
            records.push_back({{"variant", to_string(lc.variant)},
                               {"link_reg", lc.link_reg},
                               {"param_name", p.name},
                               {"max_rel_err", p.max_rel_err},
                               {"eps", rep.eps},
                               {"coords", p.coords_checked}});
        worst = std::max(worst, rep.max_rel_err());
        log << to_string(lc.variant) << (lc.link_reg ? "+link" : "") << ": max_rel_err " << fmt(rep.max_rel_err())
            << "\n";
    }
    const bool ok = worst <= c.gradcheck.tolerance;
    write_text(dir / "gradcheck.json", json({{"preset", c.gradcheck.preset},
                                             {"eps", c.gradcheck.eps},
                                             {"tolerance", c.gradcheck.tolerance},
                                             {"max_rel_err", worst},
                                             {"pass", ok},
                                             {"records", records}})
                                           .dump(2) +
                                           "\n");
    return ok;
}

}  // namespace detail

/// Runs one command. Artifacts go to <out>/<command>/ (the corpus to
/// <out>/corpus/). A directory whose manifest matches the current inputs is
/// left untouched unless `force` is set; one built from other inputs is an
/// error without `force`.
inline int run_command(const std::string& cmd, const ExperimentConfig& c, const RunOptions& opts) {
    if (std::find(command_names().begin(), command_names().end(), cmd) == command_names().end())
        throw CommandError(kExitConfig, "unknown_command", "unknown command '" + cmd + "'");
    std::ostream& log = *opts.log;
    const auto dir = opts.out / detail::dir_name(cmd);
    // the corpus manifest keeps the corpus writer's own hash so load_corpus can read it
    const std::string hash =
        cmd == "gen-data" ? config_hash(json(c.corpus)) : config_hash(detail::command_inputs(cmd, c));
    switch (detail::freshness(dir, hash)) {
        case detail::Freshness::current:
            if (!opts.force) {
                log << cmd << ": up to date (" << dir.string() << ")\n";
                return kExitOk;
            }
            break;
        case detail::Freshness::stale:
            if (!opts.force)
                throw CommandError(kExitExists, "output_exists",
                                   dir.string() + " holds results from a different config; pass --force to replace",
                                   dir.string());
            break;
        case detail::Freshness::missing:
            if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir) && !opts.force)
                throw CommandError(kExitExists, "output_exists",
                                   dir.string() + " exists without a manifest; pass --force to replace", dir.string());
            break;
    }
    // resolve prerequisites before clearing anything
    if (cmd == "eval" || cmd == "ablate" || cmd == "probe") detail::require_checkpoint(detail::checkpoint_path(opts.out, c));
    if (cmd != "gen-data" && cmd != "gradcheck") detail::require_corpus(opts.out, c);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);

    int code = kExitOk;
    if (cmd == "gen-data") detail::cmd_gen_data(c, dir, log);
    else if (cmd == "train") detail::cmd_train(c, opts.out, dir, log);
    else if (cmd == "eval") detail::cmd_eval(c, opts.out, dir, log);
    else if (cmd == "ablate" || cmd == "probe") detail::cmd_perturb(cmd, c, opts.out, dir, log);
    else if (cmd == "sweep") detail::cmd_sweep(c, opts.out, dir, log);
    else if (!detail::cmd_gradcheck(c, dir, log)) code = kExitCheckFailed;
    if (cmd == "gen-data") {
        json m = json::parse(read_text(dir / "manifest.json"));
        m["command"] = cmd;
        m["versions"] = {{"sgvqa", kVersion}, {"vocab_hash", vocab_hash()}};
        m["files"] = detail::file_hashes(dir);
        write_text(dir / "manifest.json", m.dump(2) + "\n");
    } else {
        detail::write_manifest(dir, cmd, c, hash);
    }
    if (code == kExitCheckFailed)
        throw CommandError(kExitCheckFailed, "gradcheck_failed",
                           "gradient check exceeded tolerance; see " + (dir / "gradcheck.json").string());
    return code;
}

/// Full front end shared by the executable and the tests: parses the config,
/// runs the command, and turns every failure into an exit code plus an error
/// envelope on `err`.
inline int cli_main(const std::string& cmd, const std::filesystem::path& config_path,
                    const std::vector<std::string>& overrides, const RunOptions& opts, std::ostream& err) {
    try {
        const ExperimentConfig c = parse_config(config_path, overrides);
        return run_command(cmd, c, opts);
    } catch (const ConfigError& e) {
        err << error_json("config", e.what(), kExitConfig, e.path()).dump() << "\n";
        return kExitConfig;
    } catch (const CommandError& e) {
        err << error_json(e.kind(), e.what(), e.code(), e.path()).dump() << "\n";
        return e.code();
    } catch (const std::exception& e) {
        err << error_json("internal", e.what(), kExitError).dump() << "\n";
        return kExitError;
    }
}

}  // namespace sgvqa

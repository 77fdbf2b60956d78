#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgvqa/corpus.hpp"
#include "sgvqa/losses.hpp"
#include "sgvqa/model.hpp"
#include "sgvqa/optim.hpp"
#include "sgvqa/pipeline.hpp"

namespace sgvqa {

NLOHMANN_JSON_SERIALIZE_ENUM(AugmentKind, {{AugmentKind::identity, "identity"},
                                           {AugmentKind::flip, "flip"},
                                           {AugmentKind::attribute_jitter, "attribute_jitter"},
                                           {AugmentKind::noise_crop, "noise_crop"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Preset, {{Preset::desk, "desk"}, {Preset::paper, "paper"}, {Preset::tiny, "tiny"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentParams, jitter_fraction, noise_sigma, crop_margin)

/// Raised when the training loss stops being finite.
class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    LossConfig loss;
    Preset preset = Preset::desk;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    int batch_size = 32;
    int epochs = 15;
    double lr_decay = 0.1;
    int decay_period = 10;
    std::uint64_t seed = 0;
    double data_fraction = 1.0;
    std::vector<AugmentKind> augmentations{AugmentKind::flip, AugmentKind::attribute_jitter, AugmentKind::noise_crop};
    AugmentParams augment;
    bool eval_each_epoch = true;
    int repr_sample = 256;  // items used for the collapse statistic

    /// Optimizer schedule of the original GloVe track.
    static TrainConfig paper_defaults() {
        TrainConfig c;
        c.preset = Preset::paper;
        c.lr = 1e-4;
        c.weight_decay = 1e-4;
        c.batch_size = 64;
        c.epochs = 50;
        c.lr_decay = 0.1;
        c.decay_period = 20;
        return c;
    }

    void validate(const std::string& prefix = "train.") const {
        auto fail = [&](const std::string& f, const std::string& m) { throw std::invalid_argument(prefix + f + ": " + m); };
        loss.validate(prefix + "loss.");
        if (!(lr > 0.0)) fail("lr", "must be > 0");
        if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
        if (batch_size < 1) fail("batch_size", "must be positive");
        if (epochs < 1) fail("epochs", "must be positive");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay", "must be in (0, 1]");
        if (decay_period < 0) fail("decay_period", "must be >= 0");
        if (!(data_fraction > 0.0 && data_fraction <= 1.0)) fail("data_fraction", "must be in (0, 1]");
        if (augmentations.empty()) fail("augmentations", "needs at least one kind");
        if (repr_sample < 2) fail("repr_sample", "must be at least 2");
    }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, loss, preset, lr, weight_decay, batch_size, epochs,
                                                lr_decay, decay_period, seed, data_fraction, augmentations, augment,
                                                eval_each_epoch, repr_sample)

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
    std::size_t count = 0;
    double overall = 0.0;
    double binary = 0.0;
    double open = 0.0;
    double consistency = 0.0;
    double validity = 0.0;
    std::map<std::string, double> per_qtype;
    std::map<std::string, std::size_t> per_qtype_count;
    std::size_t binary_count = 0;
    std::size_t open_count = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MetricsReport, count, overall, binary, open, consistency, validity,
                                                per_qtype, per_qtype_count, binary_count, open_count)

/// Scores predictions against stored answers. Consistency is the fraction of
/// paraphrase groups (two or more members present) whose members all receive
/// the same prediction.
inline MetricsReport score(std::span<const QAItem* const> items, std::span<const int> predictions) {
    if (items.size() != predictions.size()) throw std::invalid_argument("score: prediction count mismatch");
    MetricsReport r;
    r.count = items.size();
    std::size_t correct = 0, bin_ok = 0, open_ok = 0, valid = 0;
    std::map<std::string, std::size_t> q_ok;
    std::map<int, std::set<int>> group_preds;
    std::map<int, std::size_t> group_size;
    for (auto n : kQTypeNames) r.per_qtype_count[std::string(n)] = 0, q_ok[std::string(n)] = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
        const QAItem& it = *items[i];
        const int pred = predictions[i];
        const bool ok = pred == it.answer;
        correct += ok;
        (it.binary ? r.binary_count : r.open_count) += 1;
        (it.binary ? bin_ok : open_ok) += ok;
        const std::string qt(to_string(it.qtype));
        r.per_qtype_count[qt] += 1;
        q_ok[qt] += ok;
        valid += std::find(it.valid_answers.begin(), it.valid_answers.end(), pred) != it.valid_answers.end();
        group_preds[it.paraphrase_group].insert(pred);
        group_size[it.paraphrase_group] += 1;
    }
    auto rate = [](std::size_t a, std::size_t b) { return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0; };
    r.overall = rate(correct, r.count);
    r.binary = rate(bin_ok, r.binary_count);
    r.open = rate(open_ok, r.open_count);
    r.validity = rate(valid, r.count);
    for (auto& [k, n] : r.per_qtype_count) r.per_qtype[k] = rate(q_ok[k], n);
    std::size_t groups = 0, agree = 0;
    for (auto& [g, n] : group_size)
        if (n >= 2) ++groups, agree += group_preds[g].size() == 1;
    r.consistency = rate(agree, groups);
    return r;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Optional corruption applied at evaluation time.
struct EvalPerturbation {
    std::optional<AugmentKind> scene_augment;  // applied to the scene before realization
    AugmentParams augment;
    double feature_noise = 0.0;   // extra Gaussian noise on node features, topology kept
    double question_noise = 0.0;  // replace up to this fraction of tokens
};

struct Prediction {
    std::vector<int> answers;
    std::vector<std::vector<double>> graph_vectors;  // filled when requested
};

namespace detail {

inline std::vector<int> noisy_question(const std::vector<int>& q, double frac, Rng& rng) {
    std::vector<int> out = q;
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < q.size(); ++i)
        if (q[i] != vocab::kPad) pos.push_back(i);
    const auto max_k = static_cast<std::size_t>(std::floor(frac * static_cast<double>(pos.size())));
    const std::size_t k = rng.below(max_k + 1);
    rng.shuffle(pos);
    const auto nwords = vocab::words().size();
    for (std::size_t i = 0; i < k; ++i) out[pos[i]] = 1 + static_cast<int>(rng.below(nwords - 1));
    return out;
}

}  // namespace detail

/// Anchor graph realization used for evaluation. Keyed by scene only, so the
/// clean and perturbed passes see identical realization noise.
inline SceneGraph eval_graph(const Corpus& corpus, int scene_id, const FeatureProjection& proj, std::uint64_t seed,
                             const EvalPerturbation& pert) {
    const SceneSpec& base = corpus.scene(scene_id);
    Rng rng = Rng::stream(seed, "eval", static_cast<std::uint64_t>(scene_id));
    SceneSpec spec = base;
    if (pert.scene_augment) {
        Rng arng = Rng::stream(seed, "eval-augment", static_cast<std::uint64_t>(scene_id));
        try {
            spec = augment_scene(base, *pert.scene_augment, pert.augment, corpus.config.geometry, arng);
        } catch (const SceneError&) {
            spec = base;
        }
    }
    SceneGraph g = realize_graph(spec, corpus.config.realize, proj, corpus.config.geometry, rng);
    if (pert.feature_noise > 0) {
        Rng nrng = Rng::stream(seed, "eval-feature-noise", static_cast<std::uint64_t>(scene_id));
        for (auto& n : g.nodes)
            for (auto& v : n.features) v += nrng.normal(0.0, pert.feature_noise);
    }
    return g;
}

/// Eval-mode forward over a list of items. Never mutates params.
inline Prediction predict(const ModelParams& params, const Corpus& corpus, std::span<const QAItem* const> items,
                          std::uint64_t seed, const EvalPerturbation& pert = {}, bool want_graph_vectors = false) {
    const FeatureProjection proj(corpus.config.seed, static_cast<std::size_t>(corpus.config.node_dim));
    std::map<int, SceneGraph> cache;
    Prediction out;
    Tape tape;
    tape.set_recording(false);
    Rng unused = Rng::stream(seed, "eval-dropout");
    for (const QAItem* it : items) {
        auto gi = cache.find(it->scene_id);
        if (gi == cache.end()) gi = cache.emplace(it->scene_id, eval_graph(corpus, it->scene_id, proj, seed, pert)).first;
        std::vector<int> q = it->question;
        if (pert.question_noise > 0) {
            Rng qrng = Rng::stream(seed, "eval-question-noise", static_cast<std::uint64_t>(it->item_id));
            q = detail::noisy_question(q, pert.question_noise, qrng);
        }
        auto inst = encode_question(tape, embed_tokens(tape, q, params), params);
        auto enc = encode_graph(tape, gi->second, inst, params);
        auto logits = classify(tape, enc.graph, inst.question, params, Mode::eval, unused);
        const auto row = logits.data();
        out.answers.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
        if (want_graph_vectors) out.graph_vectors.push_back(enc.graph.row_values(0));
    }
    return out;
}

/// Mean over dimensions of the per-dimension standard deviation of
/// L2-normalized vectors. Collapsed representations drive this to zero.
inline double normalized_std(const std::vector<std::vector<double>>& vecs) {
    if (vecs.size() < 2) return 0.0;
    const std::size_t d = vecs[0].size();
    std::vector<std::vector<double>> unit;
    for (const auto& v : vecs) {
        double n = 0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        std::vector<double> u(d);
        for (std::size_t j = 0; j < d; ++j) u[j] = n > kNormFloor ? v[j] / n : 0.0;
        unit.push_back(std::move(u));
    }
    double total = 0;
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0;
        for (const auto& u : unit) mean += u[j];
        mean /= static_cast<double>(unit.size());
        double var = 0;
        for (const auto& u : unit) var += (u[j] - mean) * (u[j] - mean);
        total += std::sqrt(var / static_cast<double>(unit.size()));
    }
    return total / static_cast<double>(d);
}

inline MetricsReport evaluate(const ModelParams& params, const Corpus& corpus, Split split, std::uint64_t seed,
                              const EvalPerturbation& pert = {}) {
    const auto items = corpus.split_items(split);
    if (items.empty()) throw std::invalid_argument("evaluate: split '" + std::string(to_string(split)) + "' is empty");
    const auto pred = predict(params, corpus, items, seed, pert);
    return score(items, pred.answers);
}

inline double representation_std(const ModelParams& params, const Corpus& corpus, Split split, std::uint64_t seed,
                                  std::size_t sample) {
    auto items = corpus.split_items(split);
    if (items.size() > sample) items.resize(sample);
    return normalized_std(predict(params, corpus, items, seed, {}, true).graph_vectors);
}

// ---------------------------------------------------------------------------
// Training

struct StepLog {
    std::uint64_t step = 0;
    int epoch = 0;
    double sup = 0, prime = 0, link = 0, total = 0;
};

struct EpochLog {
    int epoch = 0;  // 1-based
    double lr = 0;
    double sup = 0, prime = 0, link = 0, total = 0;  // means over the epoch's steps
    double repr_std = 0;
    std::optional<MetricsReport> val;
};

struct TrainResult {
    ModelParams params;
    std::uint64_t steps = 0;
    double initial_repr_std = 0;
    std::vector<EpochLog> epochs;
    std::vector<StepLog> step_log;
};

struct TrainHooks {
    std::function<void(const EpochLog&, const ModelParams&, std::uint64_t step)> on_epoch;
};

/// Train-split scene ids in a fixed shuffled order; fraction f keeps a
/// prefix, so smaller fractions are subsets of larger ones.
inline std::vector<int> fraction_scenes(const Corpus& corpus, std::uint64_t seed, double fraction) {
    std::vector<int> ids;
    for (std::size_t s = 0; s < corpus.scenes.size(); ++s)
        if (corpus.scene_split[s] == Split::train) ids.push_back(static_cast<int>(s));
    Rng rng = Rng::stream(seed, "fraction");
    rng.shuffle(ids);
    const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(ids.size()) - 1e-9));
    ids.resize(std::min(ids.size(), keep));
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline ModelConfig model_config_for(const TrainConfig& cfg, const Corpus& corpus) {
    ModelConfig mc = ModelConfig::for_preset(cfg.preset);
    if (mc.dims.node != static_cast<std::size_t>(corpus.config.node_dim))
        throw std::invalid_argument("corpus.node_dim (" + std::to_string(corpus.config.node_dim) +
                                    ") must equal the node width of preset '" + std::string(to_string(cfg.preset)) +
                                    "' (" + std::to_string(mc.dims.node) + ")");
    return mc;
}

inline TrainResult train(const TrainConfig& cfg, const Corpus& corpus, const TrainHooks& hooks = {},
                         std::optional<ModelParams> start = std::nullopt) {
    cfg.validate();
    TrainResult res;
    res.params = start ? std::move(*start) : init_model(model_config_for(cfg, corpus), cfg.seed);
    ModelParams& p = res.params;
    const FeatureProjection proj(corpus.config.seed, static_cast<std::size_t>(corpus.config.node_dim));
    const Geometry& geom = corpus.config.geometry;

    const auto scenes = fraction_scenes(corpus, cfg.seed, cfg.data_fraction);
    const std::set<int> scene_set(scenes.begin(), scenes.end());
    std::vector<const QAItem*> pool;
    for (const QAItem* it : corpus.split_items(Split::train))
        if (scene_set.count(it->scene_id)) pool.push_back(it);
    if (pool.size() < static_cast<std::size_t>(cfg.batch_size))
        throw std::invalid_argument("train.data_fraction: " + std::to_string(cfg.data_fraction) + " yields " +
                                    std::to_string(pool.size()) + " items, fewer than one batch");

    Adam opt(p.named(), {0.9, 0.999, 1e-8, cfg.weight_decay});
    const bool sim = cfg.loss.similarity();
    res.initial_repr_std =
        representation_std(p, corpus, Split::val, cfg.seed, static_cast<std::size_t>(cfg.repr_sample));

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = scheduled_lr(cfg.lr, cfg.lr_decay, cfg.decay_period, epoch);
        std::vector<const QAItem*> order = pool;
        Rng shuffle = Rng::stream(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
        shuffle.shuffle(order);
        EpochLog log;
        log.epoch = epoch + 1;
        log.lr = lr;
        std::size_t nsteps = 0;
        for (std::size_t start_i = 0; start_i < order.size(); start_i += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end_i = std::min(order.size(), start_i + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t n = end_i - start_i;
            std::vector<SceneGraph> anchors(n), augmented(sim ? n : 0);
            std::vector<Example> batch(n);
            for (std::size_t b = 0; b < n; ++b) {
                const QAItem& it = *order[start_i + b];
                const SceneSpec& spec = corpus.scene(it.scene_id);
                const auto key = static_cast<std::uint64_t>(it.item_id);
                Rng r1 = Rng::stream(cfg.seed, "view1", static_cast<std::uint64_t>(epoch), key);
                anchors[b] = realize_graph(spec, corpus.config.realize, proj, geom, r1);
                batch[b] = {&anchors[b], nullptr, it.question, static_cast<std::size_t>(it.answer)};
                if (sim) {
                    Rng ar = Rng::stream(cfg.seed, "augment", static_cast<std::uint64_t>(epoch), key);
                    const AugmentKind kind = cfg.augmentations[ar.below(cfg.augmentations.size())];
                    SceneSpec aug;
                    try {
                        aug = augment_scene(spec, kind, cfg.augment, geom, ar);
                    } catch (const SceneError&) {
                        aug = spec;  // crop removed too much; fall back to a re-realized copy
                    }
                    Rng r2 = Rng::stream(cfg.seed, "view2", static_cast<std::uint64_t>(epoch), key);
                    augmented[b] = realize_graph(aug, corpus.config.realize, proj, geom, r2);
                    batch[b].augmented = &augmented[b];
                }
            }
            Tape tape;
            Rng drop = Rng::stream(cfg.seed, "dropout", res.steps);
            auto items = forward_batch(tape, p, cfg.loss, std::span<const Example>(batch), Mode::train, drop);
            auto parts = total_loss(tape, cfg.loss, items);
            const double total = parts.total.item();
            if (!std::isfinite(total))
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                      std::to_string(res.steps) + " (L_sup=" + std::to_string(parts.sup) +
                                      ", L_prime=" + std::to_string(parts.prime) + ")");
            tape.backward(parts.total);
            opt.step(lr);
            opt.zero_grad();
            res.step_log.push_back({res.steps, epoch + 1, parts.sup, parts.prime, parts.link, total});
            ++res.steps;
            ++nsteps;
            log.sup += parts.sup, log.prime += parts.prime, log.link += parts.link, log.total += total;
        }
        const double k = 1.0 / static_cast<double>(nsteps);
        log.sup *= k, log.prime *= k, log.link *= k, log.total *= k;
        log.repr_std = representation_std(p, corpus, Split::val, cfg.seed, static_cast<std::size_t>(cfg.repr_sample));
        if (cfg.eval_each_epoch) log.val = evaluate(p, corpus, Split::val, cfg.seed);
        res.epochs.push_back(log);
        if (hooks.on_epoch) hooks.on_epoch(log, p, res.steps);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Protocols

struct PerturbationSetup {
    std::string name;
    std::optional<QType> subset;  // questions evaluated; all when empty
    EvalPerturbation perturbation;
};

struct PerturbationRow {
    std::string name;
    std::string subset;
    std::size_t count = 0;
    double clean = 0;
    double perturbed = 0;
    double delta = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PerturbationRow, name, subset, count, clean, perturbed, delta)

/// Disruptive augmentations matched to the question types they break.
inline std::vector<PerturbationSetup> disruptive_setups() {
    EvalPerturbation flip{AugmentKind::flip, {}, 0, 0};
    EvalPerturbation jitter{AugmentKind::attribute_jitter, {}, 0, 0};
    jitter.augment.jitter_fraction = 0.6;
    EvalPerturbation crop{AugmentKind::noise_crop, {}, 0, 0};
    crop.augment.noise_sigma = 0.05;
    crop.augment.crop_margin = 0.1;
    return {{"relation_flip", QType::relation, flip},
            {"attribute_strong_color_jitter", QType::attribute, jitter},
            {"global_noise_crop", QType::global, crop}};
}

/// Feature noise on the graph, token noise on the question, and both.
inline std::vector<PerturbationSetup> noise_setups(double feature_sigma = 1.0, double question_frac = 0.5) {
    EvalPerturbation g, q, both;
    g.feature_noise = both.feature_noise = feature_sigma;
    q.question_noise = both.question_noise = question_frac;
    return {{"noise_sg", std::nullopt, g}, {"question_noise", std::nullopt, q}, {"noise_noise", std::nullopt, both}};
}

/// Accuracy on each setup's subset, perturbed minus clean, scored against
/// the stored answers.
inline std::vector<PerturbationRow> perturbation_report(const ModelParams& params, const Corpus& corpus, Split split,
                                                        std::uint64_t seed,
                                                        const std::vector<PerturbationSetup>& setups) {
    std::vector<PerturbationRow> rows;
    const auto all = corpus.split_items(split);
    for (const auto& s : setups) {
        std::vector<const QAItem*> subset;
        for (const QAItem* it : all)
            if (!s.subset || it->qtype == *s.subset) subset.push_back(it);
        if (subset.empty()) throw std::invalid_argument("perturbation '" + s.name + "' matched no questions");
        const auto clean = score(subset, predict(params, corpus, subset, seed).answers);
        const auto pert = score(subset, predict(params, corpus, subset, seed, s.perturbation).answers);
        rows.push_back({s.name, s.subset ? std::string(to_string(*s.subset)) : "all", subset.size(), clean.overall,
                        pert.overall, pert.overall - clean.overall});
    }
    return rows;
}

struct SweepPoint {
    double fraction = 0;
    std::size_t train_scenes = 0;
    MetricsReport test;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SweepPoint, fraction, train_scenes, test)

inline std::vector<SweepPoint> fraction_sweep(const TrainConfig& cfg, const Corpus& corpus,
                                              const std::vector<double>& fractions) {
    if (fractions.empty()) throw std::invalid_argument("fraction_sweep: no fractions");
    if (!std::is_sorted(fractions.begin(), fractions.end()))
        throw std::invalid_argument("fraction_sweep: fractions must be sorted ascending");
    std::vector<SweepPoint> out;
    for (double f : fractions) {
        TrainConfig c = cfg;
        c.data_fraction = f;
        c.eval_each_epoch = false;
        auto res = train(c, corpus);
        out.push_back({f, fraction_scenes(corpus, cfg.seed, f).size(), evaluate(res.params, corpus, Split::test, cfg.seed)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Log formats

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::string metrics_csv_header() {
    std::string h = "epoch,split,overall,binary,open,consistency,validity";
    for (auto n : kQTypeNames) h += "," + std::string(n);
    return h + ",L_sup,L_prime,J_e,repr_std\n";
}

inline std::string metrics_csv_row(int epoch, std::string_view split, const MetricsReport& m, double sup, double prime,
                                   double link, double repr) {
    std::string r = std::to_string(epoch) + "," + std::string(split) + "," + fmt(m.overall) + "," + fmt(m.binary) +
                    "," + fmt(m.open) + "," + fmt(m.consistency) + "," + fmt(m.validity);
    for (auto n : kQTypeNames) r += "," + fmt(m.per_qtype.at(std::string(n)));
    return r + "," + fmt(sup) + "," + fmt(prime) + "," + fmt(link) + "," + fmt(repr) + "\n";
}

inline std::string steps_csv(const std::vector<StepLog>& steps) {
    std::string s = "step,L_sup,L_prime,J_e,total\n";
    for (const auto& l : steps)
        s += std::to_string(l.step) + "," + fmt(l.sup) + "," + fmt(l.prime) + "," +
             fmt(l.link) + "," + fmt(l.total) + "\n";
    return s;
}

}  // namespace sgvqa

#pragma once

#include <vector>

#include "sgvqa/gradcheck.hpp"
#include "sgvqa/losses.hpp"
#include "sgvqa/model.hpp"
#include "sgvqa/pipeline.hpp"
#include "sgvqa/qa.hpp"
#include "sgvqa/scene.hpp"

namespace sgvqa {

/// Small two-view batch: 3 to 5 objects per scene, jittered second view,
/// one global question per scene.
struct DualViewBatch {
    std::vector<SceneGraph> anchors, augmented;
    std::vector<std::vector<int>> questions;
    std::vector<std::size_t> answers;
    std::vector<Example> examples;

    DualViewBatch(std::uint64_t seed, std::size_t node_dim, std::size_t n_items = 2) {
        Geometry geom;
        SceneSampling sampling;
        sampling.min_objects = 3;
        sampling.max_objects = 5;
        FeatureProjection proj(seed, node_dim);
        RealizeParams rp;
        for (std::size_t i = 0; i < n_items; ++i) {
            Rng rng = Rng::stream(seed, "tiny-batch", i);
            SceneSpec spec = sample_scene(rng, static_cast<int>(i), sampling, geom);
            SceneSpec aug = augment_scene(spec, AugmentKind::attribute_jitter, {}, geom, rng);
            anchors.push_back(realize_graph(spec, rp, proj, geom, rng));
            augmented.push_back(realize_graph(aug, rp, proj, geom, rng));
            auto pair = generate_qa(spec, QType::global, geom, rng);
            questions.push_back(pair.primary.question);
            answers.push_back(static_cast<std::size_t>(pair.primary.answer));
        }
        for (std::size_t i = 0; i < n_items; ++i)
            examples.push_back({&anchors[i], &augmented[i], questions[i], answers[i]});
    }
    DualViewBatch(const DualViewBatch&) = delete;
    DualViewBatch& operator=(const DualViewBatch&) = delete;
};

/// Finite-difference check of total_loss through the full two-view forward,
/// in extended precision. Stop-gradient targets are frozen at their
/// unperturbed values, matching what the analytic gradient assumes.
inline GradCheckReport total_loss_gradcheck(Preset preset, const LossConfig& cfg, std::uint64_t seed,
                                            double eps = 1e-5, std::size_t max_coords = 0, std::size_t n_items = 2) {
    const ModelConfig mc = ModelConfig::for_preset(preset);
    DualViewBatch batch(seed, mc.dims.node, n_items);
    auto params = convert<long double>(init_model(mc, seed));
    BasicFrozenTargets<long double> frozen;
    XLossFn fn = [&](XTape& t) {
        Rng drop = Rng::stream(seed, "dropout");
        auto items = forward_batch(t, params, cfg, std::span<const Example>(batch.examples), Mode::train, drop);
        return total_loss(t, cfg, items, &frozen).total;
    };
    {
        XTape t;
        fn(t);
        frozen.replay = true;
    }
    GradCheckOptions opts;
    opts.max_coords_per_param = max_coords;
    opts.sample_seed = seed;
    return finite_diff_check(fn, params.named(), eps, opts);
}

/// Every variant with and without link regularization; baseline runs with beta = 0.
inline std::vector<LossConfig> all_loss_configs() {
    std::vector<LossConfig> out;
    for (auto v : {Variant::baseline, Variant::local, Variant::global, Variant::selfsim})
        for (bool link : {false, true}) {
            LossConfig c;
            c.variant = v;
            c.link_reg = link;
            c.beta = v == Variant::baseline ? 0.0 : 1.0;
            out.push_back(c);
        }
    return out;
}

}  // namespace sgvqa

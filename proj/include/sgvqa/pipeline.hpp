#pragma once

#include <span>
#include <vector>

#include "sgvqa/graph.hpp"
#include "sgvqa/losses.hpp"
#include "sgvqa/model.hpp"

namespace sgvqa {

/// One training example: the anchor graph, the augmented graph (may be null
/// when no similarity term is active), the question and its answer id.
struct Example {
    const SceneGraph* anchor = nullptr;
    const SceneGraph* augmented = nullptr;
    std::span<const int> question;
    std::size_t answer = 0;
};

/// Runs both views of every example through the shared encoder and builds the
/// loss inputs. Predictor heads see the whole batch (both views stacked), so
/// batch-norm statistics are shared across views and items.
template <class T>
std::vector<BasicDualViewItem<T>> forward_batch(BasicTape<T>& tape, BasicModelParams<T>& p, const LossConfig& cfg,
                                                std::span<const Example> batch, Mode mode, Rng& dropout_rng) {
    using Tn = BasicTensor<T>;
    std::vector<BasicDualViewItem<T>> items(batch.size());
    const bool sim = cfg.similarity();
    const bool nodes = sim && (cfg.variant == Variant::local || cfg.variant == Variant::selfsim);
    const bool pooled = sim && cfg.variant == Variant::global;

    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Example& ex = batch[i];
        auto& it = items[i];
        it.answer = ex.answer;
        auto inst = encode_question(tape, embed_tokens(tape, ex.question, p), p);
        auto e1 = encode_graph(tape, *ex.anchor, inst, p);
        it.z1 = e1.nodes;
        it.g1 = e1.graph;
        it.logits = classify(tape, e1.graph, inst.question, p, mode, dropout_rng);
        if (!sim) continue;
        if (!ex.augmented) throw std::invalid_argument("similarity loss needs an augmented view");
        auto e2 = encode_graph(tape, *ex.augmented, inst, p);
        it.z2 = e2.nodes;
        it.g2 = e2.graph;
        it.node_pairs = align_nodes(*ex.anchor, *ex.augmented);
        if (cfg.link_reg) {
            const auto pairs = align_edges(*ex.anchor, *ex.augmented);
            if (!pairs.empty()) {
                std::vector<std::pair<std::size_t, std::size_t>> a, b;
                for (auto [ea, eb] : pairs) {
                    a.push_back({ex.anchor->edges[ea].src, ex.anchor->edges[ea].dst});
                    b.push_back({ex.augmented->edges[eb].src, ex.augmented->edges[eb].dst});
                }
                it.r1 = edge_scores(tape, it.z1, a, p);
                it.r2 = edge_scores(tape, it.z2, b, p);
            }
        }
    }
    if (!sim) return items;

    if (!cfg.predictor) {
        for (auto& it : items) it.p1 = it.z1, it.p2 = it.z2, it.h1 = it.g1, it.h2 = it.g2;
        return items;
    }
    auto run_head = [&](BasicPredictorHead<T>& head, Tn BasicDualViewItem<T>::*in1, Tn BasicDualViewItem<T>::*in2,
                        Tn BasicDualViewItem<T>::*out1, Tn BasicDualViewItem<T>::*out2) {
        std::vector<Tn> rows;
        for (auto& it : items) rows.push_back(it.*in1), rows.push_back(it.*in2);
        auto all = predict_head(tape, tape.concat(std::span<const Tn>(rows), Axis::rows), head, Mode::train);
        std::size_t off = 0;
        for (auto& it : items) {
            it.*out1 = tape.slice_rows(all, off, (it.*in1).rows());
            off += (it.*in1).rows();
            it.*out2 = tape.slice_rows(all, off, (it.*in2).rows());
            off += (it.*in2).rows();
        }
    };
    using Item = BasicDualViewItem<T>;
    if (nodes) run_head(p.node_head, &Item::z1, &Item::z2, &Item::p1, &Item::p2);
    if (pooled) run_head(p.graph_head, &Item::g1, &Item::g2, &Item::h1, &Item::h2);
    return items;
}

}  // namespace sgvqa

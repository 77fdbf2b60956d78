#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include "sgvqa/rng.hpp"
#include "sgvqa/scene.hpp"

namespace sgvqa {

struct GraphNode {
    int object_id = 0;  // audit only; never fed to the model
    int category = 0;
    std::vector<double> features;
};

struct GraphEdge {
    std::size_t src = 0;  // node index
    std::size_t dst = 0;
    int predicate = 0;           // ground truth, audit only
    std::vector<double> scores;  // distribution over kPredicates
};

/// Noisy scene graph as produced by the frozen realizer.
struct SceneGraph {
    std::size_t node_dim = 0;
    std::vector<GraphNode> nodes;
    std::vector<GraphEdge> edges;

    std::size_t size() const { return nodes.size(); }
};

struct RealizeParams {
    double feature_noise = 0.1;
    double edge_noise = 0.1;
    double temperature = 0.1;  // 0 gives exact one-hot edge scores
    int k_neighbors = 3;
};

/// Fixed random projection from the symbolic object encoding
/// [category one-hot | color one-hot | size one-hot | 2x-1, 2y-1 | bias]
/// to node features. Parameter-free from the model's point of view.
class FeatureProjection {
   public:
    static constexpr std::size_t kInputDim = kCategories.size() + kColors.size() + kSizes.size() + 3;

    FeatureProjection(std::uint64_t seed, std::size_t node_dim) : node_dim_(node_dim), weights_(node_dim * kInputDim) {
        Rng rng = Rng::stream(seed, "feature-projection");
        // About six active inputs per object, so unit-variance features.
        const double scale = 1.0 / std::sqrt(6.0);
        for (auto& w : weights_) w = rng.normal() * scale;
    }

    std::size_t node_dim() const { return node_dim_; }

    std::vector<double> encode(const SceneObject& o) const {
        std::array<double, kInputDim> in{};
        in[static_cast<std::size_t>(o.category)] = 1.0;
        in[kCategories.size() + static_cast<std::size_t>(o.color)] = 1.0;
        in[kCategories.size() + kColors.size() + static_cast<std::size_t>(o.size)] = 1.0;
        in[kInputDim - 3] = 2.0 * o.x - 1.0;
        in[kInputDim - 2] = 2.0 * o.y - 1.0;
        in[kInputDim - 1] = 1.0;
        std::vector<double> f(node_dim_, 0.0);
        for (std::size_t i = 0; i < node_dim_; ++i)
            for (std::size_t j = 0; j < kInputDim; ++j) f[i] += weights_[i * kInputDim + j] * in[j];
        return f;
    }

   private:
    std::size_t node_dim_;
    std::vector<double> weights_;
};

/// Canonical single predicate for an ordered pair, used for edge labels.
inline int canonical_predicate(const SceneObject& a, const SceneObject& b, const Geometry& geom) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    if (std::hypot(dx, dy) < geom.near_radius) return near;
    if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? left_of : right_of;
    return dy < 0 ? above : below;
}

/// Stand-in for a frozen scene-graph generator: symbolic encoding plus
/// Gaussian feature noise, k-nearest-neighbour topology (symmetrized),
/// noisy edge score distributions peaked on the true predicate, and a
/// random node order.
inline SceneGraph realize_graph(const SceneSpec& spec, const RealizeParams& params, const FeatureProjection& proj,
                                const Geometry& geom, Rng& rng) {
    const std::size_t n = spec.objects.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    std::vector<std::size_t> slot(n);  // object position -> node index
    for (std::size_t i = 0; i < n; ++i) slot[order[i]] = i;

    SceneGraph g;
    g.node_dim = proj.node_dim();
    g.nodes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& o = spec.objects[order[i]];
        auto f = proj.encode(o);
        for (auto& v : f) v += rng.normal(0.0, params.feature_noise);
        g.nodes[i] = {o.id, o.category, std::move(f)};
    }

    std::set<std::pair<std::size_t, std::size_t>> pairs;
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(params.k_neighbors, 0)), n - 1);
    for (std::size_t a = 0; a < n; ++a) {
        std::vector<std::pair<double, std::size_t>> dist;
        for (std::size_t b = 0; b < n; ++b)
            if (b != a)
                dist.push_back({std::hypot(spec.objects[a].x - spec.objects[b].x, spec.objects[a].y - spec.objects[b].y), b});
        std::sort(dist.begin(), dist.end());
        for (std::size_t i = 0; i < k; ++i) {
            pairs.insert({slot[a], slot[dist[i].second]});
            pairs.insert({slot[dist[i].second], slot[a]});
        }
    }
    for (const auto& [s, d] : pairs) {
        const auto& a = spec.objects[order[s]];
        const auto& b = spec.objects[order[d]];
        GraphEdge e{s, d, canonical_predicate(a, b, geom), std::vector<double>(kPredicates.size(), 0.0)};
        std::vector<double> logits(kPredicates.size());
        for (std::size_t p = 0; p < logits.size(); ++p)
            logits[p] = (static_cast<int>(p) == e.predicate ? 1.0 : 0.0) + rng.normal(0.0, params.edge_noise);
        if (params.temperature <= 0.0) {
            e.scores[static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin())] = 1.0;
        } else {
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (std::size_t p = 0; p < logits.size(); ++p) z += e.scores[p] = std::exp((logits[p] - mx) / params.temperature);
            for (auto& s : e.scores) s /= z;
        }
        g.edges.push_back(std::move(e));
    }
    return g;
}

/// Edges present in both views, matched by (source object id, target object id).
inline std::vector<std::pair<std::size_t, std::size_t>> align_edges(const SceneGraph& a, const SceneGraph& b) {
    std::map<std::pair<int, int>, std::size_t> index;
    for (std::size_t e = 0; e < b.edges.size(); ++e)
        index[{b.nodes[b.edges[e].src].object_id, b.nodes[b.edges[e].dst].object_id}] = e;
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t e = 0; e < a.edges.size(); ++e) {
        auto it = index.find({a.nodes[a.edges[e].src].object_id, a.nodes[a.edges[e].dst].object_id});
        if (it != index.end()) out.push_back({e, it->second});
    }
    return out;
}

/// Nodes present in both views, matched by object id and ordered by id.
inline std::vector<std::pair<std::size_t, std::size_t>> align_nodes(const SceneGraph& a, const SceneGraph& b) {
    std::map<int, std::size_t> in_b;
    for (std::size_t i = 0; i < b.nodes.size(); ++i) in_b[b.nodes[i].object_id] = i;
    std::map<int, std::pair<std::size_t, std::size_t>> both;
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
        auto it = in_b.find(a.nodes[i].object_id);
        if (it != in_b.end()) both[a.nodes[i].object_id] = {i, it->second};
    }
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& [id, p] : both) out.push_back(p);
    return out;
}

}  // namespace sgvqa

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "sgvqa/rng.hpp"

namespace sgvqa {

inline constexpr std::array<std::string_view, 8> kCategories{"car",   "tree",  "dog",  "cat",
                                                             "chair", "table", "lamp", "cup"};
inline constexpr std::array<std::string_view, 6> kColors{"red", "green", "blue", "yellow", "purple", "white"};
inline constexpr std::array<std::string_view, 2> kSizes{"small", "large"};
inline constexpr std::array<std::string_view, 5> kPredicates{"left-of", "right-of", "above", "below", "near"};

enum Predicate : int { left_of = 0, right_of = 1, above = 2, below = 3, near = 4 };

class SceneError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct SceneObject {
    int id = 0;
    int category = 0;
    int color = 0;
    int size = 0;
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const SceneObject&, const SceneObject&) = default;
};

struct Relation {
    int subject = 0;
    int predicate = 0;
    int object = 0;
    friend auto operator<=>(const Relation&, const Relation&) = default;
};

/// Latent world. y grows downward (image convention): "above" means smaller y.
struct SceneSpec {
    int scene_id = 0;
    std::vector<SceneObject> objects;
    std::vector<Relation> relations;

    const SceneObject* find(int object_id) const {
        for (const auto& o : objects)
            if (o.id == object_id) return &o;
        return nullptr;
    }
    friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

struct Geometry {
    double relation_margin = 0.05;
    double near_radius = 0.2;
    double min_distance = 0.08;
};

/// Every predicate that holds between ordered pairs, sorted.
inline std::vector<Relation> derive_relations(const std::vector<SceneObject>& objects, const Geometry& geom) {
    std::vector<Relation> rel;
    for (const auto& a : objects)
        for (const auto& b : objects) {
            if (a.id == b.id) continue;
            if (a.x < b.x - geom.relation_margin) rel.push_back({a.id, left_of, b.id});
            if (a.x > b.x + geom.relation_margin) rel.push_back({a.id, right_of, b.id});
            if (a.y < b.y - geom.relation_margin) rel.push_back({a.id, above, b.id});
            if (a.y > b.y + geom.relation_margin) rel.push_back({a.id, below, b.id});
            if (std::hypot(a.x - b.x, a.y - b.y) < geom.near_radius) rel.push_back({a.id, near, b.id});
        }
    std::sort(rel.begin(), rel.end());
    return rel;
}

inline void validate_scene(const SceneSpec& spec, const Geometry& geom, int max_objects) {
    if (spec.objects.size() < 2 || static_cast<int>(spec.objects.size()) > max_objects)
        throw SceneError("scene " + std::to_string(spec.scene_id) + " has " + std::to_string(spec.objects.size()) +
                         " objects, outside [2, " + std::to_string(max_objects) + "]");
    std::set<int> ids;
    for (const auto& o : spec.objects) {
        if (!ids.insert(o.id).second) throw SceneError("duplicate object id " + std::to_string(o.id));
        if (o.category < 0 || o.category >= static_cast<int>(kCategories.size()) || o.color < 0 ||
            o.color >= static_cast<int>(kColors.size()) || o.size < 0 || o.size >= static_cast<int>(kSizes.size()))
            throw SceneError("object attribute id out of range");
    }
    if (spec.relations != derive_relations(spec.objects, geom))
        throw SceneError("relations inconsistent with positions in scene " + std::to_string(spec.scene_id));
}

struct SceneSampling {
    int min_objects = 2;
    int max_objects = 8;
    int placement_retries = 1000;
};

/// Uniform placement in the unit square with a pairwise minimum distance.
inline SceneSpec sample_scene(Rng& rng, int scene_id, const SceneSampling& cfg, const Geometry& geom) {
    SceneSpec spec;
    spec.scene_id = scene_id;
    const int n = cfg.min_objects + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.max_objects - cfg.min_objects + 1)));
    for (int i = 0; i < n; ++i) {
        SceneObject o;
        o.id = i;
        o.category = static_cast<int>(rng.below(kCategories.size()));
        o.color = static_cast<int>(rng.below(kColors.size()));
        o.size = static_cast<int>(rng.below(kSizes.size()));
        bool placed = false;
        for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
            o.x = rng.uniform();
            o.y = rng.uniform();
            placed = std::all_of(spec.objects.begin(), spec.objects.end(), [&](const SceneObject& p) {
                return std::hypot(p.x - o.x, p.y - o.y) >= geom.min_distance;
            });
        }
        if (!placed)
            throw SceneError("could not place object " + std::to_string(i) + " of scene " + std::to_string(scene_id));
        spec.objects.push_back(o);
    }
    spec.relations = derive_relations(spec.objects, geom);
    return spec;
}

enum class AugmentKind { identity, flip, attribute_jitter, noise_crop };

inline std::string_view to_string(AugmentKind k) {
    switch (k) {
        case AugmentKind::identity: return "identity";
        case AugmentKind::flip: return "flip";
        case AugmentKind::attribute_jitter: return "attribute_jitter";
        case AugmentKind::noise_crop: return "noise_crop";
    }
    return "?";
}

inline AugmentKind augment_kind_from_string(std::string_view s) {
    for (auto k : {AugmentKind::identity, AugmentKind::flip, AugmentKind::attribute_jitter, AugmentKind::noise_crop})
        if (to_string(k) == s) return k;
    throw std::invalid_argument("unknown augmentation '" + std::string(s) + "'");
}

struct AugmentParams {
    double jitter_fraction = 0.2;
    double noise_sigma = 0.02;
    double crop_margin = 0.02;
};

/// Applies one augmentation. Object ids are preserved so views can be aligned.
inline SceneSpec augment_scene(const SceneSpec& spec, AugmentKind kind, const AugmentParams& params,
                               const Geometry& geom, Rng& rng) {
    SceneSpec out = spec;
    switch (kind) {
        case AugmentKind::identity:
            return out;
        case AugmentKind::flip:
            for (auto& o : out.objects) o.x = 1.0 - o.x;
            break;
        case AugmentKind::attribute_jitter:
            for (auto& o : out.objects)
                if (rng.bernoulli(params.jitter_fraction)) o.color = static_cast<int>(rng.below(kColors.size()));
            break;
        case AugmentKind::noise_crop: {
            std::vector<SceneObject> kept;
            const double lo = params.crop_margin, hi = 1.0 - params.crop_margin;
            for (auto o : out.objects) {
                o.x += rng.normal(0.0, params.noise_sigma);
                o.y += rng.normal(0.0, params.noise_sigma);
                if (o.x >= lo && o.x <= hi && o.y >= lo && o.y <= hi) kept.push_back(o);
            }
            if (kept.size() < 2)
                throw SceneError("noise_crop left fewer than two objects in scene " + std::to_string(spec.scene_id));
            out.objects = std::move(kept);
            break;
        }
    }
    out.relations = derive_relations(out.objects, geom);
    return out;
}

}  // namespace sgvqa

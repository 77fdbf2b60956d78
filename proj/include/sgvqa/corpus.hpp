#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sgvqa/graph.hpp"
#include "sgvqa/qa.hpp"
#include "sgvqa/rng.hpp"
#include "sgvqa/scene.hpp"

namespace sgvqa {

using json = nlohmann::json;

enum class Split { train = 0, val = 1, test = 2 };
inline constexpr std::array<std::string_view, 3> kSplitNames{"train", "val", "test"};
inline std::string_view to_string(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }

struct SplitFractions {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
};

struct CorpusConfig {
    int n_scenes = 2000;
    int questions_per_scene = 4;
    int node_dim = 32;
    std::uint64_t seed = 0;
    SceneSampling sampling;
    Geometry geometry;
    RealizeParams realize;
    SplitFractions split;
};

inline void validate(const CorpusConfig& c) {
    auto fail = [](const std::string& path, const std::string& why) {
        throw std::invalid_argument("corpus." + path + ": " + why);
    };
    if (c.n_scenes < 1) fail("n_scenes", "must be positive");
    if (c.questions_per_scene < 2 || c.questions_per_scene % 2)
        fail("questions_per_scene", "must be a positive even number (each question carries a paraphrase)");
    if (c.node_dim < 1) fail("node_dim", "must be positive");
    if (c.sampling.min_objects < 2) fail("sampling.min_objects", "must be at least 2");
    if (c.sampling.max_objects < c.sampling.min_objects || c.sampling.max_objects > 8)
        fail("sampling.max_objects", "must lie in [min_objects, 8]");
    if (c.sampling.placement_retries < 1) fail("sampling.placement_retries", "must be positive");
    if (c.realize.feature_noise < 0 || c.realize.edge_noise < 0 || c.realize.temperature < 0)
        fail("realize", "noise parameters must be non-negative");
    if (c.realize.k_neighbors < 1) fail("realize.k_neighbors", "must be positive");
    const auto& s = c.split;
    if (s.train < 0 || s.val < 0 || s.test < 0 || std::abs(s.train + s.val + s.test - 1.0) > 1e-9)
        fail("split", "fractions must be non-negative and sum to 1");
}

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SceneSampling, min_objects, max_objects, placement_retries)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Geometry, relation_margin, near_radius, min_distance)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RealizeParams, feature_noise, edge_noise, temperature, k_neighbors)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SplitFractions, train, val, test)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CorpusConfig, n_scenes, questions_per_scene, node_dim, seed, sampling,
                                                geometry, realize, split)

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

inline std::string config_hash(const json& j) { return hex64(fnv1a(j.dump())); }

struct Corpus {
    CorpusConfig config;
    std::vector<SceneSpec> scenes;  // indexed by scene_id
    std::vector<Split> scene_split;
    std::vector<QAItem> items;

    std::vector<const QAItem*> split_items(Split s) const {
        std::vector<const QAItem*> out;
        for (const auto& it : items)
            if (scene_split[static_cast<std::size_t>(it.scene_id)] == s) out.push_back(&it);
        return out;
    }
    const SceneSpec& scene(int id) const { return scenes.at(static_cast<std::size_t>(id)); }
};

/// Samples scenes and questions and assigns scenes to splits.
inline Corpus generate_corpus(const CorpusConfig& cfg) {
    validate(cfg);
    Corpus c;
    c.config = cfg;
    int next_item = 0, next_group = 0;
    for (int s = 0; s < cfg.n_scenes; ++s) {
        Rng srng = Rng::stream(cfg.seed, "scene", static_cast<std::uint64_t>(s));
        SceneSpec spec = sample_scene(srng, s, cfg.sampling, cfg.geometry);
        validate_scene(spec, cfg.geometry, cfg.sampling.max_objects);
        Rng qrng = Rng::stream(cfg.seed, "qa", static_cast<std::uint64_t>(s));
        for (int q = 0; q < cfg.questions_per_scene / 2; ++q) {
            std::optional<GeneratedPair> pair;
            for (int attempt = 0; attempt < 32 && !pair; ++attempt) {
                const auto qtype = static_cast<QType>(qrng.below(kQTypeNames.size()));
                try {
                    pair = generate_qa(spec, qtype, cfg.geometry, qrng);
                } catch (const QuestionError&) {
                }
            }
            if (!pair) pair = generate_qa(spec, QType::global, cfg.geometry, qrng);
            for (QAItem* it : {&pair->primary, &pair->paraphrase}) {
                it->item_id = next_item++;
                it->paraphrase_group = next_group;
                if (oracle_answer(spec, it->question) != it->answer)
                    throw SceneError("generator and oracle disagree on item " + std::to_string(it->item_id));
                c.items.push_back(*it);
            }
            ++next_group;
        }
        c.scenes.push_back(std::move(spec));
    }
    std::vector<int> order(static_cast<std::size_t>(cfg.n_scenes));
    for (int i = 0; i < cfg.n_scenes; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng split_rng = Rng::stream(cfg.seed, "split");
    split_rng.shuffle(order);
    const auto n_train = static_cast<std::size_t>(std::llround(cfg.split.train * cfg.n_scenes));
    const auto n_val = static_cast<std::size_t>(std::llround(cfg.split.val * cfg.n_scenes));
    c.scene_split.assign(static_cast<std::size_t>(cfg.n_scenes), Split::test);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const Split s = i < n_train ? Split::train : i < n_train + n_val ? Split::val : Split::test;
        c.scene_split[static_cast<std::size_t>(order[i])] = s;
    }
    return c;
}

// ---------------------------------------------------------------------------
// On-disk format: scenes.jsonl, {train,val,test}.jsonl, vocab.json, manifest.json

inline json scene_to_json(const SceneSpec& s) {
    json objs = json::array();
    for (const auto& o : s.objects)
        objs.push_back({{"id", o.id}, {"category", o.category}, {"color", o.color}, {"size", o.size}, {"x", o.x}, {"y", o.y}});
    json rels = json::array();
    for (const auto& r : s.relations) rels.push_back({r.subject, r.predicate, r.object});
    return {{"scene_id", s.scene_id}, {"objects", objs}, {"relations", rels}};
}

inline SceneSpec scene_from_json(const json& j) {
    SceneSpec s;
    s.scene_id = j.at("scene_id").get<int>();
    for (const auto& o : j.at("objects"))
        s.objects.push_back({o.at("id").get<int>(), o.at("category").get<int>(), o.at("color").get<int>(),
                             o.at("size").get<int>(), o.at("x").get<double>(), o.at("y").get<double>()});
    for (const auto& r : j.at("relations")) s.relations.push_back({r[0].get<int>(), r[1].get<int>(), r[2].get<int>()});
    return s;
}

inline json item_to_json(const QAItem& it) {
    return {{"item_id", it.item_id},
            {"scene_id", it.scene_id},
            {"question", it.question},
            {"qtype", std::string(to_string(it.qtype))},
            {"template", it.template_id},
            {"answer", it.answer},
            {"valid_answers", it.valid_answers},
            {"paraphrase_group", it.paraphrase_group},
            {"binary", it.binary}};
}

inline QAItem item_from_json(const json& j) {
    QAItem it;
    it.item_id = j.at("item_id").get<int>();
    it.scene_id = j.at("scene_id").get<int>();
    it.question = j.at("question").get<std::vector<int>>();
    it.qtype = qtype_from_string(j.at("qtype").get<std::string>());
    it.template_id = j.at("template").get<int>();
    it.answer = j.at("answer").get<int>();
    it.valid_answers = j.at("valid_answers").get<std::vector<int>>();
    it.paraphrase_group = j.at("paraphrase_group").get<int>();
    it.binary = j.at("binary").get<bool>();
    return it;
}

inline json vocab_json() {
    json cats = json::array(), cols = json::array(), sizes = json::array(), preds = json::array();
    for (auto c : kCategories) cats.push_back(std::string(c));
    for (auto c : kColors) cols.push_back(std::string(c));
    for (auto c : kSizes) sizes.push_back(std::string(c));
    for (auto p : kPredicates) preds.push_back(std::string(p));
    return {{"words", vocab::words()}, {"answers", vocab::answers()}, {"predicates", preds},
            {"categories", cats},      {"colors", cols},              {"sizes", sizes}};
}

inline std::string vocab_hash() { return config_hash(vocab_json()); }

inline std::map<std::string, int> qtype_counts(const std::vector<QAItem>& items) {
    std::map<std::string, int> m;
    for (auto n : kQTypeNames) m[std::string(n)] = 0;
    for (const auto& it : items) ++m[std::string(to_string(it.qtype))];
    return m;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + p.string() + " for writing");
    os << text;
    if (!os) throw std::runtime_error("failed writing " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + p.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_corpus(const Corpus& c, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string scenes;
    for (const auto& s : c.scenes) scenes += scene_to_json(s).dump() + "\n";
    write_text(dir / "scenes.jsonl", scenes);
    json counts = {{"scenes", c.scenes.size()}, {"items", c.items.size()}};
    for (Split sp : {Split::train, Split::val, Split::test}) {
        std::string lines;
        int n = 0;
        for (const auto& it : c.items)
            if (c.scene_split[static_cast<std::size_t>(it.scene_id)] == sp) {
                lines += item_to_json(it).dump() + "\n";
                ++n;
            }
        write_text(dir / (std::string(to_string(sp)) + ".jsonl"), lines);
        counts[std::string(to_string(sp))] = n;
    }
    write_text(dir / "vocab.json", vocab_json().dump(2) + "\n");
    const json cfg = c.config;
    json manifest = {{"format", "sgvqa-corpus"},
                     {"version", 1},
                     {"seed", c.config.seed},
                     {"config_hash", config_hash(cfg)},
                     {"vocab_hash", vocab_hash()},
                     {"config", cfg},
                     {"counts", counts},
                     {"qtype_counts", qtype_counts(c.items)}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Generates and writes a corpus; returns it for immediate use.
inline Corpus build_corpus(const CorpusConfig& cfg, const std::filesystem::path& dir) {
    Corpus c = generate_corpus(cfg);
    write_corpus(c, dir);
    return c;
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
    const json manifest = json::parse(read_text(dir / "manifest.json"));
    if (manifest.at("vocab_hash").get<std::string>() != vocab_hash())
        throw std::runtime_error("corpus vocabulary at " + dir.string() + " does not match this build");
    Corpus c;
    c.config = manifest.at("config").get<CorpusConfig>();
    std::istringstream scenes(read_text(dir / "scenes.jsonl"));
    for (std::string line; std::getline(scenes, line);)
        if (!line.empty()) c.scenes.push_back(scene_from_json(json::parse(line)));
    c.scene_split.assign(c.scenes.size(), Split::test);
    for (Split sp : {Split::train, Split::val, Split::test}) {
        std::istringstream lines(read_text(dir / (std::string(to_string(sp)) + ".jsonl")));
        for (std::string line; std::getline(lines, line);) {
            if (line.empty()) continue;
            QAItem it = item_from_json(json::parse(line));
            c.scene_split.at(static_cast<std::size_t>(it.scene_id)) = sp;
            c.items.push_back(std::move(it));
        }
    }
    std::sort(c.items.begin(), c.items.end(), [](const QAItem& a, const QAItem& b) { return a.item_id < b.item_id; });
    return c;
}

}  // namespace sgvqa

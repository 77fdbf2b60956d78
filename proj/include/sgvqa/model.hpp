#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sgvqa/corpus.hpp"
#include "sgvqa/gradcheck.hpp"
#include "sgvqa/graph.hpp"
#include "sgvqa/qa.hpp"
#include "sgvqa/rng.hpp"
#include "sgvqa/tensor.hpp"

namespace sgvqa {

/// Dimension presets. "paper" mirrors the GloVe+transformer track
/// (300/300/300/300/512), "desk" is the scaled default, "tiny" keeps every
/// width at 8 for exhaustive gradient checks.
enum class Preset { desk, paper, tiny };

inline std::string_view to_string(Preset p) {
    switch (p) {
        case Preset::desk: return "desk";
        case Preset::paper: return "paper";
        case Preset::tiny: return "tiny";
    }
    return "?";
}

inline Preset preset_from_string(std::string_view s) {
    for (auto p : {Preset::desk, Preset::paper, Preset::tiny})
        if (to_string(p) == s) return p;
    throw std::invalid_argument("unknown preset '" + std::string(s) + "'");
}

struct Dims {
    std::size_t word = 32;
    std::size_t question = 32;
    std::size_t node = 32;
    std::size_t link = 32;
    std::size_t graph = 64;
};

inline Dims dims_for(Preset p) {
    switch (p) {
        case Preset::paper: return {300, 300, 300, 300, 512};
        case Preset::tiny: return {8, 8, 8, 8, 8};
        case Preset::desk: break;
    }
    return {32, 32, 32, 32, 64};
}

inline constexpr std::size_t kInstructionSteps = 5;

struct ModelConfig {
    Preset preset = Preset::desk;
    Dims dims = dims_for(Preset::desk);
    std::size_t steps = kInstructionSteps;
    std::size_t word_vocab = vocab::words().size();
    std::size_t answer_vocab = vocab::answers().size();
    std::size_t predicates = kPredicates.size();
    std::size_t max_question_len = 16;
    double classifier_dropout = 0.2;
    double attention_slope = 0.2;

    static ModelConfig for_preset(Preset p) {
        ModelConfig c;
        c.preset = p;
        c.dims = dims_for(p);
        return c;
    }
};

template <class T>
struct BasicLinear {
    BasicTensor<T> weight;  // in x out
    BasicTensor<T> bias;    // 1 x out
};

template <class T>
struct BasicGatStep {
    BasicTensor<T> weight;   // (node + question) x node
    BasicTensor<T> att_src;  // node x 1
    BasicTensor<T> att_dst;  // node x 1
};

/// h: three fully connected layers, batch norm + ReLU after the first two.
template <class T>
struct BasicPredictorHead {
    BasicLinear<T> fc1, fc2, fc3;
    BasicTensor<T> gamma1, beta1, gamma2, beta2;
    BasicNormState<T> norm1, norm2;
};

template <class T>
struct BasicModelParams {
    using Linear = BasicLinear<T>;
    using Tensor = BasicTensor<T>;
    using NamedTensor = BasicNamedTensor<T>;
    using NormState = BasicNormState<T>;

    ModelConfig config;
    Tensor token_embedding;
    Tensor position_embedding;
    Linear context;      // token state = elu((embedding + position) W + b)
    Linear query;        // decoder attention query
    Linear instruction;  // [previous state | attended context] -> instruction
    std::vector<BasicGatStep<T>> gat;
    Linear graph_proj;
    Linear edge_hidden, edge_out;
    BasicPredictorHead<T> node_head, graph_head;
    Linear cls_hidden, cls_out;

    /// Every trainable tensor with a stable name, in a fixed order.
    std::vector<NamedTensor> named() const {
        std::vector<NamedTensor> out{{"token_embedding", token_embedding}, {"position_embedding", position_embedding}};
        auto lin = [&](const std::string& n, const Linear& l) {
            out.push_back({n + ".weight", l.weight});
            out.push_back({n + ".bias", l.bias});
        };
        lin("context", context);
        lin("query", query);
        lin("instruction", instruction);
        for (std::size_t t = 0; t < gat.size(); ++t) {
            const std::string p = "gat." + std::to_string(t);
            out.push_back({p + ".weight", gat[t].weight});
            out.push_back({p + ".att_src", gat[t].att_src});
            out.push_back({p + ".att_dst", gat[t].att_dst});
        }
        lin("graph_proj", graph_proj);
        lin("edge_hidden", edge_hidden);
        lin("edge_out", edge_out);
        for (auto [name, h] : {std::pair{"node_head", &node_head}, std::pair{"graph_head", &graph_head}}) {
            const std::string p(name);
            lin(p + ".fc1", h->fc1);
            lin(p + ".fc2", h->fc2);
            lin(p + ".fc3", h->fc3);
            out.push_back({p + ".gamma1", h->gamma1});
            out.push_back({p + ".beta1", h->beta1});
            out.push_back({p + ".gamma2", h->gamma2});
            out.push_back({p + ".beta2", h->beta2});
        }
        lin("cls_hidden", cls_hidden);
        lin("cls_out", cls_out);
        return out;
    }

    std::vector<std::pair<std::string, NormState*>> norms() {
        return {{"node_head.norm1", &node_head.norm1}, {"node_head.norm2", &node_head.norm2},
                {"graph_head.norm1", &graph_head.norm1}, {"graph_head.norm2", &graph_head.norm2}};
    }

    /// Parameters of the answer classifier only.
    std::vector<NamedTensor> classifier_params() const {
        return {{"cls_hidden.weight", cls_hidden.weight}, {"cls_hidden.bias", cls_hidden.bias},
                {"cls_out.weight", cls_out.weight}, {"cls_out.bias", cls_out.bias}};
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : named()) n += p.tensor.size();
        return n;
    }
};

using Linear = BasicLinear<double>;
using GatStep = BasicGatStep<double>;
using PredictorHead = BasicPredictorHead<double>;
using ModelParams = BasicModelParams<double>;
using XModelParams = BasicModelParams<long double>;

/// Copy of a parameter set in another scalar type (fresh handles, no grads).
template <class U, class T>
BasicModelParams<U> convert(const BasicModelParams<T>& p) {
    auto lin = [](const BasicLinear<T>& l) { return BasicLinear<U>{convert<U>(l.weight), convert<U>(l.bias)}; };
    auto head = [&](const BasicPredictorHead<T>& h) {
        return BasicPredictorHead<U>{lin(h.fc1), lin(h.fc2), lin(h.fc3),
                                     convert<U>(h.gamma1), convert<U>(h.beta1), convert<U>(h.gamma2), convert<U>(h.beta2),
                                     convert<U>(h.norm1), convert<U>(h.norm2)};
    };
    BasicModelParams<U> q;
    q.config = p.config;
    q.token_embedding = convert<U>(p.token_embedding);
    q.position_embedding = convert<U>(p.position_embedding);
    q.context = lin(p.context);
    q.query = lin(p.query);
    q.instruction = lin(p.instruction);
    for (const auto& g : p.gat) q.gat.push_back({convert<U>(g.weight), convert<U>(g.att_src), convert<U>(g.att_dst)});
    q.graph_proj = lin(p.graph_proj);
    q.edge_hidden = lin(p.edge_hidden);
    q.edge_out = lin(p.edge_out);
    q.node_head = head(p.node_head);
    q.graph_head = head(p.graph_head);
    q.cls_hidden = lin(p.cls_hidden);
    q.cls_out = lin(p.cls_out);
    return q;
}

namespace detail {

inline Tensor uniform_tensor(Rng& rng, Shape s, double bound) {
    std::vector<double> v(s.size());
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return Tensor(s, std::move(v), true);
}

inline double glorot(std::size_t in, std::size_t out) { return std::sqrt(6.0 / static_cast<double>(in + out)); }

inline Linear make_linear(Rng& rng, std::size_t in, std::size_t out) {
    return {uniform_tensor(rng, {in, out}, glorot(in, out)), Tensor::zeros({1, out}, true)};
}

inline PredictorHead make_head(Rng& rng, std::size_t d) {
    return {make_linear(rng, d, d), make_linear(rng, d, d), make_linear(rng, d, d),
            Tensor::full({1, d}, 1.0, true), Tensor::zeros({1, d}, true),
            Tensor::full({1, d}, 1.0, true), Tensor::zeros({1, d}, true),
            NormState::fresh(d), NormState::fresh(d)};
}

}  // namespace detail

/// Glorot-uniform weights and zero biases. Embedding tables are
/// Uniform(-1/sqrt(width), 1/sqrt(width)). Batch-norm affine starts at identity.
inline ModelParams init_model(const ModelConfig& cfg, std::uint64_t seed) {
    if (cfg.steps == 0) throw std::invalid_argument("model needs at least one instruction step");
    Rng rng = Rng::stream(seed, "model-init");
    const Dims& d = cfg.dims;
    ModelParams p;
    p.config = cfg;
    const double eb = 1.0 / std::sqrt(static_cast<double>(d.word));
    p.token_embedding = detail::uniform_tensor(rng, {cfg.word_vocab, d.word}, eb);
    p.position_embedding = detail::uniform_tensor(rng, {cfg.max_question_len, d.word}, eb);
    p.context = detail::make_linear(rng, d.word, d.question);
    p.query = detail::make_linear(rng, d.question, d.question);
    p.instruction = detail::make_linear(rng, 2 * d.question, d.question);
    for (std::size_t t = 0; t < cfg.steps; ++t) {
        const double b = detail::glorot(d.node + d.question, d.node);
        const double ab = detail::glorot(d.node, 1);
        p.gat.push_back({detail::uniform_tensor(rng, {d.node + d.question, d.node}, b),
                         detail::uniform_tensor(rng, {d.node, 1}, ab), detail::uniform_tensor(rng, {d.node, 1}, ab)});
    }
    p.graph_proj = detail::make_linear(rng, d.node, d.graph);
    p.edge_hidden = detail::make_linear(rng, 2 * d.node, d.link);
    p.edge_out = detail::make_linear(rng, d.link, cfg.predicates);
    p.node_head = detail::make_head(rng, d.node);
    p.graph_head = detail::make_head(rng, d.graph);
    p.cls_hidden = detail::make_linear(rng, d.graph + d.question, d.graph);
    p.cls_out = detail::make_linear(rng, d.graph, cfg.answer_vocab);
    return p;
}

template <class T>
BasicTensor<T> apply(BasicTape<T>& tape, const BasicLinear<T>& l, const BasicTensor<T>& x) {
    return tape.add(tape.matmul(x, l.weight), l.bias);
}

// ---------------------------------------------------------------------------
// Question encoder

template <class T>
struct BasicEmbeddedQuestion {
    BasicTensor<T> embeddings;  // len x word
    std::vector<bool> keep;     // false for padding
};

template <class T>
struct BasicInstructionSet {
    BasicTensor<T> question;                   // 1 x question
    std::vector<BasicTensor<T>> instructions;  // M tensors of 1 x question
};

using EmbeddedQuestion = BasicEmbeddedQuestion<double>;
using InstructionSet = BasicInstructionSet<double>;

template <class T>
BasicEmbeddedQuestion<T> embed_tokens(BasicTape<T>& tape, std::span<const int> tokens, const BasicModelParams<T>& p) {
    if (tokens.empty()) throw std::invalid_argument("embed_tokens: empty question");
    if (tokens.size() > p.config.max_question_len)
        throw std::invalid_argument("embed_tokens: question longer than " + std::to_string(p.config.max_question_len));
    std::vector<std::size_t> idx;
    BasicEmbeddedQuestion<T> q;
    for (int t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= p.config.word_vocab)
            throw std::out_of_range("embed_tokens: token id " + std::to_string(t) + " is out of vocabulary");
        idx.push_back(static_cast<std::size_t>(t));
        q.keep.push_back(t != vocab::kPad);
    }
    q.embeddings = tape.gather_rows(p.token_embedding, idx);
    return q;
}

/// Contextualizes non-padding tokens, mean-pools them into the question
/// vector, then decodes M instruction vectors autoregressively: step t
/// attends over token states with a query from the previous state.
template <class T>
BasicInstructionSet<T> encode_question(BasicTape<T>& tape, const BasicEmbeddedQuestion<T>& q,
                                       const BasicModelParams<T>& p) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < q.keep.size(); ++i)
        if (q.keep[i]) rows.push_back(i);
    if (rows.empty()) throw std::invalid_argument("encode_question: question has only padding");
    auto emb = tape.gather_rows(q.embeddings, rows);
    auto pos = tape.gather_rows(p.position_embedding, rows);
    auto states = tape.elu(apply(tape, p.context, tape.add(emb, pos)));  // L x q

    BasicInstructionSet<T> out;
    out.question = tape.mean(states, Axis::rows);
    const T inv_sqrt = 1 / std::sqrt(static_cast<T>(p.config.dims.question));
    auto prev = out.question;
    for (std::size_t t = 0; t < p.config.steps; ++t) {
        auto u = apply(tape, p.query, prev);                                           // 1 x q
        auto attn = tape.softmax(tape.scale(tape.matmul(u, states, true), inv_sqrt));  // 1 x L
        auto ctx = tape.matmul(attn, states);                                          // 1 x q
        auto instr = tape.elu(apply(tape, p.instruction, tape.concat({prev, ctx}, Axis::cols)));
        out.instructions.push_back(instr);
        prev = instr;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Graph encoder

/// Attention support: mask[v][u] = 1 when u -> v is an edge or u == v.
inline std::vector<std::uint8_t> attention_mask(const SceneGraph& g) {
    const std::size_t n = g.size();
    std::vector<std::uint8_t> m(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1;
    for (const auto& e : g.edges) m[e.dst * n + e.src] = 1;
    return m;
}

template <class T = double>
BasicTensor<T> node_features(const SceneGraph& g) {
    if (g.nodes.empty()) throw std::invalid_argument("graph has no nodes");
    std::vector<T> v;
    v.reserve(g.size() * g.node_dim);
    for (const auto& n : g.nodes) {
        if (n.features.size() != g.node_dim) throw ShapeError("node feature width mismatch");
        v.insert(v.end(), n.features.begin(), n.features.end());
    }
    return BasicTensor<T>({g.size(), g.node_dim}, std::move(v));
}

/// One instruction-conditioned attention step:
///   x_v = [h_v | i_t],  e_vu = leaky_relu(a_src . W x_u + a_dst . W x_v),
///   alpha_v = softmax over in-neighbours and self,  h'_v = elu(sum_u alpha_vu W x_u).
template <class T>
BasicTensor<T> gat_step(BasicTape<T>& tape, const BasicTensor<T>& states, const std::vector<std::uint8_t>& mask,
                        const BasicTensor<T>& instr, const BasicGatStep<T>& w, double slope = 0.2,
                        BasicTensor<T>* attention_out = nullptr) {
    const std::size_t n = states.rows();
    if (mask.size() != n * n) throw ShapeError("gat_step mask does not match node count");
    const std::vector<std::size_t> repeat(n, 0);
    auto x = tape.concat({states, tape.gather_rows(instr, repeat)}, Axis::cols);
    auto wh = tape.matmul(x, w.weight);     // n x d
    auto src = tape.matmul(wh, w.att_src);  // n x 1
    auto dst = tape.matmul(wh, w.att_dst);  // n x 1
    auto scores = tape.leaky_relu(tape.add(dst, tape.transpose(src)), static_cast<T>(slope));  // [v][u]
    auto alpha = tape.softmax(scores, &mask);
    if (attention_out) *attention_out = alpha;
    return tape.elu(tape.matmul(alpha, wh));
}

template <class T>
struct BasicGraphEncoding {
    BasicTensor<T> nodes;                     // O x node (z)
    BasicTensor<T> graph;                     // 1 x graph
    std::vector<BasicTensor<T>> step_states;  // state after each step
};

using GraphEncoding = BasicGraphEncoding<double>;

template <class T>
BasicGraphEncoding<T> encode_graph(BasicTape<T>& tape, const SceneGraph& g, const BasicInstructionSet<T>& instr,
                                   const BasicModelParams<T>& p) {
    if (g.node_dim != p.config.dims.node)
        throw ShapeError("graph node dim " + std::to_string(g.node_dim) + " does not match model node dim " +
                         std::to_string(p.config.dims.node));
    if (instr.instructions.size() != p.gat.size()) throw ShapeError("instruction count does not match GAT steps");
    const auto mask = attention_mask(g);
    BasicGraphEncoding<T> out;
    auto h = node_features<T>(g);
    for (std::size_t t = 0; t < p.gat.size(); ++t) {
        h = gat_step(tape, h, mask, instr.instructions[t], p.gat[t], p.config.attention_slope);
        out.step_states.push_back(h);
    }
    out.nodes = h;
    out.graph = apply(tape, p.graph_proj, tape.mean(h, Axis::rows));
    return out;
}

/// Per-edge predicate distribution r_e = softmax(MLP([z_src | z_dst])).
template <class T>
BasicTensor<T> edge_scores(BasicTape<T>& tape, const BasicTensor<T>& z,
                           std::span<const std::pair<std::size_t, std::size_t>> edges, const BasicModelParams<T>& p) {
    if (edges.empty()) throw std::invalid_argument("edge_scores: no edges");
    std::vector<std::size_t> src, dst;
    for (auto [s, d] : edges) {
        if (s >= z.rows() || d >= z.rows()) throw std::out_of_range("edge_scores: edge references a missing node");
        src.push_back(s);
        dst.push_back(d);
    }
    auto x = tape.concat({tape.gather_rows(z, src), tape.gather_rows(z, dst)}, Axis::cols);
    return tape.softmax(apply(tape, p.edge_out, tape.relu(apply(tape, p.edge_hidden, x))));
}

/// Predictor head applied row-wise to a batch. Train mode uses batch
/// statistics (batch of at least two rows); eval mode the running ones.
template <class T>
BasicTensor<T> predict_head(BasicTape<T>& tape, const BasicTensor<T>& x, BasicPredictorHead<T>& h, Mode mode) {
    h.norm1.mode = h.norm2.mode = mode;
    auto a = tape.relu(tape.batch_norm(apply(tape, h.fc1, x), h.norm1, h.gamma1, h.beta1));
    auto b = tape.relu(tape.batch_norm(apply(tape, h.fc2, a), h.norm2, h.gamma2, h.beta2));
    return apply(tape, h.fc3, b);
}

/// Two-layer MLP over [graph | question] with ELU and dropout.
template <class T>
BasicTensor<T> classify(BasicTape<T>& tape, const BasicTensor<T>& graph, const BasicTensor<T>& question,
                        const BasicModelParams<T>& p, Mode mode, Rng& rng) {
    if (graph.cols() != p.config.dims.graph || question.cols() != p.config.dims.question)
        throw ShapeError("classify input widths do not match the preset");
    auto h = tape.elu(apply(tape, p.cls_hidden, tape.concat({graph, question}, Axis::cols)));
    h = tape.dropout(h, static_cast<T>(p.config.classifier_dropout), mode, rng);
    return apply(tape, p.cls_out, h);
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON container of named tensors, norm states and metadata.

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    ModelParams params;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::string vocab_hash;
};

inline json checkpoint_to_json(const Checkpoint& ck) {
    const auto& c = ck.params.config;
    json tensors = json::array();
    for (const auto& [name, t] : ck.params.named())
        tensors.push_back({{"name", name}, {"shape", {t.rows(), t.cols()}},
                           {"data", std::vector<double>(t.data().begin(), t.data().end())}});
    json norms = json::array();
    for (auto& [name, st] : const_cast<ModelParams&>(ck.params).norms())
        norms.push_back({{"name", name}, {"momentum", st->momentum}, {"running_mean", st->running_mean},
                         {"running_var", st->running_var}});
    return {{"format", "sgvqa-checkpoint"},
            {"version", kCheckpointVersion},
            {"preset", std::string(to_string(c.preset))},
            {"dims", {c.dims.word, c.dims.question, c.dims.node, c.dims.link, c.dims.graph}},
            {"steps", c.steps},
            {"word_vocab", c.word_vocab},
            {"answer_vocab", c.answer_vocab},
            {"vocab_hash", ck.vocab_hash},
            {"rng", {{"seed", ck.seed}, {"step", ck.step}}},
            {"tensors", tensors},
            {"norm_states", norms}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
    if (j.at("format") != "sgvqa-checkpoint") throw std::runtime_error("not a checkpoint file");
    if (j.at("version").get<int>() != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
    ModelConfig c = ModelConfig::for_preset(preset_from_string(j.at("preset").get<std::string>()));
    const auto d = j.at("dims").get<std::vector<std::size_t>>();
    c.dims = {d.at(0), d.at(1), d.at(2), d.at(3), d.at(4)};
    c.steps = j.at("steps").get<std::size_t>();
    c.word_vocab = j.at("word_vocab").get<std::size_t>();
    c.answer_vocab = j.at("answer_vocab").get<std::size_t>();
    Checkpoint ck;
    ck.params = init_model(c, 0);
    ck.seed = j.at("rng").at("seed").get<std::uint64_t>();
    ck.step = j.at("rng").at("step").get<std::uint64_t>();
    ck.vocab_hash = j.at("vocab_hash").get<std::string>();
    auto named = ck.params.named();
    const auto& tensors = j.at("tensors");
    if (tensors.size() != named.size()) throw std::runtime_error("checkpoint tensor count mismatch");
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& tj = tensors[i];
        if (tj.at("name").get<std::string>() != named[i].name)
            throw std::runtime_error("checkpoint tensor order mismatch at " + named[i].name);
        const auto data = tj.at("data").get<std::vector<double>>();
        if (data.size() != named[i].tensor.size()) throw std::runtime_error("checkpoint shape mismatch at " + named[i].name);
        std::copy(data.begin(), data.end(), named[i].tensor.data().begin());
    }
    auto norms = ck.params.norms();
    const auto& nj = j.at("norm_states");
    if (nj.size() != norms.size()) throw std::runtime_error("checkpoint norm state count mismatch");
    for (std::size_t i = 0; i < norms.size(); ++i) {
        norms[i].second->momentum = nj[i].at("momentum").get<double>();
        norms[i].second->running_mean = nj[i].at("running_mean").get<std::vector<double>>();
        norms[i].second->running_var = nj[i].at("running_var").get<std::vector<double>>();
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    write_text(path, checkpoint_to_json(ck).dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
    return checkpoint_from_json(json::parse(read_text(path)));
}

}  // namespace sgvqa

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <cstring>
#include <numeric>

#include "sgvqa/gradcheck.hpp"
#include "sgvqa/model.hpp"

using namespace sgvqa;
using Catch::Approx;

namespace {

SceneGraph random_graph(std::size_t n, std::size_t dim, std::uint64_t seed, bool chain = true) {
    Rng rng = Rng::stream(seed, "test-graph");
    SceneGraph g;
    g.node_dim = dim;
    for (std::size_t i = 0; i < n; ++i) {
        GraphNode node{static_cast<int>(i), 0, std::vector<double>(dim)};
        for (auto& v : node.features) v = rng.normal();
        g.nodes.push_back(node);
    }
    if (chain)
        for (std::size_t i = 0; i + 1 < n; ++i) {
            g.edges.push_back({i, i + 1, 0, std::vector<double>(5, 0.2)});
            g.edges.push_back({i + 1, i, 1, std::vector<double>(5, 0.2)});
        }
    return g;
}

std::vector<int> question_tokens() {
    return render_question(Tpl::obj_exists, {.cat1 = 2, .color = 1});
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

}  // namespace

TEST_CASE("presets have the documented widths") {
    auto d = dims_for(Preset::paper);
    CHECK(d.word == 300);
    CHECK(d.node == 300);
    CHECK(d.graph == 512);
    CHECK(dims_for(Preset::tiny).graph == 8);
    CHECK(preset_from_string("desk") == Preset::desk);
    CHECK_THROWS(preset_from_string("huge"));
}

TEST_CASE("init is deterministic and Glorot bounded") {
    auto cfg = ModelConfig::for_preset(Preset::desk);
    auto a = init_model(cfg, 3), b = init_model(cfg, 3), c = init_model(cfg, 4);
    auto na = a.named(), nb = b.named(), nc = c.named();
    REQUIRE(na.size() == nb.size());
    bool differs = false;
    for (std::size_t i = 0; i < na.size(); ++i) {
        CHECK(max_abs_diff(na[i].tensor, nb[i].tensor) == 0.0);
        differs |= max_abs_diff(na[i].tensor, nc[i].tensor) > 0;
    }
    CHECK(differs);
    const double bound = std::sqrt(6.0 / 64.0);
    double biggest = 0;
    for (double v : a.context.weight.data()) biggest = std::max(biggest, std::abs(v));
    CHECK(biggest <= bound);
    CHECK(biggest > 0.8 * bound);
    for (double v : a.context.bias.data()) CHECK(v == 0.0);
    for (double v : a.token_embedding.data()) CHECK(std::abs(v) <= 1.0 / std::sqrt(32.0));
    for (double v : a.node_head.gamma1.data()) CHECK(v == 1.0);
}

TEST_CASE("question encoder yields M instruction vectors and ignores padding") {
    auto p = init_model(ModelConfig::for_preset(Preset::desk), 1);
    auto toks = question_tokens();
    Tape tape;
    auto inst = encode_question(tape, embed_tokens(tape, toks, p), p);
    CHECK(inst.question.shape() == Shape{1, 32});
    REQUIRE(inst.instructions.size() == 5);
    for (auto& t : inst.instructions) CHECK(t.shape() == Shape{1, 32});

    auto padded = toks;
    padded.resize(p.config.max_question_len, vocab::kPad);
    auto inst2 = encode_question(tape, embed_tokens(tape, padded, p), p);
    CHECK(max_abs_diff(inst.question, inst2.question) == 0.0);
    for (std::size_t t = 0; t < 5; ++t) CHECK(max_abs_diff(inst.instructions[t], inst2.instructions[t]) == 0.0);

    // Repeated tokens embed to identical rows.
    std::vector<int> rep{toks[0], toks[1], toks[0]};
    auto e = embed_tokens(tape, rep, p);
    CHECK(e.embeddings.row_values(0) == e.embeddings.row_values(2));

    CHECK_THROWS_AS(embed_tokens(tape, std::vector<int>{}, p), std::invalid_argument);
    CHECK_THROWS_AS(embed_tokens(tape, std::vector<int>{9999}, p), std::out_of_range);
    CHECK_THROWS(encode_question(tape, embed_tokens(tape, std::vector<int>{0, 0}, p), p));
}

TEST_CASE("single node GAT step reduces to elu of the linear transform") {
    auto p = init_model(ModelConfig::for_preset(Preset::tiny), 2);
    auto g = random_graph(1, 8, 5, false);
    Tape tape;
    Tensor instr = Tensor::row({0.1, -0.2, 0.3, 0.0, 0.5, -0.4, 0.2, 0.1});
    Tensor alpha;
    Tensor out = gat_step(tape, node_features(g), attention_mask(g), instr, p.gat[0], 0.2, &alpha);
    CHECK(alpha.item() == Approx(1.0).margin(1e-15));
    // Oracle: elu([h | i] W)
    std::vector<double> x = g.nodes[0].features;
    for (double v : instr.data()) x.push_back(v);
    for (std::size_t j = 0; j < 8; ++j) {
        double s = 0;
        for (std::size_t i = 0; i < 16; ++i) s += x[i] * p.gat[0].weight(i, j);
        const double e = s > 0 ? s : std::expm1(s);
        CHECK(out(0, j) == Approx(e).margin(1e-12));
    }
}

TEST_CASE("three node attention matches a hand computation") {
    auto p = init_model(ModelConfig::for_preset(Preset::tiny), 7);
    SceneGraph g = random_graph(3, 8, 9, false);
    g.edges.push_back({0, 1, 0, std::vector<double>(5, 0.2)});  // 0 -> 1
    g.edges.push_back({2, 1, 0, std::vector<double>(5, 0.2)});  // 2 -> 1
    Tensor instr = Tensor::zeros({1, 8});
    Tape tape;
    Tensor alpha;
    gat_step(tape, node_features(g), attention_mask(g), instr, p.gat[0], 0.2, &alpha);

    const auto& w = p.gat[0];
    std::vector<std::vector<double>> wh(3, std::vector<double>(8, 0.0));
    for (std::size_t v = 0; v < 3; ++v)
        for (std::size_t j = 0; j < 8; ++j)
            for (std::size_t i = 0; i < 8; ++i) wh[v][j] += g.nodes[v].features[i] * w.weight(i, j);
    auto dot = [&](const std::vector<double>& h, const Tensor& a) {
        double s = 0;
        for (std::size_t j = 0; j < 8; ++j) s += h[j] * a(j, 0);
        return s;
    };
    auto lrelu = [](double x) { return x > 0 ? x : 0.2 * x; };
    // Node 1 attends to {0, 1, 2}.
    std::vector<double> e;
    for (std::size_t u = 0; u < 3; ++u) e.push_back(lrelu(dot(wh[1], w.att_dst) + dot(wh[u], w.att_src)));
    double z = 0;
    for (double x : e) z += std::exp(x);
    for (std::size_t u = 0; u < 3; ++u) CHECK(alpha(1, u) == Approx(std::exp(e[u]) / z).epsilon(1e-12));
    // Nodes 0 and 2 have no in-edges: self only.
    CHECK(alpha(0, 0) == 1.0);
    CHECK(alpha(0, 1) == 0.0);
    CHECK(alpha(2, 2) == 1.0);
}

TEST_CASE("graph encoder is permutation equivariant") {
    auto p = init_model(ModelConfig::for_preset(Preset::desk), 11);
    auto g = random_graph(6, 32, 12);
    g.edges.push_back({0, 5, 2, std::vector<double>(5, 0.2)});
    std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};  // new index i holds old node perm[i]
    std::vector<std::size_t> inv(6);
    for (std::size_t i = 0; i < 6; ++i) inv[perm[i]] = i;
    SceneGraph h = g;
    for (std::size_t i = 0; i < 6; ++i) h.nodes[i] = g.nodes[perm[i]];
    for (auto& e : h.edges) e.src = inv[e.src], e.dst = inv[e.dst];

    Tape tape;
    auto inst = encode_question(tape, embed_tokens(tape, question_tokens(), p), p);
    auto a = encode_graph(tape, g, inst, p);
    auto b = encode_graph(tape, h, inst, p);
    double m = 0;
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 32; ++j) m = std::max(m, std::abs(b.nodes(i, j) - a.nodes(perm[i], j)));
    CHECK(m <= 1e-10);
    CHECK(max_abs_diff(a.graph, b.graph) <= 1e-10);
    CHECK(a.graph.shape() == Shape{1, 64});
}

TEST_CASE("instruction t only affects steps t and later") {
    auto p = init_model(ModelConfig::for_preset(Preset::desk), 13);
    auto g = random_graph(5, 32, 14);
    Tape tape;
    auto inst = encode_question(tape, embed_tokens(tape, question_tokens(), p), p);
    auto base = encode_graph(tape, g, inst, p);
    auto mod = inst;
    mod.instructions[2] = Tensor::zeros({1, 32});
    auto alt = encode_graph(tape, g, mod, p);
    for (std::size_t t = 0; t < 2; ++t) CHECK(max_abs_diff(base.step_states[t], alt.step_states[t]) == 0.0);
    for (std::size_t t = 2; t < 5; ++t) CHECK(max_abs_diff(base.step_states[t], alt.step_states[t]) > 0.0);
}

TEST_CASE("graph encoder rejects mismatched node widths") {
    auto p = init_model(ModelConfig::for_preset(Preset::desk), 1);
    auto g = random_graph(3, 16, 2);
    Tape tape;
    auto inst = encode_question(tape, embed_tokens(tape, question_tokens(), p), p);
    CHECK_THROWS_AS(encode_graph(tape, g, inst, p), ShapeError);
}

TEST_CASE("edge head emits distributions, uniform at zero weights") {
    auto p = init_model(ModelConfig::for_preset(Preset::desk), 15);
    auto g = random_graph(4, 32, 16);
    Tape tape;
    Tensor z = node_features(g);
    std::vector<std::pair<std::size_t, std::size_t>> edges{{0, 1}, {1, 0}, {2, 3}};
    Tensor r = edge_scores(tape, z, edges, p);
    REQUIRE(r.shape() == Shape{3, 5});
    for (std::size_t e = 0; e < 3; ++e) {
        double s = 0;
        for (std::size_t k = 0; k < 5; ++k) {
            CHECK(r(e, k) > 0.0);
            s += r(e, k);
        }
        CHECK(s == Approx(1.0).margin(1e-12));
    }
    for (double& v : p.edge_out.weight.data()) v = 0;
    for (double& v : p.edge_out.bias.data()) v = 0;
    Tensor u = edge_scores(tape, z, edges, p);
    for (double v : u.data()) CHECK(v == Approx(0.2).margin(1e-15));
    std::vector<std::pair<std::size_t, std::size_t>> bad{{0, 9}};
    CHECK_THROWS_AS(edge_scores(tape, z, bad, p), std::out_of_range);
}

TEST_CASE("predictor head and classifier pass finite-difference checks") {
    auto p = init_model(ModelConfig::for_preset(Preset::tiny), 17);
    Rng rng = Rng::stream(1, "x");
    std::vector<double> xv(4 * 8), qv(4 * 8);
    for (auto& v : xv) v = rng.normal();
    for (auto& v : qv) v = rng.normal();
    Tensor x({4, 8}, xv, true), q({4, 8}, qv, true);

    std::vector<NamedTensor> head{{"x", x}, {"fc1.w", p.node_head.fc1.weight}, {"fc2.w", p.node_head.fc2.weight},
                                  {"fc3.w", p.node_head.fc3.weight}, {"gamma1", p.node_head.gamma1},
                                  {"beta2", p.node_head.beta2}};
    Tensor target = Tensor(Shape{4, 8}, qv);
    auto head_loss = [&](Tape& t) {
        Tensor y = predict_head(t, x, p.node_head, Mode::train);
        return t.sum(t.mul(y, target));
    };
    CHECK(finite_diff_check(head_loss, head, 1e-6).max_rel_err() <= 1e-4);

    std::vector<NamedTensor> cls{{"g", x}, {"q", q}, {"h.w", p.cls_hidden.weight}, {"h.b", p.cls_hidden.bias},
                                 {"o.w", p.cls_out.weight}};
    std::vector<std::size_t> ans{0, 3, 7, 31};
    auto cls_loss = [&](Tape& t) {
        Rng r = Rng::stream(0, "drop");
        return t.softmax_cross_entropy(classify(t, x, q, p, Mode::eval, r), ans);
    };
    CHECK(finite_diff_check(cls_loss, cls, 1e-6).max_rel_err() <= 1e-4);
}

TEST_CASE("full forward passes a finite-difference check in extended precision") {
    auto p = convert<long double>(init_model(ModelConfig::for_preset(Preset::tiny), 19));
    auto g = random_graph(4, 8, 20);
    auto toks = question_tokens();
    XLossFn loss = [&](XTape& t) {
        auto inst = encode_question(t, embed_tokens(t, toks, p), p);
        auto enc = encode_graph(t, g, inst, p);
        Rng r = Rng::stream(0, "drop");
        std::vector<std::size_t> ans{4};
        return t.softmax_cross_entropy(classify(t, enc.graph, inst.question, p, Mode::eval, r), ans);
    };
    std::vector<XNamedTensor> used;
    for (auto& n : p.named())
        if (n.name.find("head") == std::string::npos && n.name.find("edge") == std::string::npos) used.push_back(n);
    auto report = finite_diff_check(loss, used, 1e-5);
    CHECK(report.max_rel_err() <= 1e-4);
    // The same check in double is limited by roundoff on near-zero gradients.
    auto pd = init_model(ModelConfig::for_preset(Preset::tiny), 19);
    CHECK(max_abs_diff(pd.gat[3].att_src, convert<double>(p.gat[3].att_src)) == 0.0);
}

TEST_CASE("batch norm in heads rejects single-row train batches") {
    auto p = init_model(ModelConfig::for_preset(Preset::tiny), 21);
    Tape tape;
    CHECK_THROWS(predict_head(tape, Tensor::zeros({1, 8}), p.node_head, Mode::train));
    CHECK_NOTHROW(predict_head(tape, Tensor::zeros({1, 8}), p.node_head, Mode::eval));
}

TEST_CASE("checkpoint round trip is bitwise exact") {
    auto p = init_model(ModelConfig::for_preset(Preset::desk), 23);
    p.node_head.norm1.running_mean[3] = 0.1 + 0.2;  // awkward decimal
    p.token_embedding.data()[0] = 1.0 / 3.0;
    Checkpoint ck{p, 23, 1234, "abc"};
    auto path = std::filesystem::temp_directory_path() / "sgvqa_ckpt_test.json";
    save_checkpoint(ck, path);
    auto back = load_checkpoint(path);
    CHECK(back.step == 1234);
    CHECK(back.vocab_hash == "abc");
    auto a = p.named(), b = back.params.named();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(std::memcmp(a[i].tensor.data().data(), b[i].tensor.data().data(), a[i].tensor.size() * 8) == 0);
    }
    CHECK(back.params.node_head.norm1.running_mean == p.node_head.norm1.running_mean);
    std::filesystem::remove(path);
    CHECK_THROWS(load_checkpoint(path));
}

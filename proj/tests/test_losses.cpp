#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "harness.hpp"
#include "oracles.hpp"
#include "sgvqa/losses.hpp"

using namespace sgvqa;
using Catch::Approx;

namespace {

double val(const Tensor& t) { return t.item(); }

oracle::Mat permute(const oracle::Mat& m, const std::vector<std::size_t>& perm) {
    oracle::Mat out;
    for (auto i : perm) out.push_back(m[i]);
    return out;
}

std::vector<std::size_t> random_perm(Rng& rng, std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    rng.shuffle(p);
    return p;
}

}  // namespace

TEST_CASE("cosine distance closed forms and scale invariance") {
    Tape t;
    CHECK(val(cosine_distance(t, Tensor::row({1, 0}), Tensor::row({1, 0}))) == Approx(0).margin(1e-15));
    CHECK(val(cosine_distance(t, Tensor::row({1, 0}), Tensor::row({0, 1}))) == Approx(1).margin(1e-15));
    CHECK(val(cosine_distance(t, Tensor::row({1, 0}), Tensor::row({-1, 0}))) == Approx(2).margin(1e-15));
    Rng rng = Rng::stream(1, "cos");
    for (int trial = 0; trial < 100; ++trial) {
        auto a = oracle::random_mat(rng, 1, 6), b = oracle::random_mat(rng, 1, 6);
        auto a2 = a;
        const double c = rng.uniform(0.01, 100);
        for (auto& v : a2[0]) v *= c;
        const double d1 = val(cosine_distance(t, oracle::tensor(a), oracle::tensor(b)));
        const double d2 = val(cosine_distance(t, oracle::tensor(a2), oracle::tensor(b)));
        CHECK(std::abs(d1 - d2) <= 1e-10);
        CHECK(d1 >= 0.0);
        CHECK(d1 <= 2.0);
    }
    CHECK_THROWS_AS(cosine_distance(t, Tensor::row({0, 0}), Tensor::row({1, 0})), NumericError);
}

TEST_CASE("local loss: closed forms, oracle, permutations, symmetry") {
    Tape t;
    // Orthonormal rows in shuffled order: a perfect matching exists.
    auto e = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    auto f = Tensor::matrix({{0, 0, 1}, {1, 0, 0}, {0, 1, 0}});
    CHECK(val(local_loss(t, e, f, f, e)) == Approx(0).margin(1e-15));
    CHECK(val(local_loss(t, Tensor::row({1, 0}), Tensor::row({0, 1}), Tensor::row({0, 1}), Tensor::row({1, 0}))) ==
          Approx(1.0).margin(1e-15));

    Rng rng = Rng::stream(2, "local");
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t o1 = 1 + rng.below(6), o2 = 1 + rng.below(6), d = 1 + rng.below(8);
        auto p1 = oracle::random_mat(rng, o1, d), z1 = oracle::random_mat(rng, o1, d);
        auto p2 = oracle::random_mat(rng, o2, d), z2 = oracle::random_mat(rng, o2, d);
        const double got = val(local_loss(t, oracle::tensor(p1), oracle::tensor(z2), oracle::tensor(p2), oracle::tensor(z1)));
        CHECK(std::abs(got - oracle::local(p1, z2, p2, z1)) <= 1e-10);
        CHECK(got >= 0.0);
        CHECK(got <= 2.0);
        if (trial < 100) {
            auto P = random_perm(rng, o1), Q = random_perm(rng, o2);
            const double perm = val(local_loss(t, oracle::tensor(permute(p1, P)), oracle::tensor(permute(z2, Q)),
                                               oracle::tensor(permute(p2, Q)), oracle::tensor(permute(z1, P))));
            CHECK(perm == got);
            const double swapped =
                val(local_loss(t, oracle::tensor(p2), oracle::tensor(z1), oracle::tensor(p1), oracle::tensor(z2)));
            CHECK(std::abs(swapped - got) <= 1e-15);
        }
    }
}

TEST_CASE("global loss: closed forms and oracle") {
    Tape t;
    auto a = Tensor::row({1, 2, 3}), b = Tensor::row({2, 4, 6});
    CHECK(val(global_loss(t, a, b, b, a)) == Approx(0).margin(1e-15));
    auto na = Tensor::row({-1, -2, -3});
    CHECK(val(global_loss(t, a, na, na, a)) == Approx(2).margin(1e-15));
    Rng rng = Rng::stream(3, "global");
    for (int trial = 0; trial < 1000; ++trial) {
        auto m = oracle::random_mat(rng, 4, 8);
        const double got = val(global_loss(t, oracle::tensor({m[0]}), oracle::tensor({m[1]}), oracle::tensor({m[2]}),
                                           oracle::tensor({m[3]})));
        CHECK(std::abs(got - oracle::global(m[0], m[1], m[2], m[3])) <= 1e-10);
    }
}

TEST_CASE("selfsim regularizer: degenerate cases and oracle") {
    Tape t;
    Rng rng = Rng::stream(4, "selfsim");
    auto z = oracle::random_mat(rng, 2, 5), w = oracle::random_mat(rng, 2, 5);
    CHECK(val(selfsim_reg(t, oracle::tensor(z), oracle::tensor(w), 0.1)) == Approx(0).margin(1e-15));
    // Three equidistant unit vectors at 120 degrees.
    const double s3 = std::sqrt(3.0) / 2;
    auto tri = Tensor::matrix({{1, 0}, {-0.5, s3}, {-0.5, -s3}});
    CHECK(val(selfsim_reg(t, tri, tri, 0.1)) == Approx(std::log(2.0)).epsilon(1e-12));

    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t o = 2 + rng.below(5), d = 1 + rng.below(8);
        auto z1 = oracle::random_mat(rng, o, d), z2 = oracle::random_mat(rng, o, d);
        const double tau = rng.uniform(0.1, 2.0);
        const double got = val(selfsim_reg(t, oracle::tensor(z1), oracle::tensor(z2), tau));
        CHECK(std::abs(got - oracle::selfsim_J(z1, z2, tau)) <= 1e-10 * std::max(1.0, std::abs(got)));
        CHECK(got >= 0.0);
    }
    CHECK_THROWS(selfsim_reg(t, Tensor::row({1, 2}), Tensor::row({1, 2}), 0.1));

    // selfsim_loss = local + J.
    auto p1 = oracle::random_mat(rng, 4, 6), p2 = oracle::random_mat(rng, 4, 6);
    auto z1 = oracle::random_mat(rng, 4, 6), z2 = oracle::random_mat(rng, 4, 6);
    const double full = val(selfsim_loss(t, oracle::tensor(p1), oracle::tensor(z2), oracle::tensor(p2), oracle::tensor(z1), 0.1));
    CHECK(std::abs(full - oracle::local(p1, z2, p2, z1) - oracle::selfsim_J(z1, z2, 0.1)) <= 1e-10);
}

TEST_CASE("link regularizer: closed forms and oracle") {
    Tape t;
    auto onehot = Tensor::matrix({{0, 1, 0}, {1, 0, 0}});
    CHECK(val(link_reg(t, onehot, onehot)) == Approx(0).margin(1e-11));
    CHECK(val(link_reg(t, Tensor::row({1, 0}), Tensor::row({0.5, 0.5}))) == Approx(std::log(2.0)).epsilon(1e-11));
    Rng rng = Rng::stream(5, "link");
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t e = 1 + rng.below(6);
        auto r1 = oracle::random_distributions(rng, e, 5), r2 = oracle::random_distributions(rng, e, 5);
        const double got = val(link_reg(t, oracle::tensor(r1), oracle::tensor(r2)));
        CHECK(std::abs(got - oracle::link(r1, r2)) <= 1e-10);
        CHECK(got >= 0.0);
    }
    CHECK_THROWS(link_reg(t, Tensor(), Tensor()));
}

TEST_CASE("supervised loss: closed forms and oracle") {
    Tape t;
    std::vector<std::size_t> ans{7};
    CHECK(val(supervised_loss(t, Tensor::zeros({1, 32}), ans)) == Approx(std::log(32.0)).epsilon(1e-14));
    auto peaked = Tensor::zeros({1, 32});
    peaked(0, 7) = 20.0;
    CHECK(val(supervised_loss(t, peaked, ans)) == Approx(std::log1p(31 * std::exp(-20.0))).epsilon(1e-10));
    std::vector<std::size_t> first{0};
    CHECK(val(supervised_loss(t, Tensor::row({20, 0, 0, 0}), first)) <= 1e-8);
    Rng rng = Rng::stream(6, "sup");
    for (int trial = 0; trial < 1000; ++trial) {
        auto logits = oracle::random_mat(rng, 1, 10, -10, 10);
        std::vector<std::size_t> a{rng.below(10)};
        CHECK(std::abs(val(supervised_loss(t, oracle::tensor(logits), a)) - oracle::cross_entropy(logits[0], a[0])) <=
              1e-10);
    }
    std::vector<std::size_t> bad{32};
    CHECK_THROWS_AS(supervised_loss(t, Tensor::zeros({1, 32}), bad), std::out_of_range);
}

TEST_CASE("loss config validation") {
    LossConfig c;
    CHECK_NOTHROW(c.validate());
    c.variant = Variant::baseline;
    CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("beta"));
    c.beta = 0;
    CHECK_NOTHROW(c.validate());
    c.alpha = -1;
    CHECK_THROWS(c.validate());
    LossConfig d;
    d.tau = 0;
    CHECK_THROWS(d.validate());
    json j = LossConfig{};
    CHECK(j.at("variant") == "selfsim");
    CHECK(j.get<LossConfig>().tau == 0.1);
}

namespace {

DualViewItem make_item(Rng& rng, std::size_t o, std::size_t d) {
    DualViewItem it;
    auto mk = [&](std::size_t r, std::size_t c) { return oracle::tensor(oracle::random_mat(rng, r, c), true); };
    it.z1 = mk(o, d), it.z2 = mk(o, d), it.p1 = mk(o, d), it.p2 = mk(o, d);
    it.g1 = mk(1, d), it.g2 = mk(1, d), it.h1 = mk(1, d), it.h2 = mk(1, d);
    for (std::size_t i = 0; i < o; ++i) it.node_pairs.push_back({i, i});
    it.r1 = oracle::tensor(oracle::random_distributions(rng, 3, 5), true);
    it.r2 = oracle::tensor(oracle::random_distributions(rng, 3, 5), true);
    it.logits = mk(1, 32);
    it.answer = rng.below(32);
    return it;
}

oracle::Mat rows(const Tensor& t) {
    oracle::Mat m;
    for (std::size_t i = 0; i < t.rows(); ++i) m.push_back(t.row_values(i));
    return m;
}

}  // namespace

TEST_CASE("total loss combines components") {
    Rng rng = Rng::stream(7, "total");
    std::vector<DualViewItem> batch{make_item(rng, 4, 6), make_item(rng, 4, 6)};
    Tape t;

    LossConfig sup_only;
    sup_only.variant = Variant::global;
    sup_only.beta = 0;
    double sup = 0;
    for (auto& it : batch) sup += oracle::cross_entropy(it.logits.row_values(0), it.answer);
    sup /= 2;
    CHECK(total_loss(t, sup_only, batch).total.item() == Approx(sup).epsilon(1e-12));

    // Fixed 4-node instance: alpha = beta = 1, selfsim with link regularizer.
    LossConfig c;
    c.variant = Variant::selfsim;
    c.link_reg = true;
    double prime = 0, je = 0;
    for (auto& it : batch) {
        prime += oracle::local(rows(it.p1), rows(it.z2), rows(it.p2), rows(it.z1)) +
                 oracle::selfsim_J(rows(it.z1), rows(it.z2), c.tau);
        je += oracle::link(rows(it.r1), rows(it.r2));
    }
    auto parts = total_loss(t, c, batch);
    CHECK(parts.total.item() == Approx(sup + prime / 2 + je / 2).epsilon(1e-10));
    CHECK(parts.sup == Approx(sup));
    CHECK(parts.prime == Approx(prime / 2));
    CHECK(parts.link == Approx(je / 2));

    // Identical views through an identity predictor: no similarity term.
    LossConfig g;
    g.variant = Variant::global;
    for (auto& it : batch) it.h1 = it.g2 = it.g1, it.h2 = it.g1;
    CHECK(total_loss(t, g, batch).total.item() == Approx(sup).epsilon(1e-12));

    LossConfig bad;
    bad.variant = Variant::baseline;
    CHECK_THROWS(total_loss(t, bad, batch));
}

TEST_CASE("stop-gradient: detached z-side matches constant z-side, and z-side gets nothing") {
    for (auto v : {Variant::local, Variant::global, Variant::selfsim}) {
        Rng rng = Rng::stream(8, "sg", static_cast<std::uint64_t>(v));
        std::vector<DualViewItem> batch{make_item(rng, 3, 5), make_item(rng, 4, 5)};
        LossConfig c;
        c.variant = v;
        c.alpha = 0;
        c.link_reg = true;

        // Similarity-only loss: z and g (the targets) collect nothing, except
        // the augmented view in selfsim, which is the guided side of J.
        Tape t;
        t.backward(total_loss(t, c, batch).total);
        for (auto& it : batch) {
            for (double g : it.g1.grad()) CHECK(g == 0.0);
            for (double g : it.g2.grad()) CHECK(g == 0.0);
            for (double g : it.z1.grad()) CHECK(g == 0.0);
            for (double g : it.r1.grad()) CHECK(g == 0.0);
            if (v != Variant::selfsim)
                for (double g : it.z2.grad()) CHECK(g == 0.0);
        }

        // Same gradient on the predictor side when the targets are constants.
        std::vector<std::vector<double>> ref;
        for (auto& it : batch)
            for (auto* x : {&it.p1, &it.p2, &it.h1, &it.h2, &it.r2}) ref.emplace_back(x->grad().begin(), x->grad().end());
        auto frozen = batch;
        for (auto& it : frozen) {
            for (auto* x : {&it.p1, &it.p2, &it.h1, &it.h2, &it.r2, &it.z2}) *x = x->clone(), x->zero_grad();
            it.z1 = detach(it.z1), it.g1 = detach(it.g1), it.g2 = detach(it.g2), it.r1 = detach(it.r1);
            if (v != Variant::selfsim) it.z2 = detach(it.z2);
        }
        Tape t2;
        t2.backward(total_loss(t2, c, frozen).total);
        std::size_t k = 0;
        for (auto& it : frozen)
            for (auto* x : {&it.p1, &it.p2, &it.h1, &it.h2, &it.r2}) {
                auto g = x->grad();
                for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - ref[k][i]) <= 1e-10);
                ++k;
            }
    }
}

TEST_CASE("ablation without stop-gradient lets target sides receive gradient") {
    Rng rng = Rng::stream(9, "nosg");
    std::vector<DualViewItem> batch{make_item(rng, 3, 5), make_item(rng, 3, 5)};
    LossConfig c;
    c.variant = Variant::global;
    c.alpha = 0;
    c.stop_gradient = false;
    Tape t;
    t.backward(total_loss(t, c, batch).total);
    double mass = 0;
    for (double g : batch[0].g2.grad()) mass += std::abs(g);
    CHECK(mass > 0.0);
}

TEST_CASE("total loss gradient check through the full pipeline, all eight configs") {
    for (const auto& cfg : harness::all_loss_configs()) {
        INFO("variant " << to_string(cfg.variant) << " link_reg " << cfg.link_reg);
        auto rep = harness::total_loss_gradcheck(cfg, 31, 1e-5, 12);
        CHECK(rep.max_rel_err() <= 1e-4);
    }
}

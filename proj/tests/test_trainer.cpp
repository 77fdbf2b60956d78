#include <catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "sgvqa/trainer.hpp"

using namespace sgvqa;
using Catch::Approx;

namespace {

Corpus small_corpus(int n_scenes = 60, std::uint64_t seed = 3) {
    CorpusConfig c;
    c.n_scenes = n_scenes;
    c.seed = seed;
    return generate_corpus(c);
}

TrainConfig quick(Variant v, int epochs = 1) {
    TrainConfig t;
    t.loss.variant = v;
    t.loss.beta = v == Variant::baseline ? 0.0 : 1.0;
    t.epochs = epochs;
    t.batch_size = 16;
    t.repr_sample = 32;
    return t;
}

bool same_params(const ModelParams& a, const ModelParams& b) {
    auto na = a.named(), nb = b.named();
    if (na.size() != nb.size()) return false;
    for (std::size_t i = 0; i < na.size(); ++i) {
        auto da = na[i].tensor.data(), db = nb[i].tensor.data();
        if (da.size() != db.size() || std::memcmp(da.data(), db.data(), da.size() * sizeof(double))) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("score computes accuracy, consistency and validity") {
    std::vector<QAItem> items(4);
    for (int i = 0; i < 4; ++i) {
        items[i].item_id = i;
        items[i].answer = i % 2;
        items[i].valid_answers = {0, 1};
        items[i].paraphrase_group = i / 2;
        items[i].binary = true;
        items[i].qtype = QType::relation;
    }
    items[3].binary = false;
    items[3].qtype = QType::object;
    std::vector<const QAItem*> ptrs;
    for (auto& it : items) ptrs.push_back(&it);
    // group 0 agrees on 0 (one right), group 1 predicts {0, 5}
    std::vector<int> pred{0, 0, 0, 5};
    auto m = score(ptrs, pred);
    CHECK(m.count == 4);
    CHECK(m.overall == Approx(0.5));
    CHECK(m.binary == Approx(2.0 / 3.0));
    CHECK(m.open == Approx(0.0));
    CHECK(m.consistency == Approx(0.5));
    CHECK(m.validity == Approx(0.75));
    CHECK(m.per_qtype.at("relation") == Approx(2.0 / 3.0));
    CHECK(m.per_qtype_count.at("object") == 1);
    CHECK(m.per_qtype.at("global") == 0.0);
    CHECK_THROWS_AS(score(ptrs, std::vector<int>{0}), std::invalid_argument);
}

TEST_CASE("normalized_std is zero for collapsed vectors and scale free") {
    std::vector<std::vector<double>> same(5, {1.0, 2.0, -1.0});
    CHECK(normalized_std(same) < 1e-15);
    std::vector<std::vector<double>> scaled{{1, 0}, {0, 1}, {3, 0}, {0, 7}};
    // unit vectors e1,e2,e1,e2: each dim has std 0.5
    CHECK(normalized_std(scaled) == Approx(0.5));
}

TEST_CASE("train config validation and json round trip") {
    TrainConfig t;
    CHECK_NOTHROW(t.validate());
    json j = t;
    auto back = j.get<TrainConfig>();
    CHECK(json(back) == j);
    t.lr = 0;
    CHECK_THROWS_WITH(t.validate(), Catch::Matchers::ContainsSubstring("train.lr"));
    t = {};
    t.data_fraction = 1.5;
    CHECK_THROWS_WITH(t.validate(), Catch::Matchers::ContainsSubstring("data_fraction"));
    t = {};
    t.loss.variant = Variant::baseline;
    CHECK_THROWS_WITH(t.validate(), Catch::Matchers::ContainsSubstring("train.loss.beta"));
    auto p = TrainConfig::paper_defaults();
    CHECK(p.lr == 1e-4);
    CHECK(p.batch_size == 64);
    CHECK(p.epochs == 50);
    CHECK(p.decay_period == 20);
}

TEST_CASE("scheduled learning rate decays in steps") {
    CHECK(scheduled_lr(1e-3, 0.1, 10, 0) == 1e-3);
    CHECK(scheduled_lr(1e-3, 0.1, 10, 9) == 1e-3);
    CHECK(scheduled_lr(1e-3, 0.1, 10, 10) == Approx(1e-4));
    CHECK(scheduled_lr(1e-3, 0.1, 10, 25) == Approx(1e-5));
    CHECK(scheduled_lr(1e-3, 0.1, 0, 25) == 1e-3);
}

TEST_CASE("fraction subsets are nested") {
    auto c = small_corpus(100);
    auto s20 = fraction_scenes(c, 1, 0.2), s50 = fraction_scenes(c, 1, 0.5), s100 = fraction_scenes(c, 1, 1.0);
    CHECK(s20.size() < s50.size());
    CHECK(s50.size() < s100.size());
    CHECK(std::includes(s50.begin(), s50.end(), s20.begin(), s20.end()));
    CHECK(std::includes(s100.begin(), s100.end(), s50.begin(), s50.end()));
    for (int s : s100) CHECK(c.scene_split[static_cast<std::size_t>(s)] == Split::train);
}

TEST_CASE("training is deterministic and logs every step") {
    auto c = small_corpus();
    auto cfg = quick(Variant::selfsim);
    cfg.loss.link_reg = true;
    auto a = train(cfg, c);
    auto b = train(cfg, c);
    CHECK(same_params(a.params, b.params));
    CHECK(steps_csv(a.step_log) == steps_csv(b.step_log));
    const auto n_train = c.split_items(Split::train).size();
    CHECK(a.steps == (n_train + 15) / 16);
    CHECK(a.step_log.size() == a.steps);
    REQUIRE(a.epochs.size() == 1);
    CHECK(a.epochs[0].val.has_value());
    CHECK(a.epochs[0].prime > 0);
    CHECK(a.epochs[0].link > 0);
    cfg.seed = 9;
    auto d = train(cfg, c);
    CHECK_FALSE(same_params(a.params, d.params));
}

TEST_CASE("baseline never touches the similarity terms") {
    auto c = small_corpus();
    auto r = train(quick(Variant::baseline), c);
    for (const auto& s : r.step_log) {
        CHECK(s.prime == 0.0);
        CHECK(s.link == 0.0);
        CHECK(s.total == s.sup);
    }
}

TEST_CASE("alpha zero leaves the classifier untouched") {
    auto c = small_corpus();
    auto cfg = quick(Variant::global);
    cfg.loss.alpha = 0.0;
    const auto init = init_model(model_config_for(cfg, c), cfg.seed);
    auto r = train(cfg, c);
    auto a = init.classifier_params(), b = r.params.classifier_params();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto da = a[i].tensor.data(), db = b[i].tensor.data();
        CHECK(std::memcmp(da.data(), db.data(), da.size() * sizeof(double)) == 0);
    }
    CHECK_FALSE(same_params(init, r.params));
}

TEST_CASE("divergence is reported") {
    auto c = small_corpus();
    auto cfg = quick(Variant::baseline);
    auto p = init_model(model_config_for(cfg, c), cfg.seed);
    p.cls_out.weight.data()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(train(cfg, c, {}, p), DivergenceError);
}

TEST_CASE("preset must match corpus node width") {
    auto c = small_corpus(20);
    auto cfg = quick(Variant::baseline);
    cfg.preset = Preset::tiny;
    CHECK_THROWS_WITH(train(cfg, c), Catch::Matchers::ContainsSubstring("node_dim"));
}

TEST_CASE("evaluation is pure and identity perturbation is a no-op") {
    auto c = small_corpus();
    auto cfg = quick(Variant::baseline);
    auto p = init_model(model_config_for(cfg, c), 4);
    auto before = p.named();
    auto m1 = evaluate(p, c, Split::val, 4);
    auto m2 = evaluate(p, c, Split::val, 4);
    CHECK(json(m1) == json(m2));
    EvalPerturbation id;
    id.scene_augment = AugmentKind::identity;
    auto rows = perturbation_report(p, c, Split::val, 4, {{"identity", std::nullopt, id}});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].delta == 0.0);
    CHECK(rows[0].count == c.split_items(Split::val).size());
}

TEST_CASE("question noise keeps padding and replaces a bounded share") {
    std::vector<int> q{5, 6, 7, 8, 9, 10, 0, 0};
    for (std::uint64_t s = 0; s < 50; ++s) {
        Rng rng = Rng::stream(s, "qn");
        auto n = detail::noisy_question(q, 0.5, rng);
        int changed = 0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            if (q[i] == vocab::kPad) CHECK(n[i] == vocab::kPad);
            else CHECK(n[i] != vocab::kPad);
            changed += n[i] != q[i];
        }
        CHECK(changed <= 3);
    }
}

TEST_CASE("csv formats are stable") {
    CHECK(metrics_csv_header() ==
          "epoch,split,overall,binary,open,consistency,validity,relation,attribute,object,global,category,L_sup,L_prime,"
          "J_e,repr_std\n");
    CHECK(fmt(0.1) == "0.1");
    CHECK(fmt(1.0 / 3.0) == "0.3333333333");
    std::vector<StepLog> s{{0, 1, 1.5, 0.25, 0, 1.75}};
    CHECK(steps_csv(s) == "step,L_sup,L_prime,J_e,total\n0,1.5,0.25,0,1.75\n");
}

TEST_CASE("oracle predictions score perfectly and counts partition") {
    auto c = small_corpus();
    auto items = c.split_items(Split::test);
    std::vector<int> pred;
    for (auto* it : items) pred.push_back(it->answer);
    auto m = score(items, pred);
    CHECK(m.overall == 1.0);
    CHECK(m.binary == 1.0);
    CHECK(m.open == 1.0);
    CHECK(m.consistency == 1.0);
    CHECK(m.validity == 1.0);
    std::size_t total = 0;
    for (auto& [k, n] : m.per_qtype_count) total += n;
    CHECK(total == m.count);
    CHECK(m.binary_count + m.open_count == m.count);
}

TEST_CASE("uniform random predictions sit at chance") {
    auto c = small_corpus(400);
    auto items = c.split_items(Split::train);
    Rng rng = Rng::stream(5, "uniform-pred");
    std::vector<int> pred;
    for (std::size_t i = 0; i < items.size(); ++i) pred.push_back(static_cast<int>(rng.below(32)));
    auto m = score(items, pred);
    const double n = static_cast<double>(items.size()), p = 1.0 / 32.0;
    CHECK(std::abs(m.overall - p) <= 3 * std::sqrt(p * (1 - p) / n));
}

TEST_CASE("training loss decreases over two epochs on a 100-scene corpus") {
    auto c = small_corpus(100);
    for (Variant v : {Variant::baseline, Variant::local, Variant::global, Variant::selfsim}) {
        auto r = train(quick(v, 2), c);
        REQUIRE(r.epochs.size() == 2);
        CHECK(r.epochs[1].total < r.epochs[0].total);
    }
}

TEST_CASE("full-fraction sweep point reproduces plain training") {
    auto c = small_corpus();
    auto cfg = quick(Variant::selfsim);
    auto sweep = fraction_sweep(cfg, c, {1.0});
    auto r = train(cfg, c);
    CHECK(json(sweep[0].test) == json(evaluate(r.params, c, Split::test, cfg.seed)));
    CHECK_THROWS_AS(fraction_sweep(cfg, c, {0.5, 0.2}), std::invalid_argument);
    CHECK_THROWS_WITH(fraction_sweep(cfg, c, {0.01}), Catch::Matchers::ContainsSubstring("fewer than one batch"));
}

TEST_CASE("evaluation leaves parameters and norm statistics untouched") {
    auto c = small_corpus();
    auto cfg = quick(Variant::global);
    auto r = train(cfg, c);
    const json before = checkpoint_to_json({r.params, cfg.seed, r.steps, vocab_hash()});
    evaluate(r.params, c, Split::val, 0);
    perturbation_report(r.params, c, Split::val, 0, noise_setups());
    CHECK(checkpoint_to_json({r.params, cfg.seed, r.steps, vocab_hash()}) == before);
}

TEST_CASE("perturbation setups select the matching question types") {
    auto c = small_corpus(200);
    auto p = init_model(ModelConfig::for_preset(Preset::desk), 1);
    auto rows = perturbation_report(p, c, Split::val, 1, disruptive_setups());
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].subset == "relation");
    std::size_t n_rel = 0;
    for (auto* it : c.split_items(Split::val)) n_rel += it->qtype == QType::relation;
    CHECK(rows[0].count == n_rel);
    CHECK(rows[1].subset == "attribute");
    CHECK(rows[2].subset == "global");
    Corpus no_rel = c;
    std::erase_if(no_rel.items, [](const QAItem& it) { return it.qtype == QType::relation; });
    CHECK_THROWS_WITH(perturbation_report(p, no_rel, Split::val, 1, disruptive_setups()),
                      Catch::Matchers::ContainsSubstring("relation_flip"));
}

#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sgvqa/rng.hpp"
#include "sgvqa/scene.hpp"

namespace sgvqa {

enum class QType { relation = 0, attribute = 1, object = 2, global = 3, category = 4 };
inline constexpr std::array<std::string_view, 5> kQTypeNames{"relation", "attribute", "object", "global", "category"};
inline std::string_view to_string(QType t) { return kQTypeNames[static_cast<std::size_t>(t)]; }
inline QType qtype_from_string(std::string_view s) {
    for (std::size_t i = 0; i < kQTypeNames.size(); ++i)
        if (kQTypeNames[i] == s) return static_cast<QType>(i);
    throw std::invalid_argument("unknown question type '" + std::string(s) + "'");
}

class QuestionError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Vocabularies. Token 0 is padding and is masked out by the question encoder.

namespace vocab {

inline const std::vector<std::string>& words() {
    static const std::vector<std::string> w = [] {
        std::vector<std::string> v{"<pad>", "?",   "is",    "the",     "to",    "left",  "right", "of",
                                   "or",    "above", "below", "what",  "color", "size",  "how",   "big",
                                   "there", "a",   "any",   "object",  "which", "and",   "many",  "objects",
                                   "are",   "more", "than", "at",      "least", "number"};
        for (auto c : kColors) v.emplace_back(c);
        for (auto s : kSizes) v.emplace_back(s);
        for (auto c : kCategories) v.emplace_back(c);
        for (int d = 0; d <= 9; ++d) v.push_back(std::to_string(d));
        return v;
    }();
    return w;
}

inline const std::vector<std::string>& answers() {
    static const std::vector<std::string> a = [] {
        std::vector<std::string> v{"yes", "no", "left", "right", "above", "below"};
        for (auto c : kColors) v.emplace_back(c);
        for (auto s : kSizes) v.emplace_back(s);
        for (auto c : kCategories) v.emplace_back(c);
        for (int d = 0; d <= 9; ++d) v.push_back(std::to_string(d));
        return v;
    }();
    return a;
}

inline int index_of(const std::vector<std::string>& table, std::string_view s) {
    auto it = std::find(table.begin(), table.end(), s);
    if (it == table.end()) throw std::out_of_range("'" + std::string(s) + "' not in vocabulary");
    return static_cast<int>(it - table.begin());
}

inline int word(std::string_view s) { return index_of(words(), s); }
inline int answer(std::string_view s) { return index_of(answers(), s); }

inline constexpr int kPad = 0;
inline int first_color_word() { return word(kColors[0]); }
inline int first_size_word() { return word(kSizes[0]); }
inline int first_category_word() { return word(kCategories[0]); }
inline int first_digit_word() { return word("0"); }

inline int yes() { return 0; }
inline int no() { return 1; }
inline int color_answer(int c) { return 6 + c; }
inline int size_answer(int s) { return 6 + static_cast<int>(kColors.size()) + s; }
inline int category_answer(int c) { return 6 + static_cast<int>(kColors.size() + kSizes.size()) + c; }
inline int digit_answer(int d) { return 6 + static_cast<int>(kColors.size() + kSizes.size() + kCategories.size()) + d; }

}  // namespace vocab

// ---------------------------------------------------------------------------
// Template grammar. A pattern is a sequence of literal words and typed slots.

enum class Slot { none, cat1, cat2, color, size, digit };

struct PatternToken {
    Slot slot = Slot::none;
    std::string_view word;
};

enum class Tpl : int {
    rel_left_yn, rel_right_yn, rel_lr, rel_rl, rel_ab, rel_ba,
    attr_color, attr_color_p, attr_size, attr_size_p, attr_is_color, attr_is_color_p,
    obj_exists, obj_exists_p, obj_what, obj_what_p,
    glob_count, glob_count_p, glob_more, glob_more_p,
    cat_count, cat_count_p, cat_exists, cat_exists_p,
    count_
};

enum class AnswerSet { yes_no, left_right, above_below, colors, sizes, categories, digits };

struct TemplateDef {
    Tpl id;
    QType qtype;
    AnswerSet answers;
    std::vector<PatternToken> pattern;
};

inline const std::vector<TemplateDef>& templates() {
    using enum Slot;
    auto w = [](std::string_view s) { return PatternToken{none, s}; };
    auto s = [](Slot k) { return PatternToken{k, {}}; };
    static const std::vector<TemplateDef> defs{
        {Tpl::rel_left_yn, QType::relation, AnswerSet::yes_no,
         {w("is"), w("the"), s(cat1), w("to"), w("the"), w("left"), w("of"), w("the"), s(cat2), w("?")}},
        {Tpl::rel_right_yn, QType::relation, AnswerSet::yes_no,
         {w("is"), w("the"), s(cat1), w("to"), w("the"), w("right"), w("of"), w("the"), s(cat2), w("?")}},
        {Tpl::rel_lr, QType::relation, AnswerSet::left_right,
         {w("is"), w("the"), s(cat1), w("left"), w("or"), w("right"), w("of"), w("the"), s(cat2), w("?")}},
        {Tpl::rel_rl, QType::relation, AnswerSet::left_right,
         {w("is"), w("the"), s(cat1), w("right"), w("or"), w("left"), w("of"), w("the"), s(cat2), w("?")}},
        {Tpl::rel_ab, QType::relation, AnswerSet::above_below,
         {w("is"), w("the"), s(cat1), w("above"), w("or"), w("below"), w("the"), s(cat2), w("?")}},
        {Tpl::rel_ba, QType::relation, AnswerSet::above_below,
         {w("is"), w("the"), s(cat1), w("below"), w("or"), w("above"), w("the"), s(cat2), w("?")}},
        {Tpl::attr_color, QType::attribute, AnswerSet::colors, {w("what"), w("color"), w("is"), w("the"), s(cat1), w("?")}},
        {Tpl::attr_color_p, QType::attribute, AnswerSet::colors,
         {w("what"), w("is"), w("the"), w("color"), w("of"), w("the"), s(cat1), w("?")}},
        {Tpl::attr_size, QType::attribute, AnswerSet::sizes, {w("what"), w("size"), w("is"), w("the"), s(cat1), w("?")}},
        {Tpl::attr_size_p, QType::attribute, AnswerSet::sizes, {w("how"), w("big"), w("is"), w("the"), s(cat1), w("?")}},
        {Tpl::attr_is_color, QType::attribute, AnswerSet::yes_no, {w("is"), w("the"), s(cat1), s(color), w("?")}},
        {Tpl::attr_is_color_p, QType::attribute, AnswerSet::yes_no,
         {w("is"), w("the"), w("color"), w("of"), w("the"), s(cat1), s(color), w("?")}},
        {Tpl::obj_exists, QType::object, AnswerSet::yes_no, {w("is"), w("there"), w("a"), s(color), s(cat1), w("?")}},
        {Tpl::obj_exists_p, QType::object, AnswerSet::yes_no, {w("is"), w("there"), w("any"), s(color), s(cat1), w("?")}},
        {Tpl::obj_what, QType::object, AnswerSet::categories,
         {w("what"), w("is"), w("the"), s(color), s(size), w("object"), w("?")}},
        {Tpl::obj_what_p, QType::object, AnswerSet::categories,
         {w("which"), w("object"), w("is"), s(color), w("and"), s(size), w("?")}},
        {Tpl::glob_count, QType::global, AnswerSet::digits, {w("how"), w("many"), w("objects"), w("are"), w("there"), w("?")}},
        {Tpl::glob_count_p, QType::global, AnswerSet::digits,
         {w("what"), w("is"), w("the"), w("number"), w("of"), w("objects"), w("?")}},
        {Tpl::glob_more, QType::global, AnswerSet::yes_no,
         {w("are"), w("there"), w("more"), w("than"), s(digit), w("objects"), w("?")}},
        {Tpl::glob_more_p, QType::global, AnswerSet::yes_no,
         {w("are"), w("there"), w("at"), w("least"), s(digit), w("objects"), w("?")}},
        {Tpl::cat_count, QType::category, AnswerSet::digits, {w("how"), w("many"), s(cat1), w("are"), w("there"), w("?")}},
        {Tpl::cat_count_p, QType::category, AnswerSet::digits, {w("what"), w("is"), w("the"), w("number"), w("of"), s(cat1), w("?")}},
        {Tpl::cat_exists, QType::category, AnswerSet::yes_no, {w("is"), w("there"), w("a"), s(cat1), w("?")}},
        {Tpl::cat_exists_p, QType::category, AnswerSet::yes_no, {w("is"), w("there"), w("any"), s(cat1), w("?")}},
    };
    return defs;
}

inline const TemplateDef& template_def(Tpl t) { return templates()[static_cast<std::size_t>(t)]; }

inline std::vector<int> answer_set(AnswerSet s) {
    std::vector<int> out;
    switch (s) {
        case AnswerSet::yes_no: return {vocab::yes(), vocab::no()};
        case AnswerSet::left_right: return {vocab::answer("left"), vocab::answer("right")};
        case AnswerSet::above_below: return {vocab::answer("above"), vocab::answer("below")};
        case AnswerSet::colors:
            for (int c = 0; c < static_cast<int>(kColors.size()); ++c) out.push_back(vocab::color_answer(c));
            return out;
        case AnswerSet::sizes:
            for (int c = 0; c < static_cast<int>(kSizes.size()); ++c) out.push_back(vocab::size_answer(c));
            return out;
        case AnswerSet::categories:
            for (int c = 0; c < static_cast<int>(kCategories.size()); ++c) out.push_back(vocab::category_answer(c));
            return out;
        case AnswerSet::digits:
            for (int d = 0; d <= 9; ++d) out.push_back(vocab::digit_answer(d));
            return out;
    }
    return out;
}

/// Slot fillers of a question (symbol ids, -1 when unused).
struct QuestionArgs {
    int cat1 = -1;
    int cat2 = -1;
    int color = -1;
    int size = -1;
    int digit = -1;
};

struct ParsedQuestion {
    Tpl tpl;
    QuestionArgs args;
};

inline std::vector<int> render_question(Tpl tpl, const QuestionArgs& a) {
    std::vector<int> out;
    for (const auto& tok : template_def(tpl).pattern) {
        switch (tok.slot) {
            case Slot::none: out.push_back(vocab::word(tok.word)); break;
            case Slot::cat1: out.push_back(vocab::first_category_word() + a.cat1); break;
            case Slot::cat2: out.push_back(vocab::first_category_word() + a.cat2); break;
            case Slot::color: out.push_back(vocab::first_color_word() + a.color); break;
            case Slot::size: out.push_back(vocab::first_size_word() + a.size); break;
            case Slot::digit: out.push_back(vocab::first_digit_word() + a.digit); break;
        }
    }
    return out;
}

/// Matches a token sequence against the template grammar. Padding tokens are ignored.
inline ParsedQuestion parse_question(std::span<const int> tokens) {
    std::vector<int> toks;
    for (int t : tokens)
        if (t != vocab::kPad) toks.push_back(t);
    auto in_range = [](int t, int first, std::size_t n) { return t >= first && t < first + static_cast<int>(n); };
    for (const auto& def : templates()) {
        if (def.pattern.size() != toks.size()) continue;
        QuestionArgs a;
        bool ok = true;
        for (std::size_t i = 0; i < toks.size() && ok; ++i) {
            const int t = toks[i];
            switch (def.pattern[i].slot) {
                case Slot::none: ok = t >= 0 && t < static_cast<int>(vocab::words().size()) &&
                                      vocab::words()[static_cast<std::size_t>(t)] == def.pattern[i].word;
                    break;
                case Slot::cat1:
                case Slot::cat2:
                    ok = in_range(t, vocab::first_category_word(), kCategories.size());
                    (def.pattern[i].slot == Slot::cat1 ? a.cat1 : a.cat2) = t - vocab::first_category_word();
                    break;
                case Slot::color:
                    ok = in_range(t, vocab::first_color_word(), kColors.size());
                    a.color = t - vocab::first_color_word();
                    break;
                case Slot::size:
                    ok = in_range(t, vocab::first_size_word(), kSizes.size());
                    a.size = t - vocab::first_size_word();
                    break;
                case Slot::digit:
                    ok = in_range(t, vocab::first_digit_word(), 10);
                    a.digit = t - vocab::first_digit_word();
                    break;
            }
        }
        if (ok) return {def.id, a};
    }
    throw QuestionError("question does not match any template");
}

// ---------------------------------------------------------------------------
// Ground-truth evaluator: exhaustive search over the stored scene facts.

namespace detail {

inline const SceneObject& the_unique(const SceneSpec& spec, int category) {
    const SceneObject* found = nullptr;
    for (const auto& o : spec.objects) {
        if (o.category != category) continue;
        if (found) throw QuestionError("reference to a non-unique " + std::string(kCategories[static_cast<std::size_t>(category)]));
        found = &o;
    }
    if (!found) throw QuestionError("reference to an absent " + std::string(kCategories[static_cast<std::size_t>(category)]));
    return *found;
}

inline bool holds(const SceneSpec& spec, int subject, int predicate, int object) {
    return std::binary_search(spec.relations.begin(), spec.relations.end(), Relation{subject, predicate, object});
}

inline int yes_no(bool b) { return b ? vocab::yes() : vocab::no(); }

}  // namespace detail

inline int oracle_answer(const SceneSpec& spec, std::span<const int> question) {
    const ParsedQuestion q = parse_question(question);
    const auto& a = q.args;
    using detail::holds;
    using detail::the_unique;
    using detail::yes_no;
    auto count_if = [&](auto pred) { return static_cast<int>(std::count_if(spec.objects.begin(), spec.objects.end(), pred)); };
    switch (q.tpl) {
        case Tpl::rel_left_yn:
            return yes_no(holds(spec, the_unique(spec, a.cat1).id, left_of, the_unique(spec, a.cat2).id));
        case Tpl::rel_right_yn:
            return yes_no(holds(spec, the_unique(spec, a.cat1).id, right_of, the_unique(spec, a.cat2).id));
        case Tpl::rel_lr:
        case Tpl::rel_rl: {
            const int s = the_unique(spec, a.cat1).id, o = the_unique(spec, a.cat2).id;
            if (holds(spec, s, left_of, o)) return vocab::answer("left");
            if (holds(spec, s, right_of, o)) return vocab::answer("right");
            throw QuestionError("objects are not horizontally separated");
        }
        case Tpl::rel_ab:
        case Tpl::rel_ba: {
            const int s = the_unique(spec, a.cat1).id, o = the_unique(spec, a.cat2).id;
            if (holds(spec, s, above, o)) return vocab::answer("above");
            if (holds(spec, s, below, o)) return vocab::answer("below");
            throw QuestionError("objects are not vertically separated");
        }
        case Tpl::attr_color:
        case Tpl::attr_color_p: return vocab::color_answer(the_unique(spec, a.cat1).color);
        case Tpl::attr_size:
        case Tpl::attr_size_p: return vocab::size_answer(the_unique(spec, a.cat1).size);
        case Tpl::attr_is_color:
        case Tpl::attr_is_color_p: return yes_no(the_unique(spec, a.cat1).color == a.color);
        case Tpl::obj_exists:
        case Tpl::obj_exists_p:
            return yes_no(count_if([&](const SceneObject& o) { return o.color == a.color && o.category == a.cat1; }) > 0);
        case Tpl::obj_what:
        case Tpl::obj_what_p: {
            const SceneObject* found = nullptr;
            for (const auto& o : spec.objects) {
                if (o.color != a.color || o.size != a.size) continue;
                if (found) throw QuestionError("color/size reference is not unique");
                found = &o;
            }
            if (!found) throw QuestionError("no object with that color and size");
            return vocab::category_answer(found->category);
        }
        case Tpl::glob_count:
        case Tpl::glob_count_p: return vocab::digit_answer(static_cast<int>(spec.objects.size()));
        case Tpl::glob_more: return yes_no(static_cast<int>(spec.objects.size()) > a.digit);
        case Tpl::glob_more_p: return yes_no(static_cast<int>(spec.objects.size()) >= a.digit);
        case Tpl::cat_count:
        case Tpl::cat_count_p:
            return vocab::digit_answer(count_if([&](const SceneObject& o) { return o.category == a.cat1; }));
        case Tpl::cat_exists:
        case Tpl::cat_exists_p: return yes_no(count_if([&](const SceneObject& o) { return o.category == a.cat1; }) > 0);
        case Tpl::count_: break;
    }
    throw QuestionError("unhandled template");
}

// ---------------------------------------------------------------------------
// Generator. Answers are derived from object coordinates and attributes
// directly, independently of the relation list the oracle consults.

struct QAItem {
    int item_id = 0;
    int scene_id = 0;
    std::vector<int> question;
    QType qtype = QType::global;
    int template_id = 0;
    int answer = 0;
    std::vector<int> valid_answers;
    int paraphrase_group = 0;
    bool binary = false;
    friend bool operator==(const QAItem&, const QAItem&) = default;
};

struct GeneratedPair {
    QAItem primary;
    QAItem paraphrase;
};

namespace detail {

inline std::vector<int> unique_categories(const SceneSpec& spec) {
    std::map<int, int> count;
    for (const auto& o : spec.objects) ++count[o.category];
    std::vector<int> out;
    for (auto [c, n] : count)
        if (n == 1) out.push_back(c);
    return out;
}

inline const SceneObject& by_category(const SceneSpec& spec, int c) {
    for (const auto& o : spec.objects)
        if (o.category == c) return o;
    throw QuestionError("category not present");
}

inline QAItem make_item(Tpl tpl, const QuestionArgs& args, int answer) {
    const auto& def = template_def(tpl);
    QAItem it;
    it.question = render_question(tpl, args);
    it.qtype = def.qtype;
    it.template_id = static_cast<int>(tpl);
    it.answer = answer;
    it.valid_answers = answer_set(def.answers);
    it.binary = def.answers == AnswerSet::yes_no;
    return it;
}

/// Tries to instantiate one primary template; nullopt when the scene cannot support it.
inline std::optional<GeneratedPair> try_template(const SceneSpec& spec, Tpl tpl, const Geometry& geom, Rng& rng) {
    const auto uniq = unique_categories(spec);
    const int n_obj = static_cast<int>(spec.objects.size());
    auto pick = [&](const std::vector<int>& v) { return v[rng.below(v.size())]; };
    auto pair_of = [&](auto separated) -> std::optional<std::pair<const SceneObject*, const SceneObject*>> {
        std::vector<std::pair<int, int>> ok;
        for (int c1 : uniq)
            for (int c2 : uniq)
                if (c1 != c2 && separated(by_category(spec, c1), by_category(spec, c2))) ok.push_back({c1, c2});
        if (ok.empty()) return std::nullopt;
        auto [c1, c2] = ok[rng.below(ok.size())];
        return std::pair{&by_category(spec, c1), &by_category(spec, c2)};
    };
    const double m = geom.relation_margin;
    auto horiz = [m](const SceneObject& a, const SceneObject& b) { return std::abs(a.x - b.x) > m; };
    auto vert = [m](const SceneObject& a, const SceneObject& b) { return std::abs(a.y - b.y) > m; };
    auto yn = [](bool b) { return b ? vocab::yes() : vocab::no(); };
    auto both = [](Tpl p, const QuestionArgs& a, Tpl q, const QuestionArgs& b, int ans) {
        return GeneratedPair{make_item(p, a, ans), make_item(q, b, ans)};
    };

    switch (tpl) {
        case Tpl::rel_left_yn: {
            auto pr = pair_of(horiz);
            if (!pr) return std::nullopt;
            auto [s, o] = *pr;
            // "s left of o" is entailed by "o right of s".
            return both(Tpl::rel_left_yn, {s->category, o->category}, Tpl::rel_right_yn, {o->category, s->category},
                        yn(s->x < o->x - m));
        }
        case Tpl::rel_lr: {
            auto pr = pair_of(horiz);
            if (!pr) return std::nullopt;
            auto [s, o] = *pr;
            QuestionArgs a{s->category, o->category};
            return both(Tpl::rel_lr, a, Tpl::rel_rl, a, vocab::answer(s->x < o->x ? "left" : "right"));
        }
        case Tpl::rel_ab: {
            auto pr = pair_of(vert);
            if (!pr) return std::nullopt;
            auto [s, o] = *pr;
            QuestionArgs a{s->category, o->category};
            return both(Tpl::rel_ab, a, Tpl::rel_ba, a, vocab::answer(s->y < o->y ? "above" : "below"));
        }
        case Tpl::attr_color: {
            if (uniq.empty()) return std::nullopt;
            const auto& o = by_category(spec, pick(uniq));
            QuestionArgs a{o.category};
            return both(Tpl::attr_color, a, Tpl::attr_color_p, a, vocab::color_answer(o.color));
        }
        case Tpl::attr_size: {
            if (uniq.empty()) return std::nullopt;
            const auto& o = by_category(spec, pick(uniq));
            QuestionArgs a{o.category};
            return both(Tpl::attr_size, a, Tpl::attr_size_p, a, vocab::size_answer(o.size));
        }
        case Tpl::attr_is_color: {
            if (uniq.empty()) return std::nullopt;
            const auto& o = by_category(spec, pick(uniq));
            int color = o.color;
            if (rng.bernoulli(0.5)) color = (o.color + 1 + static_cast<int>(rng.below(kColors.size() - 1))) % static_cast<int>(kColors.size());
            QuestionArgs a{o.category, -1, color};
            return both(Tpl::attr_is_color, a, Tpl::attr_is_color_p, a, yn(color == o.color));
        }
        case Tpl::obj_exists: {
            QuestionArgs a;
            if (rng.bernoulli(0.5)) {
                const auto& o = spec.objects[rng.below(spec.objects.size())];
                a = {o.category, -1, o.color};
            } else {
                a = {static_cast<int>(rng.below(kCategories.size())), -1, static_cast<int>(rng.below(kColors.size()))};
            }
            const bool present = std::any_of(spec.objects.begin(), spec.objects.end(),
                                             [&](const SceneObject& o) { return o.category == a.cat1 && o.color == a.color; });
            return both(Tpl::obj_exists, a, Tpl::obj_exists_p, a, yn(present));
        }
        case Tpl::obj_what: {
            std::map<std::pair<int, int>, std::vector<const SceneObject*>> by_look;
            for (const auto& o : spec.objects) by_look[{o.color, o.size}].push_back(&o);
            std::vector<const SceneObject*> unique_look;
            for (const auto& [k, v] : by_look)
                if (v.size() == 1) unique_look.push_back(v[0]);
            if (unique_look.empty()) return std::nullopt;
            const auto* o = unique_look[rng.below(unique_look.size())];
            QuestionArgs a{-1, -1, o->color, o->size};
            return both(Tpl::obj_what, a, Tpl::obj_what_p, a, vocab::category_answer(o->category));
        }
        case Tpl::glob_count:
            return both(Tpl::glob_count, {}, Tpl::glob_count_p, {}, vocab::digit_answer(n_obj));
        case Tpl::glob_more: {
            // threshold in [1, 8]: "more than d" is entailed by "at least d+1"
            const bool want_yes = rng.bernoulli(0.5);
            int d = want_yes ? 1 + static_cast<int>(rng.below(static_cast<std::size_t>(n_obj - 1)))
                             : n_obj + static_cast<int>(rng.below(static_cast<std::size_t>(9 - n_obj)));
            d = std::min(d, 8);
            QuestionArgs a{-1, -1, -1, -1, d}, b{-1, -1, -1, -1, d + 1};
            return both(Tpl::glob_more, a, Tpl::glob_more_p, b, yn(n_obj > d));
        }
        case Tpl::cat_count: {
            const int c = static_cast<int>(rng.below(kCategories.size()));
            int count = 0;
            for (const auto& o : spec.objects) count += o.category == c;
            QuestionArgs a{c};
            return both(Tpl::cat_count, a, Tpl::cat_count_p, a, vocab::digit_answer(count));
        }
        case Tpl::cat_exists: {
            int c;
            if (rng.bernoulli(0.5)) c = spec.objects[rng.below(spec.objects.size())].category;
            else c = static_cast<int>(rng.below(kCategories.size()));
            const bool present = std::any_of(spec.objects.begin(), spec.objects.end(), [&](const SceneObject& o) { return o.category == c; });
            QuestionArgs a{c};
            return both(Tpl::cat_exists, a, Tpl::cat_exists_p, a, yn(present));
        }
        default:
            throw std::invalid_argument("not a primary template");
    }
}

inline std::vector<Tpl> primaries_of(QType t) {
    switch (t) {
        case QType::relation: return {Tpl::rel_left_yn, Tpl::rel_lr, Tpl::rel_ab};
        case QType::attribute: return {Tpl::attr_color, Tpl::attr_size, Tpl::attr_is_color};
        case QType::object: return {Tpl::obj_exists, Tpl::obj_what};
        case QType::global: return {Tpl::glob_count, Tpl::glob_more};
        case QType::category: return {Tpl::cat_count, Tpl::cat_exists};
    }
    return {};
}

}  // namespace detail

/// Generates a question of the requested type together with one entailed
/// paraphrase. Throws QuestionError when no template of that type fits.
inline GeneratedPair generate_qa(const SceneSpec& spec, QType qtype, const Geometry& geom, Rng& rng) {
    auto candidates = detail::primaries_of(qtype);
    rng.shuffle(candidates);
    for (Tpl t : candidates) {
        if (auto pair = detail::try_template(spec, t, geom, rng)) {
            pair->primary.scene_id = pair->paraphrase.scene_id = spec.scene_id;
            return *pair;
        }
    }
    throw QuestionError("no " + std::string(to_string(qtype)) + " template is satisfiable for scene " +
                        std::to_string(spec.scene_id));
}

}  // namespace sgvqa

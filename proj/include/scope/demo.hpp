#pragma once

// Self-contained demonstration corpus. A small tower-control phraseology
// world: nine instruction shapes over six airlines, mutated into the three
// anomaly classes, plus conversational exchanges that no class covers.
// Everything derives from one seed; equal specs give byte-equal corpora.

#include <cstdio>
#include <string>
#include <vector>

#include "scope/correction.hpp"
#include "scope/corpus.hpp"
#include "scope/detail.hpp"

namespace scope {

struct DemoSpec {
    std::uint64_t seed = 42;
    std::size_t correct_pool = 400;      // Correct sources drawn before mutation
    std::size_t unknown_variants = 5;    // callsign variants per unknown exchange
    double train_fraction = 0.7;         // of known sources; the rest is test
    double unknown_test_fraction = 0.3;  // of unknowns; the rest is calibration
    double unseen_rate = 0.4;  // test waypoint pairs rewritten to held-out names
};

namespace demo_detail {

inline const std::vector<std::string>& designators() {
    static const std::vector<std::string> v = {"CCA", "CES", "CSN", "CHH", "CXA", "CSZ"};
    return v;
}

inline const std::vector<std::string>& altitudes() {
    static const std::vector<std::string> v = {"3000", "3600", "4200", "4800", "5400", "6000",
                                               "6900", "7500", "8100", "8900", "9800"};
    return v;
}

inline const std::vector<std::string>& headings() {
    static const std::vector<std::string> v = {"080", "140", "210", "250", "310", "350"};
    return v;
}

inline const std::vector<std::string>& frequencies() {
    static const std::vector<std::string> v = {"118.1",  "119.7", "121.65",
                                               "124.35", "128.8", "132.45"};
    return v;
}

inline const std::vector<std::string>& runways() {
    static const std::vector<std::string> v = {"02", "09", "18L", "23", "27R", "36L"};
    return v;
}

inline const std::vector<std::string>& speeds() {
    static const std::vector<std::string> v = {"160", "180", "210", "250"};
    return v;
}

struct Exchange {
    std::string instruction;
    std::string readback;
};

// Off-phraseology traffic. Readbacks share no content words with their
// instructions, so nothing here resembles a readback of anything.
inline const std::vector<Exchange>& unknown_exchanges() {
    static const std::vector<Exchange> v = {
        {"say your intentions", "we would like to return to the field due to weather"},
        {"report your position", "overhead the lagoon at four thousand"},
        {"are you ready for departure", "negative, we need two more minutes"},
        {"confirm you copied the weather", "affirm, information bravo received"},
        {"how do you read", "loud and clear"},
        {"expect vectors for the approach", "roger, standing by"},
        {"traffic twelve o'clock, same level", "looking out"},
        {"say rate of climb", "about one thousand five hundred per minute"},
        {"is the field in sight", "we see it"},
        {"do you have information charlie", "affirmative"},
        {"give way to the airbus from the right", "we have him in sight"},
        {"cancel start up, slot changed", "copied, calling you back"},
    };
    return v;
}

}  // namespace demo_detail

// Waypoints that appear in training-side instructions.
inline const std::vector<std::string>& demo_seen_waypoints() {
    static const std::vector<std::string> v = {"OKABA", "REDBA", "TONIK", "SULOM", "BIKNO"};
    return v;
}

// Waypoints reserved for test-split Correct pairs; never seen in training.
// Same length as the seen names, so rewrites keep annotation spans intact.
inline const std::vector<std::string>& demo_unseen_waypoints() {
    static const std::vector<std::string> v = {"ELKAP", "VEXON", "DUMET"};
    return v;
}

// Slot grammar for the demo world. Waypoints are deliberately absent: they
// carry no digits, so only example semantics can ground them.
inline Lexicon demo_lexicon() {
    Lexicon lex;
    lex.airline_designators = {
        {"CCA", "CCA"}, {"Air China", "CCA"},      {"CES", "CES"}, {"China Eastern", "CES"},
        {"CSN", "CSN"}, {"China Southern", "CSN"}, {"CHH", "CHH"}, {"Hainan", "CHH"},
        {"CXA", "CXA"}, {"Xiamen Air", "CXA"},     {"CSZ", "CSZ"}, {"Shenzhen Air", "CSZ"},
    };

    SlotPattern altitude;
    altitude.kind = "keyword_digits";
    altitude.keywords = {"altitude", "climb", "descend", "maintain", "meters"};
    altitude.digits_min = 4;
    altitude.digits_max = 5;

    SlotPattern frequency;
    frequency.kind = "digits";
    frequency.require_decimal = true;
    frequency.digits_min = 4;
    frequency.digits_max = 6;

    SlotPattern heading;
    heading.kind = "keyword_digits";
    heading.keywords = {"heading"};
    heading.digits_min = 3;
    heading.digits_max = 3;

    SlotPattern runway;
    runway.kind = "keyword_digits";
    runway.keywords = {"runway"};
    runway.digits_min = 1;
    runway.digits_max = 2;
    runway.suffixes = {"C", "L", "R"};

    SlotPattern speed;
    speed.kind = "keyword_digits";
    speed.keywords = {"speed", "knots"};
    speed.digits_min = 2;
    speed.digits_max = 3;

    lex.slot_patterns = {{"altitude", altitude},
                         {"frequency", frequency},
                         {"heading", heading},
                         {"runway", runway},
                         {"speed", speed}};
    return lex;
}

// Mutation recipe matching the demo grammar. Waypoints are safety critical
// (wrong fix, wrong place) but deletion is limited to digit slots so an
// incomplete readback always lacks something the lexicon can point at.
inline SynthesisRecipe demo_recipe(std::uint64_t seed) {
    SynthesisRecipe recipe;
    recipe.seed = seed;
    recipe.safety_critical_slots = {"altitude", "frequency", "heading",
                                    "runway",   "speed",     "waypoint"};
    recipe.incomplete_slots = {"altitude", "frequency", "heading", "runway", "speed"};
    recipe.value_sets = {
        {"altitude", demo_detail::altitudes()},   {"frequency", demo_detail::frequencies()},
        {"heading", demo_detail::headings()},     {"runway", demo_detail::runways()},
        {"speed", demo_detail::speeds()},         {"waypoint", demo_seen_waypoints()},
    };
    recipe.substitutions = {{"climb", "come up"},
                            {"contact", "call"},
                            {"descend", "come down"},
                            {"maintain", "keep"},
                            {"proceed", "go"}};
    return recipe;
}

namespace demo_detail {

struct Draft {
    std::string content;  // instruction minus the leading callsign
    std::string intent;
    std::string slot_name;
    std::string slot_value;
};

// Template index -> content text. Waypoint legs are overweighted in the
// ring below; everything else appears once.
inline Draft draft_content(int tmpl, detail::Rng& rng) {
    Draft d;
    switch (tmpl) {
        case 0:
            d.slot_name = "altitude";
            d.slot_value = rng.pick(altitudes());
            d.content = "climb and maintain " + d.slot_value + " meters";
            d.intent = "climb";
            break;
        case 1:
            d.slot_name = "altitude";
            d.slot_value = rng.pick(altitudes());
            d.content = "descend and maintain " + d.slot_value + " meters";
            d.intent = "descend";
            break;
        case 2:
            d.slot_name = "altitude";
            d.slot_value = rng.pick(altitudes());
            d.content = "maintain " + d.slot_value + " meters";
            d.intent = "maintain";
            break;
        case 3: {
            const char* dir = rng.below(2) == 0 ? "left" : "right";
            d.slot_name = "heading";
            d.slot_value = rng.pick(headings());
            d.content = std::string("turn ") + dir + " heading " + d.slot_value;
            d.intent = "turn";
            break;
        }
        case 4: {
            static const std::vector<std::string> facilities = {"ground", "tower", "approach"};
            const std::string fac = rng.pick(facilities);
            d.slot_name = "frequency";
            d.slot_value = rng.pick(frequencies());
            d.content = "contact " + fac + " on " + d.slot_value;
            d.intent = "contact";
            break;
        }
        case 5:
            d.slot_name = "runway";
            d.slot_value = rng.pick(runways());
            d.content = "cleared to land runway " + d.slot_value;
            d.intent = "land";
            break;
        case 6:
            d.slot_name = "speed";
            d.slot_value = rng.pick(speeds());
            d.content = "reduce speed to " + d.slot_value + " knots";
            d.intent = "speed";
            break;
        case 7:
            d.slot_name = "runway";
            d.slot_value = rng.pick(runways());
            d.content = "taxi to holding point runway " + d.slot_value;
            d.intent = "taxi";
            break;
        default:
            d.slot_name = "waypoint";
            d.slot_value = rng.pick(demo_seen_waypoints());
            d.content = "proceed direct " + d.slot_value;
            d.intent = "proceed";
            break;
    }
    return d;
}

inline std::string demo_id(const char* prefix, std::size_t n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%04zu", prefix, n);
    return buf;
}

}  // namespace demo_detail

// Builds the full corpus: Correct sources split train/test, anomalies
// synthesized per split, unknown exchanges split test/calibration, and a
// seeded fraction of test waypoint pairs rewritten to held-out fix names.
inline Corpus make_demo_corpus(const DemoSpec& spec = {}) {
    if (spec.correct_pool == 0) throw ContractError("make_demo_corpus: correct_pool is zero");
    if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0)
        throw ContractError("make_demo_corpus: train_fraction must be in (0, 1)");

    detail::Rng rng(spec.seed);

    // Correct sources over a weighted template ring; waypoint legs thrice.
    static const int ring[] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 8, 8};
    Corpus sources;
    sources.reserve(spec.correct_pool);
    for (std::size_t i = 0; i < spec.correct_pool; ++i) {
        const auto d = demo_detail::draft_content(ring[i % (sizeof ring / sizeof *ring)], rng);
        const std::string callsign =
            rng.pick(demo_detail::designators()) + std::to_string(1000 + rng.below(2000));

        UtterancePair p;
        p.id = demo_detail::demo_id("demo", i);
        p.instruction = callsign + ", " + d.content;
        p.readback = d.content + ", " + callsign;
        p.label = OpenLabel::Correct;
        p.annotation_instruction = make_annotation(
            p.instruction, d.intent, {{"callsign", callsign}, {d.slot_name, d.slot_value}});
        p.annotation_readback = make_annotation(
            p.readback, d.intent, {{d.slot_name, d.slot_value}, {"callsign", callsign}});
        sources.push_back(std::move(p));
    }

    // Seeded split of the sources.
    std::vector<std::size_t> order(sources.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const std::size_t n_train = std::size_t(spec.train_fraction * double(sources.size()) + 0.5);
    for (std::size_t k = 0; k < order.size(); ++k)
        sources[order[k]].split = k < n_train ? "train" : "test";

    Corpus train_sources, test_sources;
    for (const auto& p : sources)
        (p.split == "train" ? train_sources : test_sources).push_back(p);

    SynthesisRecipe recipe = demo_recipe(spec.seed + 1);
    const SynthesisResult train_synth = synthesize_anomalies(train_sources, recipe);
    recipe.seed = spec.seed + 2;
    const SynthesisResult test_synth = synthesize_anomalies(test_sources, recipe);

    std::set<std::string> consumed(train_synth.consumed_ids.begin(),
                                   train_synth.consumed_ids.end());
    consumed.insert(test_synth.consumed_ids.begin(), test_synth.consumed_ids.end());

    Corpus corpus;
    corpus.reserve(sources.size() + demo_detail::unknown_exchanges().size() * spec.unknown_variants);
    for (auto& p : sources)
        if (!consumed.count(p.id)) corpus.push_back(std::move(p));
    corpus.insert(corpus.end(), train_synth.anomalies.begin(), train_synth.anomalies.end());
    corpus.insert(corpus.end(), test_synth.anomalies.begin(), test_synth.anomalies.end());

    // Unknown traffic. Pilots answer without their callsign here, which keeps
    // these exchanges maximally far from any readback shape. The flat "other"
    // intent is the annotation for speech the slot grammar does not cover.
    Corpus unknowns;
    for (std::size_t t = 0; t < demo_detail::unknown_exchanges().size(); ++t) {
        const auto& ex = demo_detail::unknown_exchanges()[t];
        for (std::size_t v = 0; v < spec.unknown_variants; ++v) {
            const std::string callsign =
                rng.pick(demo_detail::designators()) + std::to_string(1000 + rng.below(2000));
            UtterancePair p;
            p.id = demo_detail::demo_id("unk", t * spec.unknown_variants + v);
            p.instruction = callsign + ", " + ex.instruction;
            p.readback = ex.readback;
            p.label = OpenLabel::Unknown;
            p.annotation_instruction = SemanticAnnotation{"other", {}};
            p.annotation_readback = SemanticAnnotation{"other", {}};
            unknowns.push_back(std::move(p));
        }
    }
    std::vector<std::size_t> uorder(unknowns.size());
    for (std::size_t i = 0; i < uorder.size(); ++i) uorder[i] = i;
    rng.shuffle(uorder);
    const std::size_t n_unknown_test =
        std::size_t(spec.unknown_test_fraction * double(unknowns.size()) + 0.5);
    for (std::size_t k = 0; k < uorder.size(); ++k)
        unknowns[uorder[k]].split = k < n_unknown_test ? "test" : "calibration";
    corpus.insert(corpus.end(), unknowns.begin(), unknowns.end());

    // Held-out fix names for a fraction of test-split Correct waypoint pairs.
    // Names are all five bytes, so spans survive the rewrite untouched.
    for (auto& p : corpus) {
        if (p.split != "test" || p.label != OpenLabel::Correct) continue;
        const SlotValue* slot = p.annotation_instruction->find("waypoint");
        if (!slot || rng.real() >= spec.unseen_rate) continue;
        const std::string name = rng.pick(demo_unseen_waypoints());
        const auto rewrite = [&name](std::string& text, SemanticAnnotation& ann) {
            for (auto& s : ann.slots) {
                if (s.name != "waypoint") continue;
                text.replace(s.start, s.end - s.start, name);
                s.value = name;
            }
        };
        rewrite(p.instruction, *p.annotation_instruction);
        rewrite(p.readback, *p.annotation_readback);
    }

    return corpus;
}

}  // namespace scope

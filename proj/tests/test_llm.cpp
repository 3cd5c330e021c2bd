#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <cstdlib>
#include <thread>

#include "scope/atcot.hpp"
#include "scope/llm.hpp"

using namespace scope;

namespace {

Lexicon stub_lexicon() {
    Lexicon lex;
    lex.airline_designators = {{"CCA", "CCA"}, {"CES", "CES"}, {"Air China", "CCA"}};

    SlotPattern altitude;
    altitude.kind = "keyword_digits";
    altitude.keywords = {"climb", "maintain", "descend", "altitude", "meters"};
    altitude.digits_min = 3;
    altitude.digits_max = 5;
    lex.slot_patterns["altitude"] = altitude;

    SlotPattern frequency;
    frequency.kind = "digits";
    frequency.digits_min = 4;
    frequency.digits_max = 6;
    frequency.require_decimal = true;
    lex.slot_patterns["frequency"] = frequency;
    return lex;
}

std::string wrap_prompt(const std::string& instruction, const std::string& readback,
                        const std::string& plugin_line, const std::string& examples,
                        const std::string& semantics_lines = "") {
    std::string out = examples;
    out += "## Test exchange (id: t1)\n";
    out += "ATCo instruction: " + instruction + "\n";
    out += "Pilot readback: " + readback + "\n";
    out += semantics_lines;
    if (!plugin_line.empty()) out += "Plug-in label: " + plugin_line + "\n";
    out += "\nRespond with one JSON object.\n";
    return out;
}

std::string waypoint_example(const std::string& id, const std::string& name) {
    return "### Example (id: " + id + ")\n"
           "ATCo instruction: CCA1234, proceed direct " + name + "\n"
           "Instruction semantics: intent=proceed; slots=[callsign=CCA1234; waypoint=" + name +
           "]\n"
           "Pilot readback: proceed direct " + name + ", CCA1234\n"
           "Readback semantics: intent=proceed; slots=[waypoint=" + name +
           "; callsign=CCA1234]\n"
           "Gold label: correct\n\n";
}

LlmVerdict ask(const StubLlm& stub, const std::string& user) {
    return parse_verdict(stub.complete("system", user), OpenLabel::Unknown);
}

bool has_slot(const std::vector<std::pair<std::string, std::string>>& slots,
              const std::string& name, const std::string& value) {
    for (const auto& [n, v] : slots)
        if (n == name && v == value) return true;
    return false;
}

}  // namespace

TEST_CASE("stub grades a faithful digit readback as correct", "[llm]") {
    const StubLlm stub(stub_lexicon());
    const std::string user = wrap_prompt("CCA1234, climb and maintain 8900 meters",
                                         "climb and maintain 8900 meters, CCA1234", "correct", "");
    const LlmVerdict v = ask(stub, user);
    CHECK(v.parse_ok);
    CHECK(v.label == OpenLabel::Correct);
    CHECK(v.intent_instruction == "climb");
    CHECK(v.intent_readback == "climb");
    CHECK(has_slot(v.slots_instruction, "altitude", "8900"));
    CHECK(has_slot(v.slots_instruction, "callsign", "CCA1234"));
    CHECK(has_slot(v.slots_readback, "altitude", "8900"));

    // Same bytes in, same bytes out.
    CHECK(stub.complete("system", user) == stub.complete("system", user));
}

TEST_CASE("stub flags a changed value as incorrect", "[llm]") {
    const StubLlm stub(stub_lexicon());
    const LlmVerdict v =
        ask(stub, wrap_prompt("CCA1234, climb and maintain 8900 meters",
                              "climb and maintain 9800 meters, CCA1234", "correct", ""));
    CHECK(v.label == OpenLabel::Incorrect);
    CHECK(v.explanation.find("altitude") != std::string::npos);
    CHECK(v.explanation.find("8900") != std::string::npos);
    CHECK(v.explanation.find("9800") != std::string::npos);
}

TEST_CASE("stub flags a dropped value as incomplete", "[llm]") {
    const StubLlm stub(stub_lexicon());
    const LlmVerdict v = ask(stub, wrap_prompt("CCA1234, climb and maintain 8900 meters",
                                               "climb and maintain meters, CCA1234", "correct", ""));
    CHECK(v.label == OpenLabel::Incomplete);
    CHECK(v.explanation.find("altitude") != std::string::npos);
}

TEST_CASE("stub flags structural deviations as non-standard", "[llm]") {
    const StubLlm stub(stub_lexicon());

    // Callsign moved to the front.
    const LlmVerdict fronted =
        ask(stub, wrap_prompt("CCA1234, climb and maintain 8900 meters",
                              "CCA1234, climb and maintain 8900 meters", "correct", ""));
    CHECK(fronted.label == OpenLabel::NonStandard);
    CHECK(fronted.explanation.find("callsign") != std::string::npos);

    // Colloquial wording: values match, one token is novel.
    const LlmVerdict reworded =
        ask(stub, wrap_prompt("CCA1234, climb and maintain 8900 meters",
                              "climb and keep 8900 meters, CCA1234", "correct", ""));
    CHECK(reworded.label == OpenLabel::NonStandard);
    CHECK(reworded.explanation.find("keep") != std::string::npos);
    CHECK(reworded.intent_readback == "climb");
}

TEST_CASE("stub grounds uncovered slots through example semantics", "[llm]") {
    const StubLlm stub(stub_lexicon());
    const std::string examples = waypoint_example("e1", "OKABA") + waypoint_example("e2", "REDBA");

    // Dictionary covers the value on both sides: graded on the slots.
    const LlmVerdict match = ask(stub, wrap_prompt("CES5678, proceed direct OKABA",
                                                   "proceed direct OKABA, CES5678", "correct",
                                                   examples));
    CHECK(match.label == OpenLabel::Correct);
    CHECK(has_slot(match.slots_instruction, "waypoint", "OKABA"));
    CHECK(has_slot(match.slots_readback, "waypoint", "OKABA"));

    const LlmVerdict swapped = ask(stub, wrap_prompt("CES5678, proceed direct OKABA",
                                                     "proceed direct REDBA, CES5678", "correct",
                                                     examples));
    CHECK(swapped.label == OpenLabel::Incorrect);
    CHECK(swapped.explanation.find("waypoint") != std::string::npos);
}

TEST_CASE("stub defers to the plug-in when nothing is groundable", "[llm]") {
    const StubLlm stub(stub_lexicon());

    // Unseen waypoint, empty dictionary: echo readback, no evidence either way.
    const LlmVerdict deferred = ask(stub, wrap_prompt("CES5678, proceed direct ZUMBA",
                                                      "proceed direct ZUMBA, CES5678", "correct",
                                                      ""));
    CHECK(deferred.label == OpenLabel::Correct);
    CHECK(deferred.explanation.find("plug-in") != std::string::npos);

    // Without the plug-in line the stub declines to guess.
    const LlmVerdict declined = ask(stub, wrap_prompt("CES5678, proceed direct ZUMBA",
                                                      "proceed direct ZUMBA, CES5678", "", ""));
    CHECK(declined.label == OpenLabel::Unknown);

    // Out-of-scope chatter has low overlap and no slots: plug-in route too.
    const LlmVerdict chatter =
        ask(stub, wrap_prompt("CCA1234, report your position",
                              "we are overhead the field at four thousand", "unknown", ""));
    CHECK(chatter.label == OpenLabel::Unknown);
}

TEST_CASE("stub uses gold test semantics when the prompt provides them", "[llm]") {
    const StubLlm stub(stub_lexicon());
    const std::string semantics =
        "Instruction semantics: intent=proceed; slots=[callsign=CES5678; waypoint=OAKFX]\n"
        "Readback semantics: intent=proceed; slots=[waypoint=OAKVY; callsign=CES5678]\n";
    const LlmVerdict v = ask(stub, wrap_prompt("CES5678, proceed direct OAKFX",
                                               "proceed direct OAKVY, CES5678", "correct", "",
                                               semantics));
    CHECK(v.label == OpenLabel::Incorrect);
    CHECK(v.intent_instruction == "proceed");
    CHECK(has_slot(v.slots_instruction, "waypoint", "OAKFX"));
    CHECK(has_slot(v.slots_readback, "waypoint", "OAKVY"));
}

TEST_CASE("stub answers sensibly through the full prompt renderer", "[llm]") {
    UtterancePair test;
    test.id = "t1";
    test.instruction = "CCA1234, climb and maintain 8900 meters";
    test.readback = "climb and maintain 9800 meters, CCA1234";
    const PromptTemplate tpl = load_template("data/templates/atcot_v1.txt");
    const PromptBundle bundle = render_prompt(tpl, {}, test, OpenLabel::Correct, {});

    const StubLlm stub(stub_lexicon());
    const LlmVerdict v =
        parse_verdict(stub.complete(bundle.system_text, bundle.user_text), bundle.fallback_label);
    CHECK(v.parse_ok);
    CHECK(v.label == OpenLabel::Incorrect);
}

TEST_CASE("chat client speaks the wire protocol and retries transient failures", "[llm]") {
    httplib::Server srv;
    std::atomic<int> ok_hits{0}, flaky_hits{0}, broken_hits{0}, missing_hits{0};
    std::atomic<bool> body_ok{true}, auth_ok{true};

    const std::string content = R"({"label": "correct", "explanation": "fine"})";
    srv.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        ++ok_hits;
        try {
            const auto j = nlohmann::json::parse(req.body);
            if (j.at("model") != "monitor-1") body_ok = false;
            if (j.at("temperature") != 0.0) body_ok = false;
            if (j.at("messages").size() != 2) body_ok = false;
            if (j.at("messages")[0].at("role") != "system") body_ok = false;
            if (j.at("messages")[1].at("role") != "user") body_ok = false;
        } catch (...) {
            body_ok = false;
        }
        if (req.get_header_value("Authorization") != "Bearer test-key-123") auth_ok = false;
        nlohmann::json out;
        out["choices"] = {{{"message", {{"role", "assistant"}, {"content", content}}}}};
        res.set_content(out.dump(), "application/json");
    });
    srv.Post("/flaky", [&](const httplib::Request&, httplib::Response& res) {
        if (++flaky_hits <= 2) {
            res.status = 500;
            res.set_content("overloaded", "text/plain");
            return;
        }
        nlohmann::json out;
        out["choices"] = {{{"message", {{"content", "late but fine"}}}}};
        res.set_content(out.dump(), "application/json");
    });
    srv.Post("/broken", [&](const httplib::Request&, httplib::Response& res) {
        ++broken_hits;
        res.status = 500;
        res.set_content("boom", "text/plain");
    });
    srv.Post("/missing", [&](const httplib::Request&, httplib::Response& res) {
        ++missing_hits;
        res.status = 404;
        res.set_content("no such model", "text/plain");
    });
    srv.Post("/malformed", [&](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"nope": 1})", "application/json");
    });

    const int port = srv.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread runner([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    const std::string origin = "http://127.0.0.1:" + std::to_string(port);

    setenv("SCOPE_TEST_CHAT_KEY", "test-key-123", 1);
    LlmConfig cfg;
    cfg.model = "monitor-1";
    cfg.api_key_env = "SCOPE_TEST_CHAT_KEY";
    cfg.backoff_base_ms = 0;
    cfg.max_retries = 2;

    {
        cfg.base_url = origin + "/v1/chat/completions";
        LlmClient client(cfg);
        const LlmResult r = client.complete("be terse", "grade this");
        CHECK(r.content == content);
        CHECK(r.attempts == 1);
        CHECK(r.latency_ms >= 0.0);
        CHECK(ok_hits == 1);
        CHECK(body_ok);
        CHECK(auth_ok);
    }
    {
        cfg.base_url = origin + "/flaky";
        LlmClient client(cfg);
        const LlmResult r = client.complete("s", "u");
        CHECK(r.content == "late but fine");
        CHECK(r.attempts == 3);
        CHECK(flaky_hits == 3);
    }
    {
        cfg.base_url = origin + "/broken";
        LlmClient client(cfg);
        CHECK_THROWS_AS(client.complete("s", "u"), ProtocolError);
        CHECK(broken_hits == cfg.max_retries + 1);
        CHECK_THROWS_WITH(client.complete("s", "u"),
                          Catch::Matchers::ContainsSubstring("HTTP 500"));
    }
    {
        cfg.base_url = origin + "/missing";
        LlmClient client(cfg);
        CHECK_THROWS_AS(client.complete("s", "u"), ProtocolError);
        CHECK(missing_hits == 1);  // 4xx is not retried
    }
    {
        cfg.base_url = origin + "/malformed";
        LlmClient client(cfg);
        CHECK_THROWS_AS(client.complete("s", "u"), ProtocolError);
    }

    srv.stop();
    runner.join();
}

TEST_CASE("chat client reports transport failures as such", "[llm]") {
    LlmConfig cfg;
    cfg.base_url = "http://127.0.0.1:1/nowhere";
    cfg.max_retries = 1;
    cfg.backoff_base_ms = 0;
    cfg.timeout_ms = 2000;
    LlmClient client(cfg);
    CHECK_THROWS_AS(client.complete("s", "u"), TransportError);
    CHECK_THROWS_WITH(client.complete("s", "u"),
                      Catch::Matchers::ContainsSubstring("2 attempts"));
}

TEST_CASE("chat client caps concurrent requests", "[llm]") {
    httplib::Server srv;
    std::atomic<int> current{0}, peak{0};
    srv.Post("/slow", [&](const httplib::Request&, httplib::Response& res) {
        const int now = ++current;
        int seen = peak.load();
        while (now > seen && !peak.compare_exchange_weak(seen, now)) {
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(15));
        --current;
        nlohmann::json out;
        out["choices"] = {{{"message", {{"content", "ok"}}}}};
        res.set_content(out.dump(), "application/json");
    });
    const int port = srv.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread runner([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();

    LlmConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(port) + "/slow";
    cfg.backoff_base_ms = 0;
    cfg.max_in_flight = 3;
    LlmClient client(cfg);

    std::vector<std::thread> callers;
    std::atomic<int> successes{0};
    for (int i = 0; i < 12; ++i)
        callers.emplace_back([&] {
            if (client.complete("s", "u").content == "ok") ++successes;
        });
    for (auto& t : callers) t.join();

    CHECK(successes == 12);
    CHECK(peak.load() <= 3);
    CHECK(peak.load() >= 1);

    srv.stop();
    runner.join();
}

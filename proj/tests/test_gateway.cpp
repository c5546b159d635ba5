#include <doctest.h>

#include <atomic>
#include <cmath>
#include <thread>

#include "duet/calibration.hpp"
#include "duet/gateway_server.hpp"
#include "duet/mock_backend.hpp"
#include "duet/runtime.hpp"
#include "duet/simulation.hpp"
#include "support.hpp"

using namespace duet;
using namespace std::chrono_literals;

namespace {

struct FakeInput : EngineInput {
    std::mutex mutex;
    std::vector<MidiEvent> events;
    std::atomic<std::size_t> count{0};

    double submit(const MidiEvent& ev) override {
        std::lock_guard lock(mutex);
        events.push_back(ev);
        ++count;
        return 0.0;
    }

    std::vector<MidiEvent> take() {
        std::lock_guard lock(mutex);
        return std::exchange(events, {});
    }
};

std::vector<gw::ServerMessage> records(const std::string& framed) {
    gw::FrameDecoder d;
    d.feed(framed);
    std::vector<gw::ServerMessage> out;
    while (auto p = d.next()) {
        out.push_back(gw::parse_server(*p));
    }
    return out;
}

gw::ClientMessage random_client(SplitMix64& rng) {
    using Type = gw::ClientMessage::Type;
    gw::ClientMessage m;
    m.type = static_cast<Type>(rng.range(0, 6));
    if (m.type == Type::Hello) {
        m.role = rng.uniform() < 0.5 ? "performer" : "observer";
        return m;
    }
    if (rng.uniform() < 0.7) {
        m.client_ms = std::round(rng.uniform(0.0, 1e6) * 1000.0) / 1000.0;
    }
    if (m.type == Type::NoteOn || m.type == Type::NoteOff) {
        m.pitch = static_cast<int>(rng.range(0, 127));
    }
    if (m.type == Type::NoteOn) {
        m.velocity = static_cast<int>(rng.range(1, 127));
    }
    if (m.type == Type::Pedal) {
        m.pedal = rng.uniform() < 0.5 ? Pedal::Sustain : Pedal::SoftUnaCorda;
        m.down = rng.uniform() < 0.5;
    }
    return m;
}

bool same(const gw::ClientMessage& a, const gw::ClientMessage& b) {
    return a.type == b.type && a.client_ms == b.client_ms && a.role == b.role && a.pitch == b.pitch &&
           a.velocity == b.velocity && a.pedal == b.pedal && a.down == b.down;
}

gw::ClientMessage to_client(const MidiEvent& ev) {
    gw::ClientMessage m;
    m.client_ms = ev.timestamp_ms;
    m.pitch = ev.pitch;
    m.velocity = ev.velocity;
    if (ev.kind == MidiKind::NoteOn) {
        m.type = gw::ClientMessage::Type::NoteOn;
    } else if (ev.kind == MidiKind::NoteOff) {
        m.type = gw::ClientMessage::Type::NoteOff;
    } else {
        m.type = gw::ClientMessage::Type::Pedal;
        m.pedal = ev.controller == 64 ? Pedal::Sustain : Pedal::SoftUnaCorda;
        m.down = ev.value >= 64;
    }
    return m;
}

} // namespace

TEST_CASE("record framing survives arbitrary splits") {
    const std::vector<std::string> payloads = {"hello performer", "", "note_on 1.000 60 80", "error 3 4.000 a:b 7:x"};
    std::string stream;
    for (const auto& p : payloads) {
        stream += gw::frame(p);
    }
    CHECK(gw::frame("note_off - 60") == "13:note_off - 60");
    SplitMix64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        gw::FrameDecoder d;
        std::vector<std::string> got;
        std::size_t i = 0;
        while (i < stream.size()) {
            const auto n = static_cast<std::size_t>(rng.range(1, 7));
            d.feed(std::string_view(stream).substr(i, n));
            i += n;
            while (auto p = d.next()) {
                got.push_back(*p);
            }
        }
        CHECK(got == payloads);
    }
}

TEST_CASE("record framing rejects bad prefixes") {
    for (const char* bad : {"x:abc", ":abc", "12345678901:a", "-3:abc", "99999999999"}) {
        gw::FrameDecoder d;
        d.feed(bad);
        CHECK_THROWS_AS(d.next(), gw::ProtocolError);
        CHECK_FALSE(d.next().has_value());
    }
}

TEST_CASE("client messages round-trip") {
    SplitMix64 rng(11);
    for (int i = 0; i < 2000; ++i) {
        const auto m = random_client(rng);
        const auto text = gw::format_client(m);
        CHECK(same(gw::parse_client(text), m));
    }
    CHECK(gw::format_client(gw::parse_client("pedal 12.500 soft on")) == "pedal 12.500 soft on");
    for (const char* bad : {"", "hello", "hello king", "note_on 1 60", "note_on 1 60 0", "note_on 1 128 9",
                            "note_off x 60", "pedal 1 left on", "pedal 1 soft maybe", "takeover", "dance 1",
                            "note_on  1 60 9"}) {
        CAPTURE(bad);
        CHECK_THROWS_AS(gw::parse_client(bad), gw::ProtocolError);
    }
}

TEST_CASE("server records parse") {
    auto m = gw::parse_server("state 4 1200.500 generating finalizing takeover");
    CHECK(m.type == "state");
    CHECK(m.seq == 4);
    CHECK(m.server_ms == 1200.5);
    CHECK(m.fields == std::vector<std::string>{"generating", "finalizing", "takeover"});
    m = gw::parse_server("error 9 3.000 only the performer may send input");
    CHECK(m.text == "only the performer may send input");
    CHECK(m.fields.empty());
    m = gw::parse_server("heartbeat 1 0.000");
    CHECK(m.fields.empty());
    CHECK_THROWS_AS(gw::parse_server("state 4"), gw::ProtocolError);
    CHECK_THROWS_AS(gw::parse_server("state x 1.0"), gw::ProtocolError);
}

TEST_CASE("gateway roles and input mapping") {
    ManualClock clock(10.0);
    FakeInput input;
    GatewayConfig cfg;
    cfg.config_text = "a = 1\n";
    GatewayCore core(cfg, input, clock);
    const auto a = core.connect();
    const auto b = core.connect();
    auto hello = records(core.take_output(a));
    REQUIRE(hello.size() == 1);
    CHECK(hello[0].type == "welcome");
    CHECK(hello[0].fields == std::vector<std::string>{std::to_string(a), "observer", "listen"});

    core.receive(b, "note_on 1.0 60 90");
    auto r = records(core.take_output(b));
    REQUIRE(r.size() == 2);
    CHECK(r[1].type == "error");
    CHECK(input.count == 0);

    core.receive(a, "hello performer");
    core.receive(b, "hello performer");
    CHECK(core.performer() == a);
    r = records(core.take_output(b));
    CHECK(r.at(0).type == "error");
    CHECK(r.at(1).type == "role");
    CHECK(r.at(1).fields.at(0) == "observer");

    core.receive(a, "note_on 1.0 60 90");
    core.receive(a, "note_off - 60");
    core.receive(a, "pedal 2 sustain on");
    core.receive(a, "garbage");
    core.receive(a, "takeover 3");
    auto evs = input.take();
    REQUIRE(evs.size() == 5);
    CHECK(evs[0] == MidiEvent::note_on(60, 90, 0.0));
    CHECK(evs[1] == MidiEvent::note_off(60, 0.0));
    CHECK(evs[2] == MidiEvent::control(64, 127, 0.0));
    CHECK(evs[3] == MidiEvent::control(67, 127, 0.0));
    CHECK(evs[4] == MidiEvent::control(67, 0, 0.0));
    r = records(core.take_output(a));
    CHECK(r.back().type == "error"); // garbage; the connection stays usable

    core.receive(a, "reclaim 4");
    CHECK(input.take().empty());
    core.on_transition(Phase::Listen, Phase::Finalizing, 20.0, "signal");
    core.on_transition(Phase::Finalizing, Phase::Generating, 21.0, "takeover");
    core.receive(a, "takeover 4");
    CHECK(input.take().empty());
    core.receive(a, "reclaim 5");
    CHECK(input.take().size() == 2);

    core.receive(b, "config_get -");
    r = records(core.take_output(b));
    CHECK(r.back().type == "config");
    CHECK(r.back().text == "a = 1\n");

    // Performer leaves mid-generation; anyone may claim the slot again.
    core.disconnect(a);
    CHECK_FALSE(core.performer().has_value());
    core.receive(b, "hello performer");
    CHECK(core.performer() == b);
    core.receive(b, "reclaim 6");
    CHECK(input.take().size() == 2);
}

TEST_CASE("gateway broadcasts in one order and drops oldest with a gap marker") {
    ManualClock clock;
    FakeInput input;
    GatewayConfig cfg;
    cfg.outbox_limit = 3;
    GatewayCore core(cfg, input, clock);
    const auto slow = core.connect();
    const auto fast = core.connect();
    core.take_output(slow);
    std::vector<std::uint64_t> fast_seqs;
    for (int i = 0; i < 8; ++i) {
        core.on_human_event(MidiEvent::note_on(60 + i, 64, static_cast<double>(i)));
        for (const auto& m : records(core.take_output(fast))) {
            fast_seqs.push_back(m.seq);
        }
    }
    CHECK(core.has_output(slow));
    const auto got = records(core.take_output(slow));
    REQUIRE(got.size() == 4);
    CHECK(got[0].type == "gap");
    CHECK(got[0].fields == std::vector<std::string>{"5"});
    for (int i = 1; i < 4; ++i) {
        CHECK(got[static_cast<std::size_t>(i)].type == "human_note");
        CHECK(got[static_cast<std::size_t>(i)].fields.at(1) == std::to_string(64 + i));
    }
    CHECK(fast_seqs.size() == 9); // welcome + 8
    CHECK(std::is_sorted(fast_seqs.begin(), fast_seqs.end()));
    CHECK(got[1].seq == fast_seqs[6]);
    CHECK_FALSE(core.has_output(slow));
}

namespace {

struct DiffScript {
    std::vector<MidiEvent> events; // human input, times on the session clock
    double takeover_ms = 0.0;
    double reclaim_ms = 0.0;
    double end_ms = 0.0;
};

DiffScript diff_script() {
    DiffScript s;
    s.events = performance_events(corpus_phrase(2, 3000.0), 0.0);
    s.takeover_ms = 3200.0;
    s.reclaim_ms = 4700.0;
    s.end_ms = 20000.0;
    return s;
}

SimulationSetup diff_setup() {
    SimulationSetup setup;
    setup.engine.reclaim_flush = ReclaimFlush::CutImmediately;
    setup.engine.sampling.seed = 21;
    return setup;
}

std::string direct_log() {
    const auto s = diff_script();
    DuetSimulation sim(diff_setup());
    for (const auto& ev : s.events) {
        sim.advance(ev.timestamp_ms);
        sim.inject(ev);
    }
    for (double t : {s.takeover_ms, s.reclaim_ms}) {
        sim.advance(t);
        REQUIRE(sim.engine().phase() == (t == s.takeover_ms ? Phase::Listen : Phase::Generating));
        sim.inject(MidiEvent::control(67, 127, 0.0));
        sim.inject(MidiEvent::control(67, 0, 0.0));
    }
    sim.settle(s.end_ms);
    return sim.instrument().export_log();
}

// Feeds each message through `deliver`, which must hand it to `core`;
// afterwards whatever reached the input is injected at the current time.
template <class Deliver>
std::string gateway_log(Deliver deliver, std::vector<std::string>* broadcasts = nullptr,
                        const std::function<void()>& teardown = {}) {
    const auto s = diff_script();
    DuetSimulation sim(diff_setup());
    FakeInput input;
    GatewayCore core(GatewayConfig{}, input, sim.clock());
    sim.add_observer(&core);
    const auto id = core.connect();
    std::size_t expected = 0;
    auto send = [&](const std::string& payload, std::size_t adds) {
        expected += adds;
        deliver(core, id, payload, input, expected);
        for (const auto& ev : input.take()) {
            sim.inject(ev);
        }
    };
    send("hello performer", 0);
    for (const auto& ev : s.events) {
        sim.advance(ev.timestamp_ms);
        send(gw::format_client(to_client(ev)), 1);
    }
    sim.advance(s.takeover_ms);
    send("takeover -", 2);
    sim.advance(s.reclaim_ms);
    send("reclaim -", 2);
    sim.settle(s.end_ms);
    if (broadcasts) {
        gw::FrameDecoder d;
        d.feed(core.take_output(id));
        while (auto p = d.next()) {
            broadcasts->push_back(*p);
        }
    }
    if (teardown) {
        teardown();
    }
    return sim.instrument().export_log();
}

} // namespace

TEST_CASE("gateway-driven session matches the in-process session") {
    const auto reference = direct_log();
    REQUIRE(!reference.empty());

    std::vector<std::string> seen;
    const auto in_process = gateway_log(
        [](GatewayCore& core, GatewayCore::ClientId id, const std::string& p, FakeInput&, std::size_t) {
            core.receive(id, p);
        },
        &seen);
    CHECK(in_process == reference);
    bool generating = false;
    int ai = 0;
    for (const auto& p : seen) {
        const auto m = gw::parse_server(p);
        generating |= m.type == "state" && m.fields.at(0) == "generating";
        ai += m.type == "ai_note" ? 1 : 0;
        CHECK(m.type != "error");
    }
    CHECK(generating);
    CHECK(ai > 0);
}

TEST_CASE("gateway differential over a WebSocket connection") {
    const auto reference = direct_log();
    std::unique_ptr<GatewayServer> server;
    std::unique_ptr<GatewayClient> client;
    const auto log = gateway_log([&](GatewayCore& core, GatewayCore::ClientId, const std::string& p,
                                     FakeInput& input, std::size_t expected) {
        if (!server) {
            // The test client is the second connection; give it the performer role.
            server = std::make_unique<GatewayServer>(core, RemoteAddress{"127.0.0.1", 0});
            server->start();
            client = std::make_unique<GatewayClient>("127.0.0.1", server->port());
            REQUIRE(client->wait_for([](const gw::ServerMessage& m) { return m.type == "welcome"; }, 2s) >= 0);
        }
        const auto before = client->received().size();
        client->send(p);
        if (p.rfind("hello", 0) == 0) {
            REQUIRE(client->wait_for([](const gw::ServerMessage& m) { return m.type == "role"; }, 2s, before) >= 0);
            return;
        }
        for (int i = 0; i < 20000 && input.count < expected; ++i) {
            std::this_thread::sleep_for(100us);
        }
        REQUIRE(input.count == expected);
    },
                                 nullptr, [&] {
                                     client->close();
                                     server->stop();
                                 });
    CHECK(log == reference);
}

TEST_CASE("gateway loopback on a live runtime") {
    SteadyClock clock;
    InstrumentModel model;
    VirtualDisklavier instrument(model);
    VirtualDisklavier probe(model);
    VirtualCalibrationIo io(probe);
    OutputScheduler scheduler(SchedulerConfig{}, run_calibration(io, all_velocities(), 1, "test"));
    VirtualInstrumentSink sink(instrument);
    PlaybackHost host(scheduler, sink);
    EngineConfig config;
    config.reclaim_flush = ReclaimFlush::CutImmediately;
    MockBackend backend(MockBackend::fit_default(config.tokenizer), CostModel{}, clock);

    // The runtime needs the observer at construction, the core needs the
    // runtime as input: route through a forwarding input.
    struct Forward : EngineInput {
        LiveRuntime* rt = nullptr;
        double submit(const MidiEvent& ev) override { return rt->submit(ev); }
    } forward;
    GatewayCore core(GatewayConfig{}, forward, clock);
    LiveRuntime runtime(config, backend, host, clock, &core);
    forward.rt = &runtime;
    GatewayServer server(core, RemoteAddress{"127.0.0.1", 0}, 50.0);
    server.start();
    runtime.start();

    auto performer = std::make_unique<GatewayClient>("127.0.0.1", server.port());
    GatewayClient observer("127.0.0.1", server.port());
    performer->send("hello performer");
    REQUIRE(performer->wait_for([](const gw::ServerMessage& m) { return m.type == "role"; }, 2s) >= 0);
    observer.send("note_on - 60 80");
    CHECK(observer.wait_for([](const gw::ServerMessage& m) { return m.type == "error"; }, 2s) >= 0);

    const auto phrase = performance_events(corpus_phrase(0, 800.0), 0.0);
    const double t0 = clock.now_ms();
    for (const auto& ev : phrase) {
        const double d = t0 + ev.timestamp_ms - clock.now_ms();
        if (d > 0.0) {
            clock.sleep_ms(d);
        }
        performer->send(gw::format_client(to_client(ev)));
    }
    clock.sleep_ms(100.0);
    const auto mark = performer->received().size();
    const double sent = clock.now_ms();
    performer->send("takeover -");
    const auto gen = performer->wait_for(
        [](const gw::ServerMessage& m) { return m.type == "state" && m.fields.at(0) == "generating"; }, 2s, mark);
    const double seen = clock.now_ms();
    REQUIRE(gen >= 0);
    CHECK(seen - sent < 100.0);
    CHECK(performer->wait_for([](const gw::ServerMessage& m) { return m.type == "ai_note"; }, 2s, mark) >= 0);

    // Performer drops out; generation carries on; a new connection reclaims.
    performer.reset();
    clock.sleep_ms(100.0);
    CHECK(core.phase() == Phase::Generating);
    GatewayClient again("127.0.0.1", server.port());
    again.send("hello performer");
    REQUIRE(again.wait_for([](const gw::ServerMessage& m) { return m.type == "role" && m.fields[0] == "performer"; },
                           2s) >= 0);
    again.send("reclaim -");
    CHECK(again.wait_for([](const gw::ServerMessage& m) { return m.type == "state" && m.fields.at(0) == "listen"; },
                         2s) >= 0);
    CHECK(again.wait_for([](const gw::ServerMessage& m) { return m.type == "heartbeat"; }, 2s) >= 0);

    runtime.stop();
    server.stop();

    // The observer saw one strictly increasing sequence.
    std::uint64_t last = 0;
    bool ordered = true;
    for (const auto& p : observer.received()) {
        const auto m = gw::parse_server(p);
        ordered &= m.seq > last;
        last = m.seq;
    }
    CHECK(ordered);

    auto delays = runtime.ingest_delays();
    REQUIRE(!delays.empty());
    std::sort(delays.begin(), delays.end());
    CHECK(delays[delays.size() * 95 / 100] < 5.0);
}

#include "duet/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include <fmt/format.h>

#include "duet/remote_backend.hpp"

namespace duet {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& v) {
    T out{};
    const auto* end = v.data() + v.size();
    const auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) {
        throw ConfigError(fmt::format("not a number: '{}'", v));
    }
    return out;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw ConfigError(fmt::format("not a boolean: '{}'", v));
}

std::vector<int> parse_int_list(const std::string& v) {
    std::vector<int> out;
    std::stringstream in(v);
    std::string item;
    while (std::getline(in, item, ',')) {
        out.push_back(parse_number<int>(trim(item)));
    }
    if (out.empty()) {
        throw ConfigError("empty list");
    }
    return out;
}

template <class E, std::size_t N>
E parse_enum(const std::string& v, const E (&options)[N]) {
    for (E e : options) {
        if (v == to_string(e)) {
            return e;
        }
    }
    std::string names;
    for (E e : options) {
        names += names.empty() ? "" : ", ";
        names += to_string(e);
    }
    throw ConfigError(fmt::format("'{}' is not one of: {}", v, names));
}

constexpr SpeculativePolicy policies[] = {SpeculativePolicy::Elapsed, SpeculativePolicy::ElapsedPlusExtension,
                                          SpeculativePolicy::ModelPredicted};
constexpr ReclaimFlush flushes[] = {ReclaimFlush::CutImmediately, ReclaimFlush::FinishSoundingNotes};
constexpr PrefillStrategy strategies[] = {PrefillStrategy::Continuous, PrefillStrategy::OneShot};

struct Entry {
    ConfigKey key;
    std::function<void(AppConfig&, const std::string&)> set;
    std::function<std::string(const AppConfig&)> get;
};

template <class T, class F>
Entry number(const char* name, const char* doc, F ref) {
    return {{name, doc},
            [ref](AppConfig& c, const std::string& v) { ref(c) = parse_number<T>(v); },
            [ref](const AppConfig& c) { return fmt::format("{}", ref(c)); }};
}

template <class F>
Entry flag(const char* name, const char* doc, F ref) {
    return {{name, doc},
            [ref](AppConfig& c, const std::string& v) { ref(c) = parse_bool(v); },
            [ref](const AppConfig& c) { return std::string(ref(c) ? "true" : "false"); }};
}

template <class F>
Entry text(const char* name, const char* doc, F ref) {
    return {{name, doc},
            [ref](AppConfig& c, const std::string& v) { ref(c) = v; },
            [ref](const AppConfig& c) { return ref(c); }};
}

template <class F>
Entry int_list(const char* name, const char* doc, F ref) {
    return {{name, doc},
            [ref](AppConfig& c, const std::string& v) { ref(c) = parse_int_list(v); },
            [ref](const AppConfig& c) { return fmt::format("{}", fmt::join(ref(c), ",")); }};
}

template <class E, std::size_t N, class F>
Entry choice(const char* name, const char* doc, const E (&options)[N], F ref) {
    return {{name, doc},
            [ref, &options](AppConfig& c, const std::string& v) { ref(c) = parse_enum(v, options); },
            [ref](const AppConfig& c) { return std::string(to_string(ref(c))); }};
}

#define FIELD(expr) [](auto& c) -> auto& { return c.expr; }

const std::vector<Entry>& entries() {
    static const std::vector<Entry> table = {
        number<int>("tokenizer.time_resolution_ms", "onset and duration grid", FIELD(setup.engine.tokenizer.time_resolution_ms)),
        number<int>("tokenizer.segment_ms", "span of one time segment", FIELD(setup.engine.tokenizer.segment_ms)),
        number<int>("tokenizer.velocity_buckets", "velocity bucket count, at most 127", FIELD(setup.engine.tokenizer.velocity_buckets)),
        number<int>("tokenizer.max_duration_ms", "longest encodable duration", FIELD(setup.engine.tokenizer.max_duration_ms)),
        number<int>("tracker.sustain_controller", "sustain pedal controller number", FIELD(setup.engine.tracker.sustain_controller)),
        number<int>("tracker.soft_controller", "soft pedal (takeover) controller number", FIELD(setup.engine.tracker.soft_controller)),
        number<int>("tracker.pedal_threshold", "controller value counted as pressed", FIELD(setup.engine.tracker.pedal_threshold)),
        number<int>("engine.prefill_chunk_tokens", "tokens per prefill call while listening", FIELD(setup.engine.prefill_chunk_tokens)),
        choice("engine.speculative_policy", "durations of notes held at takeover", policies, FIELD(setup.engine.speculative_policy)),
        number<double>("engine.extension_ms", "extension for elapsed_plus_extension and the model fallback", FIELD(setup.engine.extension_ms)),
        number<int>("engine.max_context_tokens", "context size that triggers dropping old segments", FIELD(setup.engine.max_context_tokens)),
        choice("engine.reclaim_flush", "what happens to generated notes on reclaim", flushes, FIELD(setup.engine.reclaim_flush)),
        choice("engine.prefill_strategy", "continuous or one_shot prefill", strategies, FIELD(setup.engine.prefill_strategy)),
        flag("engine.key_press_reclaim", "a key press during generation also reclaims", FIELD(setup.engine.key_press_reclaim)),
        flag("engine.allow_empty_context", "allow takeover before anything was played", FIELD(setup.engine.allow_empty_context)),
        number<double>("engine.playback_lead_ms", "delay from generation start to the first generated note", FIELD(setup.engine.playback_lead_ms)),
        number<double>("engine.generation_lookahead_ms", "how far ahead of now decoding may run", FIELD(setup.engine.generation_lookahead_ms)),
        number<double>("engine.ai_onset_tolerance_ms", "how early a generated note may sound", FIELD(setup.engine.ai_onset_tolerance_ms)),
        number<double>("sampling.temperature", "softmax temperature, 0 for greedy", FIELD(setup.engine.sampling.temperature)),
        number<double>("sampling.top_p", "nucleus mass", FIELD(setup.engine.sampling.top_p)),
        number<std::uint64_t>("sampling.seed", "sampling seed", FIELD(setup.engine.sampling.seed)),
        number<int>("sampling.max_new_tokens", "tokens generated per turn at most", FIELD(setup.engine.sampling.max_new_tokens)),
        number<double>("scheduler.staleness_threshold_ms", "late NoteOns beyond this are dropped", FIELD(setup.scheduler.staleness_threshold_ms)),
        number<double>("scheduler.retrigger_gap_ms", "minimum key-up time before a repeat", FIELD(setup.scheduler.retrigger_gap_ms)),
        number<std::size_t>("scheduler.max_pending", "queue capacity", FIELD(setup.scheduler.max_pending)),
        number<double>("scheduler.note_off_latency_ms", "compensation applied to NoteOffs", FIELD(setup.scheduler.note_off_latency_ms)),
        number<double>("scheduler.tick_quantum_ms", "tick period", FIELD(setup.scheduler.tick_quantum_ms)),
        number<double>("instrument.base_latency_ms", "simulated actuation delay at velocity 1", FIELD(setup.instrument.curve.base_ms)),
        number<double>("instrument.latency_slope_ms", "delay decrease per velocity step", FIELD(setup.instrument.curve.slope_ms_per_velocity)),
        number<double>("instrument.reset_time_ms", "key reset time of the simulated action", FIELD(setup.instrument.reset_time_ms)),
        number<double>("instrument.jitter_ms", "uniform actuation jitter", FIELD(setup.instrument.jitter_ms)),
        number<std::uint64_t>("instrument.seed", "jitter seed", FIELD(setup.instrument.seed)),
        text("instrument.id", "instrument name written to calibration tables", FIELD(setup.instrument.id)),
        text("calibration.table", "calibration table file; empty calibrates on start", FIELD(calibration_table)),
        number<int>("calibration.repeats", "probes per velocity", FIELD(setup.calibration_repeats)),
        number<double>("cost.prefill_ms_per_token", "mock backend prefill cost (sim)", FIELD(setup.cost.prefill_ms_per_token)),
        number<double>("cost.decode_ms_per_token", "mock backend decode cost (sim)", FIELD(setup.cost.decode_ms_per_token)),
        flag("sim.measured", "count real compute time in simulations", FIELD(setup.measured)),
        text("backend.address", "mock, or host:port of a backend server", FIELD(backend)),
        number<int>("backend.timeout_ms", "remote call timeout", FIELD(backend_timeout_ms)),
        int_list("bench.context_tokens", "context sizes of the bench matrix", FIELD(bench_context_tokens)),
        int_list("bench.hanging", "hanging-note counts of the bench matrix", FIELD(bench_hanging)),
        number<double>("bench.hang_lead_ms", "how long the hanging chord is held before the signal", FIELD(bench_hang_lead_ms)),
        number<double>("bench.native_buffer_ms", "fixed playback buffer of the comparison column", FIELD(bench_native_buffer_ms)),
        number<double>("bench.prefill_ms_per_token", "mock prefill cost in the bench", FIELD(bench_prefill_ms_per_token)),
        number<double>("bench.decode_ms_per_token", "mock decode cost in the bench", FIELD(bench_decode_ms_per_token)),
        text("gateway.bind", "gateway listen address host:port", FIELD(gateway_bind)),
        number<int>("gateway.outbox_limit", "messages queued per client before dropping", FIELD(gateway_outbox_limit)),
        number<double>("gateway.heartbeat_ms", "heartbeat period", FIELD(gateway_heartbeat_ms)),
        number<int>("midi.channel", "output channel 0-15", FIELD(midi_channel)),
    };
    return table;
}

#undef FIELD

} // namespace

void AppConfig::validate() const {
    try {
        setup.engine.validate();
        setup.scheduler.validate();
        setup.instrument.validate();
        setup.cost.validate();
        if (setup.calibration_repeats < 1) {
            throw std::invalid_argument("calibration.repeats must be positive");
        }
        if (backend != "mock") {
            RemoteAddress::parse(backend);
        }
        RemoteAddress::parse(gateway_bind);
        if (backend_timeout_ms <= 0 || gateway_outbox_limit < 1 || gateway_heartbeat_ms <= 0.0) {
            throw std::invalid_argument("backend/gateway limits must be positive");
        }
        if (midi_channel < 0 || midi_channel > 15) {
            throw std::invalid_argument("midi.channel must be 0-15");
        }
        for (int n : bench_context_tokens) {
            if (n < 1) {
                throw std::invalid_argument("bench.context_tokens must be positive");
            }
        }
        for (int h : bench_hanging) {
            if (h < 0 || h > 10) {
                throw std::invalid_argument("bench.hanging must be 0-10");
            }
        }
        if (bench_hang_lead_ms <= 0.0 || bench_native_buffer_ms < 0.0) {
            throw std::invalid_argument("bench.hang_lead_ms must be positive");
        }
        CostModel{bench_prefill_ms_per_token, bench_decode_ms_per_token}.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
}

BenchConfig AppConfig::bench() const {
    BenchConfig b;
    b.setup = setup;
    b.setup.cost = CostModel{bench_prefill_ms_per_token, bench_decode_ms_per_token};
    b.context_tokens = bench_context_tokens;
    b.hanging = bench_hanging;
    b.hang_lead_ms = bench_hang_lead_ms;
    b.native_buffer_ms = bench_native_buffer_ms;
    b.seed = setup.engine.sampling.seed;
    return b;
}

AppConfig parse_config(const std::string& text) {
    AppConfig config;
    std::stringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.resize(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(fmt::format("line {}: expected key = value", lineno));
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        const Entry* entry = nullptr;
        for (const auto& e : entries()) {
            if (e.key.name == key) {
                entry = &e;
            }
        }
        if (!entry) {
            throw ConfigError(fmt::format("line {}: unknown key '{}'", lineno, key));
        }
        try {
            entry->set(config, value);
        } catch (const ConfigError& e) {
            throw ConfigError(fmt::format("line {}: {}: {}", lineno, key, e.what()));
        }
    }
    config.validate();
    return config;
}

AppConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError(fmt::format("cannot read config file {}", path));
    }
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(fmt::format("{}: {}", path, e.what()));
    }
}

std::string dump_config(const AppConfig& config) {
    std::string out;
    for (const auto& e : entries()) {
        out += fmt::format("{} = {}\n", e.key.name, e.get(config));
    }
    return out;
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = [] {
        std::vector<ConfigKey> k;
        for (const auto& e : entries()) {
            k.push_back(e.key);
        }
        return k;
    }();
    return keys;
}

std::string resolve_config_path(const std::string& flag_value) {
    if (!flag_value.empty()) {
        return flag_value;
    }
    if (const char* env = std::getenv("DUET_CONFIG"); env && *env) {
        return env;
    }
    return {};
}

} // namespace duet

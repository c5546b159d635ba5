#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "duet/bench.hpp"
#include "duet/simulation.hpp"

namespace duet {

// Everything one config file drives.
struct AppConfig {
    SimulationSetup setup; // engine, scheduler, instrument, cost, calibration repeats
    std::string backend = "mock"; // "mock" or host:port of a backend server
    int backend_timeout_ms = 2000;
    std::string calibration_table; // path; empty means calibrate on start
    std::vector<int> bench_context_tokens{500, 1000, 2000};
    std::vector<int> bench_hanging{0, 3, 8};
    double bench_hang_lead_ms = 300.0;
    double bench_native_buffer_ms = 500.0;
    double bench_prefill_ms_per_token = 1.0;
    double bench_decode_ms_per_token = 1.0;
    std::string gateway_bind = "127.0.0.1:8765";
    int gateway_outbox_limit = 256;
    double gateway_heartbeat_ms = 1000.0;
    int midi_channel = 0;

    void validate() const; // ConfigError
    BenchConfig bench() const;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// `key = value` lines; `#` starts a comment. Unknown keys and bad values
// throw ConfigError naming the line.
AppConfig parse_config(const std::string& text);
AppConfig load_config(const std::string& path);

// Every key with its current value, in parse_config syntax.
std::string dump_config(const AppConfig& config);

struct ConfigKey {
    std::string name;
    std::string doc;
};
const std::vector<ConfigKey>& config_keys();

// Explicit path first, then $DUET_CONFIG, else empty (built-in defaults).
std::string resolve_config_path(const std::string& flag_value);

} // namespace duet

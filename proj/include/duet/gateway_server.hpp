#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "duet/gateway.hpp"
#include "duet/remote_backend.hpp"

namespace duet {

// WebSocket transport for a GatewayCore. Each WebSocket message carries one
// or more framed records. One I/O thread runs accept, reads, writes and the
// heartbeat timer.
class GatewayServer {
public:
    GatewayServer(GatewayCore& core, RemoteAddress bind, double heartbeat_ms = 1000.0);
    ~GatewayServer();

    GatewayServer(const GatewayServer&) = delete;
    GatewayServer& operator=(const GatewayServer&) = delete;

    void start(); // binds; port() is valid afterwards
    void stop();
    std::uint16_t port() const;

    struct Impl;

private:
    std::unique_ptr<Impl> impl_;
};

// Blocking client, used by tests and the CLI. A reader thread collects
// incoming record payloads.
class GatewayClient {
public:
    GatewayClient(const std::string& host, std::uint16_t port);
    ~GatewayClient();

    void send(const std::string& payload);
    void send_raw(const std::string& bytes); // no framing

    // Waits until pred holds for some received payload (searching from
    // index `from`); returns its index or -1 on timeout.
    long wait_for(const std::function<bool(const gw::ServerMessage&)>& pred, std::chrono::milliseconds timeout,
                  std::size_t from = 0);

    std::vector<std::string> received() const;
    void close();

    struct Impl;

private:
    std::unique_ptr<Impl> impl_;
};

} // namespace duet

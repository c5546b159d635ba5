#include "duet/gateway_server.hpp"

#include <condition_variable>
#include <map>
#include <mutex>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

namespace duet {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace {

class Session : public std::enable_shared_from_this<Session> {
public:
    Session(tcp::socket socket, GatewayCore& core) : ws_(std::move(socket)), core_(core) {}

    void start(std::map<GatewayCore::ClientId, std::weak_ptr<Session>>& registry) {
        registry_ = &registry;
        ws_.text(true);
        ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
            if (ec) {
                return;
            }
            self->id_ = self->core_.connect();
            (*self->registry_)[self->id_] = self;
            self->flush();
            self->read();
        });
    }

    void flush() {
        if (writing_ || closed_ || id_ == 0) {
            return;
        }
        out_ = core_.take_output(id_);
        if (out_.empty()) {
            return;
        }
        writing_ = true;
        ws_.async_write(asio::buffer(out_), [self = shared_from_this()](beast::error_code ec, std::size_t) {
            self->writing_ = false;
            if (ec) {
                self->shutdown();
                return;
            }
            self->flush();
        });
    }

    void close() {
        if (closed_) {
            return;
        }
        beast::error_code ec;
        beast::get_lowest_layer(ws_).close(ec);
        shutdown();
    }

private:
    void read() {
        ws_.async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) {
                self->shutdown();
                return;
            }
            self->decoder_.feed(beast::buffers_to_string(self->buf_.data()));
            self->buf_.consume(self->buf_.size());
            try {
                while (auto rec = self->decoder_.next()) {
                    self->core_.receive(self->id_, *rec);
                }
            } catch (const gw::ProtocolError& e) {
                self->core_.reject(self->id_, e.what());
            }
            self->read();
        });
    }

    void shutdown() {
        if (closed_) {
            return;
        }
        closed_ = true;
        if (id_ != 0) {
            core_.disconnect(id_);
            registry_->erase(id_);
        }
    }

    websocket::stream<tcp::socket> ws_;
    GatewayCore& core_;
    std::map<GatewayCore::ClientId, std::weak_ptr<Session>>* registry_ = nullptr;
    GatewayCore::ClientId id_ = 0;
    beast::flat_buffer buf_;
    gw::FrameDecoder decoder_;
    std::string out_;
    bool writing_ = false;
    bool closed_ = false;
};

} // namespace

struct GatewayServer::Impl {
    GatewayCore& core;
    RemoteAddress bind;
    double heartbeat_ms;
    asio::io_context io;
    tcp::acceptor acceptor{io};
    asio::steady_timer heartbeat{io};
    std::map<GatewayCore::ClientId, std::weak_ptr<Session>> sessions;
    std::thread thread;
    std::uint16_t port = 0;
    bool running = false;

    Impl(GatewayCore& c, RemoteAddress b, double hb) : core(c), bind(std::move(b)), heartbeat_ms(hb) {}

    void accept() {
        acceptor.async_accept([this](beast::error_code ec, tcp::socket socket) {
            if (ec) {
                return;
            }
            std::make_shared<Session>(std::move(socket), core)->start(sessions);
            accept();
        });
    }

    void beat() {
        heartbeat.expires_after(std::chrono::microseconds(static_cast<long long>(heartbeat_ms * 1000.0)));
        heartbeat.async_wait([this](beast::error_code ec) {
            if (ec) {
                return;
            }
            core.heartbeat();
            beat();
        });
    }
};

GatewayServer::GatewayServer(GatewayCore& core, RemoteAddress bind, double heartbeat_ms)
    : impl_(std::make_unique<Impl>(core, std::move(bind), heartbeat_ms)) {
    if (heartbeat_ms <= 0.0) {
        throw std::invalid_argument("GatewayServer: heartbeat must be positive");
    }
}

GatewayServer::~GatewayServer() {
    stop();
}

void GatewayServer::start() {
    auto& m = *impl_;
    if (m.running) {
        return;
    }
    const tcp::endpoint ep(asio::ip::make_address(m.bind.host), m.bind.port);
    m.acceptor.open(ep.protocol());
    m.acceptor.set_option(asio::socket_base::reuse_address(true));
    m.acceptor.bind(ep);
    m.acceptor.listen();
    m.port = m.acceptor.local_endpoint().port();
    m.core.set_notify([&m](GatewayCore::ClientId id) {
        asio::post(m.io, [&m, id] {
            auto it = m.sessions.find(id);
            if (it != m.sessions.end()) {
                if (auto s = it->second.lock()) {
                    s->flush();
                }
            }
        });
    });
    m.accept();
    m.beat();
    m.running = true;
    m.thread = std::thread([&m] { m.io.run(); });
    spdlog::debug("gateway listening on {}:{}", m.bind.host, m.port);
}

void GatewayServer::stop() {
    auto& m = *impl_;
    if (!m.running) {
        return;
    }
    m.core.set_notify(nullptr);
    asio::post(m.io, [&m] {
        beast::error_code ec;
        m.acceptor.close(ec);
        m.heartbeat.cancel();
        auto sessions = m.sessions;
        for (auto& [id, w] : sessions) {
            if (auto s = w.lock()) {
                s->close();
            }
        }
    });
    m.thread.join();
    m.running = false;
}

std::uint16_t GatewayServer::port() const {
    return impl_->port;
}

struct GatewayClient::Impl {
    asio::io_context io;
    websocket::stream<tcp::socket> ws{io};
    std::thread reader;
    mutable std::mutex mutex;
    std::condition_variable cv;
    std::vector<std::string> received;
    bool closed = false;
    std::mutex write_mutex;
};

GatewayClient::GatewayClient(const std::string& host, std::uint16_t port) : impl_(std::make_unique<Impl>()) {
    auto& m = *impl_;
    tcp::resolver resolver(m.io);
    asio::connect(m.ws.next_layer(), resolver.resolve(host, std::to_string(port)));
    m.ws.set_option(websocket::stream_base::decorator([](websocket::request_type&) {}));
    m.ws.handshake(host, "/");
    m.ws.text(true);
    m.reader = std::thread([&m] {
        gw::FrameDecoder decoder;
        beast::flat_buffer buf;
        try {
            while (true) {
                m.ws.read(buf);
                decoder.feed(beast::buffers_to_string(buf.data()));
                buf.consume(buf.size());
                std::lock_guard lock(m.mutex);
                while (auto rec = decoder.next()) {
                    m.received.push_back(*rec);
                }
                m.cv.notify_all();
            }
        } catch (const std::exception&) {
            std::lock_guard lock(m.mutex);
            m.closed = true;
            m.cv.notify_all();
        }
    });
}

GatewayClient::~GatewayClient() {
    close();
}

void GatewayClient::send(const std::string& payload) {
    send_raw(gw::frame(payload));
}

void GatewayClient::send_raw(const std::string& bytes) {
    std::lock_guard lock(impl_->write_mutex);
    impl_->ws.write(asio::buffer(bytes));
}

long GatewayClient::wait_for(const std::function<bool(const gw::ServerMessage&)>& pred,
                             std::chrono::milliseconds timeout, std::size_t from) {
    auto& m = *impl_;
    std::unique_lock lock(m.mutex);
    long found = -1;
    std::size_t scanned = from;
    m.cv.wait_for(lock, timeout, [&] {
        for (; scanned < m.received.size(); ++scanned) {
            if (pred(gw::parse_server(m.received[scanned]))) {
                found = static_cast<long>(scanned);
                return true;
            }
        }
        return m.closed;
    });
    return found;
}

std::vector<std::string> GatewayClient::received() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->received;
}

void GatewayClient::close() {
    auto& m = *impl_;
    if (!m.reader.joinable()) {
        return;
    }
    beast::error_code ec;
    m.ws.next_layer().shutdown(tcp::socket::shutdown_both, ec);
    m.reader.join();
    m.ws.next_layer().close(ec);
}

} // namespace duet

#include "duet/remote_backend.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <bit>
#include <cerrno>
#include <chrono>
#include <cstring>

#include <spdlog/spdlog.h>

namespace duet {

namespace wire {

void Writer::u16(std::uint16_t v) {
    buf_.push_back(static_cast<std::uint8_t>(v >> 8));
    buf_.push_back(static_cast<std::uint8_t>(v));
}

void Writer::u32(std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) {
        buf_.push_back(static_cast<std::uint8_t>(v >> s));
    }
}

void Writer::u64(std::uint64_t v) {
    for (int s = 56; s >= 0; s -= 8) {
        buf_.push_back(static_cast<std::uint8_t>(v >> s));
    }
}

void Writer::f64(double v) {
    u64(std::bit_cast<std::uint64_t>(v));
}

void Writer::str(const std::string& s) {
    if (s.size() > 0xffff) {
        throw std::invalid_argument("wire string too long");
    }
    u16(static_cast<std::uint16_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
}

void Reader::need(std::size_t n) const {
    if (buf_.size() - pos_ < n) {
        throw ProtocolError("truncated frame");
    }
}

std::uint8_t Reader::u8() {
    need(1);
    return buf_[pos_++];
}

std::uint16_t Reader::u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>((buf_[pos_] << 8) | buf_[pos_ + 1]);
    pos_ += 2;
    return v;
}

std::uint32_t Reader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v = (v << 8) | buf_[pos_++];
    }
    return v;
}

std::uint64_t Reader::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v = (v << 8) | buf_[pos_++];
    }
    return v;
}

double Reader::f64() {
    return std::bit_cast<double>(u64());
}

std::string Reader::str() {
    const std::size_t n = u16();
    need(n);
    std::string s(buf_.begin() + static_cast<std::ptrdiff_t>(pos_), buf_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
}

namespace {

using steady = std::chrono::steady_clock;

int remaining_ms(steady::time_point deadline, int timeout_ms) {
    if (timeout_ms < 0) {
        return -1;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - steady::now()).count();
    return left > 0 ? static_cast<int>(left) : 0;
}

void wait_fd(int fd, short events, steady::time_point deadline, int timeout_ms) {
    pollfd p{fd, events, 0};
    for (;;) {
        const int r = ::poll(&p, 1, remaining_ms(deadline, timeout_ms));
        if (r > 0) {
            return;
        }
        if (r == 0) {
            throw BackendTimeout("backend did not answer within " + std::to_string(timeout_ms) + "ms");
        }
        if (errno != EINTR) {
            throw ConnectionLost(std::string("poll: ") + std::strerror(errno));
        }
    }
}

void write_all(int fd, const std::uint8_t* data, std::size_t n, steady::time_point deadline, int timeout_ms) {
    while (n > 0) {
        wait_fd(fd, POLLOUT, deadline, timeout_ms);
        const ssize_t w = ::send(fd, data, n, MSG_NOSIGNAL);
        if (w < 0) {
            if (errno == EINTR || errno == EAGAIN) {
                continue;
            }
            throw ConnectionLost(std::string("send: ") + std::strerror(errno));
        }
        data += w;
        n -= static_cast<std::size_t>(w);
    }
}

void read_all(int fd, std::uint8_t* data, std::size_t n, steady::time_point deadline, int timeout_ms) {
    while (n > 0) {
        wait_fd(fd, POLLIN, deadline, timeout_ms);
        const ssize_t r = ::recv(fd, data, n, 0);
        if (r == 0) {
            throw ConnectionLost("peer closed the connection");
        }
        if (r < 0) {
            if (errno == EINTR || errno == EAGAIN) {
                continue;
            }
            throw ConnectionLost(std::string("recv: ") + std::strerror(errno));
        }
        data += r;
        n -= static_cast<std::size_t>(r);
    }
}

} // namespace

void send_frame(int fd, const std::vector<std::uint8_t>& frame, int timeout_ms) {
    const auto deadline = steady::now() + std::chrono::milliseconds(timeout_ms < 0 ? 0 : timeout_ms);
    const auto n = static_cast<std::uint32_t>(frame.size());
    const std::uint8_t len[4] = {static_cast<std::uint8_t>(n >> 24), static_cast<std::uint8_t>(n >> 16),
                                 static_cast<std::uint8_t>(n >> 8), static_cast<std::uint8_t>(n)};
    write_all(fd, len, 4, deadline, timeout_ms);
    write_all(fd, frame.data(), frame.size(), deadline, timeout_ms);
}

std::vector<std::uint8_t> recv_frame(int fd, int timeout_ms) {
    const auto deadline = steady::now() + std::chrono::milliseconds(timeout_ms < 0 ? 0 : timeout_ms);
    std::uint8_t len[4];
    read_all(fd, len, 4, deadline, timeout_ms);
    const std::uint32_t n = (std::uint32_t{len[0]} << 24) | (std::uint32_t{len[1]} << 16) |
                            (std::uint32_t{len[2]} << 8) | std::uint32_t{len[3]};
    if (n == 0 || n > max_frame_bytes) {
        throw ProtocolError("bad frame length " + std::to_string(n));
    }
    std::vector<std::uint8_t> frame(n);
    read_all(fd, frame.data(), n, deadline, timeout_ms);
    return frame;
}

} // namespace wire

// ---------------------------------------------------------------------------

RemoteAddress RemoteAddress::parse(const std::string& text) {
    const auto colon = text.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
        throw std::invalid_argument("address must look like host:port, got '" + text + "'");
    }
    RemoteAddress a;
    a.host = text.substr(0, colon);
    const int port = std::stoi(text.substr(colon + 1));
    if (port < 0 || port > 65535) {
        throw std::invalid_argument("port out of range in '" + text + "'");
    }
    a.port = static_cast<std::uint16_t>(port);
    return a;
}

namespace {

int connect_to(const RemoteAddress& addr) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(addr.port);
    if (::getaddrinfo(addr.host.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr) {
        throw ConnectionLost("cannot resolve " + addr.host);
    }
    const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd < 0) {
        ::freeaddrinfo(res);
        throw ConnectionLost(std::string("socket: ") + std::strerror(errno));
    }
    if (::connect(fd, res->ai_addr, res->ai_addrlen) != 0) {
        const int err = errno;
        ::freeaddrinfo(res);
        ::close(fd);
        throw ConnectionLost("connect " + addr.host + ":" + port + ": " + std::strerror(err));
    }
    ::freeaddrinfo(res);
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return fd;
}

void end_of_request(const wire::Reader& r) {
    if (!r.done()) {
        throw ProtocolError("trailing bytes in request");
    }
}

[[noreturn]] void raise_status(wire::Status st, const std::string& msg) {
    switch (st) {
    case wire::Status::ContractError:
    case wire::Status::UnknownSession:
        throw ContractError(msg);
    case wire::Status::VocabMismatch:
        throw VocabMismatch(msg);
    case wire::Status::ProtocolError:
        throw ProtocolError(msg);
    default:
        throw BackendError(msg);
    }
}

} // namespace

RemoteBackend::RemoteBackend(RemoteAddress address, int timeout_ms) : address_(std::move(address)), timeout_ms_(timeout_ms) {}

std::unique_ptr<BackendSession> RemoteBackend::open_session(const std::string& vocab_descriptor) {
    const int fd = connect_to(address_);
    try {
        wire::Writer w;
        w.u8(static_cast<std::uint8_t>(wire::Op::Open));
        w.u32(0);
        w.str(vocab_descriptor);
        wire::send_frame(fd, w.bytes(), timeout_ms_);
        const auto reply = wire::recv_frame(fd, timeout_ms_);
        wire::Reader r(reply);
        const auto st = static_cast<wire::Status>(r.u8());
        if (st != wire::Status::Ok) {
            raise_status(st, r.str());
        }
        const std::uint32_t id = r.u32();
        return std::make_unique<RemoteSession>(fd, id, vocab_descriptor, timeout_ms_);
    } catch (...) {
        ::close(fd);
        throw;
    }
}

RemoteSession::RemoteSession(int fd, std::uint32_t session_id, std::string vocab, int timeout_ms)
    : fd_(fd), session_id_(session_id), vocab_(std::move(vocab)), timeout_ms_(timeout_ms) {}

RemoteSession::~RemoteSession() {
    if (!poisoned_) {
        try {
            wire::Writer w;
            call(wire::Op::Close, w);
        } catch (const std::exception& e) {
            spdlog::debug("remote session close: {}", e.what());
        }
    }
    ::close(fd_);
}

std::vector<std::uint8_t> RemoteSession::call(wire::Op op, wire::Writer& payload) {
    if (poisoned_) {
        throw PoisonedSession("remote session " + std::to_string(session_id_) + " is poisoned");
    }
    wire::Writer w;
    w.u8(static_cast<std::uint8_t>(op));
    w.u32(session_id_);
    auto& body = payload.bytes();
    w.bytes().insert(w.bytes().end(), body.begin(), body.end());
    std::vector<std::uint8_t> reply;
    try {
        wire::send_frame(fd_, w.bytes(), timeout_ms_);
        reply = wire::recv_frame(fd_, timeout_ms_);
    } catch (const BackendError&) {
        // The request may or may not have been applied remotely.
        poisoned_ = true;
        throw;
    }
    wire::Reader r(reply);
    const auto st = static_cast<wire::Status>(r.u8());
    if (st != wire::Status::Ok) {
        raise_status(st, r.str());
    }
    return reply;
}

std::size_t RemoteSession::prefill(const TokenBatch& batch) {
    if (batch.vocab != vocab_) {
        throw VocabMismatch("prefill with vocabulary '" + std::string(batch.vocab) + "' on session '" + vocab_ + "'");
    }
    if (batch.ids.empty()) {
        throw ContractError("prefill of zero tokens");
    }
    wire::Writer w;
    w.u32(static_cast<std::uint32_t>(batch.ids.size()));
    for (TokenId id : batch.ids) {
        w.u32(id);
    }
    const auto reply = call(wire::Op::Prefill, w);
    wire::Reader r(reply, 1);
    cache_len_ = static_cast<std::size_t>(r.u64());
    return cache_len_;
}

TokenId RemoteSession::decode_next(const SamplingParams& params, DecodeConstraint constraint) {
    wire::Writer w;
    w.f64(params.temperature);
    w.f64(params.top_p);
    w.u64(params.seed);
    w.u8(static_cast<std::uint8_t>(constraint));
    const auto reply = call(wire::Op::Decode, w);
    wire::Reader r(reply, 1);
    const TokenId id = r.u32();
    cache_len_ = static_cast<std::size_t>(r.u64());
    return id;
}

Mark RemoteSession::checkpoint() {
    wire::Writer w;
    const auto reply = call(wire::Op::Checkpoint, w);
    wire::Reader r(reply, 1);
    Mark m;
    m.id = r.u64();
    m.position = static_cast<std::size_t>(r.u64());
    return m;
}

void RemoteSession::rollback(const Mark& mark) {
    wire::Writer w;
    w.u64(mark.id);
    w.u64(mark.position);
    const auto reply = call(wire::Op::Rollback, w);
    wire::Reader r(reply, 1);
    cache_len_ = static_cast<std::size_t>(r.u64());
}

void RemoteSession::release(const Mark& mark) {
    wire::Writer w;
    w.u64(mark.id);
    w.u64(mark.position);
    call(wire::Op::Release, w);
}

void RemoteSession::reset() {
    wire::Writer w;
    call(wire::Op::Reset, w);
    cache_len_ = 0;
}

// ---------------------------------------------------------------------------

BackendServer::BackendServer(Backend& backend, RemoteAddress bind) : backend_(backend), bind_(std::move(bind)) {}

BackendServer::~BackendServer() {
    stop();
}

void BackendServer::start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) {
        throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
    }
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(bind_.port);
    if (::inet_pton(AF_INET, bind_.host.c_str(), &addr.sin_addr) != 1) {
        throw std::invalid_argument("bind host must be an IPv4 address: " + bind_.host);
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 8) != 0) {
        const int err = errno;
        ::close(listen_fd_);
        listen_fd_ = -1;
        throw std::runtime_error("bind " + bind_.host + ":" + std::to_string(bind_.port) + ": " + std::strerror(err));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
}

void BackendServer::stop() {
    if (!running_.exchange(false)) {
        return;
    }
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) {
        acceptor_.join();
    }
    {
        std::lock_guard lock(conn_mutex_);
        for (int fd : conn_fds_) {
            ::shutdown(fd, SHUT_RDWR);
        }
    }
    for (auto& t : threads_) {
        if (t.joinable()) {
            t.join();
        }
    }
    threads_.clear();
}

void BackendServer::accept_loop() {
    while (running_) {
        pollfd p{listen_fd_, POLLIN, 0};
        const int r = ::poll(&p, 1, 100);
        if (r <= 0) {
            continue;
        }
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            continue;
        }
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        std::lock_guard lock(conn_mutex_);
        conn_fds_.push_back(fd);
        threads_.emplace_back([this, fd] { serve(fd); });
    }
}

void BackendServer::serve(int fd) {
    std::map<std::uint32_t, std::unique_ptr<BackendSession>> sessions;
    try {
        for (;;) {
            const auto request = wire::recv_frame(fd, -1);
            auto reply = handle(request, sessions);
            if (const int d = delay_ms_.load(); d > 0) {
                std::this_thread::sleep_for(std::chrono::milliseconds(d));
            }
            wire::send_frame(fd, reply, -1);
        }
    } catch (const std::exception& e) {
        spdlog::debug("backend server connection closed: {}", e.what());
    }
    std::lock_guard lock(backend_mutex_);
    sessions.clear();
}

std::vector<std::uint8_t> BackendServer::handle(const std::vector<std::uint8_t>& request,
                                                std::map<std::uint32_t, std::unique_ptr<BackendSession>>& sessions) {
    wire::Writer out;
    auto fail = [&](wire::Status st, const std::string& msg) {
        wire::Writer e;
        e.u8(static_cast<std::uint8_t>(st));
        e.str(msg.substr(0, 0xffff));
        return e.bytes();
    };
    std::lock_guard lock(backend_mutex_);
    try {
        wire::Reader r(request);
        const auto op = static_cast<wire::Op>(r.u8());
        const std::uint32_t sid = r.u32();
        if (op == wire::Op::Open) {
            const std::string vocab = r.str();
            end_of_request(r);
            auto session = backend_.open_session(vocab);
            const std::uint32_t id = next_session_++;
            sessions.emplace(id, std::move(session));
            out.u8(0);
            out.u32(id);
            return out.bytes();
        }
        auto it = sessions.find(sid);
        if (it == sessions.end()) {
            return fail(wire::Status::UnknownSession, "unknown session " + std::to_string(sid));
        }
        BackendSession& s = *it->second;
        out.u8(0);
        switch (op) {
        case wire::Op::Prefill: {
            const std::uint32_t n = r.u32();
            if (n > wire::max_frame_bytes / 4) {
                throw ProtocolError("prefill count too large");
            }
            std::vector<TokenId> ids(n);
            for (auto& id : ids) {
                id = r.u32();
            }
            end_of_request(r);
            out.u64(s.prefill(TokenBatch{s.vocab_descriptor(), ids}));
            break;
        }
        case wire::Op::Decode: {
            SamplingParams p;
            p.temperature = r.f64();
            p.top_p = r.f64();
            p.seed = r.u64();
            const std::uint8_t c = r.u8();
            if (c > 1) {
                throw ProtocolError("unknown decode constraint");
            }
            end_of_request(r);
            const TokenId id = s.decode_next(p, static_cast<DecodeConstraint>(c));
            out.u32(id);
            out.u64(s.cache_len());
            break;
        }
        case wire::Op::Checkpoint: {
            end_of_request(r);
            const Mark m = s.checkpoint();
            out.u64(m.id);
            out.u64(m.position);
            break;
        }
        case wire::Op::Rollback: {
            Mark m;
            m.id = r.u64();
            m.position = static_cast<std::size_t>(r.u64());
            end_of_request(r);
            s.rollback(m);
            out.u64(s.cache_len());
            break;
        }
        case wire::Op::Release: {
            Mark m;
            m.id = r.u64();
            m.position = static_cast<std::size_t>(r.u64());
            end_of_request(r);
            s.release(m);
            break;
        }
        case wire::Op::Reset:
            end_of_request(r);
            s.reset();
            break;
        case wire::Op::Close:
            end_of_request(r);
            sessions.erase(it);
            break;
        default:
            throw ProtocolError("unknown op " + std::to_string(static_cast<int>(op)));
        }
        return out.bytes();
    } catch (const VocabMismatch& e) {
        return fail(wire::Status::VocabMismatch, e.what());
    } catch (const ContractError& e) {
        return fail(wire::Status::ContractError, e.what());
    } catch (const ProtocolError& e) {
        return fail(wire::Status::ProtocolError, e.what());
    } catch (const std::invalid_argument& e) {
        return fail(wire::Status::ContractError, e.what());
    } catch (const std::exception& e) {
        return fail(wire::Status::BackendError, e.what());
    }
}

} // namespace duet

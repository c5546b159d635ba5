#include "duet/midi_device.hpp"

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <filesystem>

#include <fcntl.h>
#include <poll.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace duet {

namespace fs = std::filesystem;

std::vector<std::string> list_midi_ports() {
    std::vector<std::string> out;
    for (const char* dir : {"/dev/snd", "/dev"}) {
        std::error_code ec;
        for (const auto& entry : fs::directory_iterator(dir, ec)) {
            const auto name = entry.path().filename().string();
            if (name.rfind("midi", 0) == 0) {
                out.push_back(entry.path().string());
            }
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

int open_midi_port(const std::string& path, bool write) {
    const int fd = ::open(path.c_str(), (write ? O_WRONLY : O_RDONLY) | O_CLOEXEC);
    if (fd < 0) {
        const auto ports = list_midi_ports();
        throw DeviceError(fmt::format("cannot open MIDI {} port {}: {}; available ports: {}",
                                      write ? "output" : "input", path, std::strerror(errno),
                                      ports.empty() ? std::string("none") : fmt::format("{}", fmt::join(ports, ", "))));
    }
    return fd;
}

MidiDeviceReader::MidiDeviceReader(const std::string& path, std::function<void(const MidiEvent&)> on_event)
    : fd_(open_midi_port(path, false)), on_event_(std::move(on_event)) {
    thread_ = std::thread([this] {
        WireDecoder decoder;
        std::uint8_t buf[256];
        while (!quit_) {
            pollfd p{fd_, POLLIN, 0};
            const int r = ::poll(&p, 1, 50);
            if (r < 0 && errno != EINTR) {
                spdlog::warn("MIDI input poll failed: {}", std::strerror(errno));
                return;
            }
            if (r <= 0) {
                continue;
            }
            const auto n = ::read(fd_, buf, sizeof buf);
            if (n <= 0) {
                spdlog::warn("MIDI input closed");
                return;
            }
            for (ssize_t i = 0; i < n; ++i) {
                if (auto ev = decoder.feed(buf[i], 0.0)) {
                    on_event_(*ev);
                }
            }
        }
    });
}

MidiDeviceReader::~MidiDeviceReader() {
    stop();
    if (fd_ >= 0) {
        ::close(fd_);
    }
}

void MidiDeviceReader::stop() {
    quit_ = true;
    if (thread_.joinable()) {
        thread_.join();
    }
}

DeviceCalibrationIo::DeviceCalibrationIo(const std::string& out_path, const std::string& in_path, std::string id,
                                         int pitch, int timeout_ms, int channel)
    : out_(open_midi_port(out_path, true)), id_(std::move(id)), pitch_(pitch), timeout_ms_(timeout_ms),
      channel_(channel) {
    try {
        in_ = open_midi_port(in_path, false);
    } catch (...) {
        ::close(out_);
        throw;
    }
}

DeviceCalibrationIo::~DeviceCalibrationIo() {
    ::close(out_);
    ::close(in_);
}

std::optional<double> DeviceCalibrationIo::probe(int velocity) {
    auto send = [&](const MidiEvent& ev) {
        const auto bytes = encode_wire(ev, channel_);
        if (::write(out_, bytes.data(), bytes.size()) != static_cast<ssize_t>(bytes.size())) {
            throw DeviceError(fmt::format("MIDI write failed: {}", std::strerror(errno)));
        }
    };
    WireDecoder decoder;
    const double sent = clock_.now_ms();
    send(MidiEvent::note_on(pitch_, velocity, 0.0));
    std::optional<double> measured;
    std::uint8_t buf[64];
    while (!measured) {
        const double left = sent + timeout_ms_ - clock_.now_ms();
        if (left <= 0.0) {
            break;
        }
        pollfd p{in_, POLLIN, 0};
        if (::poll(&p, 1, static_cast<int>(left) + 1) <= 0) {
            continue;
        }
        const auto n = ::read(in_, buf, sizeof buf);
        const double at = clock_.now_ms();
        for (ssize_t i = 0; i < n; ++i) {
            const auto ev = decoder.feed(buf[i], at);
            if (ev && ev->kind == MidiKind::NoteOn && ev->pitch == pitch_ && !measured) {
                measured = at - sent;
            }
        }
    }
    send(MidiEvent::note_off(pitch_, 0.0));
    clock_.sleep_ms(250.0); // let the key settle before the next probe
    return measured;
}

} // namespace duet

#include "duet/smf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>

#include <spdlog/spdlog.h>

namespace duet {

SmfParseError::SmfParseError(const std::string& what, std::size_t offset)
    : std::runtime_error("smf: " + what + " at byte " + std::to_string(offset)), offset_(offset) {}

namespace {

// ---------------------------------------------------------------------------
// Writing

void put_u16(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

void put_varint(std::vector<std::uint8_t>& out, std::uint32_t v) {
    std::uint8_t buf[5];
    int n = 0;
    buf[n++] = static_cast<std::uint8_t>(v & 0x7F);
    while ((v >>= 7) != 0) {
        buf[n++] = static_cast<std::uint8_t>(0x80 | (v & 0x7F));
    }
    while (n > 0) {
        out.push_back(buf[--n]);
    }
}

struct WriteEvent {
    std::int64_t tick;
    int priority; // offs before controls before ons at one tick
    std::size_t seq;
    std::vector<std::uint8_t> bytes;
};

// ---------------------------------------------------------------------------
// Reading

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t pos() const { return pos_; }
    std::size_t size() const { return bytes_.size(); }
    bool done() const { return pos_ >= bytes_.size(); }

    std::uint8_t u8() {
        if (pos_ >= bytes_.size()) {
            throw SmfParseError("unexpected end of data", pos_);
        }
        return bytes_[pos_++];
    }
    std::uint8_t peek() const {
        if (pos_ >= bytes_.size()) {
            throw SmfParseError("unexpected end of data", pos_);
        }
        return bytes_[pos_];
    }
    std::uint32_t u16() {
        const std::uint32_t hi = u8();
        return (hi << 8) | u8();
    }
    std::uint32_t u32() {
        const std::uint32_t hi = u16();
        return (hi << 16) | u16();
    }
    std::uint32_t varint() {
        const std::size_t start = pos_;
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            const std::uint8_t b = u8();
            v = (v << 7) | (b & 0x7F);
            if (!(b & 0x80)) {
                return v;
            }
        }
        throw SmfParseError("variable-length quantity longer than 4 bytes", start);
    }
    void skip(std::size_t n) {
        if (n > bytes_.size() - pos_) {
            throw SmfParseError("length runs past end of data", pos_);
        }
        pos_ += n;
    }
    std::string tag() {
        std::string s;
        for (int i = 0; i < 4; ++i) {
            s.push_back(static_cast<char>(u8()));
        }
        return s;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

struct RawEvent {
    std::int64_t tick;
    std::size_t track;
    std::size_t order;
    int channel;
    MidiEvent event; // timestamp filled in after tempo mapping
};

struct TempoChange {
    std::int64_t tick;
    double us_per_quarter;
};

struct ParsedFile {
    std::vector<RawEvent> events;
    std::vector<TempoChange> tempos;
    int division = 480;
    bool smpte = false;
    double smpte_ms_per_tick = 0.0;
    std::int64_t last_tick = 0;
};

void parse_track(Reader& rd, std::size_t end, std::size_t track, ParsedFile& file) {
    std::int64_t tick = 0;
    std::uint8_t running = 0;
    std::size_t order = 0;
    while (rd.pos() < end) {
        tick += rd.varint();
        const std::size_t ev_start = rd.pos();
        std::uint8_t status = rd.peek();
        if (status & 0x80) {
            rd.u8();
        } else {
            if (running == 0) {
                throw SmfParseError("data byte without running status", ev_start);
            }
            status = running;
        }

        if (status == 0xFF) {
            const std::uint8_t type = rd.u8();
            const std::uint32_t len = rd.varint();
            if (type == 0x51 && len == 3) {
                const std::uint32_t a = rd.u8();
                const std::uint32_t b = rd.u8();
                const std::uint32_t c = rd.u8();
                file.tempos.push_back({tick, static_cast<double>((a << 16) | (b << 8) | c)});
            } else {
                rd.skip(len);
            }
            running = 0;
            if (type == 0x2F) {
                break;
            }
            continue;
        }
        if (status == 0xF0 || status == 0xF7) {
            rd.skip(rd.varint());
            running = 0;
            continue;
        }
        if (status >= 0xF0) {
            throw SmfParseError("unsupported system message in track", ev_start);
        }

        running = status;
        const int type = status & 0xF0;
        const int channel = status & 0x0F;
        const int needed = (type == 0xC0 || type == 0xD0) ? 1 : 2;
        int data[2] = {0, 0};
        for (int i = 0; i < needed; ++i) {
            const std::size_t at = rd.pos();
            data[i] = rd.u8();
            if (data[i] & 0x80) {
                throw SmfParseError("status byte where data byte expected", at);
            }
        }
        MidiEvent ev;
        switch (type) {
        case 0x80:
            ev = MidiEvent::note_off(data[0], 0.0, data[1]);
            break;
        case 0x90:
            ev = normalized(MidiEvent::note_on(data[0], data[1], 0.0));
            break;
        case 0xB0:
            ev = MidiEvent::control(data[0], data[1], 0.0);
            break;
        default:
            continue;
        }
        file.events.push_back({tick, track, order++, channel, ev});
        file.last_tick = std::max(file.last_tick, tick);
    }
    if (rd.pos() > end) {
        throw SmfParseError("event runs past end of track chunk", end);
    }
    file.last_tick = std::max(file.last_tick, tick);
}

ParsedFile parse(std::span<const std::uint8_t> bytes) {
    Reader rd(bytes);
    if (rd.size() < 14 || rd.tag() != "MThd") {
        throw SmfParseError("missing MThd header", 0);
    }
    const std::uint32_t header_len = rd.u32();
    if (header_len < 6) {
        throw SmfParseError("header chunk too short", 4);
    }
    const std::size_t header_body = rd.pos();
    const std::uint32_t format = rd.u16();
    const std::uint32_t ntracks = rd.u16();
    const std::size_t division_at = rd.pos();
    const std::uint32_t division = rd.u16();
    rd.skip(header_len - 6);
    if (format > 1) {
        throw SmfParseError("unsupported format " + std::to_string(format), header_body);
    }

    ParsedFile file;
    if (division & 0x8000) {
        const int fps = -static_cast<int>(static_cast<std::int8_t>(division >> 8));
        const int tpf = static_cast<int>(division & 0xFF);
        if (fps <= 0 || tpf <= 0) {
            throw SmfParseError("invalid SMPTE division", division_at);
        }
        file.smpte = true;
        file.smpte_ms_per_tick = 1000.0 / (fps * tpf);
    } else {
        if (division == 0) {
            throw SmfParseError("zero ticks per quarter", division_at);
        }
        file.division = static_cast<int>(division);
    }

    std::size_t track = 0;
    while (!rd.done() && track < ntracks) {
        const std::size_t chunk_at = rd.pos();
        const std::string tag = rd.tag();
        const std::uint32_t len = rd.u32();
        if (len > rd.size() - rd.pos()) {
            throw SmfParseError("chunk length exceeds file size", chunk_at);
        }
        const std::size_t end = rd.pos() + len;
        if (tag == "MTrk") {
            parse_track(rd, end, track++, file);
        }
        rd.skip(end - rd.pos());
    }
    if (track < ntracks) {
        throw SmfParseError("file declares " + std::to_string(ntracks) + " tracks but holds " +
                                std::to_string(track),
                            rd.pos());
    }

    std::stable_sort(file.events.begin(), file.events.end(), [](const RawEvent& a, const RawEvent& b) {
        if (a.tick != b.tick) {
            return a.tick < b.tick;
        }
        if (a.track != b.track) {
            return a.track < b.track;
        }
        return a.order < b.order;
    });
    std::stable_sort(file.tempos.begin(), file.tempos.end(),
                     [](const TempoChange& a, const TempoChange& b) { return a.tick < b.tick; });
    return file;
}

// Tick -> ms through the tempo map.
class TempoMap {
public:
    explicit TempoMap(const ParsedFile& file) : file_(file) {
        double ms = 0.0;
        std::int64_t tick = 0;
        double us = 500000.0;
        segments_.push_back({0, 0.0, us});
        for (const auto& t : file.tempos) {
            ms += static_cast<double>(t.tick - tick) * us / (1000.0 * file.division);
            tick = t.tick;
            us = t.us_per_quarter;
            segments_.push_back({tick, ms, us});
        }
    }

    double ms(std::int64_t tick) const {
        if (file_.smpte) {
            return static_cast<double>(tick) * file_.smpte_ms_per_tick;
        }
        auto it = std::upper_bound(segments_.begin(), segments_.end(), tick,
                                   [](std::int64_t t, const Segment& s) { return t < s.tick; });
        const Segment& s = *std::prev(it);
        return s.ms + static_cast<double>(tick - s.tick) * s.us / (1000.0 * file_.division);
    }

private:
    struct Segment {
        std::int64_t tick;
        double ms;
        double us;
    };
    const ParsedFile& file_;
    std::vector<Segment> segments_;
};

} // namespace

std::vector<std::uint8_t> save_smf(const std::vector<Note>& notes, const std::vector<PedalEvent>& pedals,
                                   const std::vector<bool>& generated, const SmfOptions& options) {
    if (generated.size() != notes.size()) {
        throw std::invalid_argument("save_smf: generated flags must parallel notes");
    }
    const double ms_per_tick = options.tempo_us_per_quarter / (1000.0 * options.ticks_per_quarter);
    auto to_tick = [&](double ms) { return static_cast<std::int64_t>(std::llround(ms / ms_per_tick)); };

    std::vector<WriteEvent> events;
    std::size_t seq = 0;
    for (std::size_t i = 0; i < notes.size(); ++i) {
        const Note& n = notes[i];
        if (n.is_open()) {
            throw std::invalid_argument("save_smf: open notes cannot be written");
        }
        const int ch = generated[i] ? options.generated_channel : options.human_channel;
        const std::int64_t on = to_tick(n.onset_ms);
        const std::int64_t off = std::max(on + 1, to_tick(n.end_ms()));
        auto on_bytes = encode_wire(MidiEvent::note_on(n.pitch, n.velocity, 0), ch);
        auto off_bytes = encode_wire(MidiEvent::note_off(n.pitch, 0), ch);
        events.push_back({on, 2, seq++, std::move(on_bytes)});
        events.push_back({off, 0, seq++, std::move(off_bytes)});
    }
    for (const auto& p : pedals) {
        const int cc = p.pedal == Pedal::Sustain ? options.pedals.sustain_controller : options.pedals.soft_controller;
        const int value = p.state == PedalState::On ? 127 : 0;
        events.push_back({to_tick(p.time_ms), 1, seq++, encode_wire(MidiEvent::control(cc, value, 0), options.human_channel)});
    }
    std::sort(events.begin(), events.end(), [](const WriteEvent& a, const WriteEvent& b) {
        if (a.tick != b.tick) {
            return a.tick < b.tick;
        }
        if (a.priority != b.priority) {
            return a.priority < b.priority;
        }
        return a.seq < b.seq;
    });

    std::vector<std::uint8_t> track;
    put_varint(track, 0);
    const auto tempo = static_cast<std::uint32_t>(options.tempo_us_per_quarter);
    track.insert(track.end(), {0xFF, 0x51, 0x03, static_cast<std::uint8_t>(tempo >> 16),
                               static_cast<std::uint8_t>(tempo >> 8), static_cast<std::uint8_t>(tempo)});
    std::int64_t last = 0;
    for (const auto& ev : events) {
        put_varint(track, static_cast<std::uint32_t>(ev.tick - last));
        last = ev.tick;
        track.insert(track.end(), ev.bytes.begin(), ev.bytes.end());
    }
    put_varint(track, 0);
    track.insert(track.end(), {0xFF, 0x2F, 0x00});

    std::vector<std::uint8_t> out = {'M', 'T', 'h', 'd'};
    put_u32(out, 6);
    put_u16(out, 0);
    put_u16(out, 1);
    put_u16(out, static_cast<std::uint32_t>(options.ticks_per_quarter));
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    put_u32(out, static_cast<std::uint32_t>(track.size()));
    out.insert(out.end(), track.begin(), track.end());
    return out;
}

std::vector<SmfTimedEvent> load_smf_events(std::span<const std::uint8_t> bytes) {
    const ParsedFile file = parse(bytes);
    const TempoMap tempo(file);
    std::vector<SmfTimedEvent> out;
    out.reserve(file.events.size());
    for (const auto& raw : file.events) {
        MidiEvent ev = raw.event;
        ev.timestamp_ms = tempo.ms(raw.tick);
        out.push_back({ev, raw.channel});
    }
    return out;
}

SmfPerformance load_smf(std::span<const std::uint8_t> bytes, const SmfOptions& options) {
    const ParsedFile file = parse(bytes);
    const TempoMap tempo(file);

    NoteTracker human(options.pedals);
    NoteTracker ai(options.pedals);
    SmfPerformance perf;
    for (const auto& raw : file.events) {
        MidiEvent ev = raw.event;
        ev.timestamp_ms = tempo.ms(raw.tick);
        if (ev.kind == MidiKind::Control) {
            if (raw.channel != options.generated_channel) {
                human.ingest(ev);
            }
            continue;
        }
        (raw.channel == options.generated_channel ? ai : human).ingest(ev);
    }

    const double end_ms = tempo.ms(file.last_tick);
    for (NoteTracker* tracker : {&human, &ai}) {
        for (const Note& open : tracker->hanging_notes(end_ms)) {
            if (end_ms > open.onset_ms) {
                tracker->close_open(open.pitch, end_ms - open.onset_ms);
                ++perf.hanging_closed;
            }
        }
    }
    if (perf.hanging_closed > 0) {
        spdlog::warn("smf: {} notes without NoteOff closed at end of track", perf.hanging_closed);
    }

    for (const Note& n : human.finalized()) {
        perf.notes.push_back(n);
        perf.generated.push_back(false);
    }
    for (const Note& n : ai.finalized()) {
        perf.notes.push_back(n);
        perf.generated.push_back(true);
    }
    // Co-sort notes with their flags by onset.
    std::vector<std::size_t> idx(perf.notes.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const Note& x = perf.notes[a];
        const Note& y = perf.notes[b];
        if (x.onset_ms != y.onset_ms) {
            return x.onset_ms < y.onset_ms;
        }
        return x.pitch < y.pitch;
    });
    SmfPerformance sorted;
    sorted.hanging_closed = perf.hanging_closed;
    for (std::size_t i : idx) {
        sorted.notes.push_back(perf.notes[i]);
        sorted.generated.push_back(perf.generated[i]);
    }
    sorted.pedals = human.pedal_log();
    return sorted;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path);
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

} // namespace duet

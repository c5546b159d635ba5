#pragma once

#include <atomic>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "duet/calibration.hpp"
#include "duet/clock.hpp"
#include "duet/midi_event.hpp"

namespace duet {

class DeviceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raw MIDI device nodes present on this machine (/dev/snd/midiC*D*, /dev/midi*).
std::vector<std::string> list_midi_ports();

// Throws DeviceError listing the available ports when path cannot be opened.
int open_midi_port(const std::string& path, bool write);

// Reads a raw MIDI byte stream on its own thread and hands decoded channel
// events to the callback (timestamp left at 0; the receiver stamps them).
class MidiDeviceReader {
public:
    MidiDeviceReader(const std::string& path, std::function<void(const MidiEvent&)> on_event);
    ~MidiDeviceReader();

    MidiDeviceReader(const MidiDeviceReader&) = delete;
    MidiDeviceReader& operator=(const MidiDeviceReader&) = delete;

    void stop();

private:
    int fd_ = -1;
    std::atomic<bool> quit_{false};
    std::function<void(const MidiEvent&)> on_event_;
    std::thread thread_;
};

// Calibration against hardware that reports key strikes back as NoteOns on
// its MIDI output (a player piano's record function).
class DeviceCalibrationIo : public CalibrationIo {
public:
    DeviceCalibrationIo(const std::string& out_path, const std::string& in_path, std::string id, int pitch = 60,
                        int timeout_ms = 1000, int channel = 0);
    ~DeviceCalibrationIo() override;

    std::optional<double> probe(int velocity) override;
    std::string instrument_id() const override { return id_; }

private:
    int out_ = -1;
    int in_ = -1;
    std::string id_;
    int pitch_;
    int timeout_ms_;
    int channel_;
    SteadyClock clock_;
};

} // namespace duet

#pragma once

#include <algorithm>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "semdeg/errors.hpp"
#include "semdeg/text.hpp"

namespace semdeg::linectl {

class IllegalTransition : public Error {
public:
    using Error::Error;
};
class BudgetExhausted : public Error {
public:
    using Error::Error;
};

/// Exact rational arithmetic for rates and accumulators, so long property
/// runs stay byte-for-byte deterministic.
struct Rational {
    long long num = 0;
    long long den = 1;

    Rational() = default;
    Rational(long long n, long long d = 1) : num(n), den(d) {
        if (den == 0) throw Error("rational with zero denominator");
        if (den < 0) {
            num = -num;
            den = -den;
        }
        long long g = std::gcd(num < 0 ? -num : num, den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
    }

    Rational operator+(Rational o) const { return {num * o.den + o.num * den, den * o.den}; }
    Rational operator-(Rational o) const { return {num * o.den - o.num * den, den * o.den}; }
    Rational operator*(Rational o) const { return {num * o.num, den * o.den}; }
    bool operator==(const Rational& o) const { return num == o.num && den == o.den; }
    bool operator<(Rational o) const { return num * o.den < o.num * den; }
    bool operator>=(Rational o) const { return !(*this < o); }

    std::string str() const {
        return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den);
    }

    static Rational parse(std::string_view s, const std::string& source, std::size_t line) {
        auto parts = text::split(s, '/');
        if (parts.size() == 1) return {text::parse_int(parts[0], source, line), 1};
        if (parts.size() == 2)
            return {text::parse_int(parts[0], source, line), text::parse_int(parts[1], source, line)};
        throw ParseError(source, line, "bad rational '" + std::string(s) + "'");
    }
};

enum class MachineState { Idle, Starting, Producing, Suspended, Aborted, Resetting };
enum class LineEvent { ResourceOut, ResourceIn, Fault, ResetCmd, StartCmd };

/// Why a machine sits in Suspended: an external resource outage (needs
/// ResourceIn) or a flow condition it clears on its own.
enum class SuspendReason { None, External, DownstreamFull, UpstreamEmpty };

inline std::string to_string(MachineState s) {
    switch (s) {
        case MachineState::Idle: return "Idle";
        case MachineState::Starting: return "Starting";
        case MachineState::Producing: return "Producing";
        case MachineState::Suspended: return "Suspended";
        case MachineState::Aborted: return "Aborted";
        case MachineState::Resetting: return "Resetting";
    }
    return "?";
}

inline std::string to_string(LineEvent e) {
    switch (e) {
        case LineEvent::ResourceOut: return "ResourceOut";
        case LineEvent::ResourceIn: return "ResourceIn";
        case LineEvent::Fault: return "Fault";
        case LineEvent::ResetCmd: return "ResetCmd";
        case LineEvent::StartCmd: return "StartCmd";
    }
    return "?";
}

inline std::string to_string(SuspendReason r) {
    switch (r) {
        case SuspendReason::None: return "None";
        case SuspendReason::External: return "External";
        case SuspendReason::DownstreamFull: return "DownstreamFull";
        case SuspendReason::UpstreamEmpty: return "UpstreamEmpty";
    }
    return "?";
}

inline std::optional<LineEvent> parse_event(std::string_view s) {
    if (s == "ResourceOut") return LineEvent::ResourceOut;
    if (s == "ResourceIn") return LineEvent::ResourceIn;
    if (s == "Fault") return LineEvent::Fault;
    if (s == "ResetCmd") return LineEvent::ResetCmd;
    if (s == "StartCmd") return LineEvent::StartCmd;
    return std::nullopt;
}

inline std::optional<MachineState> parse_state(std::string_view s) {
    for (MachineState st : {MachineState::Idle, MachineState::Starting, MachineState::Producing,
                            MachineState::Suspended, MachineState::Aborted, MachineState::Resetting})
        if (to_string(st) == s) return st;
    return std::nullopt;
}

struct MachineAutomaton {
    std::string id;
    MachineState state = MachineState::Producing;
    Rational base_rate{1, 1};      // items per tick at full speed, <= 1
    Rational accumulator{0, 1};    // progress toward the next item, in [0,1)
    SuspendReason suspend_reason = SuspendReason::None;
    long long emitted = 0;   // items pushed downstream since tick 0
    long long consumed = 0;  // items pulled from upstream since tick 0
};

struct Buffer {
    std::string id;
    std::string upstream;
    std::string downstream;
    int capacity = 0;
    int count = 0;
};

struct LogEntry {
    long long tick;
    std::string machine;
    std::string event;

    bool operator==(const LogEntry&) const = default;
};

struct ScheduledEvent {
    long long tick;
    std::string machine;
    LineEvent event;
};

/// A chain of machine automata joined by bounded buffers, stepped by an
/// integer tick clock. Per tick, machines are processed tail to head so a
/// slot freed downstream is usable upstream within the same tick.
class LineModel {
public:
    /// machines in line order; buffers[i] sits between machines[i] and machines[i+1].
    LineModel(std::vector<MachineAutomaton> machines, std::vector<Buffer> buffers)
        : machines_(std::move(machines)), buffers_(std::move(buffers)) {
        if (!machines_.empty() && buffers_.size() != machines_.size() - 1)
            throw Error("a chain of n machines needs n-1 buffers");
        for (std::size_t i = 0; i < buffers_.size(); ++i) {
            if (buffers_[i].upstream != machines_[i].id || buffers_[i].downstream != machines_[i + 1].id)
                throw Error("buffer " + buffers_[i].id + " does not connect adjacent machines");
            if (buffers_[i].count < 0 || buffers_[i].count > buffers_[i].capacity)
                throw Error("buffer " + buffers_[i].id + " count outside [0, capacity]");
        }
    }

    long long tick() const { return tick_; }
    const std::vector<MachineAutomaton>& machines() const { return machines_; }
    const std::vector<Buffer>& buffers() const { return buffers_; }
    const std::vector<LogEntry>& event_log() const { return log_; }

    const MachineAutomaton& machine(const std::string& id) const { return machines_[index_of(id)]; }

    /// Externally triggered transition. Only the declared edges are legal:
    /// Producing -ResourceOut-> Suspended, Suspended -ResourceIn-> Producing,
    /// any -Fault-> Aborted, Aborted -ResetCmd-> Resetting,
    /// Idle -StartCmd-> Starting. Resetting and Starting advance on the next
    /// tick.
    void fire_event(const std::string& id, LineEvent event) {
        MachineAutomaton& m = machines_[index_of(id)];
        switch (event) {
            case LineEvent::ResourceOut:
                if (m.state != MachineState::Producing) illegal(m, event);
                set_state(m, MachineState::Suspended, SuspendReason::External);
                return;
            case LineEvent::ResourceIn:
                if (m.state != MachineState::Suspended) illegal(m, event);
                set_state(m, MachineState::Producing, SuspendReason::None);
                return;
            case LineEvent::Fault:
                // A fault scraps any in-progress item.
                m.accumulator = Rational{0};
                set_state(m, MachineState::Aborted, SuspendReason::None);
                return;
            case LineEvent::ResetCmd:
                if (m.state != MachineState::Aborted) illegal(m, event);
                set_state(m, MachineState::Resetting, SuspendReason::None);
                return;
            case LineEvent::StartCmd:
                if (m.state != MachineState::Idle) illegal(m, event);
                set_state(m, MachineState::Starting, SuspendReason::None);
                return;
        }
    }

    /// Downstream free share for interior machines; machines at either end of
    /// the line run at full speed (the ends pace the line, blocking already
    /// bounds them).
    Rational speed_fraction(const std::string& id) const { return speed_fraction(index_of(id)); }

    /// Advances the clock one tick. Starting and Resetting machines complete
    /// their transition (and do no work this tick); Producing machines accrue
    /// base_rate * speed_fraction and transfer one item when the accumulator
    /// crosses 1. A machine that cannot transfer - empty upstream or full
    /// downstream - self-suspends with the reason recorded, and a machine
    /// whose emit fills its downstream buffer suspends proactively. Self-
    /// suspended machines resume on their own once the condition clears;
    /// externally suspended ones wait for ResourceIn.
    void step() {
        ++tick_;
        for (std::size_t ri = machines_.size(); ri-- > 0;) {
            MachineAutomaton& m = machines_[ri];
            Buffer* up = ri > 0 ? &buffers_[ri - 1] : nullptr;
            Buffer* down = ri < buffers_.size() ? &buffers_[ri] : nullptr;
            switch (m.state) {
                case MachineState::Starting:
                    set_state(m, MachineState::Producing, SuspendReason::None);
                    continue;
                case MachineState::Resetting:
                    set_state(m, MachineState::Idle, SuspendReason::None);
                    continue;
                case MachineState::Suspended:
                    if (m.suspend_reason == SuspendReason::DownstreamFull && down &&
                        down->count < down->capacity)
                        set_state(m, MachineState::Producing, SuspendReason::None);
                    else if (m.suspend_reason == SuspendReason::UpstreamEmpty && up && up->count > 0)
                        set_state(m, MachineState::Producing, SuspendReason::None);
                    else
                        continue;
                    break;  // resumed; produce this tick
                case MachineState::Producing:
                    break;
                case MachineState::Idle:
                case MachineState::Aborted:
                    continue;
            }
            const Rational next = m.accumulator + m.base_rate * speed_fraction(ri);
            if (next < Rational{1}) {
                m.accumulator = next;
                continue;
            }
            // One item is due. The accrual that crossed 1 is only banked if
            // the transfer goes through; a stalled tick does no work.
            if (up && up->count == 0) {
                set_state(m, MachineState::Suspended, SuspendReason::UpstreamEmpty);
                continue;
            }
            if (down && down->count == down->capacity) {
                set_state(m, MachineState::Suspended, SuspendReason::DownstreamFull);
                continue;
            }
            if (up) --up->count;
            ++m.consumed;
            m.accumulator = next - Rational{1};
            ++m.emitted;
            if (down) {
                ++down->count;
                if (down->count == down->capacity)
                    set_state(m, MachineState::Suspended, SuspendReason::DownstreamFull);
            }
        }
    }

    /// Steps until the predicate holds (checked before each step) or throws
    /// BudgetExhausted after max_ticks additional steps.
    long long run_until(const std::function<bool(const LineModel&)>& predicate, long long max_ticks) {
        if (max_ticks <= 0) throw Error("run_until needs a positive tick budget");
        for (long long i = 0; i <= max_ticks; ++i) {
            if (predicate(*this)) return i;
            if (i == max_ticks) break;
            step();
        }
        throw BudgetExhausted("predicate not satisfied within " + std::to_string(max_ticks) + " ticks");
    }

    /// One row per machine for the current tick:
    /// tick <tab> machine <tab> state <tab> downstream-buffer count/capacity (or -).
    std::string trace_rows() const {
        std::string out;
        for (std::size_t i = 0; i < machines_.size(); ++i) {
            const MachineAutomaton& m = machines_[i];
            std::string buf = "-";
            if (i < buffers_.size())
                buf = std::to_string(buffers_[i].count) + "/" + std::to_string(buffers_[i].capacity);
            out += std::to_string(tick_) + "\t" + m.id + "\t" + to_string(m.state) + "\t" + buf + "\n";
        }
        return out;
    }

    /// Place invariant: everything machine k ever emitted is either still in
    /// buffer k or was consumed by machine k+1.
    bool tokens_conserved() const {
        for (std::size_t i = 0; i < buffers_.size(); ++i)
            if (machines_[i].emitted != machines_[i + 1].consumed + buffers_[i].count) return false;
        return true;
    }

    /// Config records: MACHINE id rate [state] and BUFFER id upstream
    /// downstream capacity [count], in line order.
    static LineModel load(const std::filesystem::path& path) {
        std::vector<MachineAutomaton> machines;
        std::vector<Buffer> buffers;
        const std::string source = path.string();
        text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
            if (f[0] == "MACHINE") {
                if (f.size() != 3 && f.size() != 4)
                    throw ParseError(source, line, "expected MACHINE id rate [state]");
                MachineAutomaton m;
                m.id = f[1];
                m.base_rate = Rational::parse(f[2], source, line);
                if (f.size() == 4) {
                    auto st = parse_state(f[3]);
                    if (!st) throw ParseError(source, line, "unknown state '" + f[3] + "'");
                    m.state = *st;
                }
                machines.push_back(std::move(m));
            } else if (f[0] == "BUFFER") {
                if (f.size() != 5 && f.size() != 6)
                    throw ParseError(source, line, "expected BUFFER id upstream downstream capacity [count]");
                Buffer b;
                b.id = f[1];
                b.upstream = f[2];
                b.downstream = f[3];
                b.capacity = static_cast<int>(text::parse_int(f[4], source, line));
                if (f.size() == 6) b.count = static_cast<int>(text::parse_int(f[5], source, line));
                buffers.push_back(std::move(b));
            } else {
                throw ParseError(source, line, "unknown record kind '" + f[0] + "'");
            }
        });
        return LineModel(std::move(machines), std::move(buffers));
    }

private:
    Rational speed_fraction(std::size_t index) const {
        if (index == 0 || index >= buffers_.size()) return Rational{1};
        const Buffer& down = buffers_[index];
        return Rational{down.capacity - down.count, down.capacity};
    }

    std::size_t index_of(const std::string& id) const {
        for (std::size_t i = 0; i < machines_.size(); ++i)
            if (machines_[i].id == id) return i;
        throw Error("no such machine: " + id);
    }

    void set_state(MachineAutomaton& m, MachineState next, SuspendReason reason) {
        std::string entry = to_string(m.state) + "->" + to_string(next);
        if (reason == SuspendReason::DownstreamFull || reason == SuspendReason::UpstreamEmpty)
            entry += " (" + to_string(reason) + ")";
        m.state = next;
        m.suspend_reason = reason;
        log_.push_back({tick_, m.id, entry});
        broadcast(m.id, next);
    }

    /// State changes are announced to the immediate neighbours; the
    /// observation lands in the event log on the neighbour's name.
    void broadcast(const std::string& id, MachineState next) {
        const std::size_t i = index_of(id);
        if (i > 0)
            log_.push_back({tick_, machines_[i - 1].id, "observes " + id + "->" + to_string(next)});
        if (i + 1 < machines_.size())
            log_.push_back({tick_, machines_[i + 1].id, "observes " + id + "->" + to_string(next)});
    }

    [[noreturn]] void illegal(const MachineAutomaton& m, LineEvent event) const {
        throw IllegalTransition("event " + to_string(event) + " not legal for " + m.id + " in state " +
                                to_string(m.state));
    }

    std::vector<MachineAutomaton> machines_;
    std::vector<Buffer> buffers_;
    long long tick_ = 0;
    std::vector<LogEntry> log_;
};

/// Schedule records: tick <tab> machine <tab> event.
inline std::vector<ScheduledEvent> load_schedule(const std::filesystem::path& path) {
    std::vector<ScheduledEvent> schedule;
    const std::string source = path.string();
    text::for_each_record(path, [&](std::size_t line, const std::vector<std::string>& f) {
        if (f.size() != 3) throw ParseError(source, line, "expected tick machine event");
        auto event = parse_event(f[2]);
        if (!event) throw ParseError(source, line, "unknown event '" + f[2] + "'");
        schedule.push_back({text::parse_int(f[0], source, line), f[1], *event});
    });
    std::stable_sort(schedule.begin(), schedule.end(),
                     [](const ScheduledEvent& a, const ScheduledEvent& b) { return a.tick < b.tick; });
    return schedule;
}

/// Fires due events at each tick, steps, and collects trace rows (including
/// a row block for the initial tick after its events fired).
inline std::string run_schedule(LineModel& line, const std::vector<ScheduledEvent>& schedule,
                                long long until_tick) {
    std::size_t next = 0;
    std::string trace;
    auto fire_due = [&]() {
        while (next < schedule.size() && schedule[next].tick == line.tick()) {
            line.fire_event(schedule[next].machine, schedule[next].event);
            ++next;
        }
    };
    fire_due();
    trace += line.trace_rows();
    while (line.tick() < until_tick) {
        line.step();
        fire_due();
        trace += line.trace_rows();
    }
    return trace;
}

}  // namespace semdeg::linectl

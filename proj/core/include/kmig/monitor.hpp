#pragma once

#include "kmig/guest.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace kmig {

enum class AttributionClass : std::uint8_t { MonitoredObject, OtherObject, ProtectedAreaBookkeeping, Unknown };

const char* to_string(AttributionClass c);

struct Attribution {
    AttributionClass cls = AttributionClass::Unknown;
    std::optional<ObjectRef> object;
    bool operator==(const Attribution&) const = default;
};

struct MonitorEvent {
    std::uint64_t seq = 0;
    std::uint64_t page = 0;
    std::uint16_t offset = 0;
    AccessKind kind = AccessKind::Read;
    Pid pid = 0;
    Attribution attributed;

    GuestAddress address() const { return page_address(page) + offset; }
    bool operator==(const MonitorEvent&) const = default;
};

enum class PolicyAction : std::uint8_t { Log, Alert };

// One action per (access kind, attribution class).
class Policy {
public:
    // Alerts on writes to monitored objects, logs the rest.
    Policy();
    PolicyAction action(AccessKind kind, AttributionClass cls) const;
    void set(AccessKind kind, AttributionClass cls, PolicyAction action);

private:
    std::array<std::array<PolicyAction, 4>, 2> table_{};
};

struct EventCounts {
    std::uint64_t total = 0;
    std::uint64_t alerts = 0;
    std::map<AccessKind, std::uint64_t> by_kind;
    std::map<AttributionClass, std::uint64_t> by_class;
    std::map<std::uint64_t, std::uint64_t> by_page;

    std::uint64_t monitored() const;
    // Everything that did not hit a monitored object.
    std::uint64_t false_triggers() const { return total - monitored(); }
    bool operator==(const EventCounts&) const = default;
};

// EPT-style page monitor. Attribution looks at the guest state it was
// built with, so that state must outlive the monitor and stay in place.
class PageMonitor {
public:
    PageMonitor(const GuestState& state, Policy policy = {});
    PageMonitor(const PageMonitor&) = delete;
    PageMonitor& operator=(const PageMonitor&) = delete;

    // Installs (removes) this monitor as the image's trap handler.
    void attach(MemoryImage& image);
    void detach(MemoryImage& image);

    // Sets trap flags; flags already set stay set.
    void register_watch(MemoryImage& image, const std::set<std::uint64_t>& pages, bool read, bool write);
    void unregister_watch(MemoryImage& image, const std::set<std::uint64_t>& pages);

    void set_monitored(std::set<GuestAddress> objects) { monitored_ = std::move(objects); }
    const std::set<GuestAddress>& monitored() const { return monitored_; }

    Attribution attribute(GuestAddress addr) const;

    const std::vector<MonitorEvent>& events() const { return events_; }
    const EventCounts& counts() const { return counts_; }
    void reset();

    std::string export_jsonl() const;
    std::vector<std::uint8_t> export_binary() const;

private:
    void on_trap(const TrapNotice& notice);

    const GuestState* state_;
    Policy policy_;
    std::set<GuestAddress> monitored_;
    std::vector<MonitorEvent> events_;
    EventCounts counts_;
    std::uint64_t next_seq_ = 0;
};

inline constexpr std::size_t kTraceRecordSize = 19;

struct TraceRecord {
    std::uint64_t seq = 0;
    std::uint32_t page = 0;
    std::uint16_t offset = 0;
    AccessKind kind = AccessKind::Read;
    std::uint32_t pid = 0;
    bool operator==(const TraceRecord&) const = default;
};

std::vector<TraceRecord> parse_binary_trace(std::span<const std::uint8_t> bytes);

} // namespace kmig

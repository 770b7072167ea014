#include "kmig/monitor.hpp"

#include "kmig/error.hpp"

#include <json.hpp>

namespace kmig {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i)));
    }
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t at) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        v |= std::uint64_t{in[at + i]} << (8 * i);
    }
    return static_cast<T>(v);
}

} // namespace

const char* to_string(AttributionClass c) {
    switch (c) {
    case AttributionClass::MonitoredObject: return "monitored";
    case AttributionClass::OtherObject: return "other-object";
    case AttributionClass::ProtectedAreaBookkeeping: return "protected-area";
    case AttributionClass::Unknown: return "unknown";
    }
    return "?";
}

Policy::Policy() {
    for (auto& row : table_) {
        row.fill(PolicyAction::Log);
    }
    set(AccessKind::Write, AttributionClass::MonitoredObject, PolicyAction::Alert);
}

PolicyAction Policy::action(AccessKind kind, AttributionClass cls) const {
    return table_[static_cast<std::size_t>(kind)][static_cast<std::size_t>(cls)];
}

void Policy::set(AccessKind kind, AttributionClass cls, PolicyAction action) {
    table_[static_cast<std::size_t>(kind)][static_cast<std::size_t>(cls)] = action;
}

std::uint64_t EventCounts::monitored() const {
    auto it = by_class.find(AttributionClass::MonitoredObject);
    return it == by_class.end() ? 0 : it->second;
}

PageMonitor::PageMonitor(const GuestState& state, Policy policy) : state_(&state), policy_(policy) {}

void PageMonitor::attach(MemoryImage& image) {
    image.set_trap_handler([this](const TrapNotice& n) { on_trap(n); });
}

void PageMonitor::detach(MemoryImage& image) { image.set_trap_handler(nullptr); }

void PageMonitor::register_watch(MemoryImage& image, const std::set<std::uint64_t>& pages, bool read, bool write) {
    for (auto p : pages) {
        if (p >= image.page_count()) {
            throw RangeError("page " + std::to_string(p) + " is outside the image");
        }
    }
    for (auto p : pages) {
        PageFlags f = image.flags(p);
        f.trap_read = f.trap_read || read;
        f.trap_write = f.trap_write || write;
        image.set_flags(p, f);
    }
}

void PageMonitor::unregister_watch(MemoryImage& image, const std::set<std::uint64_t>& pages) {
    for (auto p : pages) {
        if (p < image.page_count()) {
            image.set_flags(p, PageFlags{});
        }
    }
}

Attribution PageMonitor::attribute(GuestAddress addr) const {
    if (auto obj = state_->object_at(addr)) {
        const auto cls = monitored_.contains(obj->addr) ? AttributionClass::MonitoredObject : AttributionClass::OtherObject;
        return {cls, obj};
    }
    if (state_->protected_area_containing(addr)) {
        return {AttributionClass::ProtectedAreaBookkeeping, std::nullopt};
    }
    return {AttributionClass::Unknown, std::nullopt};
}

void PageMonitor::on_trap(const TrapNotice& n) {
    MonitorEvent ev{next_seq_++, n.page, n.offset, n.kind, n.pid, {}};
    ev.attributed = attribute(ev.address());
    ++counts_.total;
    ++counts_.by_kind[ev.kind];
    ++counts_.by_class[ev.attributed.cls];
    ++counts_.by_page[ev.page];
    if (policy_.action(ev.kind, ev.attributed.cls) == PolicyAction::Alert) {
        ++counts_.alerts;
    }
    events_.push_back(ev);
}

void PageMonitor::reset() {
    events_.clear();
    counts_ = EventCounts{};
}

std::string PageMonitor::export_jsonl() const {
    std::string out;
    for (const auto& e : events_) {
        nlohmann::json j{{"seq", e.seq},
                         {"page", e.page},
                         {"offset", e.offset},
                         {"kind", to_string(e.kind)},
                         {"pid", e.pid},
                         {"class", to_string(e.attributed.cls)},
                         {"action", policy_.action(e.kind, e.attributed.cls) == PolicyAction::Alert ? "alert" : "log"}};
        if (e.attributed.object) {
            j["object"] = {{"kind", to_string(e.attributed.object->kind)}, {"addr", to_hex(e.attributed.object->addr)}};
        }
        out += j.dump();
        out += '\n';
    }
    return out;
}

std::vector<std::uint8_t> PageMonitor::export_binary() const {
    std::vector<std::uint8_t> out;
    out.reserve(events_.size() * kTraceRecordSize);
    for (const auto& e : events_) {
        put_le<std::uint64_t>(out, e.seq);
        put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.page));
        put_le<std::uint16_t>(out, e.offset);
        put_le<std::uint8_t>(out, static_cast<std::uint8_t>(e.kind));
        put_le<std::uint32_t>(out, e.pid);
    }
    return out;
}

std::vector<TraceRecord> parse_binary_trace(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % kTraceRecordSize != 0) {
        throw RangeError("trace length " + std::to_string(bytes.size()) + " is not a whole number of records");
    }
    std::vector<TraceRecord> out;
    for (std::size_t at = 0; at < bytes.size(); at += kTraceRecordSize) {
        const auto kind = get_le<std::uint8_t>(bytes, at + 14);
        if (kind > 1) {
            throw RangeError("bad access kind in trace record");
        }
        out.push_back(TraceRecord{get_le<std::uint64_t>(bytes, at), get_le<std::uint32_t>(bytes, at + 8),
                                  get_le<std::uint16_t>(bytes, at + 12), static_cast<AccessKind>(kind),
                                  get_le<std::uint32_t>(bytes, at + 15)});
    }
    return out;
}

} // namespace kmig

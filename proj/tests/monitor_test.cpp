#include "support.hpp"

#include "kmig/error.hpp"
#include "kmig/injector.hpp"
#include "kmig/migration.hpp"
#include "kmig/monitor.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <sstream>

using namespace kmig;
using kmig::testing::Gen;

namespace {

Region make_area(Vm& vm, std::uint64_t pages) {
    SyscallInjector inj;
    ScriptedProcess trigger(vm.state.processes.begin()->first, {ReadReq{0, 1}});
    const std::uint64_t len = pages * kPageSize;
    return Region{inj.allocate_protected_area(vm, trigger, len), len};
}

// Linear search over the object registry.
std::optional<GuestAddress> owner_by_search(const GuestState& s, GuestAddress a) {
    for (const auto& [start, rec] : s.objects) {
        if (a.value >= start && a.value < start + rec.size) {
            return GuestAddress{start};
        }
    }
    return std::nullopt;
}

} // namespace

TEST(Monitor, RegisterAndUnregister) {
    Vm vm = build_guest(BuildSpec{.num_files = 10});
    PageMonitor mon(vm.state);
    mon.register_watch(vm.image, {5}, false, true);
    EXPECT_EQ(vm.image.flags(5), (PageFlags{false, true}));
    mon.register_watch(vm.image, {5}, true, false);
    EXPECT_EQ(vm.image.flags(5), (PageFlags{true, true}));
    mon.unregister_watch(vm.image, {5});
    EXPECT_EQ(vm.image.flags(5), PageFlags{});
    EXPECT_THROW(mon.register_watch(vm.image, {vm.image.page_count()}, true, true), RangeError);
    EXPECT_EQ(vm.image.flags(5), PageFlags{});
}

TEST(Monitor, WatchedPageEventsAndUnwatchedSilence) {
    Vm vm = build_guest(BuildSpec{.num_files = 10});
    PageMonitor mon(vm.state);
    mon.attach(vm.image);
    const GuestAddress d = *vm.state.dentry_for("file_0001.txt");
    const std::uint64_t page = d.page();
    mon.set_monitored({d});
    mon.register_watch(vm.image, {page}, true, true);
    ASSERT_TRUE(vm.syscall(1, OpenReq{"file_0001.txt"}).ok());
    ASSERT_FALSE(mon.events().empty());
    for (const auto& e : mon.events()) {
        EXPECT_EQ(e.page, page);
        EXPECT_EQ(e.pid, 1u);
    }
    const auto n = mon.events().size();
    mon.unregister_watch(vm.image, {page});
    vm.syscall(1, OpenReq{"file_0001.txt"});
    EXPECT_EQ(mon.events().size(), n);
}

TEST(Monitor, Attribution) {
    Vm vm = build_guest(BuildSpec{.num_files = 64});
    const GuestAddress a = *vm.state.dentry_for("file_0001.txt");
    const GuestAddress b = *vm.state.dentry_for("file_0002.txt");
    PageMonitor mon(vm.state);
    mon.set_monitored({a});
    EXPECT_EQ(mon.attribute(a + 8).cls, AttributionClass::MonitoredObject);
    EXPECT_EQ(mon.attribute(a + 8).object->addr, a);
    EXPECT_EQ(mon.attribute(b).cls, AttributionClass::OtherObject);
    EXPECT_EQ(mon.attribute(GuestAddress{0x3000}).cls, AttributionClass::Unknown);

    const Region area = make_area(vm, 1);
    migrate_dentry(vm.image, vm.state, a, area.start);
    mon.set_monitored({area.start});
    EXPECT_EQ(mon.attribute(area.start + 16).cls, AttributionClass::MonitoredObject);
    EXPECT_EQ(mon.attribute(area.start + 200).cls, AttributionClass::ProtectedAreaBookkeeping);
    EXPECT_FALSE(mon.attribute(area.start + 200).object);
}

TEST(Monitor, CountsMatchLogAndFalseTriggers) {
    Vm vm = build_guest(BuildSpec{.num_files = 64, .seed = 9});
    PageMonitor mon(vm.state);
    mon.attach(vm.image);
    const GuestAddress d = *vm.state.dentry_for("file_0003.txt");
    mon.set_monitored({d});
    mon.register_watch(vm.image, {d.page()}, true, true);
    for (int i = 1; i <= 30; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "file_%04d.txt", i);
        vm.syscall(1, OpenReq{name});
    }
    const auto& c = mon.counts();
    EXPECT_EQ(c.total, mon.events().size());
    std::uint64_t monitored = 0;
    for (const auto& e : mon.events()) {
        monitored += e.attributed.cls == AttributionClass::MonitoredObject;
    }
    EXPECT_EQ(c.monitored(), monitored);
    EXPECT_EQ(c.false_triggers(), c.total - monitored);
    EXPECT_GT(c.false_triggers(), 0u);
    EXPECT_GT(monitored, 0u);
    mon.reset();
    EXPECT_EQ(mon.counts(), EventCounts{});
    EXPECT_TRUE(mon.events().empty());
}

TEST(Monitor, DefaultPolicyAlertsOnMonitoredWrites) {
    Policy p;
    EXPECT_EQ(p.action(AccessKind::Write, AttributionClass::MonitoredObject), PolicyAction::Alert);
    EXPECT_EQ(p.action(AccessKind::Read, AttributionClass::MonitoredObject), PolicyAction::Log);
    EXPECT_EQ(p.action(AccessKind::Write, AttributionClass::OtherObject), PolicyAction::Log);
    EXPECT_EQ(p.action(AccessKind::Write, AttributionClass::Unknown), PolicyAction::Log);
    p.set(AccessKind::Read, AttributionClass::Unknown, PolicyAction::Alert);
    EXPECT_EQ(p.action(AccessKind::Read, AttributionClass::Unknown), PolicyAction::Alert);
}

TEST(Monitor, AlertCountFollowsPolicy) {
    Vm vm = build_guest(BuildSpec{.num_files = 10});
    PageMonitor mon(vm.state);
    mon.attach(vm.image);
    const GuestAddress d = *vm.state.dentry_for("file_0001.txt");
    mon.set_monitored({d});
    mon.register_watch(vm.image, {d.page()}, true, true);
    vm.syscall(1, OpenReq{"file_0001.txt"});
    std::uint64_t writes = 0;
    for (const auto& e : mon.events()) {
        writes += e.kind == AccessKind::Write && e.attributed.cls == AttributionClass::MonitoredObject;
    }
    EXPECT_EQ(mon.counts().alerts, writes);
    EXPECT_GT(writes, 0u);
}

TEST(Monitor, JsonlExport) {
    Vm vm = build_guest(BuildSpec{.num_files = 10});
    PageMonitor mon(vm.state);
    mon.attach(vm.image);
    const GuestAddress d = *vm.state.dentry_for("file_0001.txt");
    mon.set_monitored({d});
    mon.register_watch(vm.image, {d.page()}, true, true);
    vm.syscall(1, OpenReq{"file_0001.txt"});
    std::istringstream in(mon.export_jsonl());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        const auto& e = mon.events()[n];
        EXPECT_EQ(j.at("seq"), e.seq);
        EXPECT_EQ(j.at("page"), e.page);
        EXPECT_EQ(j.at("kind"), to_string(e.kind));
        EXPECT_EQ(j.at("class"), to_string(e.attributed.cls));
        ++n;
    }
    EXPECT_EQ(n, mon.events().size());
}

TEST(Monitor, BinaryTraceLayout) {
    Vm vm = build_guest(BuildSpec{.num_files = 10, .num_processes = 2});
    PageMonitor mon(vm.state);
    mon.attach(vm.image);
    const GuestAddress d = *vm.state.dentry_for("file_0001.txt");
    mon.register_watch(vm.image, {d.page()}, true, true);
    vm.syscall(2, OpenReq{"file_0001.txt"});
    const auto bytes = mon.export_binary();
    ASSERT_EQ(bytes.size(), mon.events().size() * 19);
    // hand decode: seq u64, page u32, offset u16, kind u8, pid u32, little endian
    auto le = [&](std::size_t at, int n) {
        std::uint64_t v = 0;
        for (int i = n - 1; i >= 0; --i) {
            v = (v << 8) | bytes[at + static_cast<std::size_t>(i)];
        }
        return v;
    };
    const auto parsed = parse_binary_trace(bytes);
    ASSERT_EQ(parsed.size(), mon.events().size());
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        const auto& e = mon.events()[i];
        const std::size_t at = i * 19;
        EXPECT_EQ(le(at, 8), e.seq);
        EXPECT_EQ(le(at + 8, 4), e.page);
        EXPECT_EQ(le(at + 12, 2), e.offset);
        EXPECT_EQ(le(at + 14, 1), static_cast<std::uint64_t>(e.kind));
        EXPECT_EQ(le(at + 15, 4), 2u);
        EXPECT_EQ(parsed[i], (TraceRecord{e.seq, static_cast<std::uint32_t>(e.page), e.offset, e.kind, e.pid}));
    }
    EXPECT_THROW(parse_binary_trace(std::span<const std::uint8_t>(bytes.data(), 18)), RangeError);
    auto corrupt = bytes;
    corrupt[14] = 7;
    EXPECT_THROW(parse_binary_trace(corrupt), RangeError);
}

// The event log equals an offline replay of the access trace against the
// watch set, and the counters agree with the log.
TEST(MonitorProperty, LogMatchesReplayAndCounters) {
    Gen g(61);
    for (int round = 0; round < 60; ++round) {
        Vm vm = build_guest(kmig::testing::random_build(g));
        PageMonitor mon(vm.state);
        mon.attach(vm.image);
        AccessTrace trace;
        vm.image.set_access_tracer([&](const AccessRecord& r) { trace.push_back(r); });
        const auto dentries = vm.state.objects_of(ObjectKind::Dentry);
        std::set<GuestAddress> monitored;
        std::set<std::uint64_t> pages;
        for (std::uint64_t i = 0, n = g.between(1, 8); i < n; ++i) {
            const GuestAddress d = g.pick(dentries);
            monitored.insert(d);
            pages.insert(d.page());
        }
        if (g.coin(0.3)) {
            pages.insert(vm.state.layout.globals.page());
        }
        const bool r = g.coin(0.8);
        const bool w = !r || g.coin(0.8);
        mon.set_monitored(monitored);
        mon.register_watch(vm.image, pages, r, w);
        kmig::testing::churn(vm, g, 60);

        std::vector<std::tuple<std::uint64_t, AccessKind, Pid>> expect;
        for (const auto& a : trace) {
            for (auto p = a.addr.page(); p <= (a.addr + (a.length - 1)).page(); ++p) {
                if (pages.contains(p) && (a.kind == AccessKind::Read ? r : w)) {
                    expect.emplace_back(p, a.kind, a.pid);
                }
            }
        }
        ASSERT_EQ(mon.events().size(), expect.size()) << "round " << round;
        EventCounts recount;
        for (std::size_t i = 0; i < expect.size(); ++i) {
            const auto& e = mon.events()[i];
            EXPECT_EQ(e.seq, i);
            EXPECT_EQ(std::make_tuple(e.page, e.kind, e.pid), expect[i]);
            const auto owner = owner_by_search(vm.state, e.address());
            const auto want = !owner ? AttributionClass::Unknown
                              : monitored.contains(*owner) ? AttributionClass::MonitoredObject
                                                           : AttributionClass::OtherObject;
            EXPECT_EQ(e.attributed.cls, want);
            ++recount.total;
            ++recount.by_kind[e.kind];
            ++recount.by_class[e.attributed.cls];
            ++recount.by_page[e.page];
            recount.alerts += e.kind == AccessKind::Write && e.attributed.cls == AttributionClass::MonitoredObject;
        }
        EXPECT_EQ(mon.counts(), recount);
    }
}

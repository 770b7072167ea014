#include "kmig/migration.hpp"

#include "kmig/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <set>

namespace kmig {

namespace {

constexpr auto kHyp = AccessContext::hypervisor();

PointerType ptype_for(LinkClass c, GuestAddress slot, GuestAddress src, std::uint64_t size) {
    if (c == LinkClass::ConfirmedInternal) {
        return PointerType::Internal;
    }
    if (is_list_link(c)) {
        return PointerType::ListNeighbor;
    }
    if (c == LinkClass::Unverified && slot.within(src, size)) {
        return PointerType::Internal;
    }
    return PointerType::External;
}

nlohmann::json hit_json(const PointerHit& h) {
    nlohmann::json j{{"slot", to_hex(h.slot)},
                     {"value", to_hex(h.value)},
                     {"ptype", static_cast<int>(h.ptype)},
                     {"type", to_string(h.ptype)},
                     {"classification", to_string(h.classification)}};
    if (h.owner) {
        j["owner"] = {{"kind", to_string(h.owner->kind)}, {"addr", to_hex(h.owner->addr)}};
    } else {
        j["owner"] = nullptr;
    }
    return j;
}

Region require_area(const GuestState& st, GuestAddress dest, std::uint64_t size) {
    if (!dest.word_aligned()) {
        throw AlignmentError("migration destination " + to_hex(dest) + " is not word aligned");
    }
    auto area = st.protected_area_containing(dest);
    if (!area) {
        throw PlacementError("destination " + to_hex(dest) + " is not inside a protected area");
    }
    if (dest.value + size > area->end().value) {
        throw CapacityError("protected area at " + to_hex(area->start) + " has no room for " + std::to_string(size) +
                            " bytes at " + to_hex(dest));
    }
    return *area;
}

void require_free(const GuestState& st, GuestAddress dest, std::uint64_t size) {
    if (st.object_at(dest)) {
        throw OverlapError("destination " + to_hex(dest) + " overlaps a live object");
    }
    auto it = st.objects.lower_bound(dest.value);
    if (it != st.objects.end() && it->first < dest.value + size) {
        throw OverlapError("destination " + to_hex(dest) + " overlaps a live object");
    }
}

void require_migratable_dentry(const GuestState& st, GuestAddress src) {
    auto rec = st.object_starting_at(src);
    if (!rec || rec->kind != ObjectKind::Dentry || !st.is_live_dentry(src)) {
        throw NotFoundError("no live dentry at " + to_hex(src));
    }
    if (st.is_on_lru(src)) {
        throw StateError("dentry " + to_hex(src) + " is parked on the LRU");
    }
}

// Copies the object, then redirects every accepted hit. Slots inside the
// source are redirected in the copy.
void copy_and_rewrite(MemoryImage& image, GuestAddress src, GuestAddress dest, std::uint64_t size,
                      const std::vector<PointerHit>& hits, bool verify, MigrationReport& report) {
    const auto bytes = image.read_bytes(kHyp, src, size);
    image.write_bytes(kHyp, dest, bytes);
    for (const auto& h : hits) {
        if (verify && !is_confirmed(h.classification)) {
            report.skipped_unverified.push_back(h);
            continue;
        }
        const GuestAddress slot = h.slot.within(src, size) ? dest + (h.slot - src) : h.slot;
        image.write_word(kHyp, slot, (dest + (h.value - src)).value);
        report.rewritten.push_back(h);
    }
}

} // namespace

const char* to_string(PointerType t) {
    switch (t) {
    case PointerType::External: return "external";
    case PointerType::Internal: return "internal";
    case PointerType::ListNeighbor: return "list-neighbor";
    }
    return "?";
}

std::string MigrationReport::to_json() const {
    nlohmann::json rw = nlohmann::json::array();
    nlohmann::json sk = nlohmann::json::array();
    for (const auto& h : rewritten) {
        rw.push_back(hit_json(h));
    }
    for (const auto& h : skipped_unverified) {
        sk.push_back(hit_json(h));
    }
    return nlohmann::json{{"source", to_hex(source)},
                          {"dest", to_hex(dest)},
                          {"kind", kmig::to_string(kind)},
                          {"rewritten", rw},
                          {"skipped_unverified", sk},
                          {"released", released}}
        .dump();
}

std::vector<PointerHit> scan_pointers(const MemoryImage& image, const LayoutProfile& profile, const GuestState& state,
                                      GuestAddress src, ObjectKind kind) {
    const std::uint64_t size = profile.size(kind);
    const auto mem = image.bytes();
    std::vector<PointerHit> hits;
    for (const auto& [start, r] : image.regions()) {
        const std::uint64_t end = r.start.value + r.reserved_bytes();
        for (std::uint64_t a = r.start.value; a + kWordSize <= end; a += kWordSize) {
            std::uint64_t v;
            std::memcpy(&v, mem.data() + a, sizeof v);
            if (v < src.value || v - src.value >= size) {
                continue;
            }
            const GuestAddress slot{a};
            const LinkClass c = verify_cross_links(image, profile, state, src, slot);
            hits.push_back(PointerHit{slot, GuestAddress{v}, ptype_for(c, slot, src, size), c, state.object_at(slot)});
        }
    }
    return hits;
}

MigrationReport migrate_dentry(MemoryImage& image, GuestState& st, GuestAddress src, GuestAddress dest,
                               MigrationOptions opts) {
    const std::uint64_t size = st.prof().size(ObjectKind::Dentry);
    require_migratable_dentry(st, src);
    require_area(st, dest, size);
    require_free(st, dest, size);

    MigrationReport report{src, dest, ObjectKind::Dentry, {}, {}, false};
    const auto hits = scan_pointers(image, st.prof(), st, src, ObjectKind::Dentry);
    copy_and_rewrite(image, src, dest, size, hits, opts.verify, report);

    st.objects[dest.value] = ObjectRecord{ObjectKind::Dentry, size, false};
    if (auto it = st.dentry_paths.find(src); it != st.dentry_paths.end()) {
        const std::string path = it->second;
        st.dentry_paths.erase(it);
        st.dentry_paths[dest] = path;
        st.dentry_cache[path] = dest;
    }
    if (st.root_dentry == src) {
        st.root_dentry = dest;
    }
    if (st.console_dentry == src) {
        st.console_dentry = dest;
    }

    image.write_word(kHyp, src + st.prof().dentry().count, 0);
    lru_append(st, image, src);
    report.released = true;
    return report;
}

MigrationReport migrate_fdt(MemoryImage& image, GuestState& st, Pid pid, GuestAddress dest, MigrationOptions opts) {
    const GuestAddress src = fdt_of(st, image, pid);
    const std::uint64_t size = st.prof().size(ObjectKind::Fdt);
    auto rec = st.object_starting_at(src);
    if (!rec || rec->kind != ObjectKind::Fdt) {
        throw NotFoundError("pid " + std::to_string(pid) + " has no live fdt");
    }
    require_area(st, dest, size);
    require_free(st, dest, size);

    MigrationReport report{src, dest, ObjectKind::Fdt, {}, {}, false};
    const auto hits = scan_pointers(image, st.prof(), st, src, ObjectKind::Fdt);
    copy_and_rewrite(image, src, dest, size, hits, opts.verify, report);

    image.write_bytes(kHyp, src, std::vector<std::uint8_t>(size, 0));
    st.objects.erase(src.value);
    st.objects[dest.value] = ObjectRecord{ObjectKind::Fdt, size, false};
    report.released = true;
    return report;
}

std::vector<MigrationReport> migrate_batch(MemoryImage& image, GuestState& st,
                                           const std::vector<GuestAddress>& sources, const Region& area,
                                           MigrationOptions opts) {
    if (sources.empty()) {
        return {};
    }
    const std::uint64_t size = st.prof().size(ObjectKind::Dentry);
    const bool known = std::any_of(st.protected_areas.begin(), st.protected_areas.end(),
                                   [&](const Region& r) { return r == area; });
    if (!known) {
        throw PlacementError("region at " + to_hex(area.start) + " is not a protected area");
    }
    if (sources.size() * size > area.length) {
        throw CapacityError(std::to_string(sources.size()) + " dentries need " + std::to_string(sources.size() * size) +
                            " bytes, protected area has " + std::to_string(area.length));
    }
    std::set<GuestAddress> seen;
    for (std::size_t i = 0; i < sources.size(); ++i) {
        require_migratable_dentry(st, sources[i]);
        if (!seen.insert(sources[i]).second) {
            throw StateError("dentry " + to_hex(sources[i]) + " listed twice");
        }
        require_free(st, area.start + i * size, size);
    }

    std::vector<MigrationReport> reports;
    reports.reserve(sources.size());
    for (std::size_t i = 0; i < sources.size(); ++i) {
        reports.push_back(migrate_dentry(image, st, sources[i], area.start + i * size, opts));
    }
    return reports;
}

std::string DryRunVerdict::to_json() const {
    nlohmann::json slots = nlohmann::json::array();
    for (auto s : corrupted_slots) {
        slots.push_back(to_hex(s));
    }
    return nlohmann::json{{"verdict", pass ? "pass" : "fail"},
                          {"migrated", reports.size()},
                          {"corrupted_slots", slots},
                          {"diagnostics", diagnostics}}
        .dump();
}

DryRunVerdict dry_run_validate(const GuestState& state, const MemoryImage& image,
                               const std::vector<GuestAddress>& sources, const Region& area,
                               const std::vector<std::string>& probe_paths, MigrationOptions opts) {
    DryRunVerdict verdict;
    GuestState st = state;
    MemoryImage img = image.clone();
    try {
        verdict.reports = migrate_batch(img, st, sources, area, opts);
    } catch (const Error& e) {
        verdict.diagnostics.push_back(std::string("migration failed: ") + e.what());
        return verdict;
    }

    // Words the migration may legitimately change: the sources, the area,
    // kernel globals and pointer fields of objects registered beforehand.
    const auto& prof = state.prof();
    std::set<std::uint64_t> allowed;
    for (std::uint64_t b = 0; b < state.layout.bucket_count; ++b) {
        allowed.insert((state.layout.bucket_table + b * kWordSize).value);
    }
    allowed.insert(state.layout.lru_head.value);
    allowed.insert(state.layout.lru_head.value + kWordSize);
    for (const auto& [raw, rec] : state.objects) {
        for (const auto& f : prof.layout(rec.kind).fields) {
            if (f.is_pointer()) {
                for (std::uint64_t off = 0; off < f.width; off += kWordSize) {
                    allowed.insert(raw + f.offset + off);
                }
            }
        }
    }
    const std::uint64_t dsize = prof.size(ObjectKind::Dentry);
    auto excluded = [&](std::uint64_t a) {
        if (GuestAddress{a}.within(area.start, area.length)) {
            return true;
        }
        return std::any_of(sources.begin(), sources.end(), [&](GuestAddress s) { return GuestAddress{a}.within(s, dsize); });
    };
    const auto before = image.bytes();
    const auto after = img.bytes();
    for (std::uint64_t a = 0; a + kWordSize <= before.size(); a += kWordSize) {
        if (std::memcmp(before.data() + a, after.data() + a, kWordSize) == 0 || excluded(a) || allowed.contains(a)) {
            continue;
        }
        verdict.corrupted_slots.emplace_back(a);
        std::string owner = "no object";
        if (auto o = state.object_at(GuestAddress{a})) {
            owner = std::string(to_string(o->kind)) + " at " + to_hex(o->addr);
        }
        verdict.diagnostics.push_back("non-pointer word " + to_hex(a) + " (" + owner + ") was rewritten");
    }

    for (const auto& v : check_invariants(st, img)) {
        verdict.diagnostics.push_back("invariant: " + v);
    }

    Vm clone{std::move(st), std::move(img), nullptr};
    const Pid pid = clone.state.processes.empty() ? kKernelPid : clone.state.processes.begin()->first;
    for (const auto& path : probe_paths) {
        try {
            const auto o = clone.syscall(pid, OpenReq{path, false});
            if (!o.ok()) {
                verdict.diagnostics.push_back("probe open(" + path + ") failed: " + to_string(o.status));
                continue;
            }
            const int fd = static_cast<int>(o.value);
            const auto r = clone.syscall(pid, ReadReq{fd, 1});
            if (!r.ok()) {
                verdict.diagnostics.push_back("probe read(" + path + ") failed: " + to_string(r.status));
            }
            clone.syscall(pid, CloseReq{fd});
        } catch (const Error& e) {
            verdict.diagnostics.push_back("probe " + path + " crashed the clone: " + e.what());
        }
    }
    verdict.pass = verdict.diagnostics.empty();
    return verdict;
}

} // namespace kmig

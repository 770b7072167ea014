#pragma once

#include "kmig/guest.hpp"
#include "kmig/links.hpp"

#include <optional>
#include <string>
#include <vector>

namespace kmig {

enum class PointerType : std::uint8_t { External = 1, Internal = 2, ListNeighbor = 3 };

const char* to_string(PointerType t);

struct PointerHit {
    GuestAddress slot;
    GuestAddress value;
    PointerType ptype = PointerType::External;
    LinkClass classification = LinkClass::Unverified;
    std::optional<ObjectRef> owner; // object covering the slot, if any

    bool operator==(const PointerHit&) const = default;
};

struct MigrationReport {
    GuestAddress source;
    GuestAddress dest;
    ObjectKind kind = ObjectKind::Dentry;
    std::vector<PointerHit> rewritten;
    std::vector<PointerHit> skipped_unverified;
    bool released = false;

    std::string to_json() const;
};

struct MigrationOptions {
    // Off rewrites every hit regardless of classification. Only useful to
    // provoke corruption for dry-run tests.
    bool verify = true;
};

// Every aligned word in an allocated region whose value lies in
// [src, src + size), classified against `src`. Hypervisor context only.
std::vector<PointerHit> scan_pointers(const MemoryImage& image, const LayoutProfile& profile, const GuestState& state,
                                      GuestAddress src, ObjectKind kind);

MigrationReport migrate_dentry(MemoryImage& image, GuestState& state, GuestAddress src, GuestAddress dest,
                               MigrationOptions opts = {});

MigrationReport migrate_fdt(MemoryImage& image, GuestState& state, Pid pid, GuestAddress dest,
                            MigrationOptions opts = {});

// dest_i = area.start + i * dentry size. Everything is validated before the
// first byte moves.
std::vector<MigrationReport> migrate_batch(MemoryImage& image, GuestState& state,
                                           const std::vector<GuestAddress>& sources, const Region& area,
                                           MigrationOptions opts = {});

struct DryRunVerdict {
    bool pass = false;
    std::vector<std::string> diagnostics;
    std::vector<GuestAddress> corrupted_slots; // changed words that are not kernel pointer fields
    std::vector<MigrationReport> reports;

    std::string to_json() const;
};

// Migrates on a clone, then opens, reads and closes each probe path there.
// The original is never touched.
DryRunVerdict dry_run_validate(const GuestState& state, const MemoryImage& image,
                               const std::vector<GuestAddress>& sources, const Region& area,
                               const std::vector<std::string>& probe_paths, MigrationOptions opts = {});

} // namespace kmig

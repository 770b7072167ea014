#pragma once

#include "kmig/address.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace kmig {

enum class AccessKind : std::uint8_t { Read = 0, Write = 1 };

const char* to_string(AccessKind kind);

struct PageFlags {
    bool trap_read = false;
    bool trap_write = false;

    bool traps(AccessKind kind) const { return kind == AccessKind::Read ? trap_read : trap_write; }
    bool any() const { return trap_read || trap_write; }
    bool operator==(const PageFlags&) const = default;
};

// Who performs an access. Guest accesses go through the trap flags,
// hypervisor accesses (introspection reads/writes) never do.
class AccessContext {
public:
    static constexpr AccessContext guest(Pid pid) { return AccessContext{true, pid}; }
    static constexpr AccessContext hypervisor() { return AccessContext{false, 0}; }

    constexpr bool is_guest() const { return guest_; }
    constexpr Pid pid() const { return pid_; }

private:
    constexpr AccessContext(bool guest, Pid pid) : guest_(guest), pid_(pid) {}
    bool guest_;
    Pid pid_;
};

struct Region {
    GuestAddress start;
    std::uint64_t length = 0; // bytes as requested; the reservation is whole pages

    std::uint64_t pages() const { return pages_for(length); }
    std::uint64_t reserved_bytes() const { return pages() * kPageSize; }
    GuestAddress end() const { return start + reserved_bytes(); }
    bool contains(GuestAddress a) const { return a.within(start, reserved_bytes()); }
    bool operator==(const Region&) const = default;
};

// One trapped (access, page) pair, handed to the registered trap handler
// before the access completes.
struct TrapNotice {
    std::uint64_t page = 0;
    std::uint16_t offset = 0; // first touched byte within the page
    AccessKind kind = AccessKind::Read;
    Pid pid = 0;
};

// One guest-context access, trapped or not. The recorded stream is what the
// offline event oracle replays.
struct AccessRecord {
    Pid pid = 0;
    GuestAddress addr;
    std::uint64_t length = 0;
    AccessKind kind = AccessKind::Read;

    bool operator==(const AccessRecord&) const = default;
};

using AccessTrace = std::vector<AccessRecord>;

class MemoryImage {
public:
    using TrapHandler = std::function<void(const TrapNotice&)>;
    using AccessTracer = std::function<void(const AccessRecord&)>;

    static constexpr std::uint64_t kDefaultSize = 16ull << 20;

    explicit MemoryImage(std::uint64_t size = kDefaultSize);

    MemoryImage(MemoryImage&&) noexcept = default;
    MemoryImage& operator=(MemoryImage&&) noexcept = default;
    MemoryImage(const MemoryImage&) = delete;
    MemoryImage& operator=(const MemoryImage&) = delete;

    // Deep copy of bytes, flags and regions. Handlers are not carried over:
    // a clone starts with nobody listening.
    MemoryImage clone() const;

    std::uint64_t size() const { return bytes_.size(); }
    std::uint64_t page_count() const { return flags_.size(); }

    std::vector<std::uint8_t> read_bytes(AccessContext ctx, GuestAddress addr, std::uint64_t len);
    void read_into(AccessContext ctx, GuestAddress addr, std::span<std::uint8_t> out);
    void write_bytes(AccessContext ctx, GuestAddress addr, std::span<const std::uint8_t> data);

    // 8-byte little-endian accessors; addr must be word aligned.
    std::uint64_t read_word(AccessContext ctx, GuestAddress addr);
    void write_word(AccessContext ctx, GuestAddress addr, std::uint64_t value);

    // Untrapped, untraced word peek for scanners and checkers that only
    // need const access.
    std::uint64_t peek_word(GuestAddress addr) const;

    Region allocate_region(GuestAddress addr, std::uint64_t len);
    void release_region(GuestAddress addr, std::uint64_t len);
    const std::map<std::uint64_t, Region>& regions() const { return regions_; }
    std::optional<Region> region_containing(GuestAddress addr) const;
    bool overlaps_region(GuestAddress addr, std::uint64_t len) const;

    PageFlags flags(std::uint64_t page) const;
    void set_flags(std::uint64_t page, PageFlags flags);
    std::vector<std::uint64_t> trapped_pages() const;

    std::span<const std::uint8_t> bytes() const { return bytes_; }

    void set_trap_handler(TrapHandler handler) { trap_handler_ = std::move(handler); }
    void set_access_tracer(AccessTracer tracer) { tracer_ = std::move(tracer); }

    // Raw bytes go to image_path; regions and page flags go to a JSON sidecar.
    void save_snapshot(const std::filesystem::path& image_path, const std::filesystem::path& sidecar_path) const;
    static MemoryImage load_snapshot(const std::filesystem::path& image_path,
                                     const std::filesystem::path& sidecar_path);
    std::string sidecar_json() const;

private:
    void check_range(GuestAddress addr, std::uint64_t len) const;
    void observe(AccessContext ctx, GuestAddress addr, std::uint64_t len, AccessKind kind);

    std::vector<std::uint8_t> bytes_;
    std::vector<PageFlags> flags_;
    std::map<std::uint64_t, Region> regions_; // keyed by start address
    TrapHandler trap_handler_;
    AccessTracer tracer_;
};

} // namespace kmig

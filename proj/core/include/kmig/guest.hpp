#pragma once

#include "kmig/address.hpp"
#include "kmig/memory.hpp"
#include "kmig/profile.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace kmig {

// ---------------------------------------------------------------------------
// Syscalls

enum class Errno : int { Ok = 0, NoEnt = 2, BadFd = 9, NoMem = 12, Exist = 17, Inval = 22, MFile = 24 };

const char* to_string(Errno e);

struct OpenReq {
    std::string path;
    bool create = true; // O_CREAT
    bool operator==(const OpenReq&) const = default;
};
struct ReadReq {
    int fd = 0;
    std::uint64_t len = 0;
    bool operator==(const ReadReq&) const = default;
};
struct WriteReq {
    int fd = 0;
    std::uint64_t len = 0;
    bool operator==(const WriteReq&) const = default;
};
struct CloseReq {
    int fd = 0;
    bool operator==(const CloseReq&) const = default;
};
struct MmapReq {
    GuestAddress addr;
    std::uint64_t len = 0;
    bool operator==(const MmapReq&) const = default;
};
struct MunmapReq {
    GuestAddress addr;
    std::uint64_t len = 0;
    bool operator==(const MunmapReq&) const = default;
};

using SyscallRequest = std::variant<OpenReq, ReadReq, WriteReq, CloseReq, MmapReq, MunmapReq>;

enum class SyscallKind : std::uint8_t { Open, Read, Write, Close, Mmap, Munmap };

SyscallKind kind_of(const SyscallRequest& req);
const char* to_string(SyscallKind kind);
// x86-64 Linux numbering.
std::uint64_t syscall_number(SyscallKind kind);
// Register image of the request: rdi, rsi, rdx, r10, r8, r9. Open's path
// travels out of band, the simulator has no user address space.
std::array<std::uint64_t, 6> syscall_args(const SyscallRequest& req);
std::string describe(const SyscallRequest& req);

// value is the fd (Open), byte count (Read/Write), address (Mmap) or 0.
struct SyscallResult {
    SyscallKind kind = SyscallKind::Open;
    Errno status = Errno::Ok;
    std::uint64_t value = 0;

    bool ok() const { return status == Errno::Ok; }
    bool operator==(const SyscallResult&) const = default;
};

std::string describe(const SyscallResult& res);

// ---------------------------------------------------------------------------
// Guest state

struct ObjectRecord {
    ObjectKind kind = ObjectKind::Dentry;
    std::uint64_t size = 0;
    bool on_lru = false;
    bool operator==(const ObjectRecord&) const = default;
};

struct ObjectRef {
    ObjectKind kind = ObjectKind::Dentry;
    GuestAddress addr;
    std::uint64_t size = 0;
    bool operator==(const ObjectRef&) const = default;
};

// Fixed kernel addresses. The bucket table holds one head pointer per hash
// bucket; the LRU head is a {first, last} pair.
struct GuestLayout {
    GuestAddress text{0x1000};
    GuestAddress syscall_entry{0x1000};
    GuestAddress syscall_exit{0x1040};
    GuestAddress globals{0x2000};
    GuestAddress bucket_table{0x2000};
    std::uint64_t bucket_count = 64;
    GuestAddress lru_head{0x2200};
    GuestAddress heap_start{0x100000};
    bool operator==(const GuestLayout&) const = default;
};

struct SlabCursor {
    GuestAddress page;
    std::uint64_t used = 0;
    bool operator==(const SlabCursor&) const = default;
};

struct KernelHeap {
    std::uint64_t next_page = 0;
    std::map<ObjectKind, SlabCursor> slabs;
    bool pack_dentries = true;
    bool operator==(const KernelHeap&) const = default;
};

struct GuestState {
    std::shared_ptr<const LayoutProfile> profile;
    GuestLayout layout;
    KernelHeap heap;

    std::map<Pid, GuestAddress> processes;          // pid -> task
    std::map<std::string, GuestAddress> dentry_cache; // path -> hashed dentry
    std::map<GuestAddress, std::string> dentry_paths; // reverse of dentry_cache
    std::map<std::string, GuestAddress> inode_table;  // path -> inode
    std::set<GuestAddress> open_files;
    std::set<std::string> files; // synthetic filesystem namespace
    GuestAddress root_dentry;
    GuestAddress console_dentry;
    std::map<std::uint64_t, ObjectRecord> objects; // every allocated kernel object, by start address
    std::vector<Region> protected_areas;
    std::uint64_t next_ino = 1;
    std::uint64_t seed = 0;
    std::uint64_t reclaim_period = 64;

    const LayoutProfile& prof() const { return *profile; }

    std::optional<ObjectRef> object_at(GuestAddress addr) const;          // object covering addr
    std::optional<ObjectRef> object_starting_at(GuestAddress addr) const; // object whose base is addr
    bool is_hashed(GuestAddress dentry) const { return dentry_paths.contains(dentry); }
    bool is_on_lru(GuestAddress dentry) const;
    // Hashed, root or console: a dentry the kernel still reaches by name or path.
    bool is_live_dentry(GuestAddress dentry) const;
    std::optional<GuestAddress> dentry_for(std::string_view path) const;
    std::optional<Region> protected_area_containing(GuestAddress addr) const;
    std::vector<GuestAddress> objects_of(ObjectKind kind) const;

    bool operator==(const GuestState&) const = default;
};

struct BuildSpec {
    std::uint64_t num_files = 1;
    std::uint32_t num_processes = 1;
    bool interleave = true; // pack 32 dentries per page; otherwise one per page
    std::uint64_t seed = 0;
    std::uint64_t reclaim_period = 64;
    std::uint64_t image_size = MemoryImage::kDefaultSize;
    bool operator==(const BuildSpec&) const = default;
};

std::string file_name(std::uint64_t index); // "file_0007.txt"

std::uint64_t name_hash(std::string_view path); // FNV-1a, 64-bit
std::uint64_t bucket_of(std::string_view path, std::uint64_t bucket_count = 64);

// ---------------------------------------------------------------------------
// Syscall trap hooks (the INT3 breakpoints at syscall entry/exit)

struct SyscallFrame {
    Pid pid = 0;
    std::uint64_t ip = 0;
    std::uint64_t sp = 0;
    SyscallRequest request;
    SyscallResult result;
};

enum class ExitAction { Return, RestartAtEntry };

class SyscallTrapHandler {
public:
    virtual ~SyscallTrapHandler() = default;
    virtual void on_syscall_entry(GuestState& state, MemoryImage& image, SyscallFrame& frame) = 0;
    virtual ExitAction on_syscall_exit(GuestState& state, MemoryImage& image, SyscallFrame& frame) = 0;
};

inline constexpr std::uint8_t kInt3 = 0xCC;

// Runs one syscall for `pid`. Every object touch is a guest-context access.
// When a breakpoint byte sits at the entry (exit) marker the hook is called
// before dispatch (after it); RestartAtEntry re-runs whatever request the
// frame holds afterwards.
SyscallResult exec_syscall(GuestState& state, MemoryImage& image, Pid pid, const SyscallRequest& req,
                           SyscallTrapHandler* hook = nullptr);

// Frees every LRU dentry whose d_count is zero: unlinks it from the LRU (and
// from its hash chain if a neighbor still points at it) and zeroes it.
std::uint64_t reclaim_lru(GuestState& state, MemoryImage& image);

// A guest: state plus memory, plus whoever handles syscall breakpoints.
struct Vm {
    GuestState state;
    MemoryImage image;
    SyscallTrapHandler* trap_handler = nullptr;

    Vm clone() const { return Vm{state, image.clone(), nullptr}; }
    SyscallResult syscall(Pid pid, const SyscallRequest& req) {
        return exec_syscall(state, image, pid, req, trap_handler);
    }
};

Vm build_guest(const BuildSpec& spec, std::shared_ptr<const LayoutProfile> profile = nullptr);

std::shared_ptr<const LayoutProfile> shared_default_profile();

// Something that makes guest processes issue syscalls.
class GuestDriver {
public:
    virtual ~GuestDriver() = default;
    // Issues at most one syscall; false when the guest had nothing to do.
    virtual bool step(Vm& vm) = 0;
};

class ScriptedProcess final : public GuestDriver {
public:
    ScriptedProcess(Pid pid, std::vector<SyscallRequest> script) : pid_(pid), script_(std::move(script)) {}
    bool step(Vm& vm) override;
    bool done() const { return next_ >= script_.size(); }
    const std::vector<SyscallResult>& results() const { return results_; }

private:
    Pid pid_;
    std::vector<SyscallRequest> script_;
    std::size_t next_ = 0;
    std::vector<SyscallResult> results_;
};

class IdleGuest final : public GuestDriver {
public:
    bool step(Vm&) override { return false; }
};

// ---------------------------------------------------------------------------
// Kernel heap and bookkeeping helpers shared with the migration engine

// Carves a zeroed object out of its kind's slab and registers it.
GuestAddress alloc_object(GuestState& state, MemoryImage& image, ObjectKind kind);

// Appends a dentry to the LRU list (hypervisor context) and marks it on_lru.
void lru_append(GuestState& state, MemoryImage& image, GuestAddress dentry);
std::vector<GuestAddress> lru_entries(const GuestState& state, const MemoryImage& image);

// Hypervisor-side lookup through the in-memory hash chain.
std::optional<GuestAddress> lookup_dentry(const GuestState& state, const MemoryImage& image, std::string_view path);
std::string dentry_name(const GuestState& state, const MemoryImage& image, GuestAddress dentry);
GuestAddress fdt_of(const GuestState& state, const MemoryImage& image, Pid pid);
std::uint64_t dentry_count(const GuestState& state, const MemoryImage& image, GuestAddress dentry);

// Writes `value` into a freshly allocated name buffer; returns the word's address.
GuestAddress plant_decoy(GuestState& state, MemoryImage& image, std::uint64_t value);

struct PointerSlot {
    GuestAddress slot;
    GuestAddress value;
    std::optional<ObjectKind> owner_kind; // nullopt for the bucket table and LRU head
    bool operator==(const PointerSlot&) const = default;
};

// Every non-null genuine pointer field of a live object, plus bucket heads and
// the LRU head, derived from the object registry rather than from scanning.
std::vector<PointerSlot> ground_truth_pointers(const GuestState& state, const MemoryImage& image);

// Structural checks: cross links, hash chains, refcounts, fd tables, LRU.
// Empty result means consistent.
std::vector<std::string> check_invariants(const GuestState& state, const MemoryImage& image);

} // namespace kmig

#include "kmig/guest.hpp"

#include "kmig/error.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

namespace kmig {

namespace {

constexpr auto kHyp = AccessContext::hypervisor();

// Original instruction bytes at the syscall markers: swapgs / sysretq.
constexpr std::uint8_t kEntryCode[] = {0x0F, 0x01, 0xF8};
constexpr std::uint8_t kExitCode[] = {0x48, 0x0F, 0x07};

constexpr std::uint64_t kInodeModeChar = 0020620;

// Staging buffer for a whole object, committed with a single access.
class ObjectBytes {
public:
    explicit ObjectBytes(std::uint64_t size) : buf_(size, 0) {}
    ObjectBytes& word(std::uint64_t off, std::uint64_t value) {
        for (std::size_t i = 0; i < kWordSize; ++i) {
            buf_[off + i] = static_cast<std::uint8_t>(value >> (8 * i));
        }
        return *this;
    }
    ObjectBytes& bytes(std::uint64_t off, std::span<const std::uint8_t> data) {
        std::copy(data.begin(), data.end(), buf_.begin() + static_cast<std::ptrdiff_t>(off));
        return *this;
    }
    void commit(MemoryImage& image, AccessContext ctx, GuestAddress addr) const { image.write_bytes(ctx, addr, buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

std::vector<std::uint8_t> padded_name(std::string_view path, std::uint64_t width) {
    std::vector<std::uint8_t> out(width, 0);
    std::copy(path.begin(), path.end(), out.begin());
    return out;
}

std::string c_string(std::span<const std::uint8_t> bytes) {
    auto nul = std::find(bytes.begin(), bytes.end(), std::uint8_t{0});
    return std::string(bytes.begin(), nul);
}

GuestAddress bucket_slot(const GuestState& st, std::string_view path) {
    return st.layout.bucket_table + bucket_of(path, st.layout.bucket_count) * kWordSize;
}

std::uint64_t stack_pointer_for(Pid pid) { return 0xffffc90000004000ull + std::uint64_t{pid} * 0x4000; }

GuestAddress take_page(GuestState& st, MemoryImage& image) {
    std::uint64_t p = std::max(st.heap.next_page, st.layout.heap_start.page());
    while (p < image.page_count() && image.overlaps_region(page_address(p), kPageSize)) {
        ++p;
    }
    if (p >= image.page_count()) {
        throw CapacityError("kernel heap exhausted: no free page left in the image");
    }
    image.allocate_region(page_address(p), kPageSize);
    st.heap.next_page = p + 1;
    return page_address(p);
}

// Links `dentry` at the head of its hash bucket.
void hash_insert(GuestState& st, MemoryImage& image, AccessContext ctx, GuestAddress dentry, const std::string& path) {
    const auto& d = st.prof().dentry();
    const GuestAddress slot = bucket_slot(st, path);
    const std::uint64_t head = image.read_word(ctx, slot);
    image.write_word(ctx, dentry + d.hash_next, head);
    image.write_word(ctx, dentry + d.hash_prev, 0);
    if (head != 0) {
        image.write_word(ctx, GuestAddress{head} + d.hash_prev, dentry.value);
    }
    image.write_word(ctx, slot, dentry.value);
    st.dentry_cache[path] = dentry;
    st.dentry_paths[dentry] = path;
}

GuestAddress new_inode(GuestState& st, MemoryImage& image, AccessContext ctx, std::uint64_t mode) {
    const auto& i = st.prof().inode();
    const GuestAddress inode = alloc_object(st, image, ObjectKind::Inode);
    ObjectBytes(st.prof().size(ObjectKind::Inode))
        .word(i.ino, st.next_ino++)
        .word(i.count, 1)
        .word(i.mode, mode)
        .commit(image, ctx, inode);
    return inode;
}

GuestAddress new_dentry(GuestState& st, MemoryImage& image, AccessContext ctx, std::string_view name,
                        GuestAddress parent, GuestAddress inode) {
    const auto& d = st.prof().dentry();
    if (name.empty() || name.size() >= d.iname_len) {
        throw RangeError("dentry name must be 1.." + std::to_string(d.iname_len - 1) + " bytes");
    }
    const GuestAddress dentry = alloc_object(st, image, ObjectKind::Dentry);
    const auto iname = padded_name(name, d.iname_len);
    ObjectBytes(st.prof().size(ObjectKind::Dentry))
        .word(d.parent, parent.is_null() ? dentry.value : parent.value)
        .word(d.inode, inode.value)
        .word(d.name, (dentry + d.iname).value)
        .bytes(d.iname, iname)
        .commit(image, ctx, dentry);
    if (!inode.is_null()) {
        image.write_word(ctx, inode + st.prof().inode().dentry, dentry.value);
    }
    return dentry;
}

GuestAddress new_file(GuestState& st, MemoryImage& image, AccessContext ctx, GuestAddress dentry, GuestAddress inode) {
    const auto& f = st.prof().file();
    const GuestAddress file = alloc_object(st, image, ObjectKind::File);
    ObjectBytes(st.prof().size(ObjectKind::File))
        .word(f.dentry, dentry.value)
        .word(f.inode, inode.value)
        .word(f.count, 1)
        .commit(image, ctx, file);
    st.open_files.insert(file);
    return file;
}

void free_object(GuestState& st, MemoryImage& image, AccessContext ctx, GuestAddress addr) {
    auto it = st.objects.find(addr.value);
    if (it == st.objects.end()) {
        return;
    }
    const std::vector<std::uint8_t> zeros(it->second.size, 0);
    image.write_bytes(ctx, addr, zeros);
    st.objects.erase(it);
}

// Guest-context chain walk from the bucket head, comparing names through d_name.
std::optional<GuestAddress> walk_chain(GuestState& st, MemoryImage& image, AccessContext ctx, std::string_view path) {
    const auto& d = st.prof().dentry();
    std::uint64_t cur = image.read_word(ctx, bucket_slot(st, path));
    std::vector<std::uint8_t> name(d.iname_len);
    std::size_t guard = st.objects.size() + 1;
    while (cur != 0 && guard-- > 0) {
        const GuestAddress dentry{cur};
        const GuestAddress name_ptr{image.read_word(ctx, dentry + d.name)};
        image.read_into(ctx, name_ptr, name);
        if (c_string(name) == path) {
            return dentry;
        }
        cur = image.read_word(ctx, dentry + d.hash_next);
    }
    return std::nullopt;
}

struct Kernel {
    GuestState& st;
    MemoryImage& image;
    Pid pid;
    AccessContext ctx;

    const LayoutProfile& prof() const { return st.prof(); }

    GuestAddress current_task() {
        const GuestAddress task = st.processes.at(pid);
        image.read_word(ctx, task + prof().task().pid);
        return task;
    }

    GuestAddress current_fdt(GuestAddress task) {
        const GuestAddress files{image.read_word(ctx, task + prof().task().files)};
        return GuestAddress{image.read_word(ctx, files + prof().files_struct().fdt)};
    }

    GuestAddress fd_slot(GuestAddress fdt, int fd) const {
        return fdt + prof().fdt().slots + static_cast<std::uint64_t>(fd) * kWordSize;
    }

    bool valid_fd(int fd) const { return fd >= 0 && static_cast<std::uint64_t>(fd) < prof().fdt().max_fds; }

    SyscallResult open(const OpenReq& req) {
        const GuestAddress task = current_task();
        const auto& d = prof().dentry();
        if (req.path.empty() || req.path.size() >= d.iname_len) {
            return {SyscallKind::Open, Errno::Inval, 0};
        }
        const GuestAddress fdt = current_fdt(task);
        const std::uint64_t max_fds = prof().fdt().max_fds;
        std::vector<std::uint8_t> slots(max_fds * kWordSize);
        image.read_into(ctx, fdt + prof().fdt().slots, slots);
        int fd = -1;
        for (std::uint64_t i = 0; i < max_fds; ++i) {
            if (std::all_of(slots.begin() + static_cast<std::ptrdiff_t>(i * kWordSize),
                            slots.begin() + static_cast<std::ptrdiff_t>((i + 1) * kWordSize),
                            [](std::uint8_t b) { return b == 0; })) {
                fd = static_cast<int>(i);
                break;
            }
        }
        if (fd < 0) {
            return {SyscallKind::Open, Errno::MFile, 0};
        }

        std::optional<GuestAddress> dentry = walk_chain(st, image, ctx, req.path);
        if (!dentry) {
            if (!req.create) {
                return {SyscallKind::Open, Errno::NoEnt, 0};
            }
            GuestAddress inode;
            if (auto it = st.inode_table.find(req.path); it != st.inode_table.end()) {
                inode = it->second;
            } else {
                inode = new_inode(st, image, ctx, kInodeModeFile);
                st.inode_table[req.path] = inode;
            }
            dentry = new_dentry(st, image, ctx, req.path, st.root_dentry, inode);
            hash_insert(st, image, ctx, *dentry, req.path);
            st.files.insert(req.path);
        }

        const GuestAddress inode{image.read_word(ctx, *dentry + d.inode)};
        const std::uint64_t count = image.read_word(ctx, *dentry + d.count);
        image.write_word(ctx, *dentry + d.count, count + 1);
        const GuestAddress file = new_file(st, image, ctx, *dentry, inode);
        image.write_word(ctx, fd_slot(fdt, fd), file.value);
        return {SyscallKind::Open, Errno::Ok, static_cast<std::uint64_t>(fd)};
    }

    // Read and Write touch the same metadata: f_count, f_dentry, f_inode,
    // d_count, i_count (reads) and f_pos (read-modify-write).
    SyscallResult read_write(SyscallKind kind, int fd, std::uint64_t len) {
        const GuestAddress task = current_task();
        if (!valid_fd(fd)) {
            return {kind, Errno::BadFd, 0};
        }
        const GuestAddress fdt = current_fdt(task);
        const GuestAddress file{image.read_word(ctx, fd_slot(fdt, fd))};
        if (file.is_null()) {
            return {kind, Errno::BadFd, 0};
        }
        const auto& f = prof().file();
        image.read_word(ctx, file + f.count);
        const GuestAddress dentry{image.read_word(ctx, file + f.dentry)};
        const GuestAddress inode{image.read_word(ctx, file + f.inode)};
        image.read_word(ctx, dentry + prof().dentry().count);
        image.read_word(ctx, inode + prof().inode().count);
        const std::uint64_t pos = image.read_word(ctx, file + f.pos);
        image.write_word(ctx, file + f.pos, pos + len);
        return {kind, Errno::Ok, len};
    }

    SyscallResult close(int fd) {
        const GuestAddress task = current_task();
        if (!valid_fd(fd)) {
            return {SyscallKind::Close, Errno::BadFd, 0};
        }
        const GuestAddress fdt = current_fdt(task);
        const GuestAddress slot = fd_slot(fdt, fd);
        const GuestAddress file{image.read_word(ctx, slot)};
        if (file.is_null()) {
            return {SyscallKind::Close, Errno::BadFd, 0};
        }
        image.write_word(ctx, slot, 0);
        const auto& f = prof().file();
        const std::uint64_t fcount = image.read_word(ctx, file + f.count);
        image.write_word(ctx, file + f.count, fcount - 1);
        if (fcount == 1) {
            const GuestAddress dentry{image.read_word(ctx, file + f.dentry)};
            const std::uint64_t dcount = image.read_word(ctx, dentry + prof().dentry().count);
            image.write_word(ctx, dentry + prof().dentry().count, dcount - 1);
            st.open_files.erase(file);
            free_object(st, image, ctx, file);
        }
        return {SyscallKind::Close, Errno::Ok, 0};
    }

    SyscallResult mmap(const MmapReq& req) {
        current_task();
        if (!req.addr.page_aligned() || req.len == 0 || req.addr.is_null()) {
            return {SyscallKind::Mmap, Errno::Inval, 0};
        }
        const std::uint64_t bytes = pages_for(req.len) * kPageSize;
        if (req.addr.value > image.size() || bytes > image.size() - req.addr.value) {
            return {SyscallKind::Mmap, Errno::NoMem, 0};
        }
        if (image.overlaps_region(req.addr, req.len)) {
            return {SyscallKind::Mmap, Errno::Exist, 0};
        }
        image.allocate_region(req.addr, req.len);
        return {SyscallKind::Mmap, Errno::Ok, req.addr.value};
    }

    SyscallResult munmap(const MunmapReq& req) {
        current_task();
        try {
            image.release_region(req.addr, req.len);
        } catch (const NotFoundError&) {
            return {SyscallKind::Munmap, Errno::Inval, 0};
        }
        return {SyscallKind::Munmap, Errno::Ok, 0};
    }

    SyscallResult dispatch(const SyscallRequest& req) {
        return std::visit(
            [this](const auto& r) -> SyscallResult {
                using T = std::decay_t<decltype(r)>;
                if constexpr (std::is_same_v<T, OpenReq>) {
                    return open(r);
                } else if constexpr (std::is_same_v<T, ReadReq>) {
                    return read_write(SyscallKind::Read, r.fd, r.len);
                } else if constexpr (std::is_same_v<T, WriteReq>) {
                    return read_write(SyscallKind::Write, r.fd, r.len);
                } else if constexpr (std::is_same_v<T, CloseReq>) {
                    return close(r.fd);
                } else if constexpr (std::is_same_v<T, MmapReq>) {
                    return mmap(r);
                } else {
                    return munmap(r);
                }
            },
            req);
    }
};

bool breakpoint_at(const MemoryImage& image, GuestAddress addr) { return image.bytes()[addr.value] == kInt3; }

} // namespace

// ---------------------------------------------------------------------------

const char* to_string(Errno e) {
    switch (e) {
    case Errno::Ok: return "OK";
    case Errno::NoEnt: return "ENOENT";
    case Errno::BadFd: return "EBADF";
    case Errno::NoMem: return "ENOMEM";
    case Errno::Exist: return "EEXIST";
    case Errno::Inval: return "EINVAL";
    case Errno::MFile: return "EMFILE";
    }
    return "?";
}

SyscallKind kind_of(const SyscallRequest& req) { return static_cast<SyscallKind>(req.index()); }

const char* to_string(SyscallKind kind) {
    switch (kind) {
    case SyscallKind::Open: return "open";
    case SyscallKind::Read: return "read";
    case SyscallKind::Write: return "write";
    case SyscallKind::Close: return "close";
    case SyscallKind::Mmap: return "mmap";
    case SyscallKind::Munmap: return "munmap";
    }
    return "?";
}

std::uint64_t syscall_number(SyscallKind kind) {
    switch (kind) {
    case SyscallKind::Read: return 0;
    case SyscallKind::Write: return 1;
    case SyscallKind::Open: return 2;
    case SyscallKind::Close: return 3;
    case SyscallKind::Mmap: return 9;
    case SyscallKind::Munmap: return 11;
    }
    return ~0ull;
}

std::array<std::uint64_t, 6> syscall_args(const SyscallRequest& req) {
    constexpr std::uint64_t kOCreat = 0100, kORdWr = 02;
    constexpr std::uint64_t kProtRw = 3, kMapFixedShared = 0x11;
    return std::visit(
        [](const auto& r) -> std::array<std::uint64_t, 6> {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, OpenReq>) {
                return {0, r.create ? (kORdWr | kOCreat) : kORdWr, 0644, 0, 0, 0};
            } else if constexpr (std::is_same_v<T, ReadReq> || std::is_same_v<T, WriteReq>) {
                return {static_cast<std::uint64_t>(r.fd), 0, r.len, 0, 0, 0};
            } else if constexpr (std::is_same_v<T, CloseReq>) {
                return {static_cast<std::uint64_t>(r.fd), 0, 0, 0, 0, 0};
            } else if constexpr (std::is_same_v<T, MmapReq>) {
                return {r.addr.value, r.len, kProtRw, kMapFixedShared, ~0ull, 0};
            } else {
                return {r.addr.value, r.len, 0, 0, 0, 0};
            }
        },
        req);
}

std::string describe(const SyscallRequest& req) {
    return std::visit(
        [](const auto& r) -> std::string {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, OpenReq>) {
                return "open(\"" + r.path + "\"" + (r.create ? ", O_CREAT" : "") + ")";
            } else if constexpr (std::is_same_v<T, ReadReq>) {
                return "read(" + std::to_string(r.fd) + ", " + std::to_string(r.len) + ")";
            } else if constexpr (std::is_same_v<T, WriteReq>) {
                return "write(" + std::to_string(r.fd) + ", " + std::to_string(r.len) + ")";
            } else if constexpr (std::is_same_v<T, CloseReq>) {
                return "close(" + std::to_string(r.fd) + ")";
            } else if constexpr (std::is_same_v<T, MmapReq>) {
                return "mmap(" + to_hex(r.addr) + ", " + std::to_string(r.len) + ")";
            } else {
                return "munmap(" + to_hex(r.addr) + ", " + std::to_string(r.len) + ")";
            }
        },
        req);
}

std::string describe(const SyscallResult& res) {
    std::string out = std::string(to_string(res.kind)) + " -> ";
    if (!res.ok()) {
        return out + to_string(res.status);
    }
    return out + (res.kind == SyscallKind::Mmap ? to_hex(res.value) : std::to_string(res.value));
}

std::string file_name(std::uint64_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "file_%04llu.txt", static_cast<unsigned long long>(index));
    return buf;
}

std::uint64_t name_hash(std::string_view path) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : path) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t bucket_of(std::string_view path, std::uint64_t bucket_count) { return name_hash(path) % bucket_count; }

// ---------------------------------------------------------------------------
// GuestState

std::optional<ObjectRef> GuestState::object_at(GuestAddress addr) const {
    auto it = objects.upper_bound(addr.value);
    if (it == objects.begin()) {
        return std::nullopt;
    }
    --it;
    if (addr.within(GuestAddress{it->first}, it->second.size)) {
        return ObjectRef{it->second.kind, GuestAddress{it->first}, it->second.size};
    }
    return std::nullopt;
}

std::optional<ObjectRef> GuestState::object_starting_at(GuestAddress addr) const {
    auto it = objects.find(addr.value);
    if (it == objects.end()) {
        return std::nullopt;
    }
    return ObjectRef{it->second.kind, addr, it->second.size};
}

bool GuestState::is_on_lru(GuestAddress dentry) const {
    auto it = objects.find(dentry.value);
    return it != objects.end() && it->second.on_lru;
}

bool GuestState::is_live_dentry(GuestAddress dentry) const {
    return !dentry.is_null() && (is_hashed(dentry) || dentry == root_dentry || dentry == console_dentry);
}

std::optional<GuestAddress> GuestState::dentry_for(std::string_view path) const {
    auto it = dentry_cache.find(std::string(path));
    if (it == dentry_cache.end()) {
        return std::nullopt;
    }
    return it->second;
}

std::optional<Region> GuestState::protected_area_containing(GuestAddress addr) const {
    for (const auto& r : protected_areas) {
        if (r.contains(addr)) {
            return r;
        }
    }
    return std::nullopt;
}

std::vector<GuestAddress> GuestState::objects_of(ObjectKind kind) const {
    std::vector<GuestAddress> out;
    for (const auto& [addr, rec] : objects) {
        if (rec.kind == kind) {
            out.emplace_back(addr);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

GuestAddress alloc_object(GuestState& st, MemoryImage& image, ObjectKind kind) {
    const std::uint64_t size = st.prof().size(kind);
    if (size > kPageSize) {
        throw CapacityError(std::string(to_string(kind)) + " objects do not fit in a page");
    }
    const std::uint64_t per_page = (kind == ObjectKind::Dentry && !st.heap.pack_dentries) ? 1 : kPageSize / size;
    SlabCursor& slab = st.heap.slabs[kind];
    if (slab.page.is_null() || slab.used >= per_page) {
        slab.page = take_page(st, image);
        slab.used = 0;
    }
    const GuestAddress addr = slab.page + slab.used * size;
    ++slab.used;
    st.objects[addr.value] = ObjectRecord{kind, size, false};
    return addr;
}

std::shared_ptr<const LayoutProfile> shared_default_profile() {
    static const std::shared_ptr<const LayoutProfile> p(&default_profile(), [](const LayoutProfile*) {});
    return p;
}

Vm build_guest(const BuildSpec& spec, std::shared_ptr<const LayoutProfile> profile) {
    if (spec.num_files < 1) {
        throw ConfigError("num_files must be at least 1");
    }
    if (spec.num_processes < 1) {
        throw ConfigError("num_processes must be at least 1");
    }
    if (spec.reclaim_period < 1) {
        throw ConfigError("reclaim_period must be at least 1");
    }
    Vm vm{GuestState{}, MemoryImage(spec.image_size), nullptr};
    GuestState& st = vm.state;
    MemoryImage& image = vm.image;
    st.profile = profile ? std::move(profile) : shared_default_profile();
    st.seed = spec.seed;
    st.reclaim_period = spec.reclaim_period;
    st.heap.pack_dentries = spec.interleave;
    if (image.size() <= st.layout.heap_start.value) {
        throw CapacityError("image too small for the kernel layout");
    }
    st.heap.next_page = st.layout.heap_start.page();

    image.allocate_region(st.layout.text, kPageSize);
    image.write_bytes(kHyp, st.layout.syscall_entry, kEntryCode);
    image.write_bytes(kHyp, st.layout.syscall_exit, kExitCode);
    image.allocate_region(st.layout.globals, kPageSize);

    const auto& prof = st.prof();
    const GuestAddress root_inode = new_inode(st, image, kHyp, kInodeModeDir);
    st.root_dentry = new_dentry(st, image, kHyp, "/", kNullAddress, root_inode);
    const GuestAddress console_inode = new_inode(st, image, kHyp, kInodeModeChar);
    st.console_dentry = new_dentry(st, image, kHyp, "console", st.root_dentry, console_inode);

    std::vector<std::uint64_t> order(spec.num_files);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(spec.seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng() % i]);
    }
    for (std::uint64_t idx : order) {
        const std::string path = file_name(idx);
        const GuestAddress inode = new_inode(st, image, kHyp, kInodeModeFile);
        const GuestAddress dentry = new_dentry(st, image, kHyp, path, st.root_dentry, inode);
        hash_insert(st, image, kHyp, dentry, path);
        st.inode_table[path] = inode;
        st.files.insert(path);
    }

    std::uint64_t console_refs = 0;
    for (Pid pid = 1; pid <= spec.num_processes; ++pid) {
        const GuestAddress fdt = alloc_object(st, image, ObjectKind::Fdt);
        const GuestAddress files = alloc_object(st, image, ObjectKind::FilesStruct);
        ObjectBytes(prof.size(ObjectKind::FilesStruct)).word(prof.files_struct().fdt, fdt.value).commit(image, kHyp, files);
        const GuestAddress task = alloc_object(st, image, ObjectKind::Task);
        ObjectBytes(prof.size(ObjectKind::Task))
            .word(prof.task().pid, pid)
            .word(prof.task().files, files.value)
            .commit(image, kHyp, task);
        for (int fd = 0; fd < 3; ++fd) {
            const GuestAddress file = new_file(st, image, kHyp, st.console_dentry, console_inode);
            image.write_word(kHyp, fdt + prof.fdt().slots + static_cast<std::uint64_t>(fd) * kWordSize, file.value);
            ++console_refs;
        }
        st.processes[pid] = task;
    }
    image.write_word(kHyp, st.console_dentry + prof.dentry().count, console_refs);
    return vm;
}

SyscallResult exec_syscall(GuestState& state, MemoryImage& image, Pid pid, const SyscallRequest& req,
                           SyscallTrapHandler* hook) {
    if (!state.processes.contains(pid)) {
        throw NotFoundError("no live process with pid " + std::to_string(pid));
    }
    SyscallFrame frame{pid, state.layout.syscall_entry.value, stack_pointer_for(pid), req, {}};
    for (int round = 0; round < 4; ++round) {
        if (hook != nullptr && breakpoint_at(image, state.layout.syscall_entry)) {
            hook->on_syscall_entry(state, image, frame);
        }
        Kernel k{state, image, frame.pid, AccessContext::guest(frame.pid)};
        frame.result = k.dispatch(frame.request);
        if (hook != nullptr && breakpoint_at(image, state.layout.syscall_exit) &&
            hook->on_syscall_exit(state, image, frame) == ExitAction::RestartAtEntry) {
            continue;
        }
        return frame.result;
    }
    throw StateError("syscall restarted without completing");
}

std::uint64_t reclaim_lru(GuestState& st, MemoryImage& image) {
    const auto ctx = AccessContext::guest(kKernelPid);
    const auto& d = st.prof().dentry();
    const GuestAddress head_first = st.layout.lru_head;
    const GuestAddress head_last = st.layout.lru_head + kWordSize;
    std::uint64_t freed = 0;
    std::uint64_t cur = image.read_word(ctx, head_first);
    std::size_t guard = st.objects.size() + 1;
    while (cur != 0 && guard-- > 0) {
        const GuestAddress dentry{cur};
        const std::uint64_t next = image.read_word(ctx, dentry + d.lru_next);
        if (image.read_word(ctx, dentry + d.count) != 0) {
            cur = next;
            continue;
        }
        const std::uint64_t prev = image.read_word(ctx, dentry + d.lru_prev);
        image.write_word(ctx, prev != 0 ? GuestAddress{prev} + d.lru_next : head_first, next);
        image.write_word(ctx, next != 0 ? GuestAddress{next} + d.lru_prev : head_last, prev);

        std::vector<std::uint8_t> iname(d.iname_len);
        image.read_into(ctx, dentry + d.iname, iname);
        const GuestAddress slot = bucket_slot(st, c_string(iname));
        const std::uint64_t hn = image.read_word(ctx, dentry + d.hash_next);
        const std::uint64_t hp = image.read_word(ctx, dentry + d.hash_prev);
        const GuestAddress prev_link = hp != 0 ? GuestAddress{hp} + d.hash_next : slot;
        bool linked = image.read_word(ctx, prev_link) == dentry.value;
        if (hn != 0) {
            linked = linked || image.read_word(ctx, GuestAddress{hn} + d.hash_prev) == dentry.value;
        }
        if (linked) {
            image.write_word(ctx, prev_link, hn);
            if (hn != 0) {
                image.write_word(ctx, GuestAddress{hn} + d.hash_prev, hp);
            }
        }
        const GuestAddress inode{image.read_word(ctx, dentry + d.inode)};
        if (!inode.is_null() && st.object_starting_at(inode) &&
            image.read_word(ctx, inode + st.prof().inode().dentry) == dentry.value) {
            image.write_word(ctx, inode + st.prof().inode().dentry, 0);
        }
        if (auto it = st.dentry_paths.find(dentry); it != st.dentry_paths.end()) {
            st.dentry_cache.erase(it->second);
            st.dentry_paths.erase(it);
        }
        free_object(st, image, ctx, dentry);
        ++freed;
        cur = next;
    }
    return freed;
}

bool ScriptedProcess::step(Vm& vm) {
    if (done()) {
        return false;
    }
    results_.push_back(vm.syscall(pid_, script_[next_++]));
    return true;
}

void lru_append(GuestState& st, MemoryImage& image, GuestAddress dentry) {
    auto it = st.objects.find(dentry.value);
    if (it == st.objects.end() || it->second.kind != ObjectKind::Dentry) {
        throw NotFoundError("no dentry at " + to_hex(dentry));
    }
    if (it->second.on_lru) {
        throw StateError("dentry " + to_hex(dentry) + " is already on the LRU");
    }
    const auto& d = st.prof().dentry();
    const GuestAddress head_last = st.layout.lru_head + kWordSize;
    const std::uint64_t last = image.peek_word(head_last);
    image.write_word(kHyp, dentry + d.lru_prev, last);
    image.write_word(kHyp, dentry + d.lru_next, 0);
    image.write_word(kHyp, last != 0 ? GuestAddress{last} + d.lru_next : st.layout.lru_head, dentry.value);
    image.write_word(kHyp, head_last, dentry.value);
    it->second.on_lru = true;
}

std::vector<GuestAddress> lru_entries(const GuestState& st, const MemoryImage& image) {
    std::vector<GuestAddress> out;
    std::uint64_t cur = image.peek_word(st.layout.lru_head);
    while (cur != 0 && out.size() <= st.objects.size()) {
        out.emplace_back(cur);
        cur = image.peek_word(GuestAddress{cur} + st.prof().dentry().lru_next);
    }
    return out;
}

std::string dentry_name(const GuestState& st, const MemoryImage& image, GuestAddress dentry) {
    const auto& d = st.prof().dentry();
    const auto bytes = image.bytes().subspan((dentry + d.iname).value, d.iname_len);
    return c_string(bytes);
}

std::optional<GuestAddress> lookup_dentry(const GuestState& st, const MemoryImage& image, std::string_view path) {
    const auto& d = st.prof().dentry();
    std::uint64_t cur = image.peek_word(bucket_slot(st, path));
    std::size_t guard = st.objects.size() + 1;
    while (cur != 0 && guard-- > 0) {
        const GuestAddress dentry{cur};
        const GuestAddress name_ptr{image.peek_word(dentry + d.name)};
        if (name_ptr.value + d.iname_len <= image.size() &&
            c_string(image.bytes().subspan(name_ptr.value, d.iname_len)) == path) {
            return dentry;
        }
        cur = image.peek_word(dentry + d.hash_next);
    }
    return std::nullopt;
}

GuestAddress fdt_of(const GuestState& st, const MemoryImage& image, Pid pid) {
    auto it = st.processes.find(pid);
    if (it == st.processes.end()) {
        throw NotFoundError("no live process with pid " + std::to_string(pid));
    }
    const GuestAddress files{image.peek_word(it->second + st.prof().task().files)};
    return GuestAddress{image.peek_word(files + st.prof().files_struct().fdt)};
}

std::uint64_t dentry_count(const GuestState& st, const MemoryImage& image, GuestAddress dentry) {
    return image.peek_word(dentry + st.prof().dentry().count);
}

GuestAddress plant_decoy(GuestState& st, MemoryImage& image, std::uint64_t value) {
    const GuestAddress buf = alloc_object(st, image, ObjectKind::NameBuffer);
    const GuestAddress slot = buf + kWordSize;
    image.write_word(kHyp, slot, value);
    return slot;
}

std::vector<PointerSlot> ground_truth_pointers(const GuestState& st, const MemoryImage& image) {
    const auto& prof = st.prof();
    std::vector<PointerSlot> out;
    auto add = [&](GuestAddress slot, std::optional<ObjectKind> owner) {
        const std::uint64_t v = image.peek_word(slot);
        if (v != 0) {
            out.push_back(PointerSlot{slot, GuestAddress{v}, owner});
        }
    };
    for (std::uint64_t b = 0; b < st.layout.bucket_count; ++b) {
        add(st.layout.bucket_table + b * kWordSize, std::nullopt);
    }
    add(st.layout.lru_head, std::nullopt);
    add(st.layout.lru_head + kWordSize, std::nullopt);

    for (const auto& [raw, rec] : st.objects) {
        const GuestAddress addr{raw};
        if (rec.kind == ObjectKind::Dentry && !st.is_live_dentry(addr)) {
            if (rec.on_lru) {
                add(addr + prof.dentry().lru_next, rec.kind);
                add(addr + prof.dentry().lru_prev, rec.kind);
            }
            continue;
        }
        if (rec.kind == ObjectKind::File && !st.open_files.contains(addr)) {
            continue;
        }
        for (const auto& f : prof.layout(rec.kind).fields) {
            if (!f.is_pointer()) {
                continue;
            }
            for (std::uint64_t off = 0; off < f.width; off += kWordSize) {
                add(addr + f.offset + off, rec.kind);
            }
        }
    }
    std::sort(out.begin(), out.end(), [](const PointerSlot& a, const PointerSlot& b) { return a.slot < b.slot; });
    return out;
}

std::vector<std::string> check_invariants(const GuestState& st, const MemoryImage& image) {
    const auto& prof = st.prof();
    const auto& d = prof.dentry();
    std::vector<std::string> errors;
    auto fail = [&](std::string msg) { errors.push_back(std::move(msg)); };
    auto peek = [&](GuestAddress a) { return image.peek_word(a); };

    // hashed dentries: registry, inode back link, name pointer, bucket placement
    for (const auto& [path, dentry] : st.dentry_cache) {
        auto rec = st.object_starting_at(dentry);
        if (!rec || rec->kind != ObjectKind::Dentry) {
            fail("dentry_cache entry " + path + " at " + to_hex(dentry) + " is not a registered dentry");
            continue;
        }
        const GuestAddress inode{peek(dentry + d.inode)};
        auto irec = st.object_starting_at(inode);
        if (!irec || irec->kind != ObjectKind::Inode) {
            fail("dentry " + path + " has d_inode " + to_hex(inode) + " which is not a live inode");
        } else if (peek(inode + prof.inode().dentry) != dentry.value) {
            fail("inode of " + path + " does not point back to " + to_hex(dentry));
        }
        if (peek(dentry + d.name) != (dentry + d.iname).value) {
            fail("d_name of " + path + " does not point at its inline name");
        }
        if (dentry_name(st, image, dentry) != path) {
            fail("name stored in dentry " + to_hex(dentry) + " does not match " + path);
        }
        if (lookup_dentry(st, image, path) != dentry) {
            fail("hash chain walk for " + path + " does not reach " + to_hex(dentry));
        }
    }

    // hash chains are consistent doubly linked lists holding exactly the cache
    std::size_t chained = 0;
    for (std::uint64_t b = 0; b < st.layout.bucket_count; ++b) {
        std::uint64_t prev = 0;
        std::uint64_t cur = peek(st.layout.bucket_table + b * kWordSize);
        std::size_t guard = st.objects.size() + 1;
        while (cur != 0) {
            if (guard-- == 0) {
                fail("hash bucket " + std::to_string(b) + " has a cycle");
                break;
            }
            const GuestAddress dentry{cur};
            if (!st.is_hashed(dentry)) {
                fail("hash bucket " + std::to_string(b) + " links unregistered dentry " + to_hex(dentry));
                break;
            }
            if (peek(dentry + d.hash_prev) != prev) {
                fail("d_hash_prev of " + to_hex(dentry) + " does not point at its predecessor");
            }
            ++chained;
            prev = cur;
            cur = peek(dentry + d.hash_next);
        }
    }
    if (chained != st.dentry_cache.size()) {
        fail("hash chains hold " + std::to_string(chained) + " dentries, cache has " +
             std::to_string(st.dentry_cache.size()));
    }

    // d_count equals the number of open files referring to the dentry
    std::map<GuestAddress, std::uint64_t> refs;
    for (GuestAddress file : st.open_files) {
        const GuestAddress dentry{peek(file + prof.file().dentry)};
        ++refs[dentry];
        if (!st.is_live_dentry(dentry)) {
            fail("file " + to_hex(file) + " points at " + to_hex(dentry) + " which is not a live dentry");
        } else if (peek(file + prof.file().inode) != peek(dentry + d.inode)) {
            fail("file " + to_hex(file) + " f_inode disagrees with its dentry's d_inode");
        }
    }
    for (const auto& [raw, rec] : st.objects) {
        const GuestAddress dentry{raw};
        if (rec.kind != ObjectKind::Dentry || !st.is_live_dentry(dentry)) {
            continue;
        }
        const std::uint64_t count = peek(dentry + d.count);
        if (count != refs[dentry]) {
            fail("d_count of " + to_hex(dentry) + " is " + std::to_string(count) + " but " +
                 std::to_string(refs[dentry]) + " files refer to it");
        }
    }

    // task -> files -> fdt -> file
    std::set<GuestAddress> installed;
    for (const auto& [pid, task] : st.processes) {
        const GuestAddress files{peek(task + prof.task().files)};
        auto frec = st.object_starting_at(files);
        if (!frec || frec->kind != ObjectKind::FilesStruct) {
            fail("task " + std::to_string(pid) + " files pointer is dangling");
            continue;
        }
        const GuestAddress fdt{peek(files + prof.files_struct().fdt)};
        auto trec = st.object_starting_at(fdt);
        if (!trec || trec->kind != ObjectKind::Fdt) {
            fail("task " + std::to_string(pid) + " fdt pointer " + to_hex(fdt) + " is dangling");
            continue;
        }
        for (std::uint64_t fd = 0; fd < prof.fdt().max_fds; ++fd) {
            const GuestAddress file{peek(fdt + prof.fdt().slots + fd * kWordSize)};
            if (file.is_null()) {
                continue;
            }
            if (!st.open_files.contains(file)) {
                fail("fd " + std::to_string(fd) + " of pid " + std::to_string(pid) + " points at a closed file");
            }
            installed.insert(file);
        }
    }
    if (installed.size() != st.open_files.size()) {
        fail("open file set and fd tables disagree");
    }

    // LRU list
    std::uint64_t prev = 0;
    std::size_t lru_len = 0;
    for (GuestAddress e : lru_entries(st, image)) {
        if (!st.is_on_lru(e)) {
            fail("LRU links " + to_hex(e) + " which is not marked as on the LRU");
        }
        if (peek(e + d.lru_prev) != prev) {
            fail("d_lru_prev of " + to_hex(e) + " does not point at its predecessor");
        }
        prev = e.value;
        ++lru_len;
    }
    if (peek(st.layout.lru_head + kWordSize) != prev) {
        fail("LRU tail pointer is stale");
    }
    const auto marked = std::count_if(st.objects.begin(), st.objects.end(), [](const auto& kv) { return kv.second.on_lru; });
    if (static_cast<std::size_t>(marked) != lru_len) {
        fail("LRU holds " + std::to_string(lru_len) + " entries but " + std::to_string(marked) + " are marked");
    }
    return errors;
}

} // namespace kmig

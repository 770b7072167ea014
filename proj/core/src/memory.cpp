#include "kmig/memory.hpp"

#include "kmig/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace kmig {

std::string to_hex(std::uint64_t value) {
    std::ostringstream os;
    os << "0x" << std::hex << value;
    return os.str();
}

std::string to_hex(GuestAddress addr) { return to_hex(addr.value); }

const char* to_string(AccessKind kind) { return kind == AccessKind::Read ? "read" : "write"; }

MemoryImage::MemoryImage(std::uint64_t size) {
    if (size == 0 || size % kPageSize != 0) {
        throw RangeError("image size must be a non-zero multiple of the page size");
    }
    bytes_.assign(size, 0);
    flags_.assign(size / kPageSize, PageFlags{});
}

MemoryImage MemoryImage::clone() const {
    MemoryImage copy(size());
    copy.bytes_ = bytes_;
    copy.flags_ = flags_;
    copy.regions_ = regions_;
    return copy;
}

void MemoryImage::check_range(GuestAddress addr, std::uint64_t len) const {
    if (addr.value > size() || len > size() - addr.value) {
        throw RangeError("access [" + to_hex(addr) + ", +" + std::to_string(len) + ") outside image of " +
                         std::to_string(size()) + " bytes");
    }
}

void MemoryImage::observe(AccessContext ctx, GuestAddress addr, std::uint64_t len, AccessKind kind) {
    if (!ctx.is_guest() || len == 0) {
        return;
    }
    if (tracer_) {
        tracer_(AccessRecord{ctx.pid(), addr, len, kind});
    }
    const std::uint64_t first = addr.page();
    const std::uint64_t last = (addr.value + len - 1) / kPageSize;
    for (std::uint64_t page = first; page <= last; ++page) {
        if (!flags_[page].traps(kind)) {
            continue;
        }
        const std::uint64_t touched = page == first ? addr.page_offset() : 0;
        if (trap_handler_) {
            trap_handler_(TrapNotice{page, static_cast<std::uint16_t>(touched), kind, ctx.pid()});
        }
    }
}

std::vector<std::uint8_t> MemoryImage::read_bytes(AccessContext ctx, GuestAddress addr, std::uint64_t len) {
    std::vector<std::uint8_t> out(len);
    read_into(ctx, addr, out);
    return out;
}

void MemoryImage::read_into(AccessContext ctx, GuestAddress addr, std::span<std::uint8_t> out) {
    check_range(addr, out.size());
    observe(ctx, addr, out.size(), AccessKind::Read);
    if (!out.empty()) {
        std::memcpy(out.data(), bytes_.data() + addr.value, out.size());
    }
}

void MemoryImage::write_bytes(AccessContext ctx, GuestAddress addr, std::span<const std::uint8_t> data) {
    check_range(addr, data.size());
    observe(ctx, addr, data.size(), AccessKind::Write);
    if (!data.empty()) {
        std::memcpy(bytes_.data() + addr.value, data.data(), data.size());
    }
}

std::uint64_t MemoryImage::read_word(AccessContext ctx, GuestAddress addr) {
    if (!addr.word_aligned()) {
        throw AlignmentError("word read at unaligned address " + to_hex(addr));
    }
    std::uint8_t raw[kWordSize];
    read_into(ctx, addr, raw);
    std::uint64_t value = 0;
    for (std::size_t i = 0; i < kWordSize; ++i) {
        value |= std::uint64_t{raw[i]} << (8 * i);
    }
    return value;
}

void MemoryImage::write_word(AccessContext ctx, GuestAddress addr, std::uint64_t value) {
    if (!addr.word_aligned()) {
        throw AlignmentError("word write at unaligned address " + to_hex(addr));
    }
    std::uint8_t raw[kWordSize];
    for (std::size_t i = 0; i < kWordSize; ++i) {
        raw[i] = static_cast<std::uint8_t>(value >> (8 * i));
    }
    write_bytes(ctx, addr, raw);
}

std::uint64_t MemoryImage::peek_word(GuestAddress addr) const {
    if (!addr.word_aligned()) {
        throw AlignmentError("word read at unaligned address " + to_hex(addr));
    }
    check_range(addr, kWordSize);
    std::uint64_t value = 0;
    for (std::size_t i = 0; i < kWordSize; ++i) {
        value |= std::uint64_t{bytes_[addr.value + i]} << (8 * i);
    }
    return value;
}

bool MemoryImage::overlaps_region(GuestAddress addr, std::uint64_t len) const {
    const std::uint64_t end = addr.value + pages_for(len) * kPageSize;
    auto it = regions_.lower_bound(end);
    if (it == regions_.begin()) {
        return false;
    }
    --it;
    return it->second.end().value > addr.value;
}

std::optional<Region> MemoryImage::region_containing(GuestAddress addr) const {
    auto it = regions_.upper_bound(addr.value);
    if (it == regions_.begin()) {
        return std::nullopt;
    }
    --it;
    if (it->second.contains(addr)) {
        return it->second;
    }
    return std::nullopt;
}

Region MemoryImage::allocate_region(GuestAddress addr, std::uint64_t len) {
    if (!addr.page_aligned()) {
        throw AlignmentError("region start " + to_hex(addr) + " is not page aligned");
    }
    if (len == 0) {
        throw RangeError("region length must be positive");
    }
    const Region region{addr, len};
    check_range(addr, region.reserved_bytes());
    if (overlaps_region(addr, len)) {
        throw OverlapError("region at " + to_hex(addr) + " overlaps an existing region");
    }
    std::fill_n(bytes_.begin() + static_cast<std::ptrdiff_t>(addr.value), region.reserved_bytes(), 0);
    regions_.emplace(addr.value, region);
    return region;
}

void MemoryImage::release_region(GuestAddress addr, std::uint64_t len) {
    auto it = regions_.find(addr.value);
    if (it == regions_.end() || len == 0 || it->second.pages() != pages_for(len)) {
        throw NotFoundError("no region [" + to_hex(addr) + ", +" + std::to_string(len) + ")");
    }
    const Region region = it->second;
    regions_.erase(it);
    for (std::uint64_t p = 0; p < region.pages(); ++p) {
        flags_[region.start.page() + p] = PageFlags{};
    }
}

PageFlags MemoryImage::flags(std::uint64_t page) const {
    if (page >= flags_.size()) {
        throw RangeError("page " + std::to_string(page) + " outside image");
    }
    return flags_[page];
}

void MemoryImage::set_flags(std::uint64_t page, PageFlags flags) {
    if (page >= flags_.size()) {
        throw RangeError("page " + std::to_string(page) + " outside image");
    }
    flags_[page] = flags;
}

std::vector<std::uint64_t> MemoryImage::trapped_pages() const {
    std::vector<std::uint64_t> out;
    for (std::uint64_t p = 0; p < flags_.size(); ++p) {
        if (flags_[p].any()) {
            out.push_back(p);
        }
    }
    return out;
}

std::string MemoryImage::sidecar_json() const {
    nlohmann::json doc;
    doc["page_size"] = kPageSize;
    doc["size"] = size();
    doc["regions"] = nlohmann::json::array();
    for (const auto& [start, region] : regions_) {
        doc["regions"].push_back({{"start", start}, {"len", region.length}});
    }
    doc["trapped"] = nlohmann::json::array();
    for (std::uint64_t p : trapped_pages()) {
        doc["trapped"].push_back({{"page", p}, {"read", flags_[p].trap_read}, {"write", flags_[p].trap_write}});
    }
    return doc.dump(2);
}

void MemoryImage::save_snapshot(const std::filesystem::path& image_path,
                                const std::filesystem::path& sidecar_path) const {
    std::ofstream raw(image_path, std::ios::binary | std::ios::trunc);
    if (!raw) {
        throw ConfigError("cannot write " + image_path.string());
    }
    raw.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
    std::ofstream side(sidecar_path, std::ios::trunc);
    if (!side) {
        throw ConfigError("cannot write " + sidecar_path.string());
    }
    side << sidecar_json() << '\n';
}

MemoryImage MemoryImage::load_snapshot(const std::filesystem::path& image_path,
                                       const std::filesystem::path& sidecar_path) {
    std::ifstream raw(image_path, std::ios::binary);
    if (!raw) {
        throw ConfigError("cannot read " + image_path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(raw)), std::istreambuf_iterator<char>());
    std::ifstream side(sidecar_path);
    if (!side) {
        throw ConfigError("cannot read " + sidecar_path.string());
    }
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(side);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad snapshot sidecar: ") + e.what());
    }
    if (doc.value("page_size", kPageSize) != kPageSize || doc.value("size", std::uint64_t{0}) != bytes.size()) {
        throw ConfigError("snapshot sidecar does not match image " + image_path.string());
    }
    MemoryImage image(bytes.size());
    image.bytes_ = std::move(bytes);
    for (const auto& r : doc.at("regions")) {
        const GuestAddress start{r.at("start").get<std::uint64_t>()};
        const Region region{start, r.at("len").get<std::uint64_t>()};
        if (!start.page_aligned() || image.overlaps_region(start, region.length)) {
            throw ConfigError("snapshot sidecar has an invalid region at " + to_hex(start));
        }
        image.regions_.emplace(start.value, region);
    }
    for (const auto& t : doc.at("trapped")) {
        image.set_flags(t.at("page").get<std::uint64_t>(),
                        PageFlags{t.at("read").get<bool>(), t.at("write").get<bool>()});
    }
    return image;
}

} // namespace kmig

#pragma once

#include "kmig/address.hpp"
#include "kmig/memory.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace kmig {

enum class ObjectKind : std::uint8_t { Dentry, Inode, File, FilesStruct, Fdt, Task, NameBuffer };

inline constexpr std::array<ObjectKind, 7> kAllObjectKinds{
    ObjectKind::Dentry, ObjectKind::Inode, ObjectKind::File,      ObjectKind::FilesStruct,
    ObjectKind::Fdt,    ObjectKind::Task,  ObjectKind::NameBuffer};

const char* to_string(ObjectKind kind);
std::optional<ObjectKind> object_kind_from_string(std::string_view name);

enum class FieldRole : std::uint8_t { Scalar, Pointer, InlineBuffer, PointerArray };

const char* to_string(FieldRole role);

struct FieldSpec {
    std::string name;
    std::uint64_t offset = 0;
    std::uint64_t width = 0;
    FieldRole role = FieldRole::Scalar;
    std::optional<ObjectKind> target; // pointer and pointer-array fields only

    bool is_pointer() const { return role == FieldRole::Pointer || role == FieldRole::PointerArray; }
    bool operator==(const FieldSpec&) const = default;
};

struct ObjectLayout {
    std::uint64_t size = 0;
    std::vector<FieldSpec> fields;

    const FieldSpec* find(std::string_view name) const;
    const FieldSpec& field(std::string_view name) const;
    // Field whose byte range covers `offset`, if any.
    const FieldSpec* field_at(std::uint64_t offset) const;
    bool operator==(const ObjectLayout&) const = default;
};

struct DentryOffsets {
    std::uint64_t count, hash_next, hash_prev, parent, inode, name, lru_next, lru_prev, iname, iname_len;
};
struct InodeOffsets {
    std::uint64_t ino, count, dentry, mode, size;
};
struct FileOffsets {
    std::uint64_t dentry, inode, count, pos;
};
struct FilesStructOffsets {
    std::uint64_t fdt;
};
struct FdtOffsets {
    std::uint64_t slots, max_fds;
};
struct TaskOffsets {
    std::uint64_t pid, files;
};

class LayoutProfile {
public:
    // Validates field bounds, overlap and pointer alignment, and that every
    // field the simulator relies on is present with the right role.
    explicit LayoutProfile(std::map<ObjectKind, ObjectLayout> layouts);

    const ObjectLayout& layout(ObjectKind kind) const;
    std::uint64_t size(ObjectKind kind) const { return layout(kind).size; }
    const std::map<ObjectKind, ObjectLayout>& layouts() const { return layouts_; }

    const DentryOffsets& dentry() const { return dentry_; }
    const InodeOffsets& inode() const { return inode_; }
    const FileOffsets& file() const { return file_; }
    const FilesStructOffsets& files_struct() const { return files_; }
    const FdtOffsets& fdt() const { return fdt_; }
    const TaskOffsets& task() const { return task_; }

    // True when `offset` is the start of a pointer (or pointer-array slot) of `kind`.
    bool is_pointer_slot(ObjectKind kind, std::uint64_t offset) const;

    std::string to_json() const;
    static LayoutProfile from_json(std::string_view text);

    bool operator==(const LayoutProfile& other) const { return layouts_ == other.layouts_; }

private:
    std::map<ObjectKind, ObjectLayout> layouts_;
    DentryOffsets dentry_{};
    InodeOffsets inode_{};
    FileOffsets file_{};
    FilesStructOffsets files_{};
    FdtOffsets fdt_{};
    TaskOffsets task_{};
};

// The simulator's built-in layout. Dentries are 128 bytes with the name
// stored inline at offset 64, so 32 of them share a page.
const LayoutProfile& default_profile();

inline constexpr std::uint64_t kInodeModeFile = 0100644;
inline constexpr std::uint64_t kInodeModeDir = 0040755;

using FieldValue = std::variant<std::uint64_t, std::vector<std::uint8_t>>;
using FieldMap = std::map<std::string, FieldValue>;

// Pointer-array fields decode to one entry per slot, named "<field>[i]".
FieldMap decode_object(const MemoryImage& image, const LayoutProfile& profile, ObjectKind kind, GuestAddress addr);
// Writes the listed fields hypervisor-context; unlisted fields keep their bytes.
void encode_object(MemoryImage& image, const LayoutProfile& profile, ObjectKind kind, GuestAddress addr,
                   const FieldMap& fields);

std::uint64_t word_of(const FieldMap& fields, const std::string& name);

} // namespace kmig

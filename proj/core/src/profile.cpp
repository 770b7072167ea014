#include "kmig/profile.hpp"

#include "kmig/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstring>

namespace kmig {

namespace {

constexpr std::array<std::string_view, 7> kKindNames{"dentry", "inode",       "file",      "files_struct",
                                                      "fdt",    "task",        "name_buffer"};

bool is_scalar_width(std::uint64_t w) { return w == 1 || w == 2 || w == 4 || w == 8; }

std::uint64_t load_le(const std::uint8_t* p, std::uint64_t width) {
    std::uint64_t v = 0;
    for (std::uint64_t i = 0; i < width; ++i) {
        v |= std::uint64_t{p[i]} << (8 * i);
    }
    return v;
}

void validate_layout(ObjectKind kind, const ObjectLayout& layout) {
    const std::string where = std::string(to_string(kind)) + " layout: ";
    if (layout.size == 0 || layout.size % kWordSize != 0) {
        throw ConfigError(where + "size must be a positive multiple of 8");
    }
    std::vector<const FieldSpec*> sorted;
    for (const auto& f : layout.fields) {
        if (f.width == 0 || f.offset + f.width > layout.size) {
            throw ConfigError(where + "field " + f.name + " exceeds object size");
        }
        switch (f.role) {
        case FieldRole::Scalar:
            if (!is_scalar_width(f.width)) {
                throw ConfigError(where + "scalar " + f.name + " must be 1, 2, 4 or 8 bytes");
            }
            break;
        case FieldRole::Pointer:
        case FieldRole::PointerArray:
            if (f.offset % kWordSize != 0 || f.width % kWordSize != 0 ||
                (f.role == FieldRole::Pointer && f.width != kWordSize)) {
                throw ConfigError(where + "pointer " + f.name + " must be word sized and aligned");
            }
            if (!f.target) {
                throw ConfigError(where + "pointer " + f.name + " has no target kind");
            }
            break;
        case FieldRole::InlineBuffer:
            break;
        }
        sorted.push_back(&f);
    }
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        if (sorted[i - 1]->offset + sorted[i - 1]->width > sorted[i]->offset) {
            throw ConfigError(where + "fields " + sorted[i - 1]->name + " and " + sorted[i]->name + " overlap");
        }
        if (sorted[i - 1]->name == sorted[i]->name) {
            throw ConfigError(where + "duplicate field " + sorted[i]->name);
        }
    }
}

std::uint64_t require(const ObjectLayout& layout, ObjectKind kind, std::string_view name, FieldRole role,
                      std::optional<ObjectKind> target = std::nullopt) {
    const FieldSpec* f = layout.find(name);
    if (f == nullptr || f->role != role || (target && f->target != target)) {
        throw ConfigError(std::string(to_string(kind)) + " layout: missing or mistyped field " + std::string(name));
    }
    return f->offset;
}

FieldSpec scalar(std::string name, std::uint64_t off, std::uint64_t width = 8) {
    return {std::move(name), off, width, FieldRole::Scalar, std::nullopt};
}
FieldSpec pointer(std::string name, std::uint64_t off, ObjectKind target) {
    return {std::move(name), off, kWordSize, FieldRole::Pointer, target};
}
FieldSpec buffer(std::string name, std::uint64_t off, std::uint64_t width) {
    return {std::move(name), off, width, FieldRole::InlineBuffer, std::nullopt};
}

} // namespace

const char* to_string(ObjectKind kind) { return kKindNames[static_cast<std::size_t>(kind)].data(); }

std::optional<ObjectKind> object_kind_from_string(std::string_view name) {
    for (std::size_t i = 0; i < kKindNames.size(); ++i) {
        if (kKindNames[i] == name) {
            return static_cast<ObjectKind>(i);
        }
    }
    return std::nullopt;
}

const char* to_string(FieldRole role) {
    switch (role) {
    case FieldRole::Scalar: return "scalar";
    case FieldRole::Pointer: return "pointer";
    case FieldRole::InlineBuffer: return "inline-buffer";
    case FieldRole::PointerArray: return "pointer-array";
    }
    return "?";
}

const FieldSpec* ObjectLayout::find(std::string_view name) const {
    auto it = std::find_if(fields.begin(), fields.end(), [&](const FieldSpec& f) { return f.name == name; });
    return it == fields.end() ? nullptr : &*it;
}

const FieldSpec& ObjectLayout::field(std::string_view name) const {
    if (const FieldSpec* f = find(name)) {
        return *f;
    }
    throw NotFoundError("no field named " + std::string(name));
}

const FieldSpec* ObjectLayout::field_at(std::uint64_t offset) const {
    for (const auto& f : fields) {
        if (offset >= f.offset && offset < f.offset + f.width) {
            return &f;
        }
    }
    return nullptr;
}

LayoutProfile::LayoutProfile(std::map<ObjectKind, ObjectLayout> layouts) : layouts_(std::move(layouts)) {
    for (ObjectKind kind : kAllObjectKinds) {
        auto it = layouts_.find(kind);
        if (it == layouts_.end()) {
            throw ConfigError(std::string("profile has no layout for ") + to_string(kind));
        }
        validate_layout(kind, it->second);
    }
    using K = ObjectKind;
    using R = FieldRole;
    const auto& d = layouts_.at(K::Dentry);
    dentry_.count = require(d, K::Dentry, "d_count", R::Scalar);
    dentry_.hash_next = require(d, K::Dentry, "d_hash_next", R::Pointer, K::Dentry);
    dentry_.hash_prev = require(d, K::Dentry, "d_hash_prev", R::Pointer, K::Dentry);
    dentry_.parent = require(d, K::Dentry, "d_parent", R::Pointer, K::Dentry);
    dentry_.inode = require(d, K::Dentry, "d_inode", R::Pointer, K::Inode);
    dentry_.name = require(d, K::Dentry, "d_name", R::Pointer, K::NameBuffer);
    dentry_.lru_next = require(d, K::Dentry, "d_lru_next", R::Pointer, K::Dentry);
    dentry_.lru_prev = require(d, K::Dentry, "d_lru_prev", R::Pointer, K::Dentry);
    dentry_.iname = require(d, K::Dentry, "d_iname", R::InlineBuffer);
    dentry_.iname_len = d.field("d_iname").width;
    if (d.field("d_count").width != kWordSize) {
        throw ConfigError("dentry layout: d_count must be 8 bytes");
    }

    const auto& i = layouts_.at(K::Inode);
    inode_.ino = require(i, K::Inode, "i_ino", R::Scalar);
    inode_.count = require(i, K::Inode, "i_count", R::Scalar);
    inode_.dentry = require(i, K::Inode, "i_dentry", R::Pointer, K::Dentry);
    inode_.mode = require(i, K::Inode, "i_mode", R::Scalar);
    inode_.size = require(i, K::Inode, "i_size", R::Scalar);

    const auto& f = layouts_.at(K::File);
    file_.dentry = require(f, K::File, "f_dentry", R::Pointer, K::Dentry);
    file_.inode = require(f, K::File, "f_inode", R::Pointer, K::Inode);
    file_.count = require(f, K::File, "f_count", R::Scalar);
    file_.pos = require(f, K::File, "f_pos", R::Scalar);

    files_.fdt = require(layouts_.at(K::FilesStruct), K::FilesStruct, "fdt", R::Pointer, K::Fdt);

    const auto& t = layouts_.at(K::Fdt);
    fdt_.slots = require(t, K::Fdt, "fd", R::PointerArray, K::File);
    fdt_.max_fds = t.field("fd").width / kWordSize;

    const auto& task = layouts_.at(K::Task);
    task_.pid = require(task, K::Task, "pid", R::Scalar);
    task_.files = require(task, K::Task, "files", R::Pointer, K::FilesStruct);
    for (const auto& field : {task.field("pid"), i.field("i_count"), i.field("i_mode"), f.field("f_count"),
                              f.field("f_pos"), i.field("i_ino"), i.field("i_size")}) {
        if (field.width != kWordSize) {
            throw ConfigError("scalar " + field.name + " must be 8 bytes");
        }
    }
}

const ObjectLayout& LayoutProfile::layout(ObjectKind kind) const { return layouts_.at(kind); }

bool LayoutProfile::is_pointer_slot(ObjectKind kind, std::uint64_t offset) const {
    const FieldSpec* f = layout(kind).field_at(offset);
    if (f == nullptr || !f->is_pointer()) {
        return false;
    }
    return (offset - f->offset) % kWordSize == 0;
}

const LayoutProfile& default_profile() {
    static const LayoutProfile profile = [] {
        using K = ObjectKind;
        std::map<K, ObjectLayout> m;
        m[K::Dentry] = {128,
                        {scalar("d_count", 0), pointer("d_hash_next", 8, K::Dentry), pointer("d_hash_prev", 16, K::Dentry),
                         pointer("d_parent", 24, K::Dentry), pointer("d_inode", 32, K::Inode),
                         pointer("d_name", 40, K::NameBuffer), pointer("d_lru_next", 48, K::Dentry),
                         pointer("d_lru_prev", 56, K::Dentry), buffer("d_iname", 64, 64)}};
        m[K::Inode] = {64,
                       {scalar("i_ino", 0), scalar("i_count", 8), pointer("i_dentry", 16, K::Dentry), scalar("i_mode", 24),
                        scalar("i_size", 32)}};
        m[K::File] = {64,
                      {pointer("f_dentry", 0, K::Dentry), pointer("f_inode", 8, K::Inode), scalar("f_count", 16),
                       scalar("f_pos", 24), scalar("f_flags", 32)}};
        m[K::FilesStruct] = {64, {scalar("count", 0), pointer("fdt", 8, K::Fdt), scalar("next_fd", 16)}};
        m[K::Fdt] = {512, {FieldSpec{"fd", 0, 512, FieldRole::PointerArray, K::File}}};
        m[K::Task] = {64, {scalar("pid", 0), pointer("files", 8, K::FilesStruct), scalar("state", 16), buffer("comm", 24, 16)}};
        m[K::NameBuffer] = {64, {buffer("data", 0, 64)}};
        return LayoutProfile(std::move(m));
    }();
    return profile;
}

std::string LayoutProfile::to_json() const {
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& [kind, layout] : layouts_) {
        nlohmann::json fields = nlohmann::json::array();
        for (const auto& f : layout.fields) {
            nlohmann::json jf{{"name", f.name}, {"offset", f.offset}, {"width", f.width}, {"role", to_string(f.role)}};
            if (f.target) {
                jf["target"] = to_string(*f.target);
            }
            fields.push_back(std::move(jf));
        }
        doc[to_string(kind)] = {{"size", layout.size}, {"fields", std::move(fields)}};
    }
    return doc.dump(2);
}

LayoutProfile LayoutProfile::from_json(std::string_view text) {
    std::map<ObjectKind, ObjectLayout> layouts;
    try {
        const auto doc = nlohmann::json::parse(text);
        for (const auto& [name, body] : doc.items()) {
            auto kind = object_kind_from_string(name);
            if (!kind) {
                throw ConfigError("unknown object kind " + name);
            }
            ObjectLayout layout;
            layout.size = body.at("size").get<std::uint64_t>();
            for (const auto& jf : body.at("fields")) {
                FieldSpec f;
                f.name = jf.at("name").get<std::string>();
                f.offset = jf.at("offset").get<std::uint64_t>();
                f.width = jf.at("width").get<std::uint64_t>();
                const auto role = jf.at("role").get<std::string>();
                if (role == "scalar") {
                    f.role = FieldRole::Scalar;
                } else if (role == "pointer") {
                    f.role = FieldRole::Pointer;
                } else if (role == "inline-buffer") {
                    f.role = FieldRole::InlineBuffer;
                } else if (role == "pointer-array") {
                    f.role = FieldRole::PointerArray;
                } else {
                    throw ConfigError("unknown field role " + role);
                }
                if (jf.contains("target")) {
                    f.target = object_kind_from_string(jf.at("target").get<std::string>());
                    if (!f.target) {
                        throw ConfigError("unknown pointer target in field " + f.name);
                    }
                }
                layout.fields.push_back(std::move(f));
            }
            layouts[*kind] = std::move(layout);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad profile JSON: ") + e.what());
    }
    return LayoutProfile(std::move(layouts));
}

FieldMap decode_object(const MemoryImage& image, const LayoutProfile& profile, ObjectKind kind, GuestAddress addr) {
    const ObjectLayout& layout = profile.layout(kind);
    if (addr.value > image.size() || layout.size > image.size() - addr.value) {
        throw RangeError(std::string(to_string(kind)) + " at " + to_hex(addr) + " extends past the image");
    }
    const std::uint8_t* base = image.bytes().data() + addr.value;
    FieldMap out;
    for (const auto& f : layout.fields) {
        switch (f.role) {
        case FieldRole::Scalar:
        case FieldRole::Pointer:
            out[f.name] = load_le(base + f.offset, f.width);
            break;
        case FieldRole::InlineBuffer:
            out[f.name] = std::vector<std::uint8_t>(base + f.offset, base + f.offset + f.width);
            break;
        case FieldRole::PointerArray:
            for (std::uint64_t i = 0; i < f.width / kWordSize; ++i) {
                out[f.name + "[" + std::to_string(i) + "]"] = load_le(base + f.offset + i * kWordSize, kWordSize);
            }
            break;
        }
    }
    return out;
}

void encode_object(MemoryImage& image, const LayoutProfile& profile, ObjectKind kind, GuestAddress addr,
                   const FieldMap& fields) {
    const ObjectLayout& layout = profile.layout(kind);
    const auto ctx = AccessContext::hypervisor();
    for (const auto& [name, value] : fields) {
        std::uint64_t offset = 0;
        std::uint64_t width = 0;
        bool is_buffer = false;
        if (const FieldSpec* f = layout.find(name)) {
            if (f->role == FieldRole::PointerArray) {
                throw NotFoundError("pointer-array field " + name + " must be written per slot");
            }
            offset = f->offset;
            width = f->width;
            is_buffer = f->role == FieldRole::InlineBuffer;
        } else {
            // "<array>[i]" slot of a pointer-array field
            const auto open = name.find('[');
            const FieldSpec* arr = open == std::string::npos ? nullptr : layout.find(name.substr(0, open));
            if (arr == nullptr || arr->role != FieldRole::PointerArray || name.back() != ']') {
                throw NotFoundError(std::string(to_string(kind)) + " has no field " + name);
            }
            const std::uint64_t index = std::stoull(name.substr(open + 1, name.size() - open - 2));
            if (index >= arr->width / kWordSize) {
                throw RangeError("slot index out of range in " + name);
            }
            offset = arr->offset + index * kWordSize;
            width = kWordSize;
        }
        std::vector<std::uint8_t> raw(width, 0);
        if (is_buffer) {
            const auto* bytes = std::get_if<std::vector<std::uint8_t>>(&value);
            if (bytes == nullptr || bytes->size() > width) {
                throw RangeError("buffer value for " + name + " must be at most " + std::to_string(width) + " bytes");
            }
            std::copy(bytes->begin(), bytes->end(), raw.begin());
        } else {
            const auto* word = std::get_if<std::uint64_t>(&value);
            if (word == nullptr) {
                throw RangeError("field " + name + " takes an integer value");
            }
            if (width < 8 && (*word >> (8 * width)) != 0) {
                throw RangeError("value for " + name + " does not fit in " + std::to_string(width) + " bytes");
            }
            for (std::uint64_t i = 0; i < width; ++i) {
                raw[i] = static_cast<std::uint8_t>(*word >> (8 * i));
            }
        }
        image.write_bytes(ctx, addr + offset, raw);
    }
}

std::uint64_t word_of(const FieldMap& fields, const std::string& name) {
    auto it = fields.find(name);
    if (it == fields.end()) {
        throw NotFoundError("decoded object has no field " + name);
    }
    return std::get<std::uint64_t>(it->second);
}

} // namespace kmig

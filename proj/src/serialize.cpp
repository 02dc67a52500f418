#include "selva/serialize.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <vector>

#include "selva/rng.hpp"

namespace selva {

namespace {

constexpr char kMagic[4] = {'S', 'L', 'V', 'T'};

template <typename T>
void put_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = (unsigned char)((uint64_t(v) >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("truncated tensor stream");
    uint64_t v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= uint64_t(buf[i]) << (8 * i);
    return T(v);
}

std::string safe_name(const std::string& name) {
    std::string out = name;
    for (char& c : out)
        if (c == '/' || c == '\\') c = '_';
    return out;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    put_le<uint32_t>(os, kSlvtVersion);
    put_le<uint32_t>(os, uint32_t(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_le<uint64_t>(os, uint64_t(t.dim(i)));
    static_assert(sizeof(double) == 8);
    for (int64_t i = 0; i < t.size(); ++i) {
        uint64_t bits;
        double v = t[i];
        std::memcpy(&bits, &v, 8);
        put_le<uint64_t>(os, bits);
    }
    if (!os) throw IoError("tensor write failed");
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad tensor magic");
    uint32_t version = get_le<uint32_t>(is);
    if (version != kSlvtVersion)
        throw IoError("unsupported tensor format version " + std::to_string(version));
    uint32_t rank = get_le<uint32_t>(is);
    if (rank > 8) throw IoError("implausible tensor rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    for (uint32_t i = 0; i < rank; ++i) {
        uint64_t d = get_le<uint64_t>(is);
        if (d == 0 || d > (1ull << 31)) throw IoError("implausible tensor dim");
        shape[i] = int(d);
    }
    Tensor t(shape);
    for (int64_t i = 0; i < t.size(); ++i) {
        uint64_t bits = get_le<uint64_t>(is);
        double v;
        std::memcpy(&v, &bits, 8);
        t[i] = v;
    }
    return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    return read_tensor(is);
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "tensors", ec);
    if (ec) throw IoError("cannot create checkpoint dir " + dir.string() + ": " + ec.message());
    nlohmann::json manifest;
    manifest["format"] = "selva-checkpoint";
    manifest["version"] = 1;
    nlohmann::json names = nlohmann::json::object();
    for (const auto& [name, tensor] : ckpt.tensors) {
        std::string file = safe_name(name) + ".slvt";
        save_tensor(dir / "tensors" / file, tensor);
        names[name] = "tensors/" + file;
    }
    manifest["tensors"] = names;
    manifest["meta"] = ckpt.meta.is_null() ? nlohmann::json::object() : ckpt.meta;
    save_json(dir / "manifest.json", manifest);
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    nlohmann::json manifest = load_json(dir / "manifest.json");
    if (manifest.value("format", "") != "selva-checkpoint")
        throw IoError("not a checkpoint directory: " + dir.string());
    Checkpoint ckpt;
    ckpt.meta = manifest.value("meta", nlohmann::json::object());
    for (auto& [name, rel] : manifest.at("tensors").items())
        ckpt.tensors.emplace(name, load_tensor(dir / rel.get<std::string>()));
    return ckpt;
}

uint64_t file_fingerprint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    uint64_t h = kFnvOffset;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, size_t(is.gcount()), h);
    }
    return h;
}

uint64_t dir_fingerprint(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::vector<std::string> rel;
    rel.reserve(files.size());
    for (const auto& f : files) rel.push_back(f.lexically_relative(dir).generic_string());
    std::sort(rel.begin(), rel.end());
    uint64_t h = kFnvOffset;
    for (const auto& r : rel) {
        h = fnv1a64(r.data(), r.size(), h);
        uint64_t fh = file_fingerprint(dir / r);
        h = fnv1a64(&fh, sizeof(fh), h);
    }
    return h;
}

void save_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed for " + path.string());
}

nlohmann::json load_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad json in " + path.string() + ": " + e.what());
    }
}

std::string to_hex(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[size_t(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace selva

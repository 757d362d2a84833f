#include "mmsteer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mms {

static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes little-endian doubles");

namespace {
const char* kMagic = "MMSTEER-CKPT 1\n";
}

const Tensor& Checkpoint::get(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return t;
    throw Error(ErrorKind::Compatibility, kind + " checkpoint has no array '" + name + "'");
}

std::string encode_checkpoint(const Checkpoint& c) {
    nlohmann::json h;
    h["kind"] = c.kind;
    h["meta"] = c.meta;
    h["arrays"] = nlohmann::json::array();
    for (const auto& [n, t] : c.arrays) h["arrays"].push_back({{"name", n}, {"rows", t.rows()}, {"cols", t.cols()}});
    std::string out = kMagic;
    out += h.dump();
    out += '\n';
    for (const auto& [n, t] : c.arrays) {
        std::size_t at = out.size();
        out.resize(at + t.size() * sizeof(double));
        std::memcpy(out.data() + at, t.data(), t.size() * sizeof(double));
    }
    return out;
}

Checkpoint decode_checkpoint(const std::string& b, const std::string& expect_kind) {
    std::size_t ml = std::strlen(kMagic);
    if (b.compare(0, ml, kMagic) != 0) throw Error(ErrorKind::Parse, "not a checkpoint (bad magic)");
    std::size_t nl = b.find('\n', ml);
    if (nl == std::string::npos) throw Error(ErrorKind::Parse, "truncated checkpoint header");
    Checkpoint c;
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(b.substr(ml, nl - ml));
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Parse, std::string("bad checkpoint header: ") + e.what());
    }
    c.kind = h.at("kind").get<std::string>();
    if (!expect_kind.empty() && c.kind != expect_kind)
        throw Error(ErrorKind::Compatibility, "expected a " + expect_kind + " checkpoint, got " + c.kind);
    c.meta = h.at("meta");
    std::size_t off = nl + 1;
    for (const auto& a : h.at("arrays")) {
        std::size_t r = a.at("rows"), k = a.at("cols");
        Tensor t(r, k);
        std::size_t nb = t.size() * sizeof(double);
        if (off + nb > b.size()) throw Error(ErrorKind::Parse, "truncated checkpoint data");
        std::memcpy(t.data(), b.data() + off, nb);
        off += nb;
        c.arrays.emplace_back(a.at("name").get<std::string>(), std::move(t));
    }
    if (off != b.size()) throw Error(ErrorKind::Parse, "trailing bytes in checkpoint");
    return c;
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::Io, "cannot read " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::Io, "cannot write " + path);
    f.write(bytes.data(), std::streamsize(bytes.size()));
    if (!f) throw Error(ErrorKind::Io, "write failed for " + path);
}

void save_checkpoint(const Checkpoint& c, const std::string& path) { write_file(path, encode_checkpoint(c)); }

Checkpoint load_checkpoint(const std::string& path, const std::string& expect_kind) {
    return decode_checkpoint(read_file(path), expect_kind);
}

}  // namespace mms

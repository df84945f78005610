#include "bifrec/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "bifrec/errors.hpp"

namespace bifrec {

namespace {

constexpr char kMagic[4] = {'B', 'F', 'R', 'C'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f64(std::vector<uint8_t>& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    put_u64(out, bits);
}

struct Reader {
    const std::vector<uint8_t>& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw DataError("checkpoint truncated");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        uint64_t bits = u64();
        double d;
        std::memcpy(&d, &bits, sizeof(d));
        return d;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
        pos += n;
        return s;
    }
};

void append_tensor(std::vector<uint8_t>& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put_u64(out, e);
    for (double v : t.data()) put_f64(out, v);
}

}  // namespace

uint32_t crc32_bytes(const uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::vector<uint32_t> t(256);
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t crc = 0xffffffffu;
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xff] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

std::vector<uint8_t> serialize_tensors(
    const std::vector<std::pair<std::string, Tensor>>& tensors) {
    std::vector<uint8_t> out;
    put_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) append_tensor(out, name, t);
    return out;
}

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, ckpt.format_version);
    put_u32(out, static_cast<uint32_t>(ckpt.config_json.size()));
    out.insert(out.end(), ckpt.config_json.begin(), ckpt.config_json.end());
    auto body = serialize_tensors(ckpt.tensors);
    out.insert(out.end(), body.begin(), body.end());
    put_u32(out, crc32_bytes(out.data(), out.size()));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<long>(out.size()));
    if (!f) throw DataError("write failed for '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "' for reading");
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
    if (buf.size() < 12) throw DataError("checkpoint too small: '" + path + "'");

    uint32_t stored_crc = 0;
    for (int i = 0; i < 4; ++i)
        stored_crc |= static_cast<uint32_t>(buf[buf.size() - 4 + i]) << (8 * i);
    uint32_t actual = crc32_bytes(buf.data(), buf.size() - 4);
    if (stored_crc != actual)
        throw DataError("checkpoint CRC mismatch in '" + path + "': file is corrupt");

    Reader r{buf};
    if (r.str(4) != std::string(kMagic, 4))
        throw DataError("'" + path + "' is not a checkpoint (bad magic)");
    Checkpoint ckpt;
    ckpt.format_version = r.u32();
    if (ckpt.format_version != 1)
        throw DataError("unsupported checkpoint format_version " +
                        std::to_string(ckpt.format_version));
    ckpt.config_json = r.str(r.u32());
    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.u32());
        uint32_t rank = r.u32();
        std::vector<std::size_t> shape;
        std::size_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            uint64_t e = r.u64();
            shape.push_back(static_cast<std::size_t>(e));
            numel *= static_cast<std::size_t>(e);
        }
        std::vector<double> data(numel);
        for (auto& v : data) v = r.f64();
        ckpt.tensors.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    if (r.pos != buf.size() - 4)
        throw DataError("checkpoint '" + path + "' has trailing bytes");
    return ckpt;
}

}  // namespace bifrec

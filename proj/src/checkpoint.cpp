#include "balab/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace balab {

namespace {

constexpr char kMagic[4] = {'B', 'A', 'L', 'B'};
constexpr uint32_t kVersion = 1;

void put_u16(std::string& out, uint16_t v) {
    for (int i = 0; i < 2; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}
void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}
void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    explicit Reader(const std::string& b) : buf(b) {}
    void need(size_t n) const {
        if (pos + n > buf.size()) throw InputError("checkpoint is truncated");
    }
    uint16_t u16() {
        need(2);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i)
            v |= static_cast<uint16_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, uint64_t fingerprint,
                     const std::vector<CheckpointEntry>& tensors) {
    std::string header;
    put_u64(header, fingerprint);
    put_u32(header, static_cast<uint32_t>(tensors.size()));
    std::string payload;
    for (const CheckpointEntry& e : tensors) {
        if (e.name.size() > 0xffff) throw ContractError("checkpoint tensor name too long");
        put_u16(header, static_cast<uint16_t>(e.name.size()));
        header += e.name;
        header += static_cast<char>(static_cast<uint8_t>(e.tensor.dtype()));
        header += static_cast<char>(static_cast<uint8_t>(e.tensor.ndim()));
        for (int i = 0; i < e.tensor.ndim(); ++i)
            put_u32(header, static_cast<uint32_t>(e.tensor.dim(i)));
        put_u64(header, payload.size());
        const auto raw = e.tensor.raw_bytes();
        put_u64(header, raw.size());
        payload.append(reinterpret_cast<const char*>(raw.data()), raw.size());
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot open '" + path + "' for writing");
    out.write(kMagic, 4);
    std::string prefix;
    put_u32(prefix, kVersion);
    put_u64(prefix, header.size());
    out.write(prefix.data(), static_cast<std::streamsize>(prefix.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw InputError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open checkpoint '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 16 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw InputError("'" + path + "' is not a checkpoint (bad magic)");
    Reader r(buf);
    r.pos = 4;
    const uint32_t version = r.u32();
    if (version != kVersion)
        throw InputError("checkpoint version " + std::to_string(version) + " is not supported");
    const uint64_t header_len = r.u64();
    const size_t payload_base = r.pos + header_len;
    if (payload_base > buf.size()) throw InputError("checkpoint is truncated");

    Checkpoint ck;
    ck.fingerprint = r.u64();
    const uint32_t count = r.u32();
    for (uint32_t t = 0; t < count; ++t) {
        CheckpointEntry e;
        const uint16_t name_len = r.u16();
        e.name = r.bytes(name_len);
        const auto dtype = static_cast<DType>(static_cast<uint8_t>(r.bytes(1)[0]));
        const int ndim = static_cast<uint8_t>(r.bytes(1)[0]);
        std::vector<int> shape;
        for (int i = 0; i < ndim; ++i) shape.push_back(static_cast<int>(r.u32()));
        const uint64_t offset = r.u64();
        const uint64_t nbytes = r.u64();
        Tensor tensor = Tensor::zeros(shape, dtype);
        if (tensor.raw_bytes().size() != nbytes)
            throw InputError("checkpoint tensor '" + e.name + "' has inconsistent byte size");
        if (payload_base + offset + nbytes > buf.size()) throw InputError("checkpoint is truncated");
        std::memcpy(tensor.mutable_raw_bytes().data(), buf.data() + payload_base + offset, nbytes);
        e.tensor = tensor;
        ck.tensors.push_back(std::move(e));
    }
    return ck;
}

void save_model_checkpoint(const std::string& path, const Model& model) {
    std::vector<CheckpointEntry> entries;
    for (const ParamRef& p : model.trainable_params())
        entries.push_back(CheckpointEntry{p.name, p.tensor});
    save_checkpoint(path, model.cfg.fingerprint(model.seed), entries);
}

void load_model_checkpoint(const std::string& path, Model& model) {
    const Checkpoint ck = load_checkpoint(path);
    const uint64_t expect = model.cfg.fingerprint(model.seed);
    if (ck.fingerprint != expect)
        throw FingerprintError("checkpoint fingerprint " + std::to_string(ck.fingerprint) +
                               " does not match the configured model (" + std::to_string(expect) +
                               ")");
    std::vector<ParamRef> trainables = model.trainable_params();
    if (trainables.size() != ck.tensors.size())
        throw InputError("checkpoint holds " + std::to_string(ck.tensors.size()) +
                         " tensors, model expects " + std::to_string(trainables.size()));
    for (ParamRef& p : trainables) {
        const CheckpointEntry* found = nullptr;
        for (const CheckpointEntry& e : ck.tensors)
            if (e.name == p.name) {
                found = &e;
                break;
            }
        if (!found) throw InputError("checkpoint is missing tensor '" + p.name + "'");
        if (found->tensor.shape() != p.tensor.shape() || found->tensor.dtype() != p.tensor.dtype())
            throw InputError("checkpoint tensor '" + p.name + "' has mismatched shape or dtype");
        std::memcpy(p.tensor.mutable_raw_bytes().data(), found->tensor.raw_bytes().data(),
                    found->tensor.raw_bytes().size());
    }
}

}  // namespace balab

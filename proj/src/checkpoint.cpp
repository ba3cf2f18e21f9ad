#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "transflower/csv.hpp"
#include "transflower/errors.hpp"
#include "transflower/kvconfig.hpp"
#include "transflower/model.hpp"

namespace transflower {

namespace {

constexpr char kMagic[4] = {'T', 'F', 'L', 'W'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
    std::vector<unsigned char>& buffer() { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

class Reader {
public:
    Reader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}
    void need(std::size_t n) const {
        if (pos_ + n > size_) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint is truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == size_; }

private:
    const unsigned char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

std::uint32_t crc(const unsigned char* data, std::size_t n) {
    return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), data, static_cast<uInt>(n)));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& config,
                     const std::map<std::string, std::string>& extra) {
    config.validate();
    check_layout(params, config);
    KeyValues meta = config.to_kv();
    for (const auto& [k, v] : extra) {
        if (k.rfind("model.", 0) == 0) throw ValidationError("checkpoint extra key '" + k + "' collides with config");
        meta[k] = v;
    }
    const std::string meta_text = format_kv(meta);

    Writer w;
    w.bytes(kMagic, 4);
    w.u32(kCheckpointVersion);
    w.u64(meta_text.size());
    w.bytes(meta_text.data(), meta_text.size());
    for (const auto& [name, m] : params.tensors()) {
        const nn::Tensor t = nn::Tensor::from_matrix(*m);
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) w.u64(d);
        for (float f : t.data) w.f32(f);
    }
    auto& buf = w.buffer();
    w.u32(crc(buf.data(), buf.size()));

    auto out = csv::open_output(path);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint '" + path.string() + "'");
}

namespace {

Checkpoint parse_body(const unsigned char* data, std::size_t size) {
    Reader r(data, size);
    const std::uint64_t meta_len = r.u64();
    const KeyValues meta = parse_kv(r.str(meta_len), "checkpoint metadata");

    Checkpoint ck;
    KeyValues model_kv;
    for (const auto& [k, v] : meta) {
        if (k.rfind("model.", 0) == 0) model_kv[k] = v;
        else ck.extra[k] = v;
    }
    ck.config = ModelConfig::from_kv(model_kv);
    ck.params = zero_model_params(ck.config);

    for (auto& entry : ck.params.tensors()) {
        const std::string name = r.str(r.u32());
        if (name != entry.name)
            throw CheckpointError(CheckpointError::Kind::format,
                                  "checkpoint tensor '" + name + "' where '" + entry.name + "' was expected");
        nn::Tensor t;
        const std::uint32_t rank = r.u32();
        for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(r.u64());
        if (rank != 2 || t.shape[0] != static_cast<std::size_t>(entry.value->rows()) ||
            t.shape[1] != static_cast<std::size_t>(entry.value->cols()))
            throw CheckpointError(CheckpointError::Kind::format, "checkpoint tensor '" + name + "' has the wrong shape");
        r.need(4 * t.numel());
        t.data.resize(t.numel());
        for (auto& f : t.data) f = r.f32();
        *entry.value = t.to_matrix();
    }
    if (!r.done()) throw CheckpointError(CheckpointError::Kind::format, "trailing bytes after the last tensor");
    return ck;
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::format, "cannot open checkpoint '" + path.string() + "'");
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (buf.size() < 4 + 4 + 8 + 4) throw CheckpointError(CheckpointError::Kind::truncated, "checkpoint is truncated");
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw CheckpointError(CheckpointError::Kind::format, "not a checkpoint file (bad magic)");
    Reader header(buf.data() + 4, 4);
    const std::uint32_t version = header.u32();
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::version,
                              "unsupported checkpoint version " + std::to_string(version));
    const std::size_t body = buf.size() - 4;
    Reader tail(buf.data() + body, 4);
    if (tail.u32() != crc(buf.data(), body)) {
        // A file cut short also fails the checksum; report it as truncated
        // when the structure runs out of bytes.
        try {
            parse_body(buf.data() + 8, buf.size() - 8);
        } catch (const CheckpointError& e) {
            if (e.kind() == CheckpointError::Kind::truncated) throw;
        } catch (const std::exception&) {
        }
        throw CheckpointError(CheckpointError::Kind::checksum, "checkpoint checksum mismatch");
    }
    return parse_body(buf.data() + 8, body - 8);
}

}  // namespace transflower

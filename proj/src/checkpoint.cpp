#include "etstpm/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace etstpm {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

class Reader {
public:
    Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}

    void need(std::size_t k) const {
        if (pos_ + k > n_) throw CorruptionError("checkpoint truncated at byte " + std::to_string(pos_));
    }
    std::uint8_t u8() {
        need(1);
        return p_[pos_++];
    }
    std::uint16_t u16() {
        need(2);
        const auto v = static_cast<std::uint16_t>(p_[pos_] | (p_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::string bytes(std::size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), k);
        pos_ += k;
        return s;
    }
    std::size_t pos() const { return pos_; }

private:
    const std::uint8_t* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

std::vector<float> config_vector(const BackboneConfig& cfg) {
    const auto w = cfg.stage_widths();
    return {static_cast<float>(cfg.input_size), static_cast<float>(cfg.stem_width()), static_cast<float>(w[0]),
            static_cast<float>(w[1]),           static_cast<float>(w[2]),          static_cast<float>(cfg.blocks_per_stage),
            static_cast<float>(cfg.num_classes), cfg.include_stage4_for_finetune ? 1.0f : 0.0f};
}

std::vector<CheckpointEntry> read_entries(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

BackboneConfig config_from_entries(const std::vector<CheckpointEntry>& entries) {
    for (const auto& e : entries) {
        if (e.name != kConfigEntry) continue;
        if (e.data.size() != 8) throw CorruptionError(std::string(kConfigEntry) + " has the wrong length");
        BackboneConfig cfg;
        auto u = [&](std::size_t i) { return static_cast<std::size_t>(e.data[i]); };
        cfg.input_size = u(0);
        cfg.stem_channels = u(1);
        cfg.block_channels = {u(2), u(3), u(4)};
        cfg.blocks_per_stage = u(5);
        cfg.num_classes = u(6);
        cfg.include_stage4_for_finetune = e.data[7] != 0.0f;
        cfg.depth_scale = 1.0;
        cfg.validate();
        return cfg;
    }
    throw ConfigError(std::string("checkpoint has no ") + kConfigEntry + " entry");
}

} // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries) {
    std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
    put_u32(out, static_cast<std::uint32_t>(entries.size()));
    std::set<std::string> seen;
    for (const auto& e : entries) {
        if (!seen.insert(e.name).second) throw ConfigError("duplicate checkpoint entry " + e.name);
        if (e.name.size() > 0xFFFF) throw ConfigError("entry name too long: " + e.name);
        if (e.dims.size() > 0xFF) throw ConfigError("entry rank too large: " + e.name);
        std::size_t numel = 1;
        for (auto d : e.dims) numel *= d;
        if (numel != e.data.size()) throw ShapeError("entry " + e.name + " data length does not match dims");
        put_u16(out, static_cast<std::uint16_t>(e.name.size()));
        out.insert(out.end(), e.name.begin(), e.name.end());
        out.push_back(static_cast<std::uint8_t>(e.dims.size()));
        for (auto d : e.dims) put_u32(out, d);
        for (float v : e.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    put_u32(out, crc32_of(out.data(), out.size()));
    return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16) throw CorruptionError("checkpoint too short");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw CorruptionError("bad checkpoint magic");
    const std::size_t body = bytes.size() - 4;
    Reader tail(bytes.data() + body, 4);
    if (tail.u32() != crc32_of(bytes.data(), body)) throw CorruptionError("checkpoint CRC mismatch");

    Reader r(bytes.data(), body);
    (void)r.bytes(8);
    const std::uint32_t count = r.u32();
    std::vector<CheckpointEntry> entries;
    std::set<std::string> seen;
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = r.bytes(r.u16());
        if (!seen.insert(e.name).second) throw CorruptionError("duplicate checkpoint entry " + e.name);
        const std::uint8_t rank = r.u8();
        std::size_t numel = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            e.dims.push_back(r.u32());
            numel *= e.dims.back();
        }
        r.need(numel * 4);
        e.data.resize(numel);
        for (auto& v : e.data) v = std::bit_cast<float>(r.u32());
        entries.push_back(std::move(e));
    }
    if (r.pos() != body) throw CorruptionError("trailing bytes after the last checkpoint entry");
    return entries;
}

void save_checkpoint(const Backbone& b, const std::filesystem::path& path) {
    std::vector<CheckpointEntry> entries;
    entries.push_back({kConfigEntry, {8}, config_vector(b.config())});
    for (const auto& p : b.parameters()) {
        CheckpointEntry e;
        e.name = p.name;
        for (auto d : p.value.shape()) e.dims.push_back(static_cast<std::uint32_t>(d));
        e.data = p.value.storage();
        entries.push_back(std::move(e));
    }
    const auto bytes = encode_checkpoint(entries);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write checkpoint " + path.string());
}

Backbone load_checkpoint(const std::filesystem::path& path, const BackboneConfig& cfg) {
    const auto entries = read_entries(path);
    Backbone b = build_backbone(cfg, 0);
    std::set<std::string> loaded;
    for (const auto& e : entries) {
        if (e.name == kConfigEntry) continue;
        if (!b.contains(e.name))
            throw ConfigError("checkpoint entry " + e.name + " does not exist in the configured backbone");
        auto& p = b.parameter(e.name);
        Shape s(e.dims.begin(), e.dims.end());
        if (s != p.value.shape())
            throw ConfigError("checkpoint entry " + e.name + " has shape " + shape_str(s) +
                              " but the configured backbone expects " + shape_str(p.value.shape()));
        p.value = Tensor<float>(s, e.data);
        loaded.insert(e.name);
    }
    for (const auto& p : b.parameters())
        if (!loaded.contains(p.name)) throw ConfigError("checkpoint is missing entry " + p.name);
    const BackboneConfig stored = config_from_entries(entries);
    if (stored.input_size != cfg.input_size)
        throw ConfigError(std::string("checkpoint entry ") + kConfigEntry + " records input_size " +
                          std::to_string(stored.input_size) + ", configuration has " + std::to_string(cfg.input_size));
    return b;
}

Backbone load_checkpoint(const std::filesystem::path& path) {
    return load_checkpoint(path, checkpoint_config(path));
}

BackboneConfig checkpoint_config(const std::filesystem::path& path) {
    return config_from_entries(read_entries(path));
}

} // namespace etstpm

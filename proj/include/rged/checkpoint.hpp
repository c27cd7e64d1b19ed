#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rged/image_io.hpp"
#include "rged/tensor.hpp"

namespace rged {

inline constexpr char kCheckpointMagic[4] = {'R', 'G', 'E', 'D'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Ordered list of named tensors.
///
/// On disk (little-endian): magic "RGED", version u32, entry count u32, then
/// per entry: name length u16, UTF-8 name, rank u8, rank x u32 extents, and
/// the values as raw f64.
class Checkpoint {
public:
    void add(std::string name, const Tensor& t) {
        if (index_.count(name)) throw ContractError("duplicate checkpoint entry '" + name + "'");
        index_[name] = entries_.size();
        entries_.emplace_back(std::move(name), t.detach());
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("checkpoint has no entry '" + name + "'");
        return entries_[it->second].second;
    }

    /// Copies a stored tensor into an existing parameter of identical shape.
    void restore(const std::string& name, Tensor& target) const {
        const Tensor& src = get(name);
        if (src.shape() != target.shape()) {
            throw DataError("checkpoint entry '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                            shape_str(target.shape()));
        }
        std::copy(src.data().begin(), src.data().end(), target.mutable_data().begin());
    }

    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

    std::string encode() const {
        std::string out(kCheckpointMagic, 4);
        put_u32(out, kCheckpointVersion);
        put_u32(out, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& [name, t] : entries_) {
            if (name.size() > 0xffff) throw ContractError("checkpoint entry name too long");
            if (t.rank() > 0xff) throw ContractError("checkpoint tensor rank too large");
            put_u16(out, static_cast<std::uint16_t>(name.size()));
            out += name;
            out.push_back(static_cast<char>(t.rank()));
            for (std::size_t e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
            for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
        }
        return out;
    }

    static Checkpoint decode(std::string_view bytes) {
        Reader r{bytes};
        if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
            throw DataError("not a checkpoint: bad magic");
        }
        r.pos = 4;
        const std::uint32_t version = r.u32();
        if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
        const std::uint32_t count = r.u32();
        Checkpoint ck;
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint16_t len = r.u16();
            std::string name(r.take(len));
            const std::size_t rank = static_cast<unsigned char>(r.take(1)[0]);
            Shape shape(rank);
            for (auto& e : shape) e = r.u32();
            const std::size_t n = shape_numel(shape);
            if (n > (bytes.size() - r.pos) / 8) throw DataError("checkpoint truncated in entry '" + name + "'");
            std::vector<double> data(n);
            for (auto& v : data) v = std::bit_cast<double>(r.u64());
            ck.add(std::move(name), Tensor(std::move(shape), std::move(data)));
        }
        if (r.pos != bytes.size()) throw DataError("checkpoint has trailing bytes");
        return ck;
    }

    void save(const std::filesystem::path& path) const { detail::write_file(path, encode()); }
    static Checkpoint load(const std::filesystem::path& path) { return decode(detail::read_file(path)); }

private:
    struct Reader {
        std::string_view bytes;
        std::size_t pos = 0;

        std::string_view take(std::size_t n) {
            if (bytes.size() - pos < n) throw DataError("checkpoint truncated");
            auto s = bytes.substr(pos, n);
            pos += n;
            return s;
        }
        std::uint64_t le(std::size_t n) {
            auto s = take(n);
            std::uint64_t v = 0;
            for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[i])) << (8 * i);
            return v;
        }
        std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
        std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
        std::uint64_t u64() { return le(8); }
    };

    static void put_le(std::string& out, std::uint64_t v, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
    static void put_u16(std::string& out, std::uint16_t v) { put_le(out, v, 2); }
    static void put_u32(std::string& out, std::uint32_t v) { put_le(out, v, 4); }
    static void put_u64(std::string& out, std::uint64_t v) { put_le(out, v, 8); }

    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

} // namespace rged

#ifndef LNL_SERIALIZE_HPP
#define LNL_SERIALIZE_HPP

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "lnl/tensor.hpp"

// Tensor wire format, little-endian:
//   "LNLT" | version u32 | rank u32 | extents u64 x rank | data f64 x numel

namespace lnl {

inline constexpr std::uint32_t kTensorFormatVersion = 1;

namespace io {

template <class T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    std::array<char, sizeof(T)> bytes;
    if (!is.read(bytes.data(), sizeof(T))) throw FormatError("unexpected end of stream");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    T value;
    std::memcpy(&value, bytes.data(), sizeof(T));
    return value;
}

inline void write_magic(std::ostream& os, const char (&magic)[5]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
    char got[4];
    if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
        throw FormatError(std::string("bad magic, expected ") + magic);
    }
}

}  // namespace io

inline void write_tensor(std::ostream& os, const Tensor& t) {
    io::write_magic(os, "LNLT");
    io::write_le<std::uint32_t>(os, kTensorFormatVersion);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (auto extent : t.shape()) io::write_le<std::uint64_t>(os, extent);
    for (double v : t.data()) io::write_le<double>(os, v);
}

inline Tensor read_tensor(std::istream& is) {
    io::expect_magic(is, "LNLT");
    auto version = io::read_le<std::uint32_t>(is);
    if (version != kTensorFormatVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
    auto rank = io::read_le<std::uint32_t>(is);
    if (rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& extent : shape) {
        extent = io::read_le<std::uint64_t>(is);
        if (extent == 0 || extent > (std::uint64_t{1} << 32)) throw FormatError("invalid tensor extent");
    }
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = io::read_le<double>(is);
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_tensor(is);
}

}  // namespace lnl

#endif

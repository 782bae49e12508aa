#include "sgseg/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace sgseg {

namespace le {

namespace {
template <typename U>
void put(std::ostream& os, U v) {
    std::array<char, sizeof(U)> buf{};
    for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(buf.data(), buf.size());
}

template <typename U>
U get(std::istream& is) {
    std::array<unsigned char, sizeof(U)> buf{};
    if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size())) throw FormatError("unexpected end of file");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}
}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { put(os, v); }
void write_u16(std::ostream& os, std::uint16_t v) { put(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { put(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put(os, v); }
void write_f64(std::ostream& os, double v) { put(os, std::bit_cast<std::uint64_t>(v)); }
std::uint8_t read_u8(std::istream& is) { return get<std::uint8_t>(is); }
std::uint16_t read_u16(std::istream& is) { return get<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return get<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get<std::uint64_t>(is)); }

void write_string(std::ostream& os, const std::string& s) {
    if (s.size() > 0xFFFF) throw FormatError("string too long: " + s.substr(0, 32) + "...");
    write_u16(os, static_cast<std::uint16_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    const auto n = read_u16(is);
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw FormatError("unexpected end of file in string");
    return s;
}

}  // namespace le

namespace {

constexpr char kMagic[4] = {'S', 'G', 'T', '1'};

template <typename T>
constexpr DType dtype_of() {
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
    using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    std::vector<T> data(n);
    for (std::size_t i = 0; i < n; ++i) {
        Bits b = sizeof(Bits) == 4 ? static_cast<Bits>(le::read_u32(is)) : static_cast<Bits>(le::read_u64(is));
        data[i] = std::bit_cast<T>(b);
    }
    return Tensor<T>(std::move(shape), std::move(data));
}

struct Header {
    DType dtype;
    Shape shape;
};

Header read_header(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4)) throw FormatError("truncated tensor header");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad tensor magic (expected SGT1)");
    const auto code = le::read_u8(is);
    if (code > 1) throw FormatError("unknown tensor dtype code " + std::to_string(code));
    const auto ndim = le::read_u8(is);
    Shape shape(ndim);
    for (auto& d : shape) {
        const auto v = le::read_u64(is);
        if (v > (1ull << 40)) throw FormatError("implausible tensor dimension");
        d = static_cast<std::int64_t>(v);
    }
    return {static_cast<DType>(code), std::move(shape)};
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    if (t.ndim() > 255) throw FormatError("too many dimensions");
    os.write(kMagic, 4);
    le::write_u8(os, static_cast<std::uint8_t>(dtype_of<T>()));
    le::write_u8(os, static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.shape()) le::write_u64(os, static_cast<std::uint64_t>(d));
    for (T v : t.data()) {
        if constexpr (std::is_same_v<T, float>)
            le::write_u32(os, std::bit_cast<std::uint32_t>(v));
        else
            le::write_u64(os, std::bit_cast<std::uint64_t>(v));
    }
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path.string() + " for writing");
    write_tensor(os, t);
    if (!os) throw FormatError("write failed: " + path.string());
}

AnyTensor read_any_tensor(std::istream& is) {
    auto h = read_header(is);
    if (h.dtype == DType::f32) return read_payload<float>(is, std::move(h.shape));
    return read_payload<double>(is, std::move(h.shape));
}

AnyTensor load_any_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return read_any_tensor(is);
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
    auto h = read_header(is);
    if (h.dtype != dtype_of<T>()) throw FormatError("tensor dtype mismatch");
    return read_payload<T>(is, std::move(h.shape));
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path.string());
    return read_tensor<T>(is);
}

template void write_tensor(std::ostream&, const TensorF&);
template void write_tensor(std::ostream&, const TensorD&);
template void save_tensor(const std::filesystem::path&, const TensorF&);
template void save_tensor(const std::filesystem::path&, const TensorD&);
template TensorF read_tensor<float>(std::istream&);
template TensorD read_tensor<double>(std::istream&);
template TensorF load_tensor<float>(const std::filesystem::path&);
template TensorD load_tensor<double>(const std::filesystem::path&);

}  // namespace sgseg

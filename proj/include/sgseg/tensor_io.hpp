#pragma once

// Raw tensor file format:
//   "SGT1" | dtype u8 (0 = f32, 1 = f64) | ndim u8 | dims u64 LE x ndim | payload LE, row-major

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <variant>

#include "sgseg/tensor.hpp"

namespace sgseg {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);
template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

using AnyTensor = std::variant<TensorF, TensorD>;

AnyTensor read_any_tensor(std::istream& is);
AnyTensor load_any_tensor(const std::filesystem::path& path);

// Reads a tensor whose stored dtype must equal T.
template <typename T>
Tensor<T> read_tensor(std::istream& is);
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

// Little-endian primitive helpers shared by the checkpoint writer.
namespace le {
void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
void write_string(std::ostream& os, const std::string& s);  // u16 length + bytes
std::string read_string(std::istream& is);
}  // namespace le

}  // namespace sgseg

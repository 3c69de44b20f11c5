#pragma once

#include "fusionunet/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>

namespace fusionunet {

/// Malformed, truncated or mismatched file content.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint32_t { f32 = 0, f64 = 1 };

template <typename Scalar>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

const char* dtype_name(DType t);

inline constexpr std::uint32_t kTensorFormatVersion = 1;

// Binary tensor record, all fields little-endian:
//   "FTEN" | version u32 | dtype u32 | rank u32 | dims u64[rank] | values
template <typename Scalar>
void write_tensor(std::ostream& out, const Tensor<Scalar>& t);

/// Throws FormatError on bad magic/version, truncation, or a dtype other
/// than Scalar's.
template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& in);

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t);

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path);

namespace io {

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
void read_exact(std::istream& in, char* dst, std::size_t n);

}  // namespace io

}  // namespace fusionunet

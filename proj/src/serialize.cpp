#include "fusionunet/serialize.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace fusionunet {

namespace {

constexpr std::array<char, 4> kMagic = {'F', 'T', 'E', 'N'};
constexpr std::uint32_t kMaxRank = 8;

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

}  // namespace

const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
  }
  return "unknown";
}

namespace io {

void write_u32(std::ostream& out, std::uint32_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void read_exact(std::istream& in, char* dst, std::size_t n) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw FormatError("unexpected end of file");
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v;
  read_exact(in, reinterpret_cast<char*>(&v), sizeof v);
  return to_little(v);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v;
  read_exact(in, reinterpret_cast<char*>(&v), sizeof v);
  return to_little(v);
}

}  // namespace io

template <typename Scalar>
void write_tensor(std::ostream& out, const Tensor<Scalar>& t) {
  out.write(kMagic.data(), kMagic.size());
  io::write_u32(out, kTensorFormatVersion);
  io::write_u32(out, static_cast<std::uint32_t>(dtype_of<Scalar>()));
  io::write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) io::write_u64(out, static_cast<std::uint64_t>(d));
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  } else {
    for (Index i = 0; i < t.size(); ++i) {
      const Scalar v = to_little(t.data()[i]);
      out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
  }
  if (!out) throw FormatError("failed writing tensor");
}

template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  io::read_exact(in, magic.data(), magic.size());
  if (magic != kMagic) throw FormatError("bad tensor magic");
  const std::uint32_t version = io::read_u32(in);
  if (version != kTensorFormatVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const auto dtype = static_cast<DType>(io::read_u32(in));
  if (dtype != DType::f32 && dtype != DType::f64) throw FormatError("unknown dtype tag");
  if (dtype != dtype_of<Scalar>()) {
    throw FormatError(std::string("tensor stored as ") + dtype_name(dtype) + ", expected " +
                      dtype_name(dtype_of<Scalar>()));
  }
  const std::uint32_t rank = io::read_u32(in);
  if (rank == 0 || rank > kMaxRank) throw FormatError("invalid tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint64_t dim = io::read_u64(in);
    if (dim == 0 || dim > (std::uint64_t{1} << 40)) throw FormatError("invalid tensor dimension");
    d = static_cast<Index>(dim);
  }
  Vector<Scalar> values(numel(shape));
  io::read_exact(in, reinterpret_cast<char*>(values.data()), static_cast<std::size_t>(values.size()) * sizeof(Scalar));
  if constexpr (std::endian::native != std::endian::little) {
    for (Index i = 0; i < values.size(); ++i) values[i] = to_little(values[i]);
  }
  return Tensor<Scalar>(std::move(shape), std::move(values));
}

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_tensor<Scalar>(in);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace fusionunet

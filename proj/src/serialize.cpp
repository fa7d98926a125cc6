#include "mtfuse/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "mtfuse/errors.hpp"

namespace mtfuse {

namespace {
constexpr std::array<char, 4> kMagic = {'T', '3', 'T', 'N'};
}  // namespace

namespace detail {

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw LoadError("unexpected end of file reading u32");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace detail

void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw ArgumentError("tensor rank exceeds 255");
  os.write(kMagic.data(), kMagic.size());
  os.put(static_cast<char>(t.rank()));
  for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.data()) detail::put_f32(os, static_cast<float>(v));
  if (!os) throw LoadError("failed writing tensor record");
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw LoadError("bad tensor header (expected T3TN)");
  const int rank = is.get();
  if (rank == std::char_traits<char>::eof()) throw LoadError("truncated tensor header");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& d : shape) d = detail::get_u32(is);
  std::vector<double> values(numel_of(shape));
  for (auto& v : values) v = static_cast<double>(detail::get_f32(is));
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path.string());
  try {
    return read_tensor(is);
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot open " + path.string() + " for writing");
  for (const auto& t : tensors) write_tensor(os, t);
}

std::vector<Tensor> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path.string());
  std::vector<Tensor> out;
  while (is.peek() != std::char_traits<char>::eof()) out.push_back(read_tensor(is));
  return out;
}

}  // namespace mtfuse

#pragma once

#include <filesystem>
#include <iosfwd>
#include <vector>

#include "mtfuse/tensor.hpp"

namespace mtfuse {

// Binary tensor record: "T3TN", u8 rank, rank x u32 LE dims, row-major LE f32
// payload. Values are narrowed from f64 on write.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Several records back to back in one file.
void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors);
std::vector<Tensor> load_tensors(const std::filesystem::path& path);

namespace detail {
void put_u32(std::ostream& os, std::uint32_t v);
std::uint32_t get_u32(std::istream& is);
void put_f32(std::ostream& os, float v);
float get_f32(std::istream& is);
}  // namespace detail

}  // namespace mtfuse

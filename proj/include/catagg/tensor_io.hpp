#pragma once

#include <iosfwd>
#include <string>

#include "catagg/tensor.hpp"

// Binary tensor files: "CATT", u8 dtype (0 = f32, 1 = f64), u8 rank, u32 LE
// extents, then raw LE scalars in row-major order.
namespace catagg {

void write_tensor(std::ostream& out, const Tensor& t);
// Throws LoadError on bad magic, unknown dtype or truncation.
Tensor read_tensor(std::istream& in);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace catagg

#pragma once

#include <iosfwd>
#include <string>

#include "fusedopt/tensor.hpp"

namespace fusedopt {

// Flat binary tensor format: rank (u32), dims (u32 each), precision tag (u8),
// then little-endian scalars at the tagged width.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace fusedopt

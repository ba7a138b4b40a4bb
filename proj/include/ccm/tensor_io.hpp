#pragma once

#include <iosfwd>
#include <string>

#include "ccm/tensor.hpp"

namespace ccm {

// Binary tensor container. Layout, all little-endian:
//   magic "TNSR" | version u8 = 1 | dtype u8 (0 = f32, 1 = f64) | ndim u8 |
//   pad u8 = 0 | dims: ndim x u32 | payload row-major
template <typename T>
void write_tnsr(std::ostream& os, const TensorT<T>& t);

template <typename T>
TensorT<T> read_tnsr(std::istream& is);

template <typename T>
void write_tnsr_file(const std::string& path, const TensorT<T>& t);

template <typename T>
TensorT<T> read_tnsr_file(const std::string& path);

// dtype code of the tensor at the stream position, without consuming it.
int peek_tnsr_dtype(std::istream& is);

// 8-bit binary PGM ("P5"). Values must be in [0,1]; byte = round(255*v).
void export_pgm(const Tensor& image, const std::string& path);

}  // namespace ccm

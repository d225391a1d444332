#pragma once

// "FUNT" tensor files: magic "FUNT", version 0x01, dtype byte (0=f32, 1=f64),
// u32 LE rank, rank × u32 LE extents, then the row-major LE payload.

#include <funavg/tensor.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

namespace funavg {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename Scalar>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

const char* dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

template <typename Scalar>
void write_funt(std::ostream& out, const Tensor<Scalar>& tensor);
template <typename Scalar>
void write_funt(const std::filesystem::path& path, const Tensor<Scalar>& tensor);

/// Stored dtype of a FUNT file.
DType peek_funt_dtype(const std::filesystem::path& path);

/// Reads a FUNT stream. An f32 payload may be read as double (exact
/// widening); narrowing f64 to float is refused.
template <typename Scalar>
Tensor<Scalar> read_funt(std::istream& in);
template <typename Scalar>
Tensor<Scalar> read_funt(const std::filesystem::path& path);

/// Label maps are stored as H×W f32 tensors holding integral values.
void write_label_map(const std::filesystem::path& path, const LabelMap& labels);
LabelMap read_label_map(const std::filesystem::path& path);

void write_pixel_map(const std::filesystem::path& path, const PixelMap& map);
PixelMap read_pixel_map(const std::filesystem::path& path);

/// Binary portable graymap (P5) with maxval = max_label.
void write_pgm(const std::filesystem::path& path, const LabelMap& labels, int max_label);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace funavg

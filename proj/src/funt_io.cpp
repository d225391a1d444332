#include <funavg/errors.hpp>
#include <funavg/funt_io.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little, "FUNT I/O assumes a little-endian host");

namespace funavg {

namespace {

constexpr std::array<char, 4> kMagic{'F', 'U', 'N', 'T'};
constexpr std::uint8_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw DataError("FUNT: truncated header");
  return value;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return in;
}

struct Header {
  DType dtype;
  std::vector<int> dims;
};

Header read_header(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw DataError("FUNT: bad magic");
  if (get<std::uint8_t>(in) != kVersion) throw DataError("FUNT: unsupported version");
  const auto dtype = get<std::uint8_t>(in);
  if (dtype > 1) throw DataError("FUNT: unknown dtype byte");
  const auto rank = get<std::uint32_t>(in);
  if (rank > 16) throw DataError("FUNT: implausible rank");
  Header header{static_cast<DType>(dtype), {}};
  for (std::uint32_t i = 0; i < rank; ++i) {
    const auto d = get<std::uint32_t>(in);
    if (d == 0 || d > (1u << 30)) throw DataError("FUNT: invalid extent");
    header.dims.push_back(static_cast<int>(d));
  }
  return header;
}

template <typename Stored>
Eigen::Matrix<Stored, Eigen::Dynamic, 1> read_payload(std::istream& in, Eigen::Index n) {
  Eigen::Matrix<Stored, Eigen::Dynamic, 1> data(n);
  if (!in.read(reinterpret_cast<char*>(data.data()), std::streamsize(n * sizeof(Stored))))
    throw DataError("FUNT: truncated payload");
  return data;
}

}  // namespace

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32" || name == "float32") return DType::f32;
  if (name == "f64" || name == "float64") return DType::f64;
  throw std::invalid_argument("unknown dtype '" + name + "' (expected f32 or f64)");
}

template <typename Scalar>
void write_funt(std::ostream& out, const Tensor<Scalar>& tensor) {
  out.write(kMagic.data(), 4);
  put<std::uint8_t>(out, kVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<Scalar>()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
  for (int d : tensor.dims()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.write(reinterpret_cast<const char*>(tensor.data().data()), std::streamsize(tensor.size() * sizeof(Scalar)));
}

template <typename Scalar>
void write_funt(const std::filesystem::path& path, const Tensor<Scalar>& tensor) {
  auto out = open_out(path);
  write_funt(out, tensor);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

DType peek_funt_dtype(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_header(in).dtype;
}

template <typename Scalar>
Tensor<Scalar> read_funt(std::istream& in) {
  Header header = read_header(in);
  const Eigen::Index n = Tensor<Scalar>::count(header.dims);
  if (header.dtype == dtype_of<Scalar>()) return Tensor<Scalar>(header.dims, read_payload<Scalar>(in, n));
  if constexpr (std::is_same_v<Scalar, double>) {
    return Tensor<double>(header.dims, read_payload<float>(in, n).template cast<double>());
  }
  throw DataError("FUNT: refusing to narrow f64 payload to f32");
}

template <typename Scalar>
Tensor<Scalar> read_funt(const std::filesystem::path& path) {
  auto in = open_in(path);
  try {
    return read_funt<Scalar>(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

template void write_funt<float>(std::ostream&, const Tensor<float>&);
template void write_funt<double>(std::ostream&, const Tensor<double>&);
template void write_funt<float>(const std::filesystem::path&, const Tensor<float>&);
template void write_funt<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> read_funt<float>(std::istream&);
template Tensor<double> read_funt<double>(std::istream&);
template Tensor<float> read_funt<float>(const std::filesystem::path&);
template Tensor<double> read_funt<double>(const std::filesystem::path&);

void write_label_map(const std::filesystem::path& path, const LabelMap& labels) {
  Tensor<float> t({int(labels.rows()), int(labels.cols())});
  for (Eigen::Index i = 0; i < labels.size(); ++i) t[i] = float(labels.data()[i]);
  write_funt(path, t);
}

LabelMap read_label_map(const std::filesystem::path& path) {
  const auto t = read_funt<float>(path);
  if (t.rank() != 2) throw DataError(path.string() + ": label map must be H×W");
  LabelMap labels(t.dim(0), t.dim(1));
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const float v = t[i];
    if (v != std::floor(v) || v < 0) throw DataError(path.string() + ": label map holds non-integral values");
    labels.data()[i] = static_cast<std::int32_t>(v);
  }
  return labels;
}

void write_pixel_map(const std::filesystem::path& path, const PixelMap& map) {
  Tensor<double> t({int(map.rows()), int(map.cols())});
  std::copy(map.data(), map.data() + map.size(), t.data().data());
  write_funt(path, t);
}

PixelMap read_pixel_map(const std::filesystem::path& path) {
  const auto t = read_funt<double>(path);
  if (t.rank() != 2) throw DataError(path.string() + ": pixel map must be H×W");
  PixelMap map(t.dim(0), t.dim(1));
  std::copy(t.data().data(), t.data().data() + t.size(), map.data());
  return map;
}

void write_pgm(const std::filesystem::path& path, const LabelMap& labels, int max_label) {
  if (max_label < 1 || max_label > 255) throw std::invalid_argument("pgm: maxval must lie in [1, 255]");
  auto out = open_out(path);
  out << "P5\n" << labels.cols() << ' ' << labels.rows() << '\n' << max_label << '\n';
  for (Eigen::Index i = 0; i < labels.size(); ++i)
    out.put(static_cast<char>(std::clamp<int>(labels.data()[i], 0, max_label)));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace funavg

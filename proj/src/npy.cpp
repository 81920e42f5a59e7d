#include "hgd/npy.hpp"

#include <cstring>
#include <fstream>
#include <regex>
#include <sstream>
#include <string>

#include "hgd/errors.hpp"

namespace hgd::npy {
namespace {

constexpr char kMagic[] = "\x93NUMPY";
constexpr size_t kMagicLen = 6;

struct Header {
  std::string descr;
  bool fortran_order = false;
  std::vector<int64_t> shape;
};

void write_array(const std::filesystem::path& path, const std::string& descr,
                 int64_t rows, int64_t cols, const void* bytes, size_t nbytes) {
  std::ostringstream dict;
  dict << "{'descr': '" << descr << "', 'fortran_order': False, 'shape': ("
       << rows << ", " << cols << "), }";
  std::string header = dict.str();
  // magic(6) + version(2) + length(2) + header, padded to a 64-byte boundary
  // and terminated by a newline.
  const size_t unpadded = kMagicLen + 4 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot open for writing: " + path.string());
  out.write(kMagic, kMagicLen);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto len = static_cast<uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff),
                             static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
  if (!out) throw LoadError("write failed: " + path.string());
}

Header parse_header(const std::string& text, const std::filesystem::path& path) {
  Header h;
  std::smatch m;
  static const std::regex descr_re(R"('descr'\s*:\s*'([^']+)')");
  static const std::regex order_re(R"('fortran_order'\s*:\s*(True|False))");
  static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
  if (!std::regex_search(text, m, descr_re))
    throw LoadError("npy header without descr: " + path.string());
  h.descr = m[1];
  if (std::regex_search(text, m, order_re)) h.fortran_order = m[1] == "True";
  if (!std::regex_search(text, m, shape_re))
    throw LoadError("npy header without shape: " + path.string());
  std::stringstream dims(m[1].str());
  std::string tok;
  while (std::getline(dims, tok, ',')) {
    if (tok.find_first_not_of(" ") == std::string::npos) continue;
    h.shape.push_back(std::stoll(tok));
  }
  return h;
}

// Reads the header and returns the raw payload bytes.
std::vector<char> read_array(const std::filesystem::path& path, Header& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open: " + path.string());
  char magic[kMagicLen];
  in.read(magic, kMagicLen);
  if (!in || std::memcmp(magic, kMagic, kMagicLen) != 0)
    throw LoadError("not an npy file: " + path.string());
  unsigned char version[2];
  in.read(reinterpret_cast<char*>(version), 2);
  size_t header_len = 0;
  if (version[0] == 1) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    header_len = b[0] | (b[1] << 8);
  } else if (version[0] == 2 || version[0] == 3) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    header_len = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<size_t>(b[3]) << 24);
  } else {
    throw LoadError("unsupported npy version in " + path.string());
  }
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw LoadError("truncated npy header: " + path.string());
  header = parse_header(text, path);
  if (header.fortran_order)
    throw LoadError("fortran-ordered arrays are not supported: " + path.string());
  if (header.shape.size() != 2)
    throw LoadError("expected a 2D array in " + path.string());
  std::vector<char> payload((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  return payload;
}

size_t item_size(const std::string& descr) {
  if (descr == "<f4" || descr == "<i4" || descr == "<u4") return 4;
  if (descr == "<f8" || descr == "<i8" || descr == "<u8") return 8;
  if (descr == "|u1" || descr == "<u1" || descr == "|i1" || descr == "|b1") return 1;
  return 0;
}

template <typename Out>
Array2D<Out> convert(const std::vector<char>& payload, const Header& h,
                     const std::filesystem::path& path) {
  const size_t isz = item_size(h.descr);
  if (isz == 0) throw LoadError("unsupported dtype '" + h.descr + "' in " + path.string());
  Array2D<Out> out;
  out.rows = h.shape[0];
  out.cols = h.shape[1];
  const size_t n = static_cast<size_t>(out.rows * out.cols);
  if (payload.size() < n * isz) throw LoadError("truncated npy payload: " + path.string());
  out.data.resize(n);
  const char* p = payload.data();
  for (size_t i = 0; i < n; ++i, p += isz) {
    double v = 0;
    if (h.descr == "<f4") { float f; std::memcpy(&f, p, 4); v = f; }
    else if (h.descr == "<f8") { std::memcpy(&v, p, 8); }
    else if (h.descr == "<i4") { int32_t x; std::memcpy(&x, p, 4); v = x; }
    else if (h.descr == "<u4") { uint32_t x; std::memcpy(&x, p, 4); v = x; }
    else if (h.descr == "<i8") { int64_t x; std::memcpy(&x, p, 8); v = static_cast<double>(x); }
    else if (h.descr == "<u8") { uint64_t x; std::memcpy(&x, p, 8); v = static_cast<double>(x); }
    else if (h.descr == "|i1") { v = static_cast<int8_t>(*p); }
    else { v = static_cast<uint8_t>(*p); }
    if constexpr (std::is_same_v<Out, uint8_t>) {
      if (v < 0 || v > 255 || v != static_cast<double>(static_cast<int64_t>(v)))
        throw LoadError("label value out of uint8 range in " + path.string());
    }
    out.data[i] = static_cast<Out>(v);
  }
  return out;
}

}  // namespace

void save_f32(const std::filesystem::path& path, const Array2D<float>& array) {
  write_array(path, "<f4", array.rows, array.cols, array.data.data(),
              array.data.size() * sizeof(float));
}

void save_u8(const std::filesystem::path& path, const Array2D<uint8_t>& array) {
  write_array(path, "|u1", array.rows, array.cols, array.data.data(), array.data.size());
}

Array2D<float> load_f32(const std::filesystem::path& path) {
  Header h;
  auto payload = read_array(path, h);
  if (h.descr == "<f4") {
    // Fast path, bit-exact.
    Array2D<float> out{h.shape[0], h.shape[1], {}};
    const size_t n = static_cast<size_t>(out.rows * out.cols);
    if (payload.size() < n * 4) throw LoadError("truncated npy payload: " + path.string());
    out.data.resize(n);
    std::memcpy(out.data.data(), payload.data(), n * 4);
    return out;
  }
  return convert<float>(payload, h, path);
}

Array2D<uint8_t> load_u8(const std::filesystem::path& path) {
  Header h;
  auto payload = read_array(path, h);
  if (h.descr == "<f4" || h.descr == "<f8")
    throw LoadError("label file must hold integers: " + path.string());
  return convert<uint8_t>(payload, h, path);
}

}  // namespace hgd::npy

#pragma once

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sdtseg/common.hpp"

namespace sdtseg {

// PGM value reserved for unlabeled pixels.
inline constexpr std::uint8_t kVoidIndex = 255;

// Integer class-index raster, row-major, top-left origin. (i,j) = (row, column).
struct LabelMask {
  int width = 0;
  int height = 0;
  int classes = 0;  // C >= 2
  std::vector<std::uint8_t> data;
  std::optional<std::uint8_t> void_index = kVoidIndex;

  LabelMask() = default;
  LabelMask(int w, int h, int c)
      : width(w), height(h), classes(c), data(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
  bool is_void(std::uint8_t v) const { return void_index && v == *void_index; }

  void validate() const {
    if (classes < 2) throw std::invalid_argument("LabelMask: class count must be >= 2");
    if (data.size() != pixels()) throw std::invalid_argument("LabelMask: data length mismatch");
    for (std::uint8_t v : data) {
      if (!is_void(v) && v >= classes)
        throw std::invalid_argument("LabelMask: pixel value outside class range");
    }
  }
};

// Real-valued raster, row-major. Pixel (i,j) is the lattice point (i,j); unit = 1 pixel.
struct ScalarField {
  int width = 0;
  int height = 0;
  std::vector<double> data;

  ScalarField() = default;
  ScalarField(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {}

  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
};

// C scalar fields of identical dimensions; channel k holds the per-class plane.
struct FieldStack {
  std::vector<ScalarField> fields;

  int channels() const { return static_cast<int>(fields.size()); }
  int width() const { return fields.empty() ? 0 : fields.front().width; }
  int height() const { return fields.empty() ? 0 : fields.front().height; }

  void validate() const {
    if (fields.empty()) throw std::invalid_argument("FieldStack: empty stack");
    for (const auto& f : fields) {
      if (f.width != width() || f.height != height())
        throw std::invalid_argument("FieldStack: channel dimension mismatch");
    }
  }
};

inline LabelMask flip_mask_h(const LabelMask& m) {
  LabelMask out = m;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(y, m.width - 1 - x);
  return out;
}

inline LabelMask flip_mask_v(const LabelMask& m) {
  LabelMask out = m;
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) out.at(y, x) = m.at(m.height - 1 - y, x);
  return out;
}

inline ScalarField flip_field_h(const ScalarField& f) {
  ScalarField out(f.width, f.height);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) out.at(y, x) = f.at(y, f.width - 1 - x);
  return out;
}

inline ScalarField flip_field_v(const ScalarField& f) {
  ScalarField out(f.width, f.height);
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x) out.at(y, x) = f.at(f.height - 1 - y, x);
  return out;
}

inline FieldStack flip_stack_h(const FieldStack& s) {
  FieldStack out;
  for (const auto& f : s.fields) out.fields.push_back(flip_field_h(f));
  return out;
}

inline FieldStack flip_stack_v(const FieldStack& s) {
  FieldStack out;
  for (const auto& f : s.fields) out.fields.push_back(flip_field_v(f));
  return out;
}

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32le(std::string& out, float f) {
  put_u32le(out, std::bit_cast<std::uint32_t>(f));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& what)
      : bytes_(bytes), what_(what) {}

  std::uint32_t u32le() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
      v = (v << 8) | static_cast<std::uint8_t>(bytes_[pos_ + i]);
    pos_ += 4;
    return v;
  }

  float f32le() { return std::bit_cast<float>(u32le()); }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_end() const {
    if (pos_ != bytes_.size()) throw io_error(what_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw io_error(what_ + ": truncated payload");
  }
  const std::string& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw io_error("read failure on " + path.string());
  return bytes;
}

inline void write_all(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw io_error("write failure on " + path.string());
}

// Next whitespace-separated PNM header token; '#' starts a comment to end of line.
inline std::string pnm_token(const std::string& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    char c = bytes[pos];
    if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
    } else {
      break;
    }
  }
  std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  if (start == pos) throw io_error("malformed PGM header: missing token");
  return bytes.substr(start, pos - start);
}

inline int pnm_int(const std::string& bytes, std::size_t& pos) {
  std::string tok = pnm_token(bytes, pos);
  for (char c : tok)
    if (!std::isdigit(static_cast<unsigned char>(c)))
      throw io_error("malformed PGM header: expected integer, got '" + tok + "'");
  long v = std::stol(tok);
  if (v <= 0 || v > (1 << 20)) throw io_error("malformed PGM header: dimension out of range");
  return static_cast<int>(v);
}

}  // namespace detail

// ---- PGM (P5) masks: "P5\n<w> <h>\n255\n" then w*h bytes ----

inline LabelMask read_mask(const std::filesystem::path& path, int classes_override = 0) {
  const std::string bytes = detail::read_all(path);
  std::size_t pos = 0;
  std::string magic = detail::pnm_token(bytes, pos);
  if (magic != "P5") throw io_error("malformed PGM header: bad magic '" + magic + "'");
  int w = detail::pnm_int(bytes, pos);
  int h = detail::pnm_int(bytes, pos);
  std::string maxval_tok = detail::pnm_token(bytes, pos);
  if (maxval_tok != "255") throw io_error("unsupported maxval '" + maxval_tok + "'");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw io_error("malformed PGM header: missing separator");
  ++pos;  // single whitespace byte before payload

  const std::size_t expected = static_cast<std::size_t>(w) * h;
  if (bytes.size() - pos < expected) throw io_error("truncated payload");
  if (bytes.size() - pos > expected) throw io_error("trailing bytes after payload");

  LabelMask mask;
  mask.width = w;
  mask.height = h;
  mask.void_index = kVoidIndex;
  mask.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());

  int max_class = -1;
  for (std::uint8_t v : mask.data)
    if (v != kVoidIndex && v > max_class) max_class = v;
  mask.classes = classes_override > 0 ? classes_override : std::max(2, max_class + 1);
  if (classes_override > 0) {
    for (std::uint8_t v : mask.data)
      if (v != kVoidIndex && v >= mask.classes)
        throw io_error("pixel value " + std::to_string(v) + " >= declared class count " +
                       std::to_string(mask.classes));
  }
  mask.validate();
  return mask;
}

inline void write_mask(const LabelMask& mask, const std::filesystem::path& path) {
  mask.validate();
  std::string out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) +
                    "\n255\n";
  out.append(mask.data.begin(), mask.data.end());
  detail::write_all(path, out);
}

// ---- SDTF container ----
// magic "SDTF", u32 version=1, u32 ndim, ndim u32 dims, then float32 LE payload
// in dims order (channel-major, row-major). All integers little-endian.

namespace detail {

inline constexpr std::uint32_t kSdtfVersion = 1;
inline constexpr std::size_t kMaxElements = std::size_t{1} << 31;

inline void append_sdtf_record(std::string& out, std::span<const std::uint32_t> dims,
                               std::span<const double> values) {
  out += "SDTF";
  put_u32le(out, kSdtfVersion);
  put_u32le(out, static_cast<std::uint32_t>(dims.size()));
  std::size_t count = 1;
  for (std::uint32_t d : dims) {
    put_u32le(out, d);
    count *= d;
  }
  if (count != values.size()) throw io_error("SDTF: payload size does not match dims");
  for (double v : values) put_f32le(out, static_cast<float>(v));
}

struct SdtfRecord {
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

inline SdtfRecord read_sdtf_record(ByteReader& r) {
  if (r.str(4) != "SDTF") throw io_error("bad magic");
  std::uint32_t version = r.u32le();
  if (version != kSdtfVersion)
    throw io_error("unsupported SDTF version " + std::to_string(version));
  std::uint32_t ndim = r.u32le();
  if (ndim == 0 || ndim > 8) throw io_error("dimension overflow: ndim " + std::to_string(ndim));
  SdtfRecord rec;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < ndim; ++i) {
    std::uint32_t d = r.u32le();
    if (d == 0 || count > kMaxElements / std::max<std::size_t>(d, 1))
      throw io_error("dimension overflow");
    rec.dims.push_back(d);
    count *= d;
  }
  rec.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) rec.values[i] = r.f32le();
  return rec;
}

}  // namespace detail

inline void write_field_stack(const FieldStack& stack, const std::filesystem::path& path) {
  stack.validate();
  std::vector<std::uint32_t> dims = {static_cast<std::uint32_t>(stack.channels()),
                                     static_cast<std::uint32_t>(stack.height()),
                                     static_cast<std::uint32_t>(stack.width())};
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(stack.channels()) * stack.height() * stack.width());
  for (const auto& f : stack.fields) values.insert(values.end(), f.data.begin(), f.data.end());
  std::string out;
  detail::append_sdtf_record(out, dims, values);
  detail::write_all(path, out);
}

inline FieldStack read_field_stack(const std::filesystem::path& path) {
  const std::string bytes = detail::read_all(path);
  detail::ByteReader r(bytes, "SDTF");
  detail::SdtfRecord rec = detail::read_sdtf_record(r);
  r.expect_end();
  if (rec.dims.size() != 3) throw io_error("SDTF: expected 3 dims for a field stack");
  const std::uint32_t channels = rec.dims[0], height = rec.dims[1], width = rec.dims[2];
  FieldStack stack;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (std::uint32_t c = 0; c < channels; ++c) {
    ScalarField f(static_cast<int>(width), static_cast<int>(height));
    std::copy_n(rec.values.begin() + static_cast<std::ptrdiff_t>(c * plane), plane,
                f.data.begin());
    for (double v : f.data)
      if (!std::isfinite(v)) throw io_error("SDTF: non-finite value in payload");
    stack.fields.push_back(std::move(f));
  }
  return stack;
}

// ---- SDTW weights container ----
// magic "SDTW", u32 version=1, u32 tensor count, then per tensor:
// u32 name length, UTF-8 name, one embedded SDTF record.

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
};

inline void write_weights(std::span<const NamedArray> arrays,
                          const std::filesystem::path& path) {
  std::string out = "SDTW";
  detail::put_u32le(out, detail::kSdtfVersion);
  detail::put_u32le(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    detail::put_u32le(out, static_cast<std::uint32_t>(a.name.size()));
    out += a.name;
    detail::append_sdtf_record(out, a.dims, a.values);
  }
  detail::write_all(path, out);
}

inline std::vector<NamedArray> read_weights(const std::filesystem::path& path) {
  const std::string bytes = detail::read_all(path);
  detail::ByteReader r(bytes, "SDTW");
  if (r.str(4) != "SDTW") throw io_error("bad magic");
  std::uint32_t version = r.u32le();
  if (version != detail::kSdtfVersion)
    throw io_error("unsupported SDTW version " + std::to_string(version));
  std::uint32_t count = r.u32le();
  std::vector<NamedArray> arrays;
  arrays.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    std::uint32_t name_len = r.u32le();
    a.name = r.str(name_len);
    detail::SdtfRecord rec = detail::read_sdtf_record(r);
    a.dims = std::move(rec.dims);
    a.values = std::move(rec.values);
    arrays.push_back(std::move(a));
  }
  r.expect_end();
  return arrays;
}

}  // namespace sdtseg

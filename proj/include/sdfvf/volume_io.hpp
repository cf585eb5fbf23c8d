#pragma once

// NRRD subset reader/writer for label volumes (including 3D Slicer
// segmentation metadata) and a synthetic phantom rasterizer.
//
// Supported: magic NRRD0001..NRRD0005, dimension 3, sample types
// uint8/uint16/int16/float, encodings raw/ascii (gzip when built with
// SDFVF_WITH_ZLIB), axis-aligned space directions.

#include "sdfvf/geometry.hpp"
#include "sdfvf/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#ifdef SDFVF_WITH_ZLIB
#include <zlib.h>
#endif

namespace sdfvf {

struct LabelVolume {
  GridGeometry geometry;
  std::vector<Label> labels;  // x-fastest

  LabelVolume() = default;
  explicit LabelVolume(const GridGeometry& g) : geometry(g), labels(g.voxel_count(), 0) {}

  Label& at(int i, int j, int k) { return labels[geometry.index(i, j, k)]; }
  Label at(int i, int j, int k) const { return labels[geometry.index(i, j, k)]; }

  std::size_t count(Label label) const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
  }

  void validate() const {
    geometry.validate();
    if (labels.size() != geometry.voxel_count())
      throw ValidationError("label array length does not match grid dims");
  }

  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;
};

struct Segment {
  std::string name;
  Label label = 0;
  std::optional<Vec3> color;

  friend bool operator==(const Segment& a, const Segment& b) {
    return a.name == b.name && a.label == b.label && a.color.has_value() == b.color.has_value() &&
           (!a.color || *a.color == *b.color);
  }
};

struct SegmentTable {
  std::vector<Segment> entries;

  const Segment* find(Label label) const {
    for (const auto& s : entries)
      if (s.label == label) return &s;
    return nullptr;
  }

  void validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].label == 0) throw ValidationError("segment '" + entries[i].name + "' uses reserved label 0");
      for (std::size_t j = 0; j < i; ++j)
        if (entries[j].label == entries[i].label)
          throw ValidationError("duplicate segment label value " + std::to_string(entries[i].label));
    }
  }

  friend bool operator==(const SegmentTable&, const SegmentTable&) = default;
};

struct LabeledVolume {
  LabelVolume volume;
  SegmentTable segments;
};

// ---------------------------------------------------------------------------
// NRRD header

enum class SampleType { u8, u16, i16, f32 };
enum class Encoding { raw, ascii, gzip };
enum class Endian { little, big };

inline std::size_t sample_size(SampleType t) {
  switch (t) {
    case SampleType::u8: return 1;
    case SampleType::u16:
    case SampleType::i16: return 2;
    case SampleType::f32: return 4;
  }
  return 1;
}

/// Non-standard header line kept verbatim. `key_value` distinguishes
/// `key:=value` pairs from `field: value` lines.
struct HeaderField {
  std::string key;
  std::string value;
  bool key_value = false;

  friend bool operator==(const HeaderField&, const HeaderField&) = default;
};

struct NrrdHeader {
  int version = 4;
  int dimension = 3;
  std::array<int, 3> sizes{1, 1, 1};
  SampleType type = SampleType::u8;
  Encoding encoding = Encoding::raw;
  Endian endian = Endian::little;
  Mat3 space_directions = Mat3::Identity();  // column a = step along axis a
  Vec3 space_origin = Vec3::Zero();
  std::vector<HeaderField> custom_fields;

  std::size_t sample_count() const {
    return static_cast<std::size_t>(sizes[0]) * static_cast<std::size_t>(sizes[1]) *
           static_cast<std::size_t>(sizes[2]);
  }

  const HeaderField* find_custom(std::string_view key) const {
    for (const auto& f : custom_fields)
      if (f.key == key) return &f;
    return nullptr;
  }

  friend bool operator==(const NrrdHeader& a, const NrrdHeader& b) {
    return a.version == b.version && a.dimension == b.dimension && a.sizes == b.sizes && a.type == b.type &&
           a.encoding == b.encoding && a.endian == b.endian && a.space_directions == b.space_directions &&
           a.space_origin == b.space_origin && a.custom_fields == b.custom_fields;
  }
};

inline constexpr double kAxisAlignedTolerance = 1e-9;

inline bool gzip_supported() {
#ifdef SDFVF_WITH_ZLIB
  return true;
#else
  return false;
#endif
}

namespace detail {

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::optional<SampleType> parse_sample_type(std::string_view v) {
  const std::string s = lower(trim(v));
  if (s == "uchar" || s == "unsigned char" || s == "uint8" || s == "uint8_t") return SampleType::u8;
  if (s == "ushort" || s == "unsigned short" || s == "unsigned short int" || s == "uint16" || s == "uint16_t")
    return SampleType::u16;
  if (s == "short" || s == "short int" || s == "signed short" || s == "signed short int" || s == "int16" ||
      s == "int16_t")
    return SampleType::i16;
  if (s == "float") return SampleType::f32;
  return std::nullopt;
}

inline const char* sample_type_name(SampleType t) {
  switch (t) {
    case SampleType::u8: return "uint8";
    case SampleType::u16: return "uint16";
    case SampleType::i16: return "int16";
    case SampleType::f32: return "float";
  }
  return "uint8";
}

inline std::optional<Encoding> parse_encoding(std::string_view v) {
  const std::string s = lower(trim(v));
  if (s == "raw") return Encoding::raw;
  if (s == "ascii" || s == "text" || s == "txt") return Encoding::ascii;
  if (s == "gzip" || s == "gz") return Encoding::gzip;
  return std::nullopt;
}

inline const char* encoding_name(Encoding e) {
  switch (e) {
    case Encoding::raw: return "raw";
    case Encoding::ascii: return "ascii";
    case Encoding::gzip: return "gzip";
  }
  return "raw";
}

// "(a,b,c)" -> vector
inline Vec3 parse_paren_vector(std::string_view tok) {
  tok = trim(tok);
  if (tok.size() < 2 || tok.front() != '(' || tok.back() != ')')
    throw ValidationError("malformed NRRD vector '" + std::string(tok) + "'");
  tok = tok.substr(1, tok.size() - 2);
  Vec3 v;
  for (int a = 0; a < 3; ++a) {
    const auto comma = tok.find(',');
    if ((a < 2) != (comma != std::string_view::npos))
      throw ValidationError("NRRD vector must have exactly 3 components");
    const auto part = a < 2 ? tok.substr(0, comma) : tok;
    if (!parse_double(part, v[a])) throw ValidationError("bad number in NRRD vector: '" + std::string(part) + "'");
    if (a < 2) tok.remove_prefix(comma + 1);
  }
  return v;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) out.push_back(s.substr(b, i - b));
  }
  return out;
}

inline std::string format_paren_vector(const Vec3& v) {
  return "(" + format_number(v.x()) + "," + format_number(v.y()) + "," + format_number(v.z()) + ")";
}

inline bool host_is_little() { return std::endian::native == std::endian::little; }

#ifdef SDFVF_WITH_ZLIB
inline std::string gunzip(std::string_view in) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw IoError("zlib inflateInit failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  std::string out;
  char buf[1 << 15];
  int ret = Z_OK;
  while (ret != Z_STREAM_END) {
    zs.next_out = reinterpret_cast<Bytef*>(buf);
    zs.avail_out = sizeof buf;
    ret = inflate(&zs, Z_NO_FLUSH);
    if (ret != Z_OK && ret != Z_STREAM_END) {
      inflateEnd(&zs);
      throw ValidationError("corrupt gzip payload");
    }
    out.append(buf, sizeof buf - zs.avail_out);
    if (ret == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw ValidationError("truncated gzip payload");
    }
  }
  inflateEnd(&zs);
  return out;
}

inline std::string gzip(std::string_view in) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw IoError("zlib deflateInit failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  std::string out;
  char buf[1 << 15];
  int ret = Z_OK;
  do {
    zs.next_out = reinterpret_cast<Bytef*>(buf);
    zs.avail_out = sizeof buf;
    ret = deflate(&zs, Z_FINISH);
    out.append(buf, sizeof buf - zs.avail_out);
  } while (ret == Z_OK);
  deflateEnd(&zs);
  if (ret != Z_STREAM_END) throw IoError("zlib deflate failed");
  return out;
}
#endif

}  // namespace detail

/// Parses the header; on success `*data_offset` (if given) receives the byte
/// offset of the first payload byte.
inline NrrdHeader parse_nrrd_header(std::string_view bytes, std::size_t* data_offset = nullptr) {
  NrrdHeader h;
  std::size_t pos = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= bytes.size()) return false;
    auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) nl = bytes.size();
    line = bytes.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = std::min(bytes.size(), nl + 1);
    return true;
  };

  std::string_view line;
  if (!next_line(line) || line.size() != 8 || line.substr(0, 7) != "NRRD000" || line[7] < '1' || line[7] > '5')
    throw ValidationError("bad NRRD magic (expected NRRD0001..NRRD0005)");
  h.version = line[7] - '0';

  bool have_type = false, have_dimension = false, have_sizes = false, have_encoding = false;
  bool have_directions = false;
  std::vector<long long> raw_sizes;
  std::optional<Vec3> spacings;

  while (next_line(line)) {
    if (line.empty()) break;
    if (line.front() == '#') continue;

    if (const auto kv = line.find(":="); kv != std::string_view::npos) {
      h.custom_fields.push_back({std::string(line.substr(0, kv)), std::string(line.substr(kv + 2)), true});
      continue;
    }
    const auto colon = line.find(": ");
    if (colon == std::string_view::npos) throw ValidationError("malformed NRRD header line '" + std::string(line) + "'");
    const std::string_view raw_key = line.substr(0, colon);
    const std::string key = detail::lower(raw_key);
    const std::string_view value = trim(line.substr(colon + 2));

    if (key == "type") {
      auto t = detail::parse_sample_type(value);
      if (!t) throw ValidationError("unsupported NRRD sample type '" + std::string(value) + "'");
      h.type = *t;
      have_type = true;
    } else if (key == "dimension") {
      long long d = 0;
      if (!parse_long(value, d)) throw ValidationError("bad NRRD dimension");
      if (d != 3) throw ValidationError("unsupported NRRD dimension " + std::to_string(d) + " (only 3 is supported)");
      h.dimension = 3;
      have_dimension = true;
    } else if (key == "sizes") {
      raw_sizes.clear();
      for (auto tok : detail::split_ws(value)) {
        long long s = 0;
        if (!parse_long(tok, s) || s < 1) throw ValidationError("bad NRRD size '" + std::string(tok) + "'");
        raw_sizes.push_back(s);
      }
      have_sizes = true;
    } else if (key == "encoding") {
      auto e = detail::parse_encoding(value);
      if (!e) throw ValidationError("unsupported NRRD encoding '" + std::string(value) + "'");
      h.encoding = *e;
      have_encoding = true;
    } else if (key == "endian") {
      const std::string v = detail::lower(value);
      if (v == "little") h.endian = Endian::little;
      else if (v == "big") h.endian = Endian::big;
      else throw ValidationError("bad NRRD endian '" + std::string(value) + "'");
    } else if (key == "space directions") {
      const auto toks = detail::split_ws(value);
      if (toks.size() != 3) throw ValidationError("space directions must list 3 vectors");
      for (int a = 0; a < 3; ++a) {
        if (detail::lower(toks[a]) == "none") throw ValidationError("space directions 'none' is unsupported");
        h.space_directions.col(a) = detail::parse_paren_vector(toks[a]);
      }
      have_directions = true;
    } else if (key == "space origin") {
      h.space_origin = detail::parse_paren_vector(value);
    } else if (key == "spacings") {
      const auto toks = detail::split_ws(value);
      if (toks.size() != 3) throw ValidationError("spacings must list 3 values");
      Vec3 s;
      for (int a = 0; a < 3; ++a)
        if (!parse_double(toks[a], s[a])) throw ValidationError("bad spacing value");
      spacings = s;
    } else if (key == "data file" || key == "datafile") {
      throw ValidationError("detached NRRD data files are unsupported");
    } else if (key == "line skip" || key == "lineskip" || key == "byte skip" || key == "byteskip") {
      long long skip = 0;
      if (!parse_long(value, skip) || skip != 0) throw ValidationError("NRRD '" + key + "' is unsupported");
    } else {
      h.custom_fields.push_back({std::string(raw_key), std::string(value), false});
    }
  }

  if (!have_sizes) throw ValidationError("NRRD header is missing 'sizes'");
  if (!have_type) throw ValidationError("NRRD header is missing 'type'");
  if (!have_dimension) throw ValidationError("NRRD header is missing 'dimension'");
  if (!have_encoding) throw ValidationError("NRRD header is missing 'encoding'");
  if (raw_sizes.size() != 3) throw ValidationError("NRRD 'sizes' must list exactly 3 values");
  for (int a = 0; a < 3; ++a) {
    if (raw_sizes[a] > (1 << 20)) throw ValidationError("NRRD size too large");
    h.sizes[a] = static_cast<int>(raw_sizes[a]);
  }
  if (!have_directions && spacings) h.space_directions = spacings->asDiagonal();

  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double v = h.space_directions(r, c);
      if (!std::isfinite(v)) throw ValidationError("non-finite space direction");
      if (r != c && std::abs(v) > kAxisAlignedTolerance)
        throw ValidationError("non-axis-aligned space directions are unsupported");
      if (r == c && v == 0.0) throw ValidationError("zero-length space direction");
    }

  if (data_offset) *data_offset = pos;
  return h;
}

/// Canonical header text (including the terminating blank line).
inline std::string format_nrrd_header(const NrrdHeader& h) {
  std::string out = "NRRD000" + std::to_string(h.version) + "\n";
  out += std::string("type: ") + detail::sample_type_name(h.type) + "\n";
  out += "dimension: 3\n";
  out += "sizes: " + std::to_string(h.sizes[0]) + " " + std::to_string(h.sizes[1]) + " " + std::to_string(h.sizes[2]) +
         "\n";
  out += "space directions:";
  for (int a = 0; a < 3; ++a) out += " " + detail::format_paren_vector(h.space_directions.col(a));
  out += "\n";
  out += "space origin: " + detail::format_paren_vector(h.space_origin) + "\n";
  for (const auto& f : h.custom_fields) out += f.key + (f.key_value ? ":=" : ": ") + f.value + "\n";
  if (sample_size(h.type) > 1 && h.encoding != Encoding::ascii)
    out += std::string("endian: ") + (h.endian == Endian::little ? "little" : "big") + "\n";
  out += std::string("encoding: ") + detail::encoding_name(h.encoding) + "\n";
  out += "\n";
  return out;
}

/// Decodes the payload into sample values (exactly representable as double).
inline std::vector<double> decode_nrrd_payload(const NrrdHeader& h, std::string_view payload) {
  const std::size_t n = h.sample_count();
  std::vector<double> out(n);
  if (h.encoding == Encoding::ascii) {
    std::size_t i = 0;
    for (auto tok : detail::split_ws(payload)) {
      if (i >= n) throw ValidationError("NRRD ascii payload has more samples than 'sizes' declares");
      if (!parse_double(tok, out[i])) throw ValidationError("bad ascii sample '" + std::string(tok) + "'");
      if (h.type == SampleType::f32) out[i] = static_cast<double>(static_cast<float>(out[i]));
      ++i;
    }
    if (i != n)
      throw ValidationError("NRRD payload length mismatch: expected " + std::to_string(n) + " samples, got " +
                            std::to_string(i));
    return out;
  }

  std::string inflated;
  if (h.encoding == Encoding::gzip) {
#ifdef SDFVF_WITH_ZLIB
    inflated = detail::gunzip(payload);
    payload = inflated;
#else
    throw ValidationError("gzip-encoded NRRD payloads are unsupported in this build");
#endif
  }

  const std::size_t ss = sample_size(h.type);
  if (payload.size() != n * ss)
    throw ValidationError("NRRD payload length mismatch: expected " + std::to_string(n * ss) + " bytes, got " +
                          std::to_string(payload.size()));
  const bool swap = (h.endian == Endian::little) != detail::host_is_little();
  for (std::size_t i = 0; i < n; ++i) {
    unsigned char b[4];
    std::memcpy(b, payload.data() + i * ss, ss);
    if (swap && ss > 1) std::reverse(b, b + ss);
    switch (h.type) {
      case SampleType::u8: out[i] = b[0]; break;
      case SampleType::u16: {
        std::uint16_t v;
        std::memcpy(&v, b, 2);
        out[i] = v;
        break;
      }
      case SampleType::i16: {
        std::int16_t v;
        std::memcpy(&v, b, 2);
        out[i] = v;
        break;
      }
      case SampleType::f32: {
        float v;
        std::memcpy(&v, b, 4);
        out[i] = v;
        break;
      }
    }
  }
  return out;
}

inline std::string encode_nrrd_payload(const NrrdHeader& h, std::span<const double> samples) {
  if (samples.size() != h.sample_count()) throw ValidationError("sample count does not match NRRD sizes");
  std::string out;
  if (h.encoding == Encoding::ascii) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      out += h.type == SampleType::f32 ? format_number(static_cast<float>(samples[i])) : format_number(samples[i]);
      out += (i + 1) % static_cast<std::size_t>(h.sizes[0]) == 0 ? '\n' : ' ';
    }
    return out;
  }
  const std::size_t ss = sample_size(h.type);
  out.resize(samples.size() * ss);
  const bool swap = (h.endian == Endian::little) != detail::host_is_little();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    unsigned char b[4];
    switch (h.type) {
      case SampleType::u8: b[0] = static_cast<unsigned char>(samples[i]); break;
      case SampleType::u16: {
        auto v = static_cast<std::uint16_t>(samples[i]);
        std::memcpy(b, &v, 2);
        break;
      }
      case SampleType::i16: {
        auto v = static_cast<std::int16_t>(samples[i]);
        std::memcpy(b, &v, 2);
        break;
      }
      case SampleType::f32: {
        auto v = static_cast<float>(samples[i]);
        std::memcpy(b, &v, 4);
        break;
      }
    }
    if (swap && ss > 1) std::reverse(b, b + ss);
    std::memcpy(out.data() + i * ss, b, ss);
  }
  if (h.encoding == Encoding::gzip) {
#ifdef SDFVF_WITH_ZLIB
    return detail::gzip(out);
#else
    throw ValidationError("gzip-encoded NRRD payloads are unsupported in this build");
#endif
  }
  return out;
}

struct NrrdImage {
  NrrdHeader header;
  std::vector<double> samples;
};

inline NrrdImage parse_nrrd(std::string_view bytes) {
  std::size_t offset = 0;
  NrrdImage img;
  img.header = parse_nrrd_header(bytes, &offset);
  img.samples = decode_nrrd_payload(img.header, bytes.substr(offset));
  return img;
}

inline std::string format_nrrd(const NrrdHeader& h, std::span<const double> samples) {
  return format_nrrd_header(h) + encode_nrrd_payload(h, samples);
}

// ---------------------------------------------------------------------------
// Label volumes

/// Builds the Slicer-style segment table from `SegmentN_*` key/value fields.
inline SegmentTable segment_table_from_fields(const std::vector<HeaderField>& fields) {
  struct Partial {
    std::optional<std::string> name;
    std::optional<long long> label;
    std::optional<Vec3> color;
  };
  std::map<long long, Partial> by_index;
  for (const auto& f : fields) {
    if (!f.key_value || f.key.rfind("Segment", 0) != 0) continue;
    const auto us = f.key.find('_');
    if (us == std::string::npos) continue;
    long long idx = 0;
    if (!parse_long(std::string_view(f.key).substr(7, us - 7), idx) || idx < 0) continue;
    const std::string attr = f.key.substr(us + 1);
    auto& p = by_index[idx];
    if (attr == "Name") {
      p.name = f.value;
    } else if (attr == "LabelValue") {
      long long v = 0;
      if (!parse_long(f.value, v) || v <= 0 || v > 65535)
        throw ValidationError("bad " + f.key + " value '" + f.value + "'");
      p.label = v;
    } else if (attr == "Color") {
      auto toks = detail::split_ws(f.value);
      Vec3 c;
      if (toks.size() != 3 || !parse_double(toks[0], c[0]) || !parse_double(toks[1], c[1]) ||
          !parse_double(toks[2], c[2]))
        throw ValidationError("bad " + f.key + " value '" + f.value + "'");
      p.color = c;
    }
  }
  SegmentTable table;
  for (const auto& [idx, p] : by_index) {
    if (!p.name && !p.label) continue;
    Segment s;
    s.name = p.name.value_or("Segment_" + std::to_string(idx));
    // Older Slicer exports omit LabelValue; the convention is index + 1.
    s.label = static_cast<Label>(p.label.value_or(idx + 1));
    s.color = p.color;
    table.entries.push_back(std::move(s));
  }
  table.validate();
  return table;
}

inline LabeledVolume label_volume_from_nrrd(const NrrdImage& img) {
  const auto& h = img.header;
  if (h.type == SampleType::f32) throw ValidationError("float samples cannot be used as label data");
  LabeledVolume out;
  GridGeometry g;
  g.dims = h.sizes;
  g.origin = h.space_origin;
  std::array<bool, 3> flip{};
  for (int a = 0; a < 3; ++a) {
    const double d = h.space_directions(a, a);
    g.spacing[a] = std::abs(d);
    if (d < 0) {
      flip[a] = true;
      g.origin[a] += (h.sizes[a] - 1) * d;
    }
  }
  g.validate();
  out.volume = LabelVolume(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const double v = img.samples[g.index(i, j, k)];
        if (v < 0 || v > 65535) throw ValidationError("label value out of range: " + format_number(v));
        const int ti = flip[0] ? g.dims[0] - 1 - i : i;
        const int tj = flip[1] ? g.dims[1] - 1 - j : j;
        const int tk = flip[2] ? g.dims[2] - 1 - k : k;
        out.volume.at(ti, tj, tk) = static_cast<Label>(v);
      }
  out.segments = segment_table_from_fields(h.custom_fields);
  return out;
}

inline LabeledVolume load_label_volume(const std::filesystem::path& path) {
  const std::string bytes = read_file_bytes(path);
  return label_volume_from_nrrd(parse_nrrd(bytes));
}

inline NrrdHeader label_volume_header(const LabelVolume& volume, const SegmentTable& segments,
                                      Encoding encoding = Encoding::raw) {
  volume.validate();
  segments.validate();
  NrrdHeader h;
  h.version = 4;
  h.sizes = volume.geometry.dims;
  const Label max_label = volume.labels.empty() ? 0 : *std::max_element(volume.labels.begin(), volume.labels.end());
  h.type = max_label <= 255 ? SampleType::u8 : SampleType::u16;
  h.encoding = encoding;
  h.endian = Endian::little;
  h.space_directions = volume.geometry.spacing.asDiagonal();
  h.space_origin = volume.geometry.origin;
  h.custom_fields.push_back({"space", "left-posterior-superior", false});
  h.custom_fields.push_back({"kinds", "domain domain domain", false});
  for (std::size_t n = 0; n < segments.entries.size(); ++n) {
    const auto& s = segments.entries[n];
    const std::string prefix = "Segment" + std::to_string(n) + "_";
    if (s.color)
      h.custom_fields.push_back({prefix + "Color",
                                 format_number(s.color->x()) + " " + format_number(s.color->y()) + " " +
                                     format_number(s.color->z()),
                                 true});
    h.custom_fields.push_back({prefix + "ID", "Segment_" + std::to_string(s.label), true});
    h.custom_fields.push_back({prefix + "LabelValue", std::to_string(s.label), true});
    h.custom_fields.push_back({prefix + "Layer", "0", true});
    h.custom_fields.push_back({prefix + "Name", s.name, true});
  }
  return h;
}

inline std::string format_label_volume(const LabelVolume& volume, const SegmentTable& segments,
                                       Encoding encoding = Encoding::raw) {
  const NrrdHeader h = label_volume_header(volume, segments, encoding);
  std::vector<double> samples(volume.labels.begin(), volume.labels.end());
  return format_nrrd(h, samples);
}

inline void write_nrrd(const LabelVolume& volume, const SegmentTable& segments, const std::filesystem::path& path) {
  write_file_bytes(path, format_label_volume(volume, segments));
}

// ---------------------------------------------------------------------------
// Synthetic phantoms

enum class PrimitiveKind { sphere, box, capsule, ellipsoid };

struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  Label label = 0;
  std::string name;
  std::optional<Vec3> color;
  Vec3 center = Vec3::Zero();      // sphere, ellipsoid
  double radius = 0.0;             // sphere, capsule
  Vec3 radii = Vec3::Zero();       // ellipsoid
  Vec3 min_corner = Vec3::Zero();  // box
  Vec3 max_corner = Vec3::Zero();  // box
  std::vector<Vec3> points;        // capsule polyline
};

struct PhantomSpec {
  GridGeometry geometry;
  // Optional filler ("dental stone") painted before the primitives; no box = whole grid.
  std::optional<Primitive> matrix;
  std::vector<Primitive> primitives;
};

struct Phantom {
  LabelVolume volume;
  SegmentTable segments;
  std::vector<std::string> warnings;
};

namespace detail {

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

inline bool contains(const Primitive& p, const Vec3& x) {
  switch (p.kind) {
    case PrimitiveKind::sphere: return (x - p.center).squaredNorm() <= p.radius * p.radius;
    case PrimitiveKind::box:
      return (x.array() >= p.min_corner.array()).all() && (x.array() <= p.max_corner.array()).all();
    case PrimitiveKind::ellipsoid: return ((x - p.center).array() / p.radii.array()).matrix().squaredNorm() <= 1.0;
    case PrimitiveKind::capsule:
      if (p.points.size() == 1) return (x - p.points[0]).norm() <= p.radius;
      for (std::size_t s = 0; s + 1 < p.points.size(); ++s)
        if (point_segment_distance(x, p.points[s], p.points[s + 1]) <= p.radius) return true;
      return false;
  }
  return false;
}

inline void bounds(const Primitive& p, Vec3& lo, Vec3& hi) {
  switch (p.kind) {
    case PrimitiveKind::sphere:
      lo = p.center.array() - p.radius;
      hi = p.center.array() + p.radius;
      return;
    case PrimitiveKind::box:
      lo = p.min_corner;
      hi = p.max_corner;
      return;
    case PrimitiveKind::ellipsoid:
      lo = p.center - p.radii;
      hi = p.center + p.radii;
      return;
    case PrimitiveKind::capsule:
      lo = Vec3::Constant(std::numeric_limits<double>::infinity());
      hi = -lo;
      for (const auto& q : p.points) {
        lo = lo.cwiseMin(q);
        hi = hi.cwiseMax(q);
      }
      lo.array() -= p.radius;
      hi.array() += p.radius;
      return;
  }
}

// Voxel-center membership, restricted to the primitive's bounding box.
inline std::size_t paint(LabelVolume& vol, const Primitive& p) {
  const auto& g = vol.geometry;
  Vec3 lo, hi;
  bounds(p, lo, hi);
  std::array<int, 3> i0{}, i1{};
  for (int a = 0; a < 3; ++a) {
    const double f0 = std::ceil((lo[a] - g.origin[a]) / g.spacing[a] - 1e-9);
    const double f1 = std::floor((hi[a] - g.origin[a]) / g.spacing[a] + 1e-9);
    i0[a] = static_cast<int>(std::max(0.0, f0));
    i1[a] = static_cast<int>(std::min<double>(g.dims[a] - 1, f1));
    if (f1 < 0 || f0 > g.dims[a] - 1) return 0;
  }
  std::size_t painted = 0;
  for (int k = i0[2]; k <= i1[2]; ++k)
    for (int j = i0[1]; j <= i1[1]; ++j)
      for (int i = i0[0]; i <= i1[0]; ++i)
        if (contains(p, g.center(i, j, k))) {
          vol.at(i, j, k) = p.label;
          ++painted;
        }
  return painted;
}

}  // namespace detail

/// Rasterizes the spec; later primitives overwrite earlier ones.
inline Phantom make_phantom(const PhantomSpec& spec) {
  spec.geometry.validate();
  Phantom out;
  out.volume = LabelVolume(spec.geometry);

  auto add_segment = [&](const Primitive& p) {
    if (out.segments.find(p.label)) return;
    Segment s;
    s.name = p.name.empty() ? "label_" + std::to_string(p.label) : p.name;
    s.label = p.label;
    s.color = p.color;
    out.segments.entries.push_back(std::move(s));
  };

  if (spec.matrix) {
    const auto& m = *spec.matrix;
    if (m.label == 0) throw ValidationError("matrix label must be nonzero");
    if (m.kind == PrimitiveKind::box) {
      if (detail::paint(out.volume, m) == 0) out.warnings.push_back("matrix region lies entirely outside the grid");
    } else {
      std::fill(out.volume.labels.begin(), out.volume.labels.end(), m.label);
    }
    add_segment(m);
  }
  for (std::size_t n = 0; n < spec.primitives.size(); ++n) {
    const auto& p = spec.primitives[n];
    if (p.label == 0) throw ValidationError("primitive " + std::to_string(n) + " uses reserved label 0");
    if (p.kind == PrimitiveKind::capsule && p.points.empty())
      throw ValidationError("capsule primitive " + std::to_string(n) + " has no points");
    if (detail::paint(out.volume, p) == 0)
      out.warnings.push_back("primitive " + std::to_string(n) + " covers no voxel centers");
    add_segment(p);
  }
  return out;
}

namespace detail {

inline Vec3 json_vec3(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array() || j.size() != 3) throw ValidationError(what + " must be a 3-element array");
  Vec3 v;
  for (int a = 0; a < 3; ++a) {
    if (!j[a].is_number()) throw ValidationError(what + " must contain numbers");
    v[a] = j[a].get<double>();
  }
  return v;
}

inline Primitive primitive_from_json(const nlohmann::json& j, const std::string& where) {
  Primitive p;
  const std::string kind = j.value("kind", std::string("box"));
  if (kind == "sphere") p.kind = PrimitiveKind::sphere;
  else if (kind == "box") p.kind = PrimitiveKind::box;
  else if (kind == "capsule") p.kind = PrimitiveKind::capsule;
  else if (kind == "ellipsoid") p.kind = PrimitiveKind::ellipsoid;
  else throw ValidationError(where + ": unknown primitive kind '" + kind + "'");
  if (!j.contains("label") || !j["label"].is_number_unsigned()) throw ValidationError(where + ": missing label");
  const auto label = j["label"].get<unsigned long>();
  if (label == 0 || label > 65535) throw ValidationError(where + ": label must be in 1..65535");
  p.label = static_cast<Label>(label);
  p.name = j.value("name", std::string());
  if (j.contains("color")) p.color = json_vec3(j["color"], where + "/color");
  switch (p.kind) {
    case PrimitiveKind::sphere:
      p.center = json_vec3(j.at("center_mm"), where + "/center_mm");
      p.radius = j.at("radius_mm").get<double>();
      break;
    case PrimitiveKind::ellipsoid:
      p.center = json_vec3(j.at("center_mm"), where + "/center_mm");
      p.radii = json_vec3(j.at("radii_mm"), where + "/radii_mm");
      if ((p.radii.array() <= 0).any()) throw ValidationError(where + ": ellipsoid radii must be positive");
      break;
    case PrimitiveKind::box:
      if (j.contains("min_mm")) {
        p.min_corner = json_vec3(j["min_mm"], where + "/min_mm");
        p.max_corner = json_vec3(j.at("max_mm"), where + "/max_mm");
      } else {
        p.min_corner = Vec3::Constant(-std::numeric_limits<double>::infinity());
        p.max_corner = Vec3::Constant(std::numeric_limits<double>::infinity());
      }
      break;
    case PrimitiveKind::capsule:
      for (const auto& q : j.at("points_mm")) p.points.push_back(json_vec3(q, where + "/points_mm"));
      p.radius = j.at("radius_mm").get<double>();
      break;
  }
  if (p.radius < 0) throw ValidationError(where + ": radius must be non-negative");
  return p;
}

}  // namespace detail

/// JSON schema:
///   { "dims": [nx,ny,nz], "spacing_mm": [sx,sy,sz], "origin_mm": [ox,oy,oz],
///     "matrix": {"label": L, "name": "...", "min_mm": [...], "max_mm": [...]},   (optional)
///     "primitives": [ {"kind": "sphere", "label": L, "center_mm": [...], "radius_mm": r}
///                   | {"kind": "box", "label": L, "min_mm": [...], "max_mm": [...]}
///                   | {"kind": "capsule", "label": L, "points_mm": [[...],...], "radius_mm": r}
///                   | {"kind": "ellipsoid", "label": L, "center_mm": [...], "radii_mm": [...]} ] }
/// Every primitive may carry "name" and "color" ([r,g,b] in 0..1).
inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  PhantomSpec spec;
  try {
    if (!j.contains("dims") || !j["dims"].is_array() || j["dims"].size() != 3)
      throw ValidationError("phantom: dims must be a 3-element array");
    for (int a = 0; a < 3; ++a) spec.geometry.dims[a] = j["dims"][a].get<int>();
    if (j.contains("spacing_mm")) spec.geometry.spacing = detail::json_vec3(j["spacing_mm"], "phantom/spacing_mm");
    if (j.contains("origin_mm")) spec.geometry.origin = detail::json_vec3(j["origin_mm"], "phantom/origin_mm");
    spec.geometry.validate();
    if (j.contains("matrix")) {
      auto m = j["matrix"];
      m["kind"] = "box";
      spec.matrix = detail::primitive_from_json(m, "phantom/matrix");
    }
    if (j.contains("primitives")) {
      std::size_t n = 0;
      for (const auto& p : j["primitives"])
        spec.primitives.push_back(detail::primitive_from_json(p, "phantom/primitives/" + std::to_string(n++)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("phantom spec: ") + e.what());
  }
  return spec;
}

}  // namespace sdfvf

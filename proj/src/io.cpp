#include "cgrseg/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace cgr {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw IoError("weight file truncated reading " + std::string(what) + ": need " + std::to_string(n) +
                    " bytes at offset " + std::to_string(pos_) + ", have " +
                    std::to_string(bytes_.size() - pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Reads one unsigned decimal header field, skipping whitespace and comments.
Index header_int(std::string_view bytes, std::size_t& pos, const std::string& source, const char* field) {
  for (;;) {
    while (pos < bytes.size() && is_space(bytes[pos])) ++pos;
    if (pos < bytes.size() && bytes[pos] == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  const std::size_t start = pos;
  Index v = 0;
  while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
    v = v * 10 + (bytes[pos] - '0');
    if (v > (Index{1} << 30)) throw IoError(source + ": " + field + " is too large");
    ++pos;
  }
  if (pos == start) throw IoError(source + ": malformed header, expected " + field);
  return v;
}

}  // namespace

std::string encode_weights(const std::vector<WeightRecord>& records) {
  std::string out = "CGRW";
  put_u32(out, kWeightFileVersion);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    put_u32(out, static_cast<std::uint32_t>(r.dims.size()));
    std::size_t count = 1;
    for (auto d : r.dims) {
      put_u32(out, d);
      count *= d;
    }
    if (count != r.values.size()) throw IoError("weight record '" + r.name + "' has inconsistent payload size");
    for (float v : r.values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

std::vector<WeightRecord> decode_weights(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4, "magic") != "CGRW") throw IoError("not a weight file (bad magic)");
  const std::uint32_t version = in.u32("version");
  if (version != kWeightFileVersion) {
    throw IoError("unsupported weight file version " + std::to_string(version));
  }
  const std::uint32_t count = in.u32("tensor count");
  std::vector<WeightRecord> records;
  std::set<std::string, std::less<>> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    WeightRecord r;
    const std::uint32_t len = in.u32("name length");
    r.name = std::string(in.take(len, "name"));
    if (!seen.insert(r.name).second) throw IoError("duplicate tensor name '" + r.name + "'");
    const std::uint32_t rank = in.u32("rank");
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      r.dims.push_back(in.u32("dims"));
      n *= r.dims.back();
    }
    const auto payload = in.take(n * 4, "payload");
    r.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[4 * i + b])) << (8 * b);
      r.values[i] = std::bit_cast<float>(bits);
    }
    records.push_back(std::move(r));
  }
  if (!in.done()) throw IoError("trailing bytes after the last weight record");
  return records;
}

std::vector<WeightRecord> weight_records(ModelParams& params) {
  std::vector<WeightRecord> out;
  for (const auto& p : param_registry(params)) {
    const Shape s = p.tensor->shape();
    WeightRecord r{p.name, {}, {}};
    for (int a = 0; a < 4; ++a) r.dims.push_back(static_cast<std::uint32_t>(s[a]));
    r.values.resize(static_cast<std::size_t>(s.size()));
    for (Index i = 0; i < s.size(); ++i) r.values[static_cast<std::size_t>(i)] = static_cast<float>((*p.tensor)[i]);
    out.push_back(std::move(r));
  }
  return out;
}

void save_weights(ModelParams& params, const std::string& path) {
  write_file(path, encode_weights(weight_records(params)));
}

void load_weights(ModelParams& params, const std::string& path) {
  const auto records = decode_weights(read_file(path));
  auto registry = param_registry(params);
  if (records.size() != registry.size()) {
    throw IoError(path + ": holds " + std::to_string(records.size()) + " tensors, model has " +
                  std::to_string(registry.size()));
  }
  for (const auto& p : registry) {
    auto it = std::find_if(records.begin(), records.end(), [&](const WeightRecord& r) { return r.name == p.name; });
    if (it == records.end()) throw IoError(path + ": missing tensor '" + p.name + "'");
    if (it->dims.size() > 4) throw IoError(path + ": tensor '" + p.name + "' has rank above 4");
    std::array<Index, 4> dims{1, 1, 1, 1};
    std::copy(it->dims.begin(), it->dims.end(), dims.end() - static_cast<std::ptrdiff_t>(it->dims.size()));
    const Shape want = p.tensor->shape();
    const Shape got{dims[0], dims[1], dims[2], dims[3]};
    if (got != want) {
      throw IoError(path + ": tensor '" + p.name + "' has shape " + got.str() + ", model expects " + want.str());
    }
  }
  for (const auto& p : registry) {
    const auto& r = *std::find_if(records.begin(), records.end(), [&](const WeightRecord& x) { return x.name == p.name; });
    for (Index i = 0; i < p.tensor->size(); ++i) (*p.tensor)[i] = r.values[static_cast<std::size_t>(i)];
  }
}

std::string encode_pnm(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw IoError("PNM images have 1 or 3 channels");
  if (static_cast<Index>(img.pixels.size()) != img.width * img.height * img.channels) {
    throw IoError("image buffer does not match its extent");
  }
  std::string out = img.channels == 3 ? "P6\n" : "P5\n";
  out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

Image8 decode_pnm(std::string_view bytes, const std::string& source) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw IoError(source + ": not a binary PGM/PPM (expected P5 or P6)");
  }
  Image8 img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  if (pos >= bytes.size() || !(is_space(bytes[pos]) || bytes[pos] == '#')) {
    throw IoError(source + ": malformed header after magic");
  }
  img.width = header_int(bytes, pos, source, "width");
  img.height = header_int(bytes, pos, source, "height");
  const Index maxval = header_int(bytes, pos, source, "maxval");
  if (maxval != 255) throw IoError(source + ": maxval " + std::to_string(maxval) + " unsupported (need 255)");
  if (img.width <= 0 || img.height <= 0) throw IoError(source + ": empty image");
  if (pos >= bytes.size() || !is_space(bytes[pos])) throw IoError(source + ": missing whitespace before payload");
  ++pos;
  const auto expected = static_cast<std::size_t>(img.width * img.height * img.channels);
  const std::size_t actual = bytes.size() - pos;
  if (actual != expected) {
    throw IoError(source + ": payload has " + std::to_string(actual) + " bytes, expected " +
                  std::to_string(expected));
  }
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

Image8 read_pnm(const std::string& path) { return decode_pnm(read_file(path), path); }

void write_pnm(const Image8& img, const std::string& path) { write_file(path, encode_pnm(img)); }

Tensor image_to_tensor(const Image8& img) {
  Tensor t(Shape{1, img.channels, img.height, img.width});
  for (Index y = 0; y < img.height; ++y) {
    for (Index x = 0; x < img.width; ++x) {
      for (Index c = 0; c < img.channels; ++c) {
        t(0, c, y, x) = img.pixels[static_cast<std::size_t>((y * img.width + x) * img.channels + c)] / 255.0;
      }
    }
  }
  return t;
}

Image8 tensor_to_image(const Tensor& t) {
  const Shape s = t.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3)) throw ShapeError("tensor_to_image needs (1, 1|3, H, W), got " + s.str());
  Image8 img{s.w, s.h, s.c, std::vector<std::uint8_t>(static_cast<std::size_t>(s.size()))};
  for (Index y = 0; y < s.h; ++y) {
    for (Index x = 0; x < s.w; ++x) {
      for (Index c = 0; c < s.c; ++c) {
        const double v = std::clamp(t(0, c, y, x), 0.0, 1.0);
        img.pixels[static_cast<std::size_t>((y * s.w + x) * s.c + c)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return img;
}

Image8 mask_to_image(const LabelMap& mask) {
  Image8 img{mask.cols(), mask.rows(), 1, std::vector<std::uint8_t>(static_cast<std::size_t>(mask.size()))};
  for (Index i = 0; i < mask.size(); ++i) {
    const auto v = mask.data()[i];
    if (v < 0 || v > 255) throw Error("label " + std::to_string(v) + " does not fit in a PGM byte");
    img.pixels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v);
  }
  return img;
}

LabelMap image_to_mask(const Image8& img) {
  if (img.channels != 1) throw IoError("label masks are single-channel");
  LabelMap mask(img.height, img.width);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = img.pixels[static_cast<std::size_t>(i)];
  return mask;
}

const std::array<std::array<std::uint8_t, 3>, 16>& label_palette() {
  static constexpr std::array<std::array<std::uint8_t, 3>, 16> kPalette{{
      {0, 0, 0},       {230, 25, 75},  {60, 180, 75},   {0, 130, 200},
      {255, 225, 25},  {245, 130, 48}, {145, 30, 180},  {70, 240, 240},
      {240, 50, 230},  {210, 245, 60}, {250, 190, 212}, {0, 128, 128},
      {220, 190, 255}, {170, 110, 40}, {128, 0, 0},     {255, 255, 255},
  }};
  return kPalette;
}

Image8 colorize(const LabelMap& mask) {
  const auto& palette = label_palette();
  Image8 img{mask.cols(), mask.rows(), 3, std::vector<std::uint8_t>(static_cast<std::size_t>(mask.size() * 3))};
  for (Index i = 0; i < mask.size(); ++i) {
    const auto label = mask.data()[i];
    if (label < 0) throw Error("negative label in mask");
    const auto& rgb = palette[static_cast<std::size_t>(label) % palette.size()];
    std::copy(rgb.begin(), rgb.end(), img.pixels.begin() + 3 * i);
  }
  return img;
}

Tensor read_ppm(const std::string& path) {
  Image8 img = read_pnm(path);
  if (img.channels != 3) throw IoError(path + ": expected a P6 color image");
  return image_to_tensor(img);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace cgr

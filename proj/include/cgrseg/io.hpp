#pragma once

// Binary weight files and 8-bit PPM/PGM images.

#include "cgrseg/model.hpp"
#include "cgrseg/toy_data.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace cgr {

/// Unreadable, malformed or mismatched file.
class IoError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Weight files
//
//   "CGRW" | version u32 | count u32 | count x record
//   record: name_len u32 | name (UTF-8) | rank u32 | dims u32 x rank | f32 x prod(dims)
//
// All integers and floats little-endian.

inline constexpr std::uint32_t kWeightFileVersion = 1;

struct WeightRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

std::string encode_weights(const std::vector<WeightRecord>& records);
/// Throws IoError on bad magic, unknown version, duplicate names or truncation.
std::vector<WeightRecord> decode_weights(std::string_view bytes);

/// Every registry tensor (learnable and buffers) in registry order, rank 4.
std::vector<WeightRecord> weight_records(ModelParams& params);
void save_weights(ModelParams& params, const std::string& path);
/// Requires the file to hold exactly the registry names with matching shapes
/// (leading unit axes may be omitted); throws IoError naming the first
/// mismatch. Values are widened from f32.
void load_weights(ModelParams& params, const std::string& path);

// ---------------------------------------------------------------------------
// Images

/// Interleaved 8-bit pixels; channels is 1 (PGM) or 3 (PPM).
struct Image8 {
  Index width = 0;
  Index height = 0;
  Index channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Header is written as "P6\n<w> <h>\n255\n" (P5 for one channel).
std::string encode_pnm(const Image8& img);
/// Binary P5/P6 with maxval 255; '#' comments may appear between header
/// fields. Throws IoError on malformed headers or a payload of the wrong
/// length (the message states expected and actual byte counts).
Image8 decode_pnm(std::string_view bytes, const std::string& source = "<memory>");

Image8 read_pnm(const std::string& path);
void write_pnm(const Image8& img, const std::string& path);

/// (1, C, H, W) with values k / 255.
Tensor image_to_tensor(const Image8& img);
/// Inverse of image_to_tensor; values are clamped to [0, 1] and rounded.
Image8 tensor_to_image(const Tensor& t);

/// Labels as raw gray levels; throws Error for labels outside [0, 255].
Image8 mask_to_image(const LabelMap& mask);
LabelMap image_to_mask(const Image8& img);

/// 16-color label palette; label l uses entry l mod 16.
const std::array<std::array<std::uint8_t, 3>, 16>& label_palette();
Image8 colorize(const LabelMap& mask);

/// Reads a P6 file as (1, 3, H, W) in [0, 1].
Tensor read_ppm(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace cgr

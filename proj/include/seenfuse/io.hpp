#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "seenfuse/error.hpp"
#include "seenfuse/geom.hpp"
#include "seenfuse/image.hpp"

namespace seenfuse {

namespace detail {

struct PngRaw {
  int width = 0, height = 0, channels = 0, bit_depth = 8;
  std::vector<std::uint16_t> samples;  // row-major, interleaved channels
};

inline void write_png_raw(const std::string& path, const PngRaw& img) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error(ErrorCode::kIo, "cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error(ErrorCode::kIo, "libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::kIo, "libpng failed writing " + path);
  }
  png_init_io(png, fp.get());
  const int type = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
  png_set_IHDR(png, info, png_uint_32(img.width), png_uint_32(img.height), img.bit_depth, type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t bytes = img.bit_depth == 16 ? 2 : 1;
  std::vector<png_byte> row(std::size_t(img.width) * std::size_t(img.channels) * bytes);
  for (int y = 0; y < img.height; ++y) {
    const std::size_t base = std::size_t(y) * std::size_t(img.width) * std::size_t(img.channels);
    for (std::size_t i = 0; i < std::size_t(img.width) * std::size_t(img.channels); ++i) {
      const std::uint16_t s = img.samples[base + i];
      if (bytes == 2) {
        row[2 * i] = png_byte(s >> 8);  // PNG stores 16-bit samples big-endian
        row[2 * i + 1] = png_byte(s & 0xFF);
      } else {
        row[i] = png_byte(s);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline PngRaw read_png_raw(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw Error(ErrorCode::kIngest, "cannot open " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8)) {
    throw Error(ErrorCode::kIngest, path + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error(ErrorCode::kIngest, "libpng init failed for " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::kIngest, "corrupt PNG " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int type = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  PngRaw img;
  img.width = int(png_get_image_width(png, info));
  img.height = int(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.bit_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  std::vector<png_byte> row(stride);
  img.samples.resize(std::size_t(img.width) * std::size_t(img.height) * std::size_t(img.channels));
  const std::size_t per_row = std::size_t(img.width) * std::size_t(img.channels);
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t i = 0; i < per_row; ++i) {
      img.samples[std::size_t(y) * per_row + i] =
          img.bit_depth == 16 ? std::uint16_t((row[2 * i] << 8) | row[2 * i + 1]) : std::uint16_t(row[i]);
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace detail

/// 8-bit RGB; colors are clamped to [0, 1].
inline void write_color_png(const std::string& path, const ColorImage& img) {
  detail::PngRaw raw{img.width, img.height, 3, 8, {}};
  raw.samples.reserve(img.size() * 3);
  for (const auto& c : img.pixels)
    for (int ch = 0; ch < 3; ++ch)
      raw.samples.push_back(std::uint16_t(std::lround(255.0 * std::clamp(double(c[ch]), 0.0, 1.0))));
  detail::write_png_raw(path, raw);
}

inline ColorImage read_color_png(const std::string& path) {
  const auto raw = detail::read_png_raw(path);
  const double scale = raw.bit_depth == 16 ? 65535.0 : 255.0;
  ColorImage img(raw.width, raw.height);
  for (std::size_t i = 0; i < img.size(); ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      const std::size_t src = raw.channels >= 3 ? i * std::size_t(raw.channels) + std::size_t(ch) : i * std::size_t(raw.channels);
      img.pixels[i][ch] = float(raw.samples[src] / scale);
    }
  }
  return img;
}

/// 16-bit depth in millimeters, 0 = invalid.
inline void write_depth_png(const std::string& path, const DepthImage& img) {
  detail::PngRaw raw{img.width, img.height, 1, 16, {}};
  raw.samples.reserve(img.size());
  for (float d : img.pixels) raw.samples.push_back(std::uint16_t(std::clamp(std::lround(double(d) * 1000.0), 0L, 65535L)));
  detail::write_png_raw(path, raw);
}

inline DepthImage read_depth_png(const std::string& path) {
  const auto raw = detail::read_png_raw(path);
  if (raw.channels != 1 || raw.bit_depth != 16) throw Error(ErrorCode::kIngest, path + " is not a 16-bit depth PNG");
  DepthImage img(raw.width, raw.height);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = float(raw.samples[i] / 1000.0);
  return img;
}

/// 8-bit mask written as 0 / 255; any non-zero sample reads back as 1.
inline void write_mask_png(const std::string& path, const MaskImage& img) {
  detail::PngRaw raw{img.width, img.height, 1, 8, {}};
  raw.samples.reserve(img.size());
  for (auto m : img.pixels) raw.samples.push_back(m ? 255 : 0);
  detail::write_png_raw(path, raw);
}

inline MaskImage read_mask_png(const std::string& path) {
  const auto raw = detail::read_png_raw(path);
  MaskImage img(raw.width, raw.height);
  for (std::size_t i = 0; i < img.size(); ++i) img.pixels[i] = raw.samples[i * std::size_t(raw.channels)] != 0;
  return img;
}

/// Depth quantization used by the PNG format.
inline DepthImage quantize_depth_mm(const DepthImage& d) {
  DepthImage out = d;
  for (auto& v : out.pixels) v = float(std::clamp(std::lround(double(v) * 1000.0), 0L, 65535L) / 1000.0);
  return out;
}

// ---------------------------------------------------------------------------
// JSON helpers

inline nlohmann::json pose_to_json(const Pose& p) {
  const Mat4 m = p.matrix();
  auto rows = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
  return rows;
}

inline Pose pose_from_json(const nlohmann::json& j) {
  Mat4 m;
  if (!j.is_array() || j.size() != 4) throw Error(ErrorCode::kIngest, "pose must be a 4x4 array");
  for (int r = 0; r < 4; ++r) {
    if (!j[std::size_t(r)].is_array() || j[std::size_t(r)].size() != 4) throw Error(ErrorCode::kIngest, "pose must be a 4x4 array");
    for (int c = 0; c < 4; ++c) m(r, c) = j[std::size_t(r)][std::size_t(c)].get<double>();
  }
  const Mat3 rot = m.topLeftCorner<3, 3>();
  if (!is_rotation(rot, 1e-4)) throw Error(ErrorCode::kIngest, "pose rotation is not orthonormal");
  return Pose(rot, m.topRightCorner<3, 1>());
}

inline nlohmann::json intrinsics_to_json(const Intrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
}

inline Intrinsics intrinsics_from_json(const nlohmann::json& j) {
  try {
    Intrinsics k{j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                 j.at("cy").get<double>(), j.at("width").get<int>(), j.at("height").get<int>()};
    if (!k.valid()) throw Error(ErrorCode::kIngest, "intrinsics violate fx,fy > 0 and 0 <= c < size");
    return k;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIngest, std::string("bad intrinsics: ") + e.what());
  }
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIngest, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kIngest, "bad JSON in " + path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Sequence directories: intrinsics.json plus NNNNNN.{color,depth,mask}.png,
// optionally NNNNNN.pose.json holding a 4x4 ground-truth pose.

inline std::string frame_stem(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", i);
  return buf;
}

struct SequenceDir {
  std::string root;
  Intrinsics k;
  std::vector<std::string> stems;  // sorted lexicographically
};

inline SequenceDir open_sequence(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw Error(ErrorCode::kIngest, "sequence directory " + root + " does not exist");
  SequenceDir seq;
  seq.root = root;
  seq.k = intrinsics_from_json(read_json_file((fs::path(root) / "intrinsics.json").string()));
  const std::string suffix = ".depth.png";
  for (const auto& e : fs::directory_iterator(root)) {
    const std::string name = e.path().filename().string();
    if (name.size() > suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      seq.stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(seq.stems.begin(), seq.stems.end());
  if (seq.stems.empty()) throw Error(ErrorCode::kIngest, "no *.depth.png frames in " + root);
  return seq;
}

/// Loads one frame; missing mask or depth raises an ingest error naming the file.
inline RgbdFrame load_sequence_frame(const SequenceDir& seq, std::size_t i) {
  namespace fs = std::filesystem;
  const fs::path base = fs::path(seq.root) / seq.stems.at(i);
  RgbdFrame f;
  for (const char* part : {".depth.png", ".mask.png"}) {
    const std::string p = base.string() + part;
    if (!fs::exists(p)) throw Error(ErrorCode::kIngest, "missing file " + p);
  }
  f.depth = read_depth_png(base.string() + ".depth.png");
  f.mask = read_mask_png(base.string() + ".mask.png");
  const std::string color = base.string() + ".color.png";
  f.color = fs::exists(color) ? read_color_png(color) : ColorImage(f.depth.width, f.depth.height, Rgb(0.5f, 0.5f, 0.5f));
  f.check_shapes();
  if (!f.depth.same_shape(seq.k.width, seq.k.height)) {
    throw Error(ErrorCode::kIngest, "frame " + base.string() + " does not match intrinsics.json resolution");
  }
  return f;
}

inline void write_frame_files(const std::string& stem_path, const RgbdFrame& f) {
  write_color_png(stem_path + ".color.png", f.color);
  write_depth_png(stem_path + ".depth.png", f.depth);
  write_mask_png(stem_path + ".mask.png", f.mask);
}

}  // namespace seenfuse

#include "attune/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "attune/checkpoint.hpp"
#include "attune/errors.hpp"

ATTUNE_NAMESPACE_BEGIN

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void require_plane(const Tensor& t, const char* what) {
  if (t.rank() == 2 || (t.rank() == 3 && t.dim(0) == 1)) return;
  throw DimensionError(std::string(what) + ": expected [H,W] or [1,H,W], got " + shape_to_string(t.shape()));
}

std::size_t plane_rows(const Tensor& t) { return t.dim(t.rank() - 2); }
std::size_t plane_cols(const Tensor& t) { return t.dim(t.rank() - 1); }

}  // namespace

Image8 to_gray8(const Tensor& map) {
  require_plane(map, "to_gray8");
  Image8 out{plane_rows(map), plane_cols(map), 1, {}};
  out.pixels.reserve(map.size());
  for (Real v : map.values()) out.pixels.push_back(to_byte(v));
  return out;
}

Image8 render_overlay(const Tensor& image, const Tensor& attribution, double max_alpha) {
  require_plane(image, "render_overlay");
  require_plane(attribution, "render_overlay");
  if (image.size() != attribution.size()) throw DimensionError("render_overlay: image and attribution differ in size");
  Image8 out{plane_rows(image), plane_cols(image), 3, {}};
  out.pixels.reserve(image.size() * 3);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double g = std::clamp(static_cast<double>(image[i]), 0.0, 1.0);
    const double a = max_alpha * std::clamp(static_cast<double>(attribution[i]), 0.0, 1.0);
    out.pixels.push_back(to_byte((1 - a) * g + a));
    out.pixels.push_back(to_byte((1 - a) * g));
    out.pixels.push_back(to_byte((1 - a) * g));
  }
  return out;
}

Image8 side_by_side(const Image8& left, const Image8& right, std::size_t gap) {
  if (left.rows != right.rows || left.channels != right.channels) {
    throw DimensionError("side_by_side: images differ in height or channel count");
  }
  const std::size_t ch = left.channels;
  Image8 out{left.rows, left.cols + gap + right.cols, ch, {}};
  out.pixels.assign(out.rows * out.cols * ch, 0);
  for (std::size_t r = 0; r < out.rows; ++r) {
    std::copy_n(left.pixels.begin() + r * left.cols * ch, left.cols * ch, out.pixels.begin() + r * out.cols * ch);
    std::copy_n(right.pixels.begin() + r * right.cols * ch, right.cols * ch,
                out.pixels.begin() + (r * out.cols + left.cols + gap) * ch);
  }
  return out;
}

Image8 upscale(const Image8& image, std::size_t factor) {
  if (factor == 0) throw ContractError("upscale: factor must be positive");
  const std::size_t ch = image.channels;
  Image8 out{image.rows * factor, image.cols * factor, ch, {}};
  out.pixels.resize(out.rows * out.cols * ch);
  for (std::size_t r = 0; r < out.rows; ++r) {
    for (std::size_t c = 0; c < out.cols; ++c) {
      const std::size_t src = ((r / factor) * image.cols + c / factor) * ch;
      std::copy_n(image.pixels.begin() + src, ch, out.pixels.begin() + (r * out.cols + c) * ch);
    }
  }
  return out;
}

std::string encode_pgm(const Image8& image) {
  if (image.channels != 1) throw ContractError("encode_pgm: PGM holds gray images only");
  std::string out = "P5\n" + std::to_string(image.cols) + " " + std::to_string(image.rows) + "\n255\n";
  out.append(image.pixels.begin(), image.pixels.end());
  return out;
}

Image8 decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t cols = 0;
  std::size_t rows = 0;
  int maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  if (!in || magic != "P5" || maxval != 255 || rows == 0 || cols == 0) throw FormatError("decode_pgm: bad header");
  in.get();
  Image8 out{rows, cols, 1, std::vector<std::uint8_t>(rows * cols)};
  in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != out.pixels.size()) throw FormatError("decode_pgm: truncated payload");
  return out;
}

std::string encode_png(const Image8& image) {
  if (image.channels != 1 && image.channels != 3) throw ContractError("encode_png: expected 1 or 3 channels");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("encode_png: cannot create writer");
  png_infop info = png_create_info_struct(png);
  std::string out;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("encode_png: libpng failure");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        static_cast<std::string*>(png_get_io_ptr(p))->append(reinterpret_cast<const char*>(data), n);
      },
      [](png_structp) {});
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.cols), static_cast<png_uint_32>(image.rows), 8,
               image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = image.cols * image.channels;
  for (std::size_t r = 0; r < image.rows; ++r) {
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() + r * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_pgm(const std::filesystem::path& path, const Image8& image) { write_file_atomic(path, encode_pgm(image)); }
void write_png(const std::filesystem::path& path, const Image8& image) { write_file_atomic(path, encode_png(image)); }

ATTUNE_NAMESPACE_END

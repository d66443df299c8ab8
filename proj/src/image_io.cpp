#include "dnet/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <regex>
#include <stdexcept>
#include <vector>

namespace dnet {

namespace {

struct Raster {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<unsigned char> pixels;
};

// libpng's simplified API keeps longjmp-based error handling inside the
// library and reports failures through the image struct.
Raster read_png(const std::string& path, bool gray) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw std::runtime_error("png: cannot read " + path + ": " + image.message);
  const bool source_gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  if (gray && !source_gray) {
    png_image_free(&image);
    throw std::runtime_error("png: label image must be single-channel: " + path);
  }
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster r{image.height, image.width, gray ? 1u : 3u, {}};
  r.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, r.pixels.data(), 0, nullptr))
    throw std::runtime_error("png: cannot decode " + path + ": " + image.message);
  return r;
}

void write_png(const std::string& path, const Raster& r) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(r.width);
  image.height = static_cast<png_uint_32>(r.height);
  image.format = r.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, r.pixels.data(), 0, nullptr))
    throw std::runtime_error("png: cannot write " + path + ": " + image.message);
}

}  // namespace

Tensor read_rgb_png(const std::string& path) {
  const Raster r = read_png(path, false);
  std::vector<double> v(3 * r.height * r.width);
  const std::size_t plane = r.height * r.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      v[c * plane + p] = r.pixels[p * 3 + c] / 255.0;
    }
  return Tensor::from({3, r.height, r.width}, std::move(v));
}

void write_rgb_png(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("write_rgb_png: expected [3,H,W]");
  Raster r{image.dim(1), image.dim(2), 3, {}};
  const std::size_t plane = r.height * r.width;
  r.pixels.resize(3 * plane);
  auto v = image.data();
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      r.pixels[p * 3 + c] = static_cast<unsigned char>(std::lround(std::clamp(v[c * plane + p], 0.0, 1.0) * 255.0));
  write_png(path, r);
}

LabelMap read_label_png(const std::string& path) {
  const Raster r = read_png(path, true);
  LabelMap m(r.height, r.width);
  m.values = r.pixels;
  return m;
}

void write_label_png(const std::string& path, const LabelMap& labels) {
  write_png(path, Raster{labels.height, labels.width, 1, labels.values});
}

void write_npy(const std::string& path, const Tensor& values) {
  static_assert(std::endian::native == std::endian::little, "npy writer assumes a little-endian host");
  std::string shape = "(";
  for (auto e : values.shape()) shape += std::to_string(e) + ", ";
  if (values.rank() > 1) shape.resize(shape.size() - 2);
  else shape.pop_back();
  shape += ")";
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("npy: cannot create " + path);
  out.write("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  auto v = values.data();
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (!out) throw std::runtime_error("npy: write failed for " + path);
}

Tensor read_npy(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("npy: cannot open " + path);
  char magic[10];
  in.read(magic, 10);
  if (!in || std::string(magic, 6) != "\x93NUMPY" || magic[6] != 1)
    throw std::runtime_error("npy: unsupported file " + path);
  const std::size_t len = static_cast<unsigned char>(magic[8]) | (static_cast<unsigned char>(magic[9]) << 8);
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (header.find("'<f8'") == std::string::npos || header.find("'fortran_order': False") == std::string::npos)
    throw std::runtime_error("npy: only C-order float64 is supported");
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('shape': \(([0-9, ]*)\))")))
    throw std::runtime_error("npy: malformed header");
  Shape shape;
  const std::string dims = m[1];
  const std::regex number("[0-9]+");
  for (std::sregex_iterator it(dims.begin(), dims.end(), number), end; it != end; ++it)
    shape.push_back(std::stoull(it->str()));
  std::vector<double> v(shape_numel(shape));
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != v.size() * sizeof(double)) throw std::runtime_error("npy: truncated data");
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace dnet

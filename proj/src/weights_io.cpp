#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "dnet/model.hpp"
#include "dnet/serial.hpp"

namespace dnet {

namespace serial {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

static void read_exact(std::istream& in, unsigned char* dst, std::size_t n) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) throw std::runtime_error("weights: truncated file");
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  read_exact(in, b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  read_exact(in, b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

void put_magic(std::ostream& out, std::string_view magic) { out.write(magic.data(), static_cast<std::streamsize>(magic.size())); }

void expect_magic(std::istream& in, std::string_view magic) {
  std::string got(magic.size(), '\0');
  in.read(got.data(), static_cast<std::streamsize>(got.size()));
  if (!in || got != magic) throw std::runtime_error("expected section '" + std::string(magic) + "'");
}

}  // namespace serial

constexpr std::string_view kWeightsMagic = "DNETW1";

void write_weights(std::ostream& out, const std::vector<Parameter>& params) {
  serial::put_magic(out, kWeightsMagic);
  serial::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    serial::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    const auto& shape = p.value.shape();
    serial::put_u32(out, static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) serial::put_u64(out, e);
    for (double v : p.value.data()) serial::put_f64(out, v);
  }
  if (!out) throw std::runtime_error("weights: write failed");
}

void read_weights(std::istream& in, std::vector<Parameter>& params) {
  serial::expect_magic(in, kWeightsMagic);
  const std::uint32_t count = serial::get_u32(in);
  if (count != params.size())
    throw std::runtime_error("weights: file holds " + std::to_string(count) + " parameters, model has " +
                             std::to_string(params.size()));
  for (auto& p : params) {
    const std::uint32_t len = serial::get_u32(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (name != p.name) throw std::runtime_error("weights: expected parameter '" + p.name + "', found '" + name + "'");
    const std::uint32_t rank = serial::get_u32(in);
    Shape shape(rank);
    for (auto& e : shape) e = serial::get_u64(in);
    if (shape != p.value.shape())
      throw std::runtime_error("weights: shape mismatch for " + p.name + ": " + shape_to_string(shape));
    for (auto& v : p.value.mutable_data()) v = serial::get_f64(in);
  }
}

void save_weights(const std::string& path, const DefectNet& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_weights(out, model.parameters());
}

void load_weights(const std::string& path, DefectNet& model) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  read_weights(in, model.parameters());
}

}  // namespace dnet

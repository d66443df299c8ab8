#pragma once

// Little-endian primitives shared by the weight and checkpoint formats.

#include <cstdint>
#include <iosfwd>
#include <string_view>

namespace dnet::serial {

void put_u32(std::ostream& out, std::uint32_t v);
void put_u64(std::ostream& out, std::uint64_t v);
void put_f64(std::ostream& out, double v);
std::uint32_t get_u32(std::istream& in);
std::uint64_t get_u64(std::istream& in);
double get_f64(std::istream& in);
void put_magic(std::ostream& out, std::string_view magic);
void expect_magic(std::istream& in, std::string_view magic);

}  // namespace dnet::serial

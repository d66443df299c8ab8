#pragma once

#include <string>

#include "dnet/label_map.hpp"
#include "dnet/tensor.hpp"

namespace dnet {

/// 8-bit RGB PNG <-> [3,H,W] tensor with values in [0,1]. Writing rounds to
/// the nearest level after clamping.
Tensor read_rgb_png(const std::string& path);
void write_rgb_png(const std::string& path, const Tensor& image);

/// 8-bit single-channel PNG whose pixel values are class ids.
LabelMap read_label_png(const std::string& path);
void write_label_png(const std::string& path, const LabelMap& labels);

/// Little-endian float64 .npy (format version 1.0), C order.
void write_npy(const std::string& path, const Tensor& values);
Tensor read_npy(const std::string& path);

}  // namespace dnet

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "capslab/tensor.hpp"
#include "json.hpp"

namespace capslab {

// round(p * 255) with clamping to [0,1]; inverse of the loader's p/255.
std::vector<uint8_t> quantize_pixels(std::span<const float> px);

// Minimal 8-bit grayscale PNG (one IDAT, filter 0 rows). The encoding is
// deterministic for a fixed zlib, but artifact comparisons should use the
// decoded pixel buffer, not the file bytes.
std::vector<uint8_t> encode_png_gray(const std::vector<uint8_t>& pixels, int width, int height);
void write_png_gray(const std::string& path, const std::vector<uint8_t>& pixels, int width,
                    int height);

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> pixels;
};

// Reads back the subset of PNG that encode_png_gray emits.
GrayImage decode_png_gray(const std::vector<uint8_t>& bytes);
GrayImage read_png_gray(const std::string& path);

// Tiles [1,H,W] images row-major onto a padded canvas, one [1,GH,GW] image.
Tensor assemble_grid(const std::vector<Tensor>& tiles, int rows, int cols, int pad = 2,
                     float pad_value = 0.0f);

void write_text(const std::string& path, const std::string& content);

// What a command did: inputs, resolved configuration, and every artifact it
// wrote. The manifest itself is written last, so its presence implies the run
// completed. Wall-clock lives in a separate "timing" object, which rerun
// comparisons ignore.
struct RunManifest {
  std::string command;
  std::string tool_version;
  nlohmann::json config = nlohmann::json::object();
  std::vector<uint64_t> seeds;
  std::map<std::string, std::string> input_checksums;  // path -> crc32 hex
  std::vector<std::string> artifacts;                  // relative to the manifest's directory
  double wall_seconds = 0.0;
};

std::string manifest_to_json(const RunManifest& m);
void write_manifest(const std::string& dir, const RunManifest& m);

}  // namespace capslab

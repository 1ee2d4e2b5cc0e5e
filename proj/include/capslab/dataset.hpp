#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capslab/tensor.hpp"

namespace capslab {

struct Dataset {
  Tensor images;            // [N,1,H,W], values in [0,1]
  std::vector<int> labels;  // 0..9
  std::string split;        // caller-facing tag, e.g. "train"
  uint32_t checksum = 0;    // crc32 over the decompressed image+label payloads

  int count() const { return images.defined() ? images.dim(0) : 0; }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
};

// Reads an IDX image/label file pair; either file may be gzip-compressed.
// Pixels are normalized as byte/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split = "");

// Writes a raw (uncompressed) IDX pair; pixels are denormalized by
// round(p*255). Loading the written pair reproduces the dataset exactly.
void save_idx(const std::string& images_path, const std::string& labels_path, const Dataset& d);

// The first per_class examples of each label, keeping dataset order.
Dataset subset_per_class(const Dataset& d, int per_class);

// The first n examples.
Dataset take(const Dataset& d, int n);

// Copy of image idx as [1,H,W], detached.
Tensor image_at(const Dataset& d, int idx);

// Whole-file read; transparently decompresses gzip content.
std::vector<uint8_t> read_bytes_maybe_gzip(const std::string& path);

}  // namespace capslab

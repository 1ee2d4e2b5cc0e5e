#include "capslab/artifacts.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "capslab/errors.hpp"

namespace capslab {
namespace {

void append_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

uint32_t read_be32(const std::vector<uint8_t>& b, size_t at) {
  return (uint32_t(b[at]) << 24) | (uint32_t(b[at + 1]) << 16) | (uint32_t(b[at + 2]) << 8) |
         uint32_t(b[at + 3]);
}

void append_chunk(std::vector<uint8_t>& out, const char type[4],
                  const std::vector<uint8_t>& data) {
  append_be32(out, static_cast<uint32_t>(data.size()));
  const size_t type_at = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + type_at, static_cast<uInt>(4 + data.size()));
  append_be32(out, crc);
}

const uint8_t kPngSig[8] = {137, 80, 78, 71, 13, 10, 26, 10};

void write_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw IoError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out.good()) throw IoError("short write to '" + path + "'");
}

std::vector<uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw IoError("cannot read '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<uint8_t> quantize_pixels(std::span<const float> px) {
  std::vector<uint8_t> out(px.size());
  for (size_t i = 0; i < px.size(); ++i) {
    const float clamped = std::min(1.0f, std::max(0.0f, px[i]));
    out[i] = static_cast<uint8_t>(std::lround(clamped * 255.0f));
  }
  return out;
}

std::vector<uint8_t> encode_png_gray(const std::vector<uint8_t>& pixels, int width, int height) {
  if (width < 1 || height < 1 ||
      pixels.size() != static_cast<size_t>(width) * static_cast<size_t>(height)) {
    throw UsageError("png: pixel buffer does not match " + std::to_string(width) + "x" +
                     std::to_string(height));
  }

  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(height) * (static_cast<size_t>(width) + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);  // filter: none
    raw.insert(raw.end(), pixels.begin() + static_cast<size_t>(y) * width,
               pixels.begin() + static_cast<size_t>(y + 1) * width);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> packed(bound);
  if (compress2(packed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IoError("png: deflate failed");
  }
  packed.resize(bound);

  std::vector<uint8_t> ihdr;
  append_be32(ihdr, static_cast<uint32_t>(width));
  append_be32(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // adaptive filtering
  ihdr.push_back(0);  // no interlace

  std::vector<uint8_t> out(kPngSig, kPngSig + 8);
  append_chunk(out, "IHDR", ihdr);
  append_chunk(out, "IDAT", packed);
  append_chunk(out, "IEND", {});
  return out;
}

void write_png_gray(const std::string& path, const std::vector<uint8_t>& pixels, int width,
                    int height) {
  write_bytes(path, encode_png_gray(pixels, width, height));
}

GrayImage decode_png_gray(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0) {
    throw DataError("png: bad signature");
  }
  GrayImage img;
  std::vector<uint8_t> packed;
  size_t at = 8;
  while (at + 12 <= bytes.size()) {
    const uint32_t len = read_be32(bytes, at);
    const std::string type(bytes.begin() + at + 4, bytes.begin() + at + 8);
    if (at + 12 + len > bytes.size()) throw DataError("png: truncated chunk " + type);
    const uint8_t* data = bytes.data() + at + 8;
    if (type == "IHDR") {
      if (len != 13) throw DataError("png: bad IHDR");
      img.width = static_cast<int>(read_be32(bytes, at + 8));
      img.height = static_cast<int>(read_be32(bytes, at + 12));
      if (data[8] != 8 || data[9] != 0) throw DataError("png: not 8-bit grayscale");
    } else if (type == "IDAT") {
      packed.insert(packed.end(), data, data + len);
    } else if (type == "IEND") {
      break;
    }
    at += 12 + len;
  }
  if (img.width < 1 || img.height < 1) throw DataError("png: missing IHDR");

  const size_t stride = static_cast<size_t>(img.width) + 1;
  std::vector<uint8_t> raw(stride * static_cast<size_t>(img.height));
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, packed.data(), static_cast<uLong>(packed.size())) != Z_OK ||
      raw_len != raw.size()) {
    throw DataError("png: inflate failed");
  }
  img.pixels.reserve(static_cast<size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y) {
    if (raw[static_cast<size_t>(y) * stride] != 0) throw DataError("png: unsupported row filter");
    img.pixels.insert(img.pixels.end(), raw.begin() + static_cast<size_t>(y) * stride + 1,
                      raw.begin() + static_cast<size_t>(y + 1) * stride);
  }
  return img;
}

GrayImage read_png_gray(const std::string& path) { return decode_png_gray(read_bytes(path)); }

Tensor assemble_grid(const std::vector<Tensor>& tiles, int rows, int cols, int pad,
                     float pad_value) {
  if (tiles.empty()) throw UsageError("grid: no tiles");
  if (rows < 1 || cols < 1 || static_cast<size_t>(rows) * cols < tiles.size()) {
    throw UsageError("grid: " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " cannot hold " + std::to_string(tiles.size()) + " tiles");
  }
  const int h = tiles[0].dim(tiles[0].ndim() - 2);
  const int w = tiles[0].dim(tiles[0].ndim() - 1);
  for (const Tensor& t : tiles) {
    if (t.ndim() < 2 || t.dim(t.ndim() - 2) != h || t.dim(t.ndim() - 1) != w ||
        t.size() != int64_t(h) * w) {
      throw ShapeError("grid: tiles differ in shape");
    }
  }

  const int gh = rows * h + (rows - 1) * pad;
  const int gw = cols * w + (cols - 1) * pad;
  std::vector<float> canvas(static_cast<size_t>(gh) * gw, pad_value);
  for (size_t i = 0; i < tiles.size(); ++i) {
    const int r = static_cast<int>(i) / cols;
    const int c = static_cast<int>(i) % cols;
    const std::span<const float> src = tiles[i].data();
    for (int y = 0; y < h; ++y) {
      const size_t dst = static_cast<size_t>(r * (h + pad) + y) * gw + c * (w + pad);
      std::copy_n(src.begin() + static_cast<size_t>(y) * w, w, canvas.begin() + dst);
    }
  }
  return Tensor::from_vector({1, gh, gw}, std::move(canvas));
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) throw IoError("cannot write '" + path + "'");
  out << content;
  if (!out.good()) throw IoError("short write to '" + path + "'");
}

std::string manifest_to_json(const RunManifest& m) {
  nlohmann::json j{{"command", m.command},
                   {"tool_version", m.tool_version},
                   {"config", m.config},
                   {"seeds", m.seeds},
                   {"input_checksums", m.input_checksums},
                   {"artifacts", m.artifacts},
                   {"timing", {{"wall_seconds", m.wall_seconds}}}};
  return j.dump(2) + "\n";
}

void write_manifest(const std::string& dir, const RunManifest& m) {
  write_text((std::filesystem::path(dir) / "manifest.json").string(), manifest_to_json(m));
}

}  // namespace capslab

#include "capslab/dataset.hpp"

#include <zlib.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "capslab/errors.hpp"

namespace capslab {
namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed on '" + path + "'");
  return bytes;
}

std::vector<uint8_t> gunzip(const std::vector<uint8_t>& in, const std::string& path) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) {  // +32: accept gzip or zlib headers
    throw IoError("zlib initialization failed for '" + path + "'");
  }
  std::vector<uint8_t> out;
  out.reserve(in.size() * 4);
  uint8_t buf[1 << 15];
  zs.next_in = const_cast<uint8_t*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf;
    zs.avail_out = sizeof(buf);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw DataError("'" + path + "': corrupt gzip stream (" +
                      (zs.msg ? zs.msg : std::to_string(rc)) + ")");
    }
    out.insert(out.end(), buf, buf + sizeof(buf) - zs.avail_out);
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw DataError("'" + path + "': gzip stream ends early after " +
                      std::to_string(in.size()) + " compressed bytes");
    }
  }
  inflateEnd(&zs);
  return out;
}

uint32_t read_be32(const std::vector<uint8_t>& b, size_t off, const std::string& path) {
  if (b.size() < off + 4) {
    throw DataError("'" + path + "': truncated at byte " + std::to_string(b.size()) + ", need " +
                    std::to_string(off + 4) + " bytes for the header");
  }
  return (static_cast<uint32_t>(b[off]) << 24) | (static_cast<uint32_t>(b[off + 1]) << 16) |
         (static_cast<uint32_t>(b[off + 2]) << 8) | static_cast<uint32_t>(b[off + 3]);
}

void write_be32(std::vector<uint8_t>& b, uint32_t v) {
  b.push_back(static_cast<uint8_t>(v >> 24));
  b.push_back(static_cast<uint8_t>(v >> 16));
  b.push_back(static_cast<uint8_t>(v >> 8));
  b.push_back(static_cast<uint8_t>(v));
}

}  // namespace

std::vector<uint8_t> read_bytes_maybe_gzip(const std::string& path) {
  std::vector<uint8_t> raw = read_file(path);
  if (raw.size() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b) return gunzip(raw, path);
  return raw;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& split) {
  const std::vector<uint8_t> ib = read_bytes_maybe_gzip(images_path);
  const uint32_t imagic = read_be32(ib, 0, images_path);
  if (imagic != 2051) {
    throw DataError("'" + images_path + "': magic " + std::to_string(imagic) +
                    " at byte 0, an IDX image file starts with 2051");
  }
  const uint32_t n = read_be32(ib, 4, images_path);
  const uint32_t h = read_be32(ib, 8, images_path);
  const uint32_t w = read_be32(ib, 12, images_path);
  const size_t need = 16 + static_cast<size_t>(n) * h * w;
  if (ib.size() < need) {
    throw DataError("'" + images_path + "': truncated at byte " + std::to_string(ib.size()) +
                    ", header promises " + std::to_string(need) + " bytes");
  }

  const std::vector<uint8_t> lb = read_bytes_maybe_gzip(labels_path);
  const uint32_t lmagic = read_be32(lb, 0, labels_path);
  if (lmagic != 2049) {
    throw DataError("'" + labels_path + "': magic " + std::to_string(lmagic) +
                    " at byte 0, an IDX label file starts with 2049");
  }
  const uint32_t ln = read_be32(lb, 4, labels_path);
  if (ln != n) {
    throw DataError("label count " + std::to_string(ln) + " in '" + labels_path +
                    "' does not match image count " + std::to_string(n) + " in '" + images_path +
                    "'");
  }
  if (lb.size() < 8 + static_cast<size_t>(n)) {
    throw DataError("'" + labels_path + "': truncated at byte " + std::to_string(lb.size()) +
                    ", header promises " + std::to_string(8 + static_cast<size_t>(n)) + " bytes");
  }

  Dataset d;
  d.split = split;
  std::vector<float> pixels(static_cast<size_t>(n) * h * w);
  for (size_t i = 0; i < pixels.size(); ++i) {
    pixels[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  }
  d.images = Tensor::from_vector(
      {static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)}, std::move(pixels));
  d.labels.resize(n);
  for (uint32_t i = 0; i < n; ++i) {
    const uint8_t v = lb[8 + i];
    if (v > 9) {
      throw DataError("'" + labels_path + "': label " + std::to_string(int(v)) + " at byte " +
                      std::to_string(8 + i) + " is outside 0..9");
    }
    d.labels[i] = v;
  }
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, ib.data(), static_cast<uInt>(ib.size()));
  crc = crc32(crc, lb.data(), static_cast<uInt>(lb.size()));
  d.checksum = crc;
  return d;
}

void save_idx(const std::string& images_path, const std::string& labels_path, const Dataset& d) {
  const int n = d.count(), h = d.height(), w = d.width();
  std::vector<uint8_t> ib;
  ib.reserve(16 + static_cast<size_t>(n) * h * w);
  write_be32(ib, 2051);
  write_be32(ib, static_cast<uint32_t>(n));
  write_be32(ib, static_cast<uint32_t>(h));
  write_be32(ib, static_cast<uint32_t>(w));
  for (float p : d.images.data()) {
    const float scaled = std::round(p * 255.0f);
    ib.push_back(static_cast<uint8_t>(std::min(255.0f, std::max(0.0f, scaled))));
  }
  std::vector<uint8_t> lb;
  lb.reserve(8 + static_cast<size_t>(n));
  write_be32(lb, 2049);
  write_be32(lb, static_cast<uint32_t>(n));
  for (int l : d.labels) lb.push_back(static_cast<uint8_t>(l));

  for (const auto& [path, bytes] : {std::pair{images_path, ib}, std::pair{labels_path, lb}}) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed on '" + path + "'");
  }
}

namespace {

Dataset gather(const Dataset& d, const std::vector<int>& keep) {
  const int h = d.height(), w = d.width();
  const size_t px = static_cast<size_t>(h) * w;
  std::vector<float> pixels(keep.size() * px);
  std::vector<int> labels(keep.size());
  std::span<const float> src = d.images.data();
  for (size_t i = 0; i < keep.size(); ++i) {
    const size_t at = static_cast<size_t>(keep[i]) * px;
    std::copy(src.begin() + at, src.begin() + at + px, pixels.begin() + i * px);
    labels[i] = d.labels[static_cast<size_t>(keep[i])];
  }
  Dataset out;
  out.images = Tensor::from_vector({static_cast<int>(keep.size()), 1, h, w}, std::move(pixels));
  out.labels = std::move(labels);
  out.split = d.split;
  out.checksum = d.checksum;
  return out;
}

}  // namespace

Dataset subset_per_class(const Dataset& d, int per_class) {
  if (per_class < 1) throw UsageError("subset_per_class: per_class must be >= 1");
  std::vector<int> taken(10, 0);
  std::vector<int> keep;
  for (int i = 0; i < d.count(); ++i) {
    int& t = taken[static_cast<size_t>(d.labels[static_cast<size_t>(i)])];
    if (t < per_class) {
      ++t;
      keep.push_back(i);
    }
  }
  return gather(d, keep);
}

Dataset take(const Dataset& d, int n) {
  if (n < 1 || n > d.count()) {
    throw UsageError("take: n must lie in [1," + std::to_string(d.count()) + "], got " +
                     std::to_string(n));
  }
  std::vector<int> keep(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) keep[static_cast<size_t>(i)] = i;
  return gather(d, keep);
}

Tensor image_at(const Dataset& d, int idx) {
  if (idx < 0 || idx >= d.count()) {
    throw UsageError("image_at: index " + std::to_string(idx) + " outside [0," +
                     std::to_string(d.count()) + ")");
  }
  const int h = d.height(), w = d.width();
  const size_t px = static_cast<size_t>(h) * w;
  std::span<const float> src = d.images.data();
  std::vector<float> pixels(src.begin() + static_cast<size_t>(idx) * px,
                            src.begin() + (static_cast<size_t>(idx) + 1) * px);
  return Tensor::from_vector({1, h, w}, std::move(pixels));
}

}  // namespace capslab

#include "capslab/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "capslab/errors.hpp"
#include "json.hpp"

// Payloads are memcpy'd float32; the format is defined little-endian.
static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace capslab {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'C', 'A', 'P', 'S', 'L', 'A', 'B', '1'};

json caps_config_to_json(const NetworkConfig& c) {
  return json{{"input_h", c.input_h},
              {"input_w", c.input_w},
              {"conv1_channels", c.conv1_channels},
              {"conv1_kernel", c.conv1_kernel},
              {"conv1_stride", c.conv1_stride},
              {"primary_types", c.primary_types},
              {"primary_dim", c.primary_dim},
              {"primary_kernel", c.primary_kernel},
              {"primary_stride", c.primary_stride},
              {"num_classes", c.num_classes},
              {"class_dim", c.class_dim},
              {"decoder_hidden1", c.decoder_hidden1},
              {"decoder_hidden2", c.decoder_hidden2},
              {"routing_enabled", c.routing_enabled},
              {"routing_iterations", c.routing_iterations},
              {"recon_mode", to_string(c.recon_mode)},
              {"recon_weight_weak", c.recon_weight_weak},
              {"recon_weight_strong", c.recon_weight_strong},
              {"m_plus", c.m_plus},
              {"m_minus", c.m_minus},
              {"lambda_down", c.lambda_down}};
}

NetworkConfig caps_config_from_json(const json& j) {
  NetworkConfig c;
  c.input_h = j.at("input_h").get<int>();
  c.input_w = j.at("input_w").get<int>();
  c.conv1_channels = j.at("conv1_channels").get<int>();
  c.conv1_kernel = j.at("conv1_kernel").get<int>();
  c.conv1_stride = j.at("conv1_stride").get<int>();
  c.primary_types = j.at("primary_types").get<int>();
  c.primary_dim = j.at("primary_dim").get<int>();
  c.primary_kernel = j.at("primary_kernel").get<int>();
  c.primary_stride = j.at("primary_stride").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.class_dim = j.at("class_dim").get<int>();
  c.decoder_hidden1 = j.at("decoder_hidden1").get<int>();
  c.decoder_hidden2 = j.at("decoder_hidden2").get<int>();
  c.routing_enabled = j.at("routing_enabled").get<bool>();
  c.routing_iterations = j.at("routing_iterations").get<int>();
  c.recon_mode = recon_mode_from_string(j.at("recon_mode").get<std::string>());
  c.recon_weight_weak = j.at("recon_weight_weak").get<float>();
  c.recon_weight_strong = j.at("recon_weight_strong").get<float>();
  c.m_plus = j.at("m_plus").get<float>();
  c.m_minus = j.at("m_minus").get<float>();
  c.lambda_down = j.at("lambda_down").get<float>();
  return c;
}

json cnn_config_to_json(const CnnConfig& c) {
  return json{{"input_h", c.input_h}, {"input_w", c.input_w}, {"num_classes", c.num_classes},
              {"kernel", c.kernel},   {"c1", c.c1},           {"s1", c.s1},
              {"c2", c.c2},           {"s2", c.s2},           {"c3", c.c3},
              {"s3", c.s3},           {"fc1", c.fc1},         {"fc2", c.fc2},
              {"dropout", c.dropout}};
}

CnnConfig cnn_config_from_json(const json& j) {
  CnnConfig c;
  c.input_h = j.at("input_h").get<int>();
  c.input_w = j.at("input_w").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.kernel = j.at("kernel").get<int>();
  c.c1 = j.at("c1").get<int>();
  c.s1 = j.at("s1").get<int>();
  c.c2 = j.at("c2").get<int>();
  c.s2 = j.at("s2").get<int>();
  c.c3 = j.at("c3").get<int>();
  c.s3 = j.at("s3").get<int>();
  c.fc1 = j.at("fc1").get<int>();
  c.fc2 = j.at("fc2").get<int>();
  c.dropout = j.at("dropout").get<float>();
  return c;
}

void append_u32le(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}

uint32_t read_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

Tensor find_tensor(const Checkpoint& ck, const std::string& name) {
  for (const auto& [n, t] : ck.tensors) {
    if (n == name) return t;
  }
  throw DataError("checkpoint is missing tensor '" + name + "'");
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  json manifest = json::array();
  for (const auto& [name, t] : ck.tensors) {
    manifest.push_back(json{{"name", name}, {"shape", t.shape()}});
  }
  json head{{"format", 1},
            {"model", ck.model},
            {"epochs", ck.epochs},
            {"seed", ck.seed},
            {"metrics", ck.metrics},
            {"tensors", manifest}};
  if (ck.model == "capsnet") {
    head["config"] = caps_config_to_json(ck.caps_config);
  } else if (ck.model == "cnn") {
    head["config"] = cnn_config_to_json(ck.cnn_config);
  } else {
    throw UsageError("checkpoint model must be capsnet or cnn, got '" + ck.model + "'");
  }
  const std::string js = head.dump();

  std::vector<uint8_t> bytes;
  bytes.insert(bytes.end(), kMagic, kMagic + 8);
  append_u32le(bytes, static_cast<uint32_t>(js.size()));
  bytes.insert(bytes.end(), js.begin(), js.end());
  for (const auto& [name, t] : ck.tensors) {
    const size_t at = bytes.size();
    bytes.resize(at + static_cast<size_t>(t.size()) * 4);
    std::memcpy(bytes.data() + at, t.data().data(), static_cast<size_t>(t.size()) * 4);
  }
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  append_u32le(bytes, crc);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed on '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 16) {
    throw DataError("'" + path + "': " + std::to_string(bytes.size()) +
                    " bytes is too short for a checkpoint container");
  }
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw DataError("'" + path + "': not a CAPSLAB1 checkpoint (bad or unsupported magic)");
  }
  const uint32_t stored = read_u32le(bytes.data() + bytes.size() - 4);
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size() - 4));
  if (crc != stored) {
    throw DataError("'" + path + "': checksum mismatch, the file is truncated or corrupt");
  }

  const uint32_t js_len = read_u32le(bytes.data() + 8);
  if (12 + static_cast<size_t>(js_len) > bytes.size() - 4) {
    throw DataError("'" + path + "': header block overruns the file");
  }
  json head;
  try {
    head = json::parse(bytes.begin() + 12, bytes.begin() + 12 + js_len);
  } catch (const json::exception& e) {
    throw DataError("'" + path + "': malformed header block: " + e.what());
  }

  Checkpoint ck;
  try {
    if (head.at("format").get<int>() != 1) {
      throw DataError("'" + path + "': unsupported checkpoint format " +
                      head.at("format").dump());
    }
    ck.model = head.at("model").get<std::string>();
    ck.epochs = head.at("epochs").get<int>();
    ck.seed = head.at("seed").get<uint64_t>();
    ck.metrics = head.at("metrics").get<std::map<std::string, double>>();
    if (ck.model == "capsnet") {
      ck.caps_config = caps_config_from_json(head.at("config"));
    } else if (ck.model == "cnn") {
      ck.cnn_config = cnn_config_from_json(head.at("config"));
    } else {
      throw DataError("'" + path + "': unknown model kind '" + ck.model + "'");
    }

    size_t at = 12 + js_len;
    const size_t payload_end = bytes.size() - 4;
    for (const json& entry : head.at("tensors")) {
      const std::string name = entry.at("name").get<std::string>();
      const Shape shape = entry.at("shape").get<Shape>();
      const size_t count = static_cast<size_t>(shape_size(shape));
      if (at + count * 4 > payload_end) {
        throw DataError("'" + path + "': tensor '" + name + "' overruns the payload at byte " +
                        std::to_string(at));
      }
      std::vector<float> data(count);
      std::memcpy(data.data(), bytes.data() + at, count * 4);
      at += count * 4;
      ck.tensors.emplace_back(name, Tensor::from_vector(shape, std::move(data)));
    }
    if (at != payload_end) {
      throw DataError("'" + path + "': " + std::to_string(payload_end - at) +
                      " unexplained payload bytes");
    }
  } catch (const json::exception& e) {
    throw DataError("'" + path + "': malformed header block: " + e.what());
  }
  // Surface config/tensor disagreements at load instead of at first use.
  if (ck.model == "capsnet") {
    capsnet_from_checkpoint(ck);
  } else {
    cnn_from_checkpoint(ck);
  }
  return ck;
}

Checkpoint make_checkpoint(const NetworkConfig& cfg, const CapsNetParams& params, int epochs,
                           uint64_t seed, std::map<std::string, double> metrics) {
  Checkpoint ck;
  ck.model = "capsnet";
  ck.caps_config = cfg;
  ck.epochs = epochs;
  ck.seed = seed;
  ck.metrics = std::move(metrics);
  ck.tensors = params.named();
  return ck;
}

Checkpoint make_checkpoint(const CnnConfig& cfg, const CnnParams& params, int epochs,
                           uint64_t seed, std::map<std::string, double> metrics) {
  Checkpoint ck;
  ck.model = "cnn";
  ck.cnn_config = cfg;
  ck.epochs = epochs;
  ck.seed = seed;
  ck.metrics = std::move(metrics);
  ck.tensors = params.named();
  return ck;
}

CapsNetParams capsnet_from_checkpoint(const Checkpoint& ck) {
  if (ck.model != "capsnet") {
    throw UsageError("checkpoint holds a '" + ck.model + "' model, not a capsnet");
  }
  CapsNetParams p;
  p.conv1_w = find_tensor(ck, "conv1.weight").set_requires_grad(true);
  p.conv1_b = find_tensor(ck, "conv1.bias").set_requires_grad(true);
  p.primary_w = find_tensor(ck, "primary.weight").set_requires_grad(true);
  p.primary_b = find_tensor(ck, "primary.bias").set_requires_grad(true);
  p.caps_w = find_tensor(ck, "capsule.weight").set_requires_grad(true);
  p.dec1_w = find_tensor(ck, "decoder.fc1.weight").set_requires_grad(true);
  p.dec1_b = find_tensor(ck, "decoder.fc1.bias").set_requires_grad(true);
  p.dec2_w = find_tensor(ck, "decoder.fc2.weight").set_requires_grad(true);
  p.dec2_b = find_tensor(ck, "decoder.fc2.bias").set_requires_grad(true);
  p.dec3_w = find_tensor(ck, "decoder.out.weight").set_requires_grad(true);
  p.dec3_b = find_tensor(ck, "decoder.out.bias").set_requires_grad(true);
  ck.caps_config.validate();
  p.validate_shapes(ck.caps_config);
  return p;
}

CnnParams cnn_from_checkpoint(const Checkpoint& ck) {
  if (ck.model != "cnn") {
    throw UsageError("checkpoint holds a '" + ck.model + "' model, not a cnn");
  }
  CnnParams p;
  p.conv1_w = find_tensor(ck, "conv1.weight").set_requires_grad(true);
  p.conv1_b = find_tensor(ck, "conv1.bias").set_requires_grad(true);
  p.conv2_w = find_tensor(ck, "conv2.weight").set_requires_grad(true);
  p.conv2_b = find_tensor(ck, "conv2.bias").set_requires_grad(true);
  p.conv3_w = find_tensor(ck, "conv3.weight").set_requires_grad(true);
  p.conv3_b = find_tensor(ck, "conv3.bias").set_requires_grad(true);
  p.fc1_w = find_tensor(ck, "fc1.weight").set_requires_grad(true);
  p.fc1_b = find_tensor(ck, "fc1.bias").set_requires_grad(true);
  p.fc2_w = find_tensor(ck, "fc2.weight").set_requires_grad(true);
  p.fc2_b = find_tensor(ck, "fc2.bias").set_requires_grad(true);
  p.out_w = find_tensor(ck, "out.weight").set_requires_grad(true);
  p.out_b = find_tensor(ck, "out.bias").set_requires_grad(true);
  ck.cnn_config.validate();
  p.validate_shapes(ck.cnn_config);
  return p;
}

}  // namespace capslab

#include "stagekit/volume_pack.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace stagekit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

std::vector<char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& p, const void* data, std::size_t bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw IoError("short write to " + p.string());
}

std::uint32_t byteswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

std::vector<char> encode_f32_le(const std::vector<float>& v) {
  std::vector<char> out(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, &v[i], 4);
    if constexpr (std::endian::native == std::endian::big) u = byteswap32(u);
    std::memcpy(out.data() + 4 * i, &u, 4);
  }
  return out;
}

std::vector<float> decode_f32_le(const std::vector<char>& bytes) {
  std::vector<float> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t u;
    std::memcpy(&u, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) u = byteswap32(u);
    std::memcpy(&out[i], &u, 4);
  }
  return out;
}

json label_bits_json() {
  json bits = json::object();
  for (int b = 0; b < kLabelBitCount; ++b) bits[std::string(label_bit_name(static_cast<LabelBit>(b)))] = b;
  return bits;
}

template <typename T>
T require(const json& h, const char* key) {
  if (!h.contains(key)) throw FormatError(std::string("header.json missing key '") + key + "'");
  try {
    return h.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("header.json key '") + key + "': " + e.what());
  }
}

}  // namespace

Case load_volume_pack(const fs::path& dir) {
  const fs::path header_path = dir / "header.json";
  if (!fs::exists(header_path)) throw FormatError("missing header.json in " + dir.string());
  json h;
  try {
    std::ifstream in(header_path);
    h = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("malformed header.json in " + dir.string() + ": " + e.what());
  }

  const auto shape_v = require<std::vector<std::int64_t>>(h, "shape");
  const auto spacing_v = require<std::vector<double>>(h, "spacing_mm");
  if (shape_v.size() != 3 || spacing_v.size() != 3) throw FormatError("shape and spacing_mm must have 3 entries");
  if (require<std::string>(h, "byte_order") != "LE") throw FormatError("only little-endian packs are supported");
  if (require<std::string>(h, "image_dtype") != "float32") throw FormatError("image_dtype must be float32");
  for (auto n : shape_v)
    if (n <= 0) throw FormatError("shape entries must be positive");

  Case c;
  c.id = h.value("id", dir.filename().string());
  c.role = parse_role(require<std::string>(h, "role"));
  if (h.contains("stage") && !h["stage"].is_null()) c.stage = parse_stage(h["stage"].get<std::string>());

  const Shape3 shape{shape_v[0], shape_v[1], shape_v[2]};
  const Spacing3 spacing{spacing_v[0], spacing_v[1], spacing_v[2]};
  if (!spacing.valid()) throw FormatError("spacing_mm entries must be positive");

  const fs::path image_path = dir / "image.raw";
  if (!fs::exists(image_path)) throw CorruptionError("missing image.raw in " + dir.string());
  const auto image_bytes = read_file(image_path);
  if (image_bytes.size() != shape.voxels() * 4)
    throw CorruptionError("image.raw length " + std::to_string(image_bytes.size()) + " != " +
                          std::to_string(shape.voxels() * 4) + " expected from header");
  c.image.shape = shape;
  c.image.spacing_mm = spacing;
  c.image.data = decode_f32_le(image_bytes);

  const bool declares_labels = h.contains("label_bits") && !h["label_bits"].is_null() && !h["label_bits"].empty();
  const fs::path labels_path = dir / "labels.raw";
  if (declares_labels) {
    if (require<std::string>(h, "label_dtype") != "uint8") throw FormatError("label_dtype must be uint8");
    if (!fs::exists(labels_path)) throw CorruptionError("header declares labels but labels.raw is missing");
    const auto label_bytes = read_file(labels_path);
    if (label_bytes.size() != shape.voxels())
      throw CorruptionError("labels.raw length " + std::to_string(label_bytes.size()) + " != " +
                            std::to_string(shape.voxels()) + " expected from header");
    LabelVolume labels;
    labels.shape = shape;
    labels.spacing_mm = spacing;
    labels.data.assign(label_bytes.begin(), label_bytes.end());
    c.labels = std::move(labels);
  } else if (fs::exists(labels_path)) {
    throw CorruptionError("labels.raw present but header declares no label_bits");
  }
  return c;
}

void save_volume_pack(const Case& c, const fs::path& dir) {
  validate_case(c);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json h;
  h["id"] = c.id;
  h["shape"] = {c.image.shape.z, c.image.shape.y, c.image.shape.x};
  h["spacing_mm"] = {c.image.spacing_mm.z, c.image.spacing_mm.y, c.image.spacing_mm.x};
  h["byte_order"] = "LE";
  h["image_dtype"] = "float32";
  h["label_dtype"] = "uint8";
  h["stage"] = c.stage ? json(std::string(stage_name(*c.stage))) : json(nullptr);
  h["role"] = std::string(role_name(c.role));
  if (c.labels) h["label_bits"] = label_bits_json();

  const auto image_bytes = encode_f32_le(c.image.data);
  write_file(dir / "image.raw", image_bytes.data(), image_bytes.size());
  if (c.labels) {
    write_file(dir / "labels.raw", c.labels->data.data(), c.labels->data.size());
  } else {
    fs::remove(dir / "labels.raw", ec);
  }
  const std::string text = h.dump(2) + "\n";
  write_file(dir / "header.json", text.data(), text.size());
}

}  // namespace stagekit

#include "stagekit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "stagekit/error.hpp"

namespace stagekit {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'S', 'K', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const fs::path& p) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CorruptionError("truncated checkpoint " + p.string());
  return v;
}

std::vector<std::pair<std::string, torch::Tensor>> named_state(const torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : m.named_parameters(true)) out.emplace_back(p.key(), p.value());
  for (const auto& b : m.named_buffers(true)) out.emplace_back(b.key(), b.value());
  return out;
}

}  // namespace

fs::path sidecar_path(const fs::path& path) { return fs::path(path.string() + ".json"); }

void save_checkpoint(const torch::nn::Module& module, const fs::path& path, const nlohmann::json& meta) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kVersion);
  const auto state = named_state(module);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<std::int64_t>(out, d);
    const torch::Tensor c = t.detach().to(torch::kFloat32).contiguous();
    out.write(reinterpret_cast<const char*>(c.data_ptr<float>()), static_cast<std::streamsize>(c.numel() * 4));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
  std::ofstream side(sidecar_path(path), std::ios::trunc);
  if (!side) throw IoError("cannot write checkpoint sidecar " + sidecar_path(path).string());
  side << meta.dump(2) << "\n";
}

nlohmann::json read_checkpoint_meta(const fs::path& path) {
  std::ifstream side(sidecar_path(path));
  if (!side) throw IoError("missing checkpoint sidecar " + sidecar_path(path).string());
  try {
    return nlohmann::json::parse(side);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint sidecar " + sidecar_path(path).string() + ": " + e.what());
  }
}

nlohmann::json load_checkpoint(torch::nn::Module& module, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint file: " + path.string());
  if (get<std::uint32_t>(in, path) != kVersion) throw FormatError("unsupported checkpoint version in " + path.string());
  const auto count = get<std::uint32_t>(in, path);
  auto state = named_state(module);
  if (count != state.size())
    throw CorruptionError("checkpoint " + path.string() + " holds " + std::to_string(count) + " tensors, model has " +
                          std::to_string(state.size()));
  torch::NoGradGuard guard;
  for (auto& [name, t] : state) {
    const auto len = get<std::uint32_t>(in, path);
    std::string stored(len, '\0');
    if (!in.read(stored.data(), len)) throw CorruptionError("truncated checkpoint " + path.string());
    if (stored != name) throw CorruptionError("checkpoint tensor '" + stored + "' where '" + name + "' was expected");
    const auto ndim = get<std::uint32_t>(in, path);
    std::vector<std::int64_t> dims(ndim);
    for (auto& d : dims) d = get<std::int64_t>(in, path);
    if (dims != t.sizes().vec()) throw CorruptionError("checkpoint tensor '" + name + "' has a different shape");
    torch::Tensor buf = torch::empty(dims, torch::kFloat32);
    if (!in.read(reinterpret_cast<char*>(buf.data_ptr<float>()), static_cast<std::streamsize>(buf.numel() * 4)))
      throw CorruptionError("truncated checkpoint " + path.string());
    t.copy_(buf);
  }
  return read_checkpoint_meta(path);
}

WeightSnapshot snapshot_weights(const torch::nn::Module& module) {
  WeightSnapshot s;
  for (const auto& [name, t] : named_state(module)) s.tensors.emplace_back(name, t.detach().clone());
  return s;
}

void restore_weights(torch::nn::Module& module, const WeightSnapshot& snap) {
  auto state = named_state(module);
  if (state.size() != snap.tensors.size()) throw CorruptionError("weight snapshot does not match the model");
  torch::NoGradGuard guard;
  for (std::size_t i = 0; i < state.size(); ++i) state[i].second.copy_(snap.tensors[i].second);
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters(true)) n += p.numel();
  return n;
}

}  // namespace stagekit

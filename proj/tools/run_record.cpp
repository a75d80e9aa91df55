#include "run_record.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>

#include <openssl/evp.h>

#include "stagekit/error.hpp"

namespace stagekit::cli {

namespace fs = std::filesystem;

namespace {

std::string sha1_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw IoError("sha1 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof(buf), "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string read_all(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string git_blob_hash(const fs::path& file) {
  const std::string body = read_all(file);
  return sha1_hex("blob " + std::to_string(body.size()) + std::string(1, '\0') + body);
}

std::string content_hash(const std::vector<fs::path>& inputs) {
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in))
        if (e.is_regular_file())
          entries.emplace_back((in.filename() / fs::relative(e.path(), in)).generic_string(), git_blob_hash(e.path()));
    } else if (fs::is_regular_file(in)) {
      entries.emplace_back(in.filename().generic_string(), git_blob_hash(in));
    } else {
      throw IoError("input " + in.string() + " does not exist");
    }
  }
  std::sort(entries.begin(), entries.end());
  std::string listing;
  for (const auto& [name, h] : entries) listing += name + " " + h + "\n";
  return sha1_hex(listing);
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json in = nlohmann::json::array(), out = nlohmann::json::array();
  for (const auto& p : inputs) in.push_back(p.string());
  for (const auto& p : outputs) out.push_back(p.string());
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {{"command_line", command_line}, {"config", config},   {"seeds", seeds},
          {"inputs", in},                 {"input_hash", content_hash(inputs)},
          {"outputs", out},               {"wall_time_s", wall}};
}

void RunRecord::write(const fs::path& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write run record " + path.string());
  f << to_json().dump(2) << "\n";
}

}  // namespace stagekit::cli

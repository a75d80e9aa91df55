#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace stagekit::cli {

/// Git blob id of a file: sha1("blob <size>\0" + bytes), lowercase hex.
std::string git_blob_hash(const std::filesystem::path& file);

/// Git-like hash over files and directories: each regular file under the
/// inputs contributes "<relative path> <blob hash>\n" in sorted order.
std::string content_hash(const std::vector<std::filesystem::path>& inputs);

struct RunRecord {
  std::vector<std::string> command_line;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json seeds = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace stagekit::cli

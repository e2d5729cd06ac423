#pragma once

// Binary checkpoint container. Layout, all integers little-endian:
//
//   "E2EBT001"
//   u64 config length, config text
//   u64 token count, then per token: u32 length, bytes
//   u64 blob count, then per blob: u32 name length, name, u64 size, bytes
//   u64 array count, then per array: u32 name length, name, u32 rank,
//       u64 dims[rank], f32 values (row-major)

#include "e2ebt/tensor.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace e2ebt {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  std::string config;
  std::vector<std::string> vocabulary;
  std::map<std::string, std::string> blobs;
  std::vector<std::pair<std::string, Matrix>> arrays;

  void add_array(const std::string& name, const Matrix& value) { arrays.emplace_back(name, value); }
  bool has_array(const std::string& name) const;
  const Matrix& array(const std::string& name) const;
  const std::string& blob(const std::string& name) const;
};

// Writes to a temporary file and renames it into place, so an interrupted
// write never clobbers an existing checkpoint.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace e2ebt

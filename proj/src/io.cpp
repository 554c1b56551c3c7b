// SPDX-License-Identifier: Apache-2.0
#include "kgfuse/io.hpp"

#include <atomic>
#include <fstream>
#include <unistd.h>

#include "kgfuse/error.hpp"

namespace kgfuse {

namespace {

std::string unique_suffix() {
  static std::atomic<unsigned> counter{0};
  return std::to_string(::getpid()) + "." + std::to_string(counter++);
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body,
                       bool binary) {
  auto tmp = path;
  tmp += ".tmp." + unique_suffix();
  try {
    {
      std::ofstream out(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
      if (!out) throw Error(ErrorKind::kIo, "cannot open " + tmp.string() + " for writing");
      body(out);
      out.flush();
      if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error(ErrorKind::kIo, "cannot move " + tmp.string() + " into place: " + ec.message());
  } catch (...) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw;
  }
}

StagedOutput::StagedOutput(std::filesystem::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  created_dir_ = !std::filesystem::exists(dir_);
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create output directory " + dir_.string() + ": " + ec.message());
  staging_ = dir_ / (".staging." + unique_suffix());
  std::filesystem::create_directory(staging_, ec);
  if (ec) throw Error(ErrorKind::kIo, "cannot create " + staging_.string() + ": " + ec.message());
}

StagedOutput::~StagedOutput() {
  std::error_code ignored;
  std::filesystem::remove_all(staging_, ignored);
  if (!committed_ && created_dir_) std::filesystem::remove(dir_, ignored);  // only succeeds when empty
}

std::filesystem::path StagedOutput::stage(const std::string& name) {
  names_.push_back(name);
  return staging_ / name;
}

void StagedOutput::commit() {
  if (committed_) return;
  for (const auto& name : names_) {
    if (!std::filesystem::exists(staging_ / name)) {
      throw Error(ErrorKind::kIo, "staged file " + name + " was never written");
    }
  }
  for (const auto& name : names_) {
    std::error_code ec;
    std::filesystem::rename(staging_ / name, dir_ / name, ec);
    if (ec) throw Error(ErrorKind::kIo, "cannot move " + name + " into " + dir_.string() + ": " + ec.message());
  }
  committed_ = true;
}

}  // namespace kgfuse

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace kgfuse {

// Writes through a sibling temporary file and renames it into place, so the
// destination is either untouched or complete.
void write_file_atomic(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body,
                       bool binary = false);

// Collects the files of one command in a hidden staging directory inside
// `dir` and moves them into `dir` on commit(). Anything not committed is
// removed on destruction, and so is `dir` if this object created it.
class StagedOutput {
 public:
  explicit StagedOutput(std::filesystem::path dir);
  ~StagedOutput();
  StagedOutput(const StagedOutput&) = delete;
  StagedOutput& operator=(const StagedOutput&) = delete;

  // Path to write `name` to before commit.
  std::filesystem::path stage(const std::string& name);
  // Final location of `name`.
  std::filesystem::path final_path(const std::string& name) const { return dir_ / name; }
  void commit();

 private:
  std::filesystem::path dir_;
  std::filesystem::path staging_;
  std::vector<std::string> names_;
  bool committed_ = false;
  bool created_dir_ = false;
};

}  // namespace kgfuse

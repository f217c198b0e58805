#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "sdtseg/rng.hpp"

namespace testsup {

// Scratch directory removed when the test binary exits normally.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    dir_ = std::filesystem::temp_directory_path() /
           ("sdtseg_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Path of the sdtseg CLI binary: SDTSEG_CLI env (set by ctest), falling back
// to a sibling of the test executable.
inline std::string cli_path() {
  if (const char* env = std::getenv("SDTSEG_CLI")) return env;
  std::error_code ec;
  auto self = std::filesystem::read_symlink("/proc/self/exe", ec);
  if (!ec) {
    auto candidate = self.parent_path() / "sdtseg";
    if (std::filesystem::exists(candidate)) return candidate.string();
  }
  return "";
}

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

// Runs a shell command, capturing stdout+stderr.
inline CommandResult run_command(const std::string& cmd) {
  const std::filesystem::path out_file =
      std::filesystem::temp_directory_path() /
      ("sdtseg_cmd_out_" + std::to_string(::getpid()) + ".txt");
  const std::string full = cmd + " > " + out_file.string() + " 2>&1";
  const int status = std::system(full.c_str());
  CommandResult r;
  r.output = read_bytes(out_file);
  std::filesystem::remove(out_file);
  if (status == -1) return r;
  r.exit_code = WEXITSTATUS(status);
  return r;
}

}  // namespace testsup

#pragma once

#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "uqss/error.hpp"

namespace uqss {

inline constexpr const char* kVersion = "1.0.0";

/// Hex SHA-256 of a file's bytes.
inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot hash '" + path.string() + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("SHA-256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0 && EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount())) != 1)
      throw Error("SHA-256 update failed");
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) throw Error("SHA-256 final failed");
  static constexpr char hexdig[] = "0123456789abcdef";
  std::string out;
  for (unsigned int k = 0; k < len; ++k) {
    out += hexdig[digest[k] >> 4];
    out += hexdig[digest[k] & 15];
  }
  return out;
}

/// What a command did: config, seeds, stage timings and hashed files.
/// Inputs are files read; artifacts are files written under the output dir.
class RunManifest {
 public:
  RunManifest(std::string command, std::filesystem::path out_dir)
      : command_(std::move(command)), dir_(std::move(out_dir)) {}

  const std::filesystem::path& dir() const { return dir_; }

  void set_config(nlohmann::ordered_json cfg) { config_ = std::move(cfg); }
  void set_seed(const std::string& name, std::uint64_t seed) { seeds_[name] = seed; }
  nlohmann::ordered_json& extra() { return extra_; }

  void add_input(const std::filesystem::path& path) {
    inputs_.push_back({{"path", path.string()}, {"sha256", sha256_file(path)}});
  }

  /// Registers a file already written inside the output directory.
  void add_artifact(const std::string& relative) { artifacts_.push_back(relative); }
  const std::vector<std::string>& artifacts() const { return artifacts_; }

  void record_stage(const std::string& name, double seconds) { stages_.push_back({{"name", name}, {"seconds", seconds}}); }

  /// Times `body` as stage `name`; errors are rethrown tagged with the stage.
  template <class F>
  auto stage(const std::string& name, F&& body) {
    const auto start = std::chrono::steady_clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
    try {
      if constexpr (std::is_void_v<decltype(body())>) {
        body();
        record_stage(name, elapsed());
      } else {
        auto r = body();
        record_stage(name, elapsed());
        return r;
      }
    } catch (const StageError&) {
      throw;
    } catch (const UsageError& e) {
      failed_stage_ = name;
      throw StageError(name, e.what(), true);
    } catch (const std::exception& e) {
      failed_stage_ = name;
      throw StageError(name, e.what(), false);
    }
  }

  /// Thrown out of stage(): carries the stage name and whether the cause was bad input.
  class StageError : public Error {
   public:
    StageError(std::string stage, const std::string& what, bool usage)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)), usage_(usage) {}
    const std::string& stage() const { return stage_; }
    bool usage() const { return usage_; }

   private:
    std::string stage_;
    bool usage_;
  };

  nlohmann::ordered_json to_json(const std::string& status = "ok", const std::string& error = {}) const {
    nlohmann::ordered_json j;
    j["tool"] = "uqss";
    j["version"] = kVersion;
    j["command"] = command_;
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    if (!failed_stage_.empty()) j["failed_stage"] = failed_stage_;
    j["config"] = config_;
    j["seeds"] = seeds_;
    j["stages"] = stages_;
    j["inputs"] = inputs_;
    nlohmann::ordered_json arts = nlohmann::ordered_json::array();
    for (const auto& a : artifacts_) {
      const auto p = dir_ / a;
      if (std::filesystem::exists(p)) arts.push_back({{"path", a}, {"sha256", sha256_file(p)}});
    }
    j["artifacts"] = arts;
    for (const auto& [k, v] : extra_.items()) j[k] = v;
    return j;
  }

  void write(const std::string& status = "ok", const std::string& error = {}) const {
    write_to(dir_ / "manifest.json", status, error);
  }

  void write_to(const std::filesystem::path& path, const std::string& status, const std::string& error) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write manifest '" + path.string() + "'");
    out << to_json(status, error).dump(2) << '\n';
  }

  /// Moves every registered artifact into failed/ and writes the manifest there.
  void quarantine(const std::string& error) {
    const auto failed = dir_ / "failed";
    std::filesystem::create_directories(failed);
    std::vector<std::string> moved;
    for (const auto& a : artifacts_) {
      const auto src = dir_ / a;
      if (!std::filesystem::exists(src)) continue;
      std::filesystem::rename(src, failed / a);
      moved.push_back(a);
    }
    RunManifest copy = *this;
    copy.dir_ = failed;
    copy.artifacts_ = moved;
    copy.write("failed", error);
  }

 private:
  std::string command_;
  std::filesystem::path dir_;
  nlohmann::ordered_json config_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json seeds_ = nlohmann::ordered_json::object();
  nlohmann::ordered_json stages_ = nlohmann::ordered_json::array();
  nlohmann::ordered_json inputs_ = nlohmann::ordered_json::array();
  nlohmann::ordered_json extra_ = nlohmann::ordered_json::object();
  std::vector<std::string> artifacts_;
  std::string failed_stage_;
};

/// Output root: $UQSS_OUTPUT_ROOT, else ./uqss-runs.
inline std::filesystem::path default_output_root() {
  if (const char* env = std::getenv("UQSS_OUTPUT_ROOT"); env && *env) return env;
  return "uqss-runs";
}

/// Timestamped directory name under the default root, e.g. train-20260101-120000-4242.
inline std::filesystem::path default_output_dir(const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const auto rnd = std::chrono::steady_clock::now().time_since_epoch().count() % 100000;
  return default_output_root() / (command + "-" + stamp + "-" + std::to_string(rnd));
}

/// Creates `dir` (parents allowed); it must not exist yet.
inline void create_fresh_dir(const std::filesystem::path& dir) {
  if (!dir.parent_path().empty()) std::filesystem::create_directories(dir.parent_path());
  std::error_code ec;
  if (!std::filesystem::create_directory(dir, ec)) {
    if (ec) throw Error("cannot create output directory '" + dir.string() + "': " + ec.message());
    throw UsageError("output directory '" + dir.string() + "' already exists");
  }
}

}  // namespace uqss

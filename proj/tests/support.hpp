#pragma once

#include <doctest.h>

#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "elnet/maskio.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::size_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("elnet_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

inline elnet::maskio::Mask random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng, double p = 0.5) {
  std::bernoulli_distribution b(p);
  std::vector<std::uint8_t> bits(h * w);
  for (auto& v : bits) v = b(rng) ? 1 : 0;
  return {h, w, std::move(bits)};
}

inline elnet::maskio::Mask mask_from(std::size_t h, std::size_t w, std::initializer_list<std::pair<int, int>> fg) {
  elnet::maskio::Mask m(h, w);
  for (auto [y, x] : fg) m.set(y, x, true);
  return m;
}

}  // namespace testing

#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "stkrige/synthetic.hpp"
#include "stkrige/training.hpp"

namespace stkrige::fixture {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("stkrige_" + tag + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string str() const { return path_.string(); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline SynthSpec small_spec(std::uint64_t seed = 3) {
  SynthSpec s;
  s.observed = 8;
  s.unobserved = 2;
  s.steps = 96;
  s.steps_per_day = 12;
  s.k_true = 3;
  s.noise_std = 0.01;
  s.mix = {0.3, 0.4, 0.3};
  s.seed = seed;
  return s;
}

/// A quick training setup for the small synthetic instance.
inline TrainConfig small_train_config(const Dataset& ds) {
  TrainConfig c;
  c.model.hidden = 6;
  c.model.embed = 3;
  c.model.top_k = 3;
  c.window = 6;
  c.batch_size = 4;
  c.max_epochs = 3;
  c.patience = 5;
  c.lr = 1e-3;
  c.threads = 2;
  return resolve_for_dataset(c, ds);
}

}  // namespace stkrige::fixture

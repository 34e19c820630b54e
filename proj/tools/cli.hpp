#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace dain::cli {

// Flat run configuration. Every field is also a command-line flag (--field-name) and a key of the
// JSON config file.
struct RunConfig {
  std::string command;
  std::string output_dir = "out";
  std::uint64_t seed = 0;

  // generate
  std::string dataset = "angular";  // angular | spatial | mixed
  std::size_t samples_per_class = 20;
  std::vector<double> views = {-40, -30, -20, -10, 0, 10, 20, 30, 40};
  double delta_deg = 5.0;
  std::size_t image_size = 32;
  double gain_lo = 0.5;
  double gain_hi = 1.0;
  double noise_sigma = 0.01;
  std::optional<double> rho1;  // overrides every class
  std::string image_format = "f32";
  std::string illumination = "sun";

  // dataset inputs
  std::string manifest;
  std::string gtos_root;
  std::string split_file;
  double train_fraction = 0.7;
  std::size_t n_splits = 5;

  // model
  std::string arch = "dain";
  std::string backbone = "1x28:8k3s1p1m2,16k3s1p1m2,16k3s1p1m1";
  std::size_t n_classes = 0;  // 0: taken from the manifest
  std::size_t n_codewords = 8;
  std::size_t deepten_codewords = 32;
  std::size_t reduce_dim = 16;
  std::size_t embed_dim = 32;
  double dropout = 0.5;
  bool share_dain_heads = false;
  std::string feature_combine = "sum";
  std::string multiview_mode = "pooling";
  std::size_t n_views = 4;
  std::string voting_rule = "mean";
  std::string dtype = "f32";

  // train
  std::size_t epochs = 100;
  std::size_t batch_size = 16;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t stage1_epochs = 3;
  std::size_t stage2_epochs = 3;
  std::size_t decay_window = 3;
  double decay_tau = 0.002;
  double decay_factor = 0.1;
  std::size_t max_decays = 2;
  double target_train_acc = 0.0;
  double stretch_pct = 10.0;
  double flip_prob = 0.5;
  bool multiview = false;
  std::size_t windows_per_sample = 1;

  // eval / export-features
  std::string checkpoint;
  std::string eval_mode = "single";  // single | voting | pooling | filter3d
  std::string eval_split = "test";   // train | test | all

  // diffimg
  std::string image_v;
  std::string image_v_delta;
  std::string out_image;

  // gradcheck
  double gradcheck_h = 1e-4;
  double gradcheck_tol = 1e-4;
  std::size_t gradcheck_seeds = 1;

  // summarize
  std::vector<std::string> reports;

  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig from_json(const nlohmann::json& j);

/// Runs one command line (args[0] is the program name). Returns the process exit code:
/// 0 success, 1 runtime failure, 2 usage or configuration error.
int run(const std::vector<std::string>& args);

}  // namespace dain::cli

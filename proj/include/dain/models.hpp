#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dain/angular.hpp"
#include "dain/autodiff.hpp"
#include "dain/checkpoint.hpp"

namespace dain::models {

enum class Arch { Baseline, DeepTEN, BilinearCNN, DEP, DAIN, TEAN };

inline constexpr Arch kAllArchs[] = {Arch::Baseline, Arch::DeepTEN, Arch::BilinearCNN,
                                     Arch::DEP,      Arch::DAIN,    Arch::TEAN};

std::string_view to_string(Arch a);
/// Case-insensitive; throws std::invalid_argument on unknown tags.
Arch parse_arch(std::string_view s);
/// DAIN and TEAN consume (I_v, I_delta) pairs.
bool is_two_stream(Arch a);

struct ConvBlock {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  /// Max-pool window (and stride) after the ReLU; 1 disables pooling.
  std::size_t pool = 2;
};

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t input_size = 56;
  std::vector<ConvBlock> blocks;

  /// Three conv-relu-pool blocks ending in 16 channels at 7x7 for 56x56 input.
  static BackboneConfig default_config(std::size_t in_channels = 1);

  std::size_t out_channels() const;
  /// Spatial extent of the final feature map; throws if the blocks do not fit.
  std::size_t out_extent() const;
  void validate() const;

  /// e.g. "1x56:8k3s1p1m2,16k3s1p1m2,16k3s1p1m2"
  std::string to_string() const;
  static BackboneConfig parse(std::string_view s);
};

struct HeadDims {
  std::size_t n_codewords = 8;         // DEP encoding layer
  std::size_t deepten_codewords = 32;  // Deep-TEN-style baseline head
  std::size_t reduce_dim = 16;         // fc1_1/fc1_2 width and 1x1 reduction channels
  std::size_t embed_dim = 32;          // fc2 width
  std::size_t n_classes = 4;
  double dropout = 0.5;
  /// DAIN: head B reuses head A's classifier instead of owning one.
  bool share_dain_heads = false;
};

struct ModelConfig {
  Arch arch = Arch::Baseline;
  BackboneConfig backbone = BackboneConfig::default_config();
  HeadDims dims;
  angular::FusionConfig fusion;
  DType dtype = DType::f32;
  std::uint64_t seed = 0;
  /// Per-channel input statistics; I_v is standardized, I_delta only scaled.
  std::vector<double> norm_mean;
  std::vector<double> norm_std;

  void validate() const;
  ad::ConfigMap to_config_map() const;
  static ModelConfig from_config_map(const ad::ConfigMap& m);
};

/// Images [N,C,H,W]; diff holds I_delta for two-stream architectures.
struct Batch {
  Tensor rgb;
  std::optional<Tensor> diff;
};

struct ForwardOut {
  ad::Var logits;                   // [N, n_classes]
  std::vector<ad::Var> head_logits;  // DAIN: {head A, head B}; otherwise {logits}
  ad::Var features;                 // pre-classifier feature [N, F]
};

/// Closed-form trainable parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& cfg);
/// Length of the pre-classifier feature vector.
std::size_t feature_dim(const ModelConfig& cfg);

class ModelGraph {
 public:
  static ModelGraph build(const ModelConfig& cfg);
  static ModelGraph from_checkpoint(const ad::Checkpoint& ck);
  static ModelGraph load(const std::filesystem::path& path);

  ModelGraph(ModelGraph&&) = default;
  ModelGraph& operator=(ModelGraph&&) = default;

  const ModelConfig& config() const { return cfg_; }
  Arch arch() const { return cfg_.arch; }
  void set_normalization(std::vector<double> mean, std::vector<double> std);

  /// Single-view forward pass.
  ForwardOut forward(ad::Tape& tape, const Batch& batch, bool train, std::mt19937_64& rng);
  /// Feature-level multiview pass (Pooling or Filter3D); views[v] holds view v of every item.
  ForwardOut forward_multiview(ad::Tape& tape, std::span<const Batch> views, bool train, std::mt19937_64& rng);
  /// Training objective: cross-entropy, summed over both heads for DAIN.
  ad::Var loss(const ForwardOut& out, std::span<const int> labels) const;

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  ad::Parameter& param(const std::string& name);
  const ad::Parameter& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  std::size_t parameter_count() const;
  void zero_grad();

  void save(const std::filesystem::path& path) const;
  std::string encode() const;

 private:
  explicit ModelGraph(ModelConfig cfg) : cfg_(std::move(cfg)) {}

  ad::Parameter& add_param(std::string name, Shape shape, ad::ParamGroup group, std::size_t fan_in,
                           std::mt19937_64& rng);
  void add_conv(const std::string& prefix, std::size_t out_c, std::size_t in_c, std::size_t k, ad::ParamGroup g,
                std::mt19937_64& rng);
  void add_linear(const std::string& prefix, std::size_t out_f, std::size_t in_f, ad::ParamGroup g,
                  std::mt19937_64& rng);
  void add_view_filter(const std::string& prefix, std::mt19937_64& rng);

  ad::Var P(ad::Tape& tape, const std::string& name);
  ad::Var backbone(ad::Tape& tape, ad::Var x, const std::string& prefix);
  ad::Var linear(ad::Tape& tape, ad::Var x, const std::string& prefix);
  ad::Var dep_embedding(ad::Tape& tape, ad::Var rgb_map);

  struct Maps {
    ad::Var rgb;
    ad::Var fused;  // two-stream architectures only
  };
  Maps compute_maps(ad::Tape& tape, const Batch& batch);
  ad::Var combine_views(ad::Tape& tape, const std::vector<ad::Var>& maps, const std::string& filter_prefix);
  ForwardOut head(ad::Tape& tape, const Maps& maps, bool train, std::mt19937_64& rng);

  ModelConfig cfg_;
  std::vector<std::unique_ptr<ad::Parameter>> params_;
};

}  // namespace dain::models

#pragma once
// U-Net style brain segmentation networks for the two modalities.
//
//   encoder level l (l = 0..depth-1): conv(K1) ReLU, conv3 ReLU, maxpool 2
//   bottleneck:                       conv(K1) ReLU, conv3 ReLU
//   decoder level l (l = depth-1..0): upsample x2, conv3 halving channels,
//                                     concat skip, conv(K1) ReLU, conv3 ReLU
//   head:                             conv1x1 -> 1 channel, sigmoid
//
// Channels at level l are base * 2^l. K1 is 3 (pad 1) for MRI and 5 (pad 2)
// for MSOT; every other convolution is 3x3 with padding 1.

#include <cstdint>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"
#include "regnet/image.hpp"
#include "regnet/layers.hpp"

namespace regnet {

enum class Modality { mri, msot };

inline std::string to_string(Modality m) { return m == Modality::mri ? "mri" : "msot"; }

inline Modality modality_from_string(const std::string& s) {
  if (s == "mri") return Modality::mri;
  if (s == "msot") return Modality::msot;
  throw ConfigError("unknown modality '" + s + "'");
}

struct SegNetConfig {
  Modality variant = Modality::mri;
  int base_channels = 64;
  int depth = 4;
  Index input_size = 256;
  int first_kernel = 3;
  int first_padding = 1;

  static SegNetConfig paper(Modality m) {
    SegNetConfig c;
    c.variant = m;
    c.first_kernel = m == Modality::msot ? 5 : 3;
    c.first_padding = m == Modality::msot ? 2 : 1;
    return c;
  }

  static SegNetConfig desk(Modality m) {
    SegNetConfig c = paper(m);
    c.base_channels = 8;
    c.input_size = 64;
    return c;
  }

  void validate() const {
    if (base_channels < 1) throw ConfigError("segnet: base_channels must be >= 1");
    if (depth < 1) throw ConfigError("segnet: depth must be >= 1");
    if (input_size < 1 || input_size % (Index{1} << depth) != 0) {
      throw ConfigError("segnet: input_size " + std::to_string(input_size) + " is not divisible by 2^" +
                        std::to_string(depth));
    }
    const bool msot = variant == Modality::msot;
    if (first_kernel != (msot ? 5 : 3) || first_padding != (msot ? 2 : 1)) {
      throw ConfigError(std::string("segnet: ") + (msot ? "MSOT requires first_kernel 5, first_padding 2"
                                                         : "MRI requires first_kernel 3, first_padding 1"));
    }
  }

  Index channels(int level) const { return static_cast<Index>(base_channels) << level; }
};

inline bool operator==(const SegNetConfig& a, const SegNetConfig& b) {
  return a.variant == b.variant && a.base_channels == b.base_channels && a.depth == b.depth &&
         a.input_size == b.input_size && a.first_kernel == b.first_kernel && a.first_padding == b.first_padding;
}

inline void to_json(nlohmann::json& j, const SegNetConfig& c) {
  j = nlohmann::json{{"variant", to_string(c.variant)}, {"base_channels", c.base_channels},
                     {"depth", c.depth},                {"input_size", c.input_size},
                     {"first_kernel", c.first_kernel},  {"first_padding", c.first_padding}};
}

inline void from_json(const nlohmann::json& j, SegNetConfig& c) {
  c.variant = modality_from_string(j.at("variant").get<std::string>());
  c.base_channels = j.at("base_channels").get<int>();
  c.depth = j.at("depth").get<int>();
  c.input_size = j.at("input_size").get<Index>();
  c.first_kernel = j.at("first_kernel").get<int>();
  c.first_padding = j.at("first_padding").get<int>();
}

struct ShapeStage {
  std::string name;
  Shape shape;
};

/// Layer-by-layer output shapes for a batch, computed without running the network.
inline std::vector<ShapeStage> trace_segnet_shapes(const SegNetConfig& c, Index batch = 1) {
  c.validate();
  std::vector<ShapeStage> out;
  Index s = c.input_size;
  auto conv = [](Index in, Index k, Index p) { return conv_output_size(in, k, 1, p); };
  out.push_back({"input", {batch, 1, s, s}});
  for (int l = 0; l < c.depth; ++l) {
    s = conv(conv(s, c.first_kernel, c.first_padding), 3, 1);
    out.push_back({"enc" + std::to_string(l), {batch, c.channels(l), s, s}});
    s /= 2;
    out.push_back({"pool" + std::to_string(l), {batch, c.channels(l), s, s}});
  }
  s = conv(conv(s, c.first_kernel, c.first_padding), 3, 1);
  out.push_back({"bottleneck", {batch, c.channels(c.depth), s, s}});
  for (int l = c.depth - 1; l >= 0; --l) {
    s *= 2;
    out.push_back({"up" + std::to_string(l), {batch, c.channels(l), s, s}});
    out.push_back({"concat" + std::to_string(l), {batch, 2 * c.channels(l), s, s}});
    s = conv(conv(s, c.first_kernel, c.first_padding), 3, 1);
    out.push_back({"dec" + std::to_string(l), {batch, c.channels(l), s, s}});
  }
  out.push_back({"output", {batch, 1, s, s}});
  return out;
}

class SegNet {
 public:
  SegNet() = default;

  SegNet(const SegNetConfig& config, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x7365676e6574));
    build(config, &rng);
  }

  /// Zero parameters, for loading a checkpoint without paying for initialisation.
  static SegNet uninitialized(const SegNetConfig& config) {
    SegNet net;
    net.build(config, nullptr);
    return net;
  }

  const SegNetConfig& config() const { return config_; }

  /// [B,1,S,S] intensities -> [B,1,S,S] brain probabilities.
  Tensor forward(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != config_.input_size || x.dim(3) != config_.input_size) {
      throw DimensionError("segnet: expected input [B,1," + std::to_string(config_.input_size) + "," +
                           std::to_string(config_.input_size) + "], got " + to_string(x.shape()));
    }
    std::vector<Tensor> skips;
    Tensor h = x;
    for (int l = 0; l < config_.depth; ++l) {
      h = relu(down_[l].second(relu(down_[l].first(h))));
      skips.push_back(h);
      h = maxpool2d(h, 2);
    }
    h = relu(down_[config_.depth].second(relu(down_[config_.depth].first(h))));
    for (int i = 0; i < config_.depth; ++i) {
      const auto& [halve, conv_a, conv_b] = up_[i];
      h = halve(upsample_nearest2x(h));
      h = concat_channels(h, skips[static_cast<std::size_t>(config_.depth - 1 - i)]);
      h = relu(conv_b(relu(conv_a(h))));
    }
    return sigmoid(head_(h));
  }

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    auto add_layer = [&](const std::string& name, const ConvLayer& layer) { layer.collect(name, out); };
    for (int l = 0; l <= config_.depth; ++l) {
      const std::string prefix = l < config_.depth ? "enc" + std::to_string(l) : std::string("bottleneck");
      add_layer(prefix + ".conv1", down_[l].first);
      add_layer(prefix + ".conv2", down_[l].second);
    }
    for (int i = 0; i < config_.depth; ++i) {
      const std::string prefix = "dec" + std::to_string(config_.depth - 1 - i);
      add_layer(prefix + ".halve", std::get<0>(up_[i]));
      add_layer(prefix + ".conv1", std::get<1>(up_[i]));
      add_layer(prefix + ".conv2", std::get<2>(up_[i]));
    }
    add_layer("head", head_);
    return out;
  }

  std::vector<Tensor> parameters() const { return tensors_of(named_parameters()); }
  Index parameter_count() const { return total_numel(named_parameters()); }

 private:
  void build(const SegNetConfig& config, Rng* rng) {
    config_ = config;
    config_.validate();
    const Index k1 = config_.first_kernel, p1 = config_.first_padding;
    Index cin = 1;
    for (int l = 0; l <= config_.depth; ++l) {
      const Index c = config_.channels(l);
      down_.push_back({ConvLayer(cin, c, k1, p1, rng), ConvLayer(c, c, 3, 1, rng)});
      cin = c;
    }
    for (int l = config_.depth - 1; l >= 0; --l) {
      const Index c = config_.channels(l);
      up_.push_back({ConvLayer(2 * c, c, 3, 1, rng), ConvLayer(2 * c, c, k1, p1, rng), ConvLayer(c, c, 3, 1, rng)});
    }
    head_ = ConvLayer(config_.channels(0), 1, 1, 0, rng);
  }

  SegNetConfig config_;
  std::vector<std::pair<ConvLayer, ConvLayer>> down_;
  std::vector<std::tuple<ConvLayer, ConvLayer, ConvLayer>> up_;
  ConvLayer head_;
};

inline SegNet build_segnet(const SegNetConfig& config, std::uint64_t seed = 0) { return SegNet(config, seed); }

struct Segmentation {
  Image probability;
  Mask mask;
};

/// Network input: intensities min-max normalised to [0, 1].
inline Tensor segnet_input(const std::vector<const Image*>& images) {
  std::vector<Image> normalized;
  normalized.reserve(images.size());
  for (const Image* img : images) normalized.push_back(normalize_intensity(*img));
  std::vector<const Image*> ptrs;
  for (const auto& img : normalized) ptrs.push_back(&img);
  return images_to_tensor(ptrs);
}

/// Probabilities >= 0.5 become foreground.
inline Segmentation segment(const SegNet& net, const Image& image) {
  const Index s = net.config().input_size;
  if (image.width != s || image.height != s) {
    throw DimensionError("segment: image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                         ", network expects " + std::to_string(s) + "x" + std::to_string(s));
  }
  NoGradGuard guard;
  const Tensor p = net.forward(segnet_input({&image}));
  Segmentation out;
  out.probability = tensor_to_image(p);
  out.mask = threshold_mask(out.probability.pixels, s, s, 0.5);
  return out;
}

}  // namespace regnet

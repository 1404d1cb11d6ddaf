#include <gtest/gtest.h>

#include "regnet/adam.hpp"
#include "regnet/phantom.hpp"
#include "regnet/segnet.hpp"

using namespace regnet;

namespace {

/// Closed-form parameter count of the U-Net with base b, depth D and first
/// kernel area k, summed level by level as geometric series.
Index closed_form_parameters(Index b, int depth, Index k) {
  const Index p4 = Index{1} << (2 * depth);  // 4^D
  const Index p2 = Index{1} << depth;         // 2^D
  const Index encoder = b * k + k * b * b * (4 * p4 - 4) / 6 + 3 * b * b * (4 * p4 - 1) + 2 * b * (2 * p2 - 1);
  const Index decoder = (27 + 2 * k) * b * b * (p4 - 1) / 3 + 3 * b * (p2 - 1);
  return encoder + decoder + b + 1;
}

const Shape& stage(const std::vector<ShapeStage>& trace, const std::string& name) {
  for (const auto& s : trace) {
    if (s.name == name) return s.shape;
  }
  throw std::out_of_range(name);
}

}  // namespace

TEST(SegNetConfig, Validation) {
  EXPECT_NO_THROW(SegNetConfig::paper(Modality::mri).validate());
  EXPECT_NO_THROW(SegNetConfig::paper(Modality::msot).validate());
  auto c = SegNetConfig::desk(Modality::mri);
  c.input_size = 72;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SegNetConfig::desk(Modality::msot);
  c.first_kernel = 3;
  c.first_padding = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SegNetConfig::desk(Modality::mri);
  c.first_kernel = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(modality_from_string("ct"), ConfigError);
}

TEST(SegNetConfig, JsonRoundTrip) {
  const auto c = SegNetConfig::desk(Modality::msot);
  EXPECT_EQ(nlohmann::json(c).get<SegNetConfig>(), c);
}

TEST(SegNet, FullWidthShapeTrace) {
  for (auto m : {Modality::mri, Modality::msot}) {
    const auto trace = trace_segnet_shapes(SegNetConfig::paper(m), 2);
    const Index channels[] = {64, 128, 256, 512};
    const Index sizes[] = {256, 128, 64, 32};
    for (int l = 0; l < 4; ++l) {
      EXPECT_EQ(stage(trace, "enc" + std::to_string(l)), (Shape{2, channels[l], sizes[l], sizes[l]}));
    }
    EXPECT_EQ(stage(trace, "bottleneck"), (Shape{2, 1024, 16, 16}));
    EXPECT_EQ(stage(trace, "output"), (Shape{2, 1, 256, 256}));
  }
}

TEST(SegNet, DeskShapeTraceMatchesForward) {
  const auto cfg = SegNetConfig::desk(Modality::msot);
  const auto trace = trace_segnet_shapes(cfg, 3);
  EXPECT_EQ(stage(trace, "bottleneck"), (Shape{3, 128, 4, 4}));
  const auto net = build_segnet(cfg, 1);
  NoGradGuard guard;
  EXPECT_EQ(net.forward(Tensor(Shape{3, 1, 64, 64})).shape(), stage(trace, "output"));
}

TEST(SegNet, ParameterCountMatchesClosedForm) {
  for (auto m : {Modality::mri, Modality::msot}) {
    for (const auto& cfg : {SegNetConfig::paper(m), SegNetConfig::desk(m)}) {
      const Index k = static_cast<Index>(cfg.first_kernel) * cfg.first_kernel;
      // Building the full-width network allocates its weights, which is cheap enough here.
      EXPECT_EQ(build_segnet(cfg, 0).parameter_count(), closed_form_parameters(cfg.base_channels, cfg.depth, k));
    }
  }
}

TEST(SegNet, DeterministicInitialisationAndZeroBiases) {
  const auto cfg = SegNetConfig::desk(Modality::mri);
  const auto a = build_segnet(cfg, 4), b = build_segnet(cfg, 4), c = build_segnet(cfg, 5);
  const auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool any_difference = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pb[i].second.data().begin()));
    any_difference |= !std::equal(pa[i].second.data().begin(), pa[i].second.data().end(), pc[i].second.data().begin());
    if (pa[i].first.ends_with(".bias")) {
      for (float v : pa[i].second.data()) EXPECT_EQ(v, 0.0f);
    }
  }
  EXPECT_TRUE(any_difference);
}

TEST(SegNet, OutputsAreProbabilities) {
  const auto net = build_segnet(SegNetConfig::desk(Modality::msot), 2);
  const auto ph = generate_phantom(3, 64);
  const auto s = segment(net, ph.msot_image);
  for (float p : s.probability.pixels) {
    EXPECT_GE(p, 0.0f);
    EXPECT_LE(p, 1.0f);
  }
  for (std::size_t i = 0; i < s.mask.values.size(); ++i) {
    EXPECT_EQ(s.mask.values[i], s.probability.pixels[i] >= 0.5f ? 1 : 0);
  }
}

TEST(SegNet, ZeroInputIsDeterministic) {
  const auto net = build_segnet(SegNetConfig::desk(Modality::mri), 9);
  const Image zero(64, 64);
  const auto a = segment(net, zero), b = segment(net, zero);
  EXPECT_EQ(a.probability.pixels, b.probability.pixels);
  EXPECT_EQ(a.mask.values, b.mask.values);
}

TEST(SegNet, ThresholdTieIsForeground) {
  // With every weight zeroed the head emits sigmoid(0) = 0.5 everywhere.
  const auto net = build_segnet(SegNetConfig::desk(Modality::mri), 1);
  for (auto t : net.parameters()) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
  const auto s = segment(net, generate_phantom(1, 64).mri_image);
  for (float p : s.probability.pixels) EXPECT_EQ(p, 0.5f);
  EXPECT_EQ(s.mask.area(), 64 * 64);
}

TEST(SegNet, DimensionErrors) {
  const auto net = build_segnet(SegNetConfig::desk(Modality::mri), 1);
  EXPECT_THROW(segment(net, Image(32, 32)), DimensionError);
  EXPECT_THROW(segment(net, Image(64, 32)), DimensionError);
  NoGradGuard guard;
  EXPECT_THROW(net.forward(Tensor(Shape{1, 2, 64, 64})), DimensionError);
}

TEST(SegNet, FewAdamStepsReduceLossOnOneImage) {
  const auto net = build_segnet(SegNetConfig::desk(Modality::mri), 3);
  const auto ph = generate_phantom(7, 64);
  const auto x = image_to_tensor(normalize_intensity(ph.mri_image));
  const auto y = masks_to_tensor({&ph.brain_mask});
  Adam opt(net.parameters(), AdamConfig{1e-3});
  double first = 0, last = 0;
  for (int step = 0; step < 15; ++step) {
    opt.zero_grad();
    auto loss = bce_loss(net.forward(x), y);
    loss.backward();
    opt.step();
    (step == 0 ? first : last) = loss.item();
  }
  EXPECT_LT(last, first);
}

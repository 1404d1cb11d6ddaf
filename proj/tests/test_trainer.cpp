#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "regnet/trainer.hpp"

using namespace regnet;
namespace fs = std::filesystem;

namespace {

std::vector<SegItem> seg_items(int n, TrainTarget target = TrainTarget::mri_seg) {
  std::vector<SegItem> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(seg_item_from_phantom(generate_phantom(derive_seed(3, i), 64), target, item_id(i), subject_id(i)));
  }
  return out;
}

std::vector<StnItem> stn_items(int n) {
  std::vector<StnItem> out;
  for (int i = 0; i < n; ++i) {
    const auto ph = generate_phantom(derive_seed(4, i), 64);
    out.push_back(stn_item_from_phantom(ph, ph.misalignment, item_id(i), subject_id(i)));
  }
  return out;
}

TrainProfile tiny(TrainTarget t, int epochs) {
  auto p = TrainProfile::desk(t);
  p.epochs = epochs;
  p.augment_variants = 1;
  p.batch_size = 4;
  p.seed = 11;
  return p;
}

bool same_parameters(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin())) return false;
  }
  return true;
}

bool same_curves(const std::vector<EpochRecord>& a, const std::vector<EpochRecord>& b) {
  return nlohmann::json(a).dump() == nlohmann::json(b).dump();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("regnet_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(TrainProfile, PaperValues) {
  const auto mri = TrainProfile::paper(TrainTarget::mri_seg);
  EXPECT_EQ(mri.learning_rate, 1e-5);
  EXPECT_EQ(mri.batch_size, 128);
  EXPECT_EQ(mri.epochs, 200);
  const auto msot = TrainProfile::paper(TrainTarget::msot_seg);
  EXPECT_EQ(msot.learning_rate, 5e-5);
  EXPECT_EQ(msot.batch_size, 32);
  EXPECT_EQ(msot.epochs, 5000);
  const auto stn = TrainProfile::paper(TrainTarget::stn);
  EXPECT_EQ(stn.learning_rate, 1e-6);
  EXPECT_EQ(stn.batch_size, 128);
  EXPECT_EQ(stn.epochs, 1000);
  EXPECT_EQ(stn.alpha, 0.001);
}

TEST(TrainProfile, DeskKeepsLearningRatesAndLoss) {
  for (auto t : {TrainTarget::mri_seg, TrainTarget::msot_seg, TrainTarget::stn}) {
    const auto p = TrainProfile::paper(t), d = TrainProfile::desk(t);
    EXPECT_EQ(d.learning_rate, p.learning_rate);
    EXPECT_EQ(d.alpha, p.alpha);
    EXPECT_LE(d.batch_size, 16);
    EXPECT_LE(d.epochs, 300);
  }
  EXPECT_EQ(TrainProfile::desk(TrainTarget::stn).batch_size, 16);
  EXPECT_EQ(TrainProfile::desk(TrainTarget::stn).epochs, 300);
  EXPECT_EQ(segnet_config_for(TrainProfile::desk(TrainTarget::msot_seg)).base_channels, 8);
  EXPECT_EQ(segnet_config_for(TrainProfile::paper(TrainTarget::msot_seg)).first_kernel, 5);
}

TEST(TrainProfile, JsonRoundTripAndValidation) {
  auto p = TrainProfile::desk(TrainTarget::stn);
  p.seed = 99;
  p.patience = 7;
  const auto back = nlohmann::json(p).get<TrainProfile>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(p));
  EXPECT_EQ(profile_hash(back), profile_hash(p));
  p.seed = 100;
  EXPECT_NE(profile_hash(back), profile_hash(p));
  p.batch_size = 0;
  EXPECT_THROW(p.validate(), ConfigError);
  EXPECT_THROW(train_target_from_string("unet"), ConfigError);
  EXPECT_THROW(profile_scale_from_string("huge"), ConfigError);
}

TEST(Trainer, ValidationSplitIsSubjectLevel) {
  std::vector<SegItem> items;
  for (int i = 0; i < 40; ++i) items.push_back({item_id(i), subject_id(i / 4), Image(2, 2), Mask(2, 2)});
  std::vector<SegItem> train, val;
  detail::split_train_validation(items, 0.2, 5, train, val);
  EXPECT_EQ(val.size(), 8u);  // 2 of 10 subjects
  std::set<std::string> ts, vs;
  for (const auto& it : train) ts.insert(it.subject);
  for (const auto& it : val) vs.insert(it.subject);
  for (const auto& s : vs) EXPECT_EQ(ts.count(s), 0u);
  std::vector<SegItem> train2, val2;
  detail::split_train_validation(items, 0.2, 5, train2, val2);
  ASSERT_EQ(val2.size(), val.size());
  for (std::size_t i = 0; i < val.size(); ++i) EXPECT_EQ(val[i].id, val2[i].id);
}

TEST(Trainer, ZeroLearningRateLeavesParametersUnchanged) {
  auto p = tiny(TrainTarget::mri_seg, 1);
  p.learning_rate = 0.0;
  p.validation_fraction = 0.0;
  p.augment_variants = 0;
  const auto items = seg_items(4);
  const auto out = train_segnet(p, items);
  const auto fresh = build_segnet(segnet_config_for(p), derive_seed(p.seed, detail::kInitStream));
  EXPECT_TRUE(same_parameters(out.net.named_parameters(), fresh.named_parameters()));
}

TEST(Trainer, IdenticalSeedsGiveIdenticalCurves) {
  const auto items = seg_items(5, TrainTarget::msot_seg);
  const auto p = tiny(TrainTarget::msot_seg, 2);
  const auto a = train_segnet(p, items), b = train_segnet(p, items);
  EXPECT_TRUE(same_curves(a.curve, b.curve));
  EXPECT_TRUE(same_parameters(a.net.named_parameters(), b.net.named_parameters()));
  ASSERT_EQ(a.curve.size(), 2u);
  EXPECT_TRUE(std::isfinite(a.curve[0].val_loss));
  EXPECT_TRUE(std::isfinite(a.curve[0].val_metric));
}

TEST(Trainer, ResumeContinuesBitIdentically) {
  const auto dir = scratch("resume");
  const auto items = stn_items(5);
  const auto p = tiny(TrainTarget::stn, 3);
  const auto straight = train_stn(p, items);

  TrainOptions first;
  first.state_path = dir / "state.rgnt";
  first.max_epochs_this_call = 1;
  const auto partial = train_stn(p, items, first);
  EXPECT_FALSE(partial.finished);
  TrainOptions rest;
  rest.state_path = dir / "state.rgnt";
  rest.resume = true;
  const auto resumed = train_stn(p, items, rest);
  EXPECT_TRUE(resumed.finished);
  EXPECT_TRUE(same_curves(straight.curve, resumed.curve));
  EXPECT_EQ(straight.best_epoch, resumed.best_epoch);
  EXPECT_TRUE(same_parameters(straight.net.named_parameters(), resumed.net.named_parameters()));

  auto other = p;
  other.seed = 12;
  EXPECT_THROW(train_stn(other, items, rest), ConfigError);
  fs::remove_all(dir);
}

TEST(Trainer, NonFiniteLossAbortsWithDiagnostics) {
  auto items = stn_items(3);
  items[1].truth.sx = std::numeric_limits<double>::quiet_NaN();
  auto p = tiny(TrainTarget::stn, 1);
  p.validation_fraction = 0.0;
  try {
    train_stn(p, items);
    FAIL();
  } catch (const TrainingDiverged& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch 0"), std::string::npos);
    EXPECT_NE(what.find(items[1].id), std::string::npos);
    EXPECT_NE(what.find("learning rate"), std::string::npos);
  }
}

TEST(Trainer, RejectsMismatchedTargets) {
  EXPECT_THROW(train_segnet(tiny(TrainTarget::stn, 1), seg_items(2)), ConfigError);
  EXPECT_THROW(train_stn(tiny(TrainTarget::mri_seg, 1), stn_items(2)), ConfigError);
  EXPECT_THROW(train_segnet(tiny(TrainTarget::mri_seg, 1), {}), std::invalid_argument);
}

TEST(Trainer, LossCurveCsv) {
  const auto dir = scratch("csv");
  std::vector<EpochRecord> curve{{0, 0.5, 0.25, 0.9}, {1, 0.4, std::nan(""), std::nan("")}};
  write_loss_curve(dir / "curve.csv", curve);
  std::ifstream is(dir / "curve.csv");
  std::stringstream ss;
  ss << is.rdbuf();
  EXPECT_EQ(ss.str(), "epoch,train_loss,val_loss,val_metric\n0,0.5,0.25,0.9\n1,0.4,,\n");
  fs::remove_all(dir);
}

TEST(Trainer, ModelFilesRoundTrip) {
  const auto dir = scratch("model");
  const auto seg = build_segnet(SegNetConfig::desk(Modality::msot), 3);
  const auto stn = build_stn(StnConfig::desk(), 3);
  save_segnet(dir / "seg.rgnt", seg, {{"note", "x"}});
  save_stn(dir / "stn.rgnt", stn);
  EXPECT_TRUE(same_parameters(load_segnet(dir / "seg.rgnt").named_parameters(), seg.named_parameters()));
  EXPECT_EQ(load_segnet(dir / "seg.rgnt").config(), seg.config());
  EXPECT_TRUE(same_parameters(load_stn(dir / "stn.rgnt").named_parameters(), stn.named_parameters()));
  EXPECT_THROW(load_stn(dir / "seg.rgnt"), ConfigError);
  EXPECT_THROW(load_segnet(dir / "missing.rgnt"), IoError);
  fs::remove_all(dir);
}

TEST(CrossValidate, TwoFoldsOnTwoSubjects) {
  const auto items = seg_items(2);
  const auto folds = make_folds(std::vector<std::string>{subject_id(0), subject_id(1)}, 2, 1);
  const auto runs = cross_validate_segnet(tiny(TrainTarget::mri_seg, 1), items, folds);
  ASSERT_EQ(runs.size(), 2u);
  for (const auto& r : runs) {
    EXPECT_FALSE(r.failed) << r.note;
    EXPECT_EQ(r.item_values.size(), 1u);
  }
  const auto report = fold_table("Dice", "dice", {"MRI"}, std::vector<std::vector<FoldResult>>{runs});
  EXPECT_EQ(report.rows.size(), 2u);
  EXPECT_TRUE(report_is_consistent(nlohmann::json(report), 1e-9));
  EXPECT_NEAR(report.summary()[0].mean, (runs[0].value + runs[1].value) / 2, 1e-12);
}

TEST(CrossValidate, FailedFoldIsMarked) {
  const auto items = seg_items(2);
  const std::vector<std::vector<std::string>> folds{{subject_id(0)}, {"nobody"}};
  const auto runs = cross_validate_segnet(tiny(TrainTarget::mri_seg, 1), items, folds);
  EXPECT_FALSE(runs[0].failed);
  EXPECT_TRUE(runs[1].failed);
  const auto report = fold_table("Dice", "dice", {"MRI"}, std::vector<std::vector<FoldResult>>{runs});
  EXPECT_TRUE(report.rows[1].failed);
  EXPECT_NE(report.to_text().find("FAILED"), std::string::npos);
}

TEST(CrossValidate, LeakageIsDetectedByHash) {
  const auto items = seg_items(1);
  std::set<std::uint64_t> trained{fnv1a64(items[0].id)};
  EXPECT_THROW(detail::check_no_leakage(items, trained), LeakageError);
  EXPECT_NO_THROW(detail::check_no_leakage(items, std::set<std::uint64_t>{fnv1a64("other")}));
}

TEST(Trainer, AugmentedPairsStayConsistent) {
  // The supervised theta of an augmented pair warps its MSOT mask onto its MRI mask.
  const auto items = stn_items(3);
  auto p = tiny(TrainTarget::stn, 1);
  p.augment_variants = 4;
  for (const auto& s : expand_stn_items(items, p, 2)) {
    const auto warped = affine_grid_sample(masks_to_tensor({&s.msot}), thetas_to_tensor({s.theta}));
    EXPECT_GE(dice(threshold_mask(tensor_to_image(warped).pixels, 64, 64), s.mri), 0.9);
  }
}

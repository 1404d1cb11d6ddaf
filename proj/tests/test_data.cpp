#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "regnet/dataset.hpp"

using namespace regnet;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("regnet_test_" + name);
  fs::remove_all(dir);
  return dir;
}

bool same_phantom(const Phantom& a, const Phantom& b) {
  return a.mri_image.pixels == b.mri_image.pixels && a.msot_image.pixels == b.msot_image.pixels &&
         a.brain_mask.values == b.brain_mask.values && a.msot_mask.values == b.msot_mask.values &&
         a.misalignment == b.misalignment;
}

}  // namespace

TEST(Phantom, DeterministicUnderSeed) {
  EXPECT_TRUE(same_phantom(generate_phantom(5, 64), generate_phantom(5, 64)));
  EXPECT_FALSE(same_phantom(generate_phantom(5, 64), generate_phantom(6, 64)));
}

TEST(Phantom, RejectsUnsupportedSize) {
  EXPECT_THROW(generate_phantom(1, 100), std::invalid_argument);
  for (Index s : {64, 128, 256}) EXPECT_EQ(generate_phantom(1, s).mri_image.width, s);
}

TEST(Phantom, ZeroPerturbationGivesIdentity) {
  PhantomOptions o;
  o.perturbation = PerturbationRange::none();
  const auto ph = generate_phantom(9, 64, o);
  EXPECT_EQ(ph.misalignment, AffineMatrix::identity());
  for (int i = 0; i < kLandmarkCount; ++i) {
    EXPECT_NEAR(ph.msot_landmarks[i].position.x, ph.mri_landmarks[i].position.x, 1e-12);
    EXPECT_NEAR(ph.msot_landmarks[i].position.y, ph.mri_landmarks[i].position.y, 1e-12);
  }
  EXPECT_EQ(ph.brain_mask.values, ph.msot_mask.values);
}

TEST(Phantom, BrainAreaAcrossThousandSeeds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto ph = generate_phantom(seed, 64);
    const double fraction = static_cast<double>(ph.brain_mask.area()) / (64.0 * 64.0);
    ASSERT_GE(fraction, 0.15) << "seed " << seed;
    ASSERT_LE(fraction, 0.45) << "seed " << seed;
  }
}

TEST(Phantom, BrainStrictlyInsideHead) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) EXPECT_LT(brain_head_clearance(seed, 64), 0.0);
  EXPECT_LT(brain_head_clearance(3, 256), 0.0);
}

TEST(Phantom, LandmarksConsistentWithMisalignment) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto ph = generate_phantom(seed, 64);
    ASSERT_EQ(ph.mri_landmarks.size(), 5u);
    const auto ev = evaluate_registration(ph.misalignment, ph.landmark_pairs());
    for (double t : ev.tre) EXPECT_LE(t, 1e-6);
    for (const auto& l : ph.mri_landmarks) {
      EXPECT_EQ(ph.brain_mask.at(std::lround(l.position.x), std::lround(l.position.y)), 1);
    }
  }
}

TEST(Phantom, MsotMaskIsBrainSeenThroughMisalignment) {
  const auto ph = generate_phantom(12, 64);
  const auto warped = warp_mask(ph.brain_mask, ph.misalignment);
  EXPECT_GE(dice(warped, ph.msot_mask), 0.97);
}

TEST(Augment, IdentityRangesReproduceInput) {
  const auto ph = generate_phantom(2, 64);
  const auto out = augment(ph.mri_image, ph.brain_mask, 3, {0.0, 1.0, 1.0}, 4);
  ASSERT_EQ(out.size(), 4u);
  for (const auto& s : out) {
    EXPECT_EQ(s.image.pixels, ph.mri_image.pixels);
    EXPECT_EQ(s.mask.values, ph.brain_mask.values);
  }
  EXPECT_THROW(augment(ph.mri_image, ph.brain_mask, 0, {}, 4), std::invalid_argument);
}

TEST(Augment, SixtyNineInputsGiveFiveHundredFiftyTwoItems) {
  std::size_t total = 0;
  const auto ph = generate_phantom(2, 64);
  for (int i = 0; i < 69; ++i) total += augment(ph.mri_image, ph.brain_mask, 7, {}, static_cast<std::uint64_t>(i)).size();
  EXPECT_EQ(total, 552u);
}

TEST(Augment, MasksStayBinaryAndInBounds) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto ph = generate_phantom(seed % 50, 64);
    Rng rng(derive_seed(seed, 0x617567));
    const auto t = draw_augmentation({}, 64, 64, rng);
    for (Index y = 0; y < 64; ++y) {
      for (Index x = 0; x < 64; ++x) {
        if (!ph.brain_mask.at(x, y)) continue;
        const Point2 q = t.apply({static_cast<double>(x), static_cast<double>(y)});
        ASSERT_TRUE(q.x >= 0 && q.x <= 63 && q.y >= 0 && q.y <= 63) << "seed " << seed;
      }
    }
  }
  const auto ph = generate_phantom(1, 64);
  for (const auto& s : augment(ph.mri_image, ph.brain_mask, 7, {}, 11)) {
    for (auto v : s.mask.values) ASSERT_TRUE(v == 0 || v == 1);
    EXPECT_GT(s.mask.area(), 0);
  }
}

TEST(Folds, PartitionSubjectsDeterministically) {
  std::vector<std::string> subjects;
  for (int i = 0; i < 23; ++i) subjects.push_back(subject_id(i));
  const auto folds = make_folds(subjects, 10, 77);
  ASSERT_EQ(folds.size(), 10u);
  std::multiset<std::string> all;
  for (const auto& f : folds) {
    EXPECT_GE(f.size(), 2u);
    all.insert(f.begin(), f.end());
  }
  EXPECT_EQ(all, std::multiset<std::string>(subjects.begin(), subjects.end()));
  EXPECT_EQ(make_folds(subjects, 10, 77), folds);
  EXPECT_NE(make_folds(subjects, 10, 78), folds);

  const auto ten = make_folds(std::vector<std::string>(subjects.begin(), subjects.begin() + 10), 10, 1);
  for (const auto& f : ten) EXPECT_EQ(f.size(), 1u);
  EXPECT_THROW(make_folds(std::vector<std::string>(subjects.begin(), subjects.begin() + 9), 10, 1),
               std::invalid_argument);
}

TEST(Folds, SlicesOfOneSubjectShareAFold) {
  DatasetManifest m;
  for (int i = 0; i < 40; ++i) {
    ManifestItem it;
    it.id = item_id(i);
    it.subject = subject_id(i / 4);
    m.items.push_back(it);
  }
  const auto folds = make_folds(m, 5, 3);
  for (const auto& f : folds) {
    const auto test = select_items(m, f, true);
    const auto train = select_items(m, f, false);
    EXPECT_EQ(test.size() + train.size(), 40u);
    std::set<std::string> test_subjects, train_subjects;
    for (auto i : test) test_subjects.insert(m.items[i].subject);
    for (auto i : train) train_subjects.insert(m.items[i].subject);
    for (const auto& s : test_subjects) EXPECT_EQ(train_subjects.count(s), 0u);
  }
}

TEST(Dataset, ManifestAndItemsRoundTrip) {
  const auto dir = scratch_dir("roundtrip");
  GenerateOptions o;
  o.count = 12;
  o.seed = 7;
  o.slices_per_subject = 1;
  const auto m = generate_dataset(dir, o);
  ASSERT_EQ(m.folds.size(), 10u);
  const auto back = read_manifest(dir / "manifest.json");
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(m));
  const auto ph = read_phantom(dir, back.items[3]);
  const auto ref = generate_item(o, 3);
  EXPECT_EQ(ph.brain_mask.values, ref.brain_mask.values);
  EXPECT_EQ(ph.misalignment, ref.misalignment);
  for (std::size_t i = 0; i < ref.mri_image.pixels.size(); ++i) {
    ASSERT_NEAR(ph.mri_image.pixels[i], ref.mri_image.pixels[i], 0.5 / 255.0 + 1e-6);
  }
  fs::remove_all(dir);
}

TEST(Dataset, EmptyDatasetHasValidManifest) {
  const auto dir = scratch_dir("empty");
  GenerateOptions o;
  const auto m = generate_dataset(dir, o);
  EXPECT_TRUE(m.items.empty());
  EXPECT_TRUE(read_manifest(dir / "manifest.json").items.empty());
  fs::remove_all(dir);
}

TEST(Dataset, UnreadableManifestReportsPath) {
  try {
    read_manifest("/nonexistent/manifest.json");
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/manifest.json"), std::string::npos);
  }
}

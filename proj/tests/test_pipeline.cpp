#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <set>
#include <stdexcept>

#include "regnet/pipeline.hpp"

using namespace regnet;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("regnet_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

/// Untrained desk models on disk; the chain only needs valid checkpoints.
struct ModelFiles {
  fs::path mri, msot, stn;
};

ModelFiles write_models(const fs::path& dir, Index size = 64) {
  auto mri = SegNetConfig::desk(Modality::mri), msot = SegNetConfig::desk(Modality::msot);
  mri.input_size = msot.input_size = size;
  auto stn = StnConfig::desk();
  stn.input_size = size;
  ModelFiles f{dir / "mri.rgnt", dir / "msot.rgnt", dir / "stn.rgnt"};
  save_segnet(f.mri, build_segnet(mri, 1));
  save_segnet(f.msot, build_segnet(msot, 2));
  save_stn(f.stn, build_stn(stn, 3));
  return f;
}

PairInput write_pair(const fs::path& dir, const std::string& id, std::uint64_t seed, Index size = 64) {
  const auto it = write_phantom(dir, id, "s", generate_phantom(seed, size));
  return {id, dir / it.mri_image, dir / it.msot_image, dir / it.mri_landmarks, dir / it.msot_landmarks};
}

std::set<std::string> keys_of(const nlohmann::json& j) {
  std::set<std::string> k;
  for (const auto& [key, v] : j.items()) k.insert(key);
  return k;
}

}  // namespace

TEST(ParallelMap, KeepsInputOrderForAnyJobCount) {
  for (int jobs : {1, 2, 5, 64}) {
    const auto out = parallel_map(17, jobs, [](std::size_t i) { return static_cast<int>(i * i); });
    ASSERT_EQ(out.size(), 17u);
    for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], static_cast<int>(i * i));
  }
  EXPECT_TRUE(parallel_map(0, 4, [](std::size_t i) { return i; }).empty());
}

TEST(ParallelMap, RethrowsLowestFailingIndex) {
  try {
    parallel_map(10, 4, [](std::size_t i) -> int {
      if (i == 3 || i == 7) throw std::runtime_error("item " + std::to_string(i));
      return 0;
    });
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_STREQ(e.what(), "item 3");
  }
}

TEST(Provenance, RunRecordHashesFilesWithRelativeOutputs) {
  const auto dir = fresh_dir("record");
  write_json(dir / "a.json", nlohmann::json{{"x", 1}});
  RunRecord r{"test", 5, {{"k", "v"}}, {dir / "a.json"}, {"a.json"}, {}};
  const auto j = read_json(write_run_record(dir, r));
  EXPECT_EQ(j.at("seed"), 5);
  EXPECT_EQ(j.at("inputs")[0].at("fnv1a64"), file_hash(dir / "a.json"));
  EXPECT_EQ(j.at("outputs")[0].at("path"), "a.json");
  EXPECT_EQ(j.at("outputs")[0].at("fnv1a64"), hex64(fnv1a64(read_file_bytes(dir / "a.json"))));
  r.known_hashes[dir / "a.json"] = "precomputed";
  EXPECT_EQ(read_json(write_run_record(dir, r)).at("inputs")[0].at("fnv1a64"), "precomputed");
}

TEST(Datasets, DataDirComesFromFlagThenEnvironment) {
  ::unsetenv(kDataDirEnv);
  EXPECT_THROW(resolve_data_dir(""), ConfigError);
  ::setenv(kDataDirEnv, "/env/data", 1);
  EXPECT_EQ(resolve_data_dir(""), fs::path("/env/data"));
  EXPECT_EQ(resolve_data_dir("/flag/data"), fs::path("/flag/data"));
  ::unsetenv(kDataDirEnv);
}

TEST(Datasets, InMemoryMatchesWrittenDataset) {
  const auto dir = fresh_dir("dataset");
  GenerateOptions o;
  o.count = 6;
  o.seed = 12;
  o.slices_per_subject = 2;
  o.folds = 3;
  const auto written = generate_dataset(dir, o);
  const auto memory = generate_in_memory(o);
  const auto loaded = load_dataset(dir);
  ASSERT_EQ(memory.manifest.items.size(), written.items.size());
  for (std::size_t i = 0; i < written.items.size(); ++i) {
    EXPECT_EQ(memory.manifest.items[i].id, written.items[i].id);
    EXPECT_EQ(memory.manifest.items[i].subject, written.items[i].subject);
    EXPECT_EQ(memory.manifest.items[i].seed, written.items[i].seed);
    EXPECT_EQ(memory.phantoms[i].brain_mask.values, loaded.phantoms[i].brain_mask.values);
  }
  EXPECT_EQ(loaded.manifest.folds.size(), 3u);
}

TEST(Overlay, BlendsOnlyWhereTheWarpedImageHasSignal) {
  Image mri(4, 4, 0.0f), warped(4, 4, 0.0f);
  mri.at(0, 0) = 1.0f;
  warped.at(3, 3) = 1.0f;
  const Mask none(4, 4);
  OverlayOptions o;
  o.alpha = 1.0;
  const auto rgb = render_overlay(mri, warped, none, o);
  ASSERT_EQ(rgb.size(), 48u);
  EXPECT_EQ(rgb[0], 255);
  EXPECT_EQ(rgb[1], 255);
  const std::size_t last = 3 * 15;
  const auto hot = warm_color(1.0);
  EXPECT_EQ(rgb[last], hot[0]);
  EXPECT_EQ(rgb[last + 2], hot[2]);
  o.alpha = 1.5;
  EXPECT_THROW(render_overlay(mri, warped, none, o), ConfigError);
  EXPECT_THROW(render_overlay(mri, Image(3, 4), none), DimensionError);
}

TEST(Overlay, ContourFollowsTheMaskBoundary) {
  Mask brain(5, 5);
  for (Index y = 1; y < 4; ++y) {
    for (Index x = 1; x < 4; ++x) brain.at(x, y) = 1;
  }
  const auto rgb = render_overlay(Image(5, 5, 0.5f), Image(5, 5), brain);
  auto is_contour = [&](Index x, Index y) {
    const std::size_t k = static_cast<std::size_t>(3 * (y * 5 + x));
    return rgb[k] == 0 && rgb[k + 1] == 255 && rgb[k + 2] == 255;
  };
  EXPECT_TRUE(is_contour(1, 1));
  EXPECT_TRUE(is_contour(3, 2));
  EXPECT_FALSE(is_contour(2, 2));
  EXPECT_FALSE(is_contour(0, 0));
}

TEST(Registration, ModelsMustAgreeOnVariantAndSize) {
  const auto dir = fresh_dir("models");
  const auto f = write_models(dir);
  EXPECT_NO_THROW(load_dl_models(f.mri, f.msot, f.stn));
  EXPECT_THROW(load_dl_models(f.msot, f.mri, f.stn), ConfigError);
  EXPECT_THROW(load_dl_models(f.mri, f.msot, f.mri), ConfigError);
  auto big = SegNetConfig::desk(Modality::mri);
  big.input_size = 128;
  save_segnet(dir / "mri128.rgnt", build_segnet(big, 1));
  EXPECT_THROW(load_dl_models(dir / "mri128.rgnt", f.msot, f.stn), ConfigError);
}

TEST(Registration, LoadedModelsMatchSavedParameters) {
  const auto dir = fresh_dir("reload");
  const auto f = write_models(dir);
  const auto m = load_dl_models(f.mri, f.msot, f.stn);
  const auto saved = build_stn(StnConfig::desk(), 3).named_parameters();
  const auto loaded = m.stn.named_parameters();
  for (std::size_t i = 0; i < saved.size(); ++i) {
    EXPECT_TRUE(std::equal(saved[i].second.data().begin(), saved[i].second.data().end(),
                           loaded[i].second.data().begin()));
  }
  EXPECT_EQ(m.hashes[2], file_hash(f.stn));
}

TEST(Registration, NetworkAndMiReportsShareOneSchema) {
  const auto dir = fresh_dir("schema");
  const auto f = write_models(dir);
  const auto pair = write_pair(dir, "p0", 31);
  const auto models = load_dl_models(f.mri, f.msot, f.stn);
  const auto dl = register_pair_dl(models, pair, dir / "dl");
  SearchConfig fast;
  fast.restarts = 1;
  fast.max_iters = 40;
  const auto mi = register_pair_mi(pair, dir / "mi", fast);

  auto schema_keys = [](nlohmann::json j) {
    j.erase("checkpoints");
    return keys_of(j);
  };
  EXPECT_EQ(schema_keys(dl.report), schema_keys(mi.report));
  EXPECT_TRUE(dl.report.at("mi_score").is_null());
  EXPECT_TRUE(dl.report.at("converged").is_null());
  EXPECT_FALSE(mi.report.at("mi_score").is_null());
  EXPECT_EQ(dl.report.at("schema"), kRegistrationSchema);

  for (const auto* r : {&dl, &mi}) {
    const auto j = read_json(r->report_path);
    EXPECT_EQ(j, r->report);
    for (const auto& [key, name] : j.at("outputs").items()) {
      EXPECT_TRUE(fs::exists(r->report_path.parent_path() / name.get<std::string>())) << key;
    }
    const auto tre = report_landmark_tre(j);
    ASSERT_EQ(tre.size(), static_cast<std::size_t>(kLandmarkCount));
    double sum = 0.0;
    for (std::size_t k = 0; k < tre.size(); ++k) {
      EXPECT_DOUBLE_EQ(tre[k].second, j.at("landmarks")[k].at("tre").get<double>());
      sum += tre[k].second;
    }
    EXPECT_NEAR(j.at("mean_tre").get<double>(), sum / static_cast<double>(tre.size()), 1e-12);
  }
  Index w = 0, h = 0;
  const auto overlay = detail::read_png_gray((dir / "dl" / "p0_warped.png").string(), w, h);
  EXPECT_EQ(w, 64);
  EXPECT_EQ(overlay.size(), 64u * 64u);
}

TEST(Registration, RepeatedRunsGiveTheSameMatrix) {
  const auto dir = fresh_dir("repeat");
  const auto f = write_models(dir);
  const auto models = load_dl_models(f.mri, f.msot, f.stn);
  std::vector<PairInput> pairs;
  for (int i = 0; i < 3; ++i) pairs.push_back(write_pair(dir, "p" + std::to_string(i), 40 + i));
  auto run = [&](int jobs, const std::string& out) {
    return parallel_map(pairs.size(), jobs, [&](std::size_t i) { return register_pair_dl(models, pairs[i], dir / out); });
  };
  const auto a = run(1, "a"), b = run(3, "b");
  for (std::size_t i = 0; i < pairs.size(); ++i) EXPECT_EQ(a[i].matrix.params(), b[i].matrix.params());
}

TEST(Registration, ImageSizeMustMatchCheckpoints) {
  const auto dir = fresh_dir("size");
  const auto f = write_models(dir);
  const auto models = load_dl_models(f.mri, f.msot, f.stn);
  const auto pair = write_pair(dir, "big", 5, 128);
  EXPECT_THROW(register_pair_dl(models, pair, dir), ConfigError);
}

TEST(Evaluation, ComparisonTableHasOneColumnPerLandmarkPlusMean) {
  const auto dir = fresh_dir("compare");
  std::vector<nlohmann::json> reports;
  for (int i = 0; i < 3; ++i) {
    const auto pair = write_pair(dir, "p" + std::to_string(i), 70 + i);
    reports.push_back(registration_report("dl", pair, 64, AffineMatrix::identity(), false, 0.1));
    reports.push_back(registration_report("mi", pair, 64, generate_phantom(70 + i, 64).misalignment, false, 0.2));
  }
  const auto c = compare_reports(reports);
  ASSERT_EQ(c.methods, (std::vector<std::string>{"dl", "mi"}));
  ASSERT_EQ(c.per_method[0].columns.size(), static_cast<std::size_t>(kLandmarkCount + 1));
  EXPECT_EQ(c.per_method[0].columns.back(), "Mean for each image");
  EXPECT_EQ(c.per_method[0].rows.size(), 3u);
  for (const auto& rep : c.per_method) {
    for (const auto& row : rep.rows) {
      double sum = 0.0;
      for (int k = 0; k < kLandmarkCount; ++k) sum += row.values[static_cast<std::size_t>(k)];
      EXPECT_NEAR(row.values.back(), sum / kLandmarkCount, 1e-12);
    }
  }
  // The exact misalignment puts every landmark on its partner.
  EXPECT_LT(c.comparison.rows[1].values.back(), 1e-9);
  EXPECT_GT(c.comparison.rows[0].values.back(), c.comparison.rows[1].values.back());
  EXPECT_THROW(compare_reports({nlohmann::json{{"schema", "other"}}}), ConfigError);
}

// regnet: phantom generation, training, registration and evaluation.
//
// Every subcommand writes its artifacts plus run.json into --out, prints the
// path of its main report on stdout and reports errors on stderr with a
// nonzero exit status.

#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "regnet/pipeline.hpp"

namespace fs = std::filesystem;
using namespace regnet;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;

struct ProfileArgs {
  std::string profile = "desk";
  std::string target;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<Index> size;
};

TrainProfile resolve_profile(const ProfileArgs& a, std::optional<TrainTarget> target) {
  TrainProfile p;
  if (a.profile == "desk" || a.profile == "paper") {
    if (!target) throw ConfigError("--target is required with the '" + a.profile + "' profile");
    p = a.profile == "desk" ? TrainProfile::desk(*target) : TrainProfile::paper(*target);
  } else {
    try {
      p = read_json(a.profile).get<TrainProfile>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("invalid profile '" + a.profile + "': " + e.what());
    }
    if (target && *target != p.target) {
      throw ConfigError("profile '" + a.profile + "' targets " + to_string(p.target) + ", not " + to_string(*target));
    }
  }
  if (a.seed) p.seed = *a.seed;
  if (a.epochs) p.epochs = *a.epochs;
  p.validate();
  return p;
}

void check_size(const ProfileArgs& a, Index actual, const std::string& what) {
  if (a.size && *a.size != actual) {
    throw ConfigError(what + " is " + std::to_string(actual) + " px but --size is " + std::to_string(*a.size));
  }
}

void add_profile_options(CLI::App* cmd, ProfileArgs& a) {
  cmd->add_option("--profile", a.profile, "desk, paper, or a profile JSON file")->capture_default_str();
  cmd->add_option("--target", a.target, "mri_seg, msot_seg or stn");
  cmd->add_option("--seed", a.seed, "overrides the profile seed");
  cmd->add_option("--epochs", a.epochs, "overrides the profile epoch count");
  cmd->add_option("--size", a.size, "expected image size; a mismatch is an error");
}

void log_epoch(const std::string& tag, const EpochRecord& r) {
  std::fprintf(stderr, "%s epoch %d train_loss %.6g val_loss %.6g val_metric %.6g\n", tag.c_str(), r.epoch,
               r.train_loss, r.val_loss, r.val_metric);
}

/// A_g per item: the MI estimate, or the phantom's exact misalignment.
std::vector<AffineMatrix> ground_truth(const LoadedDataset& ds, const std::string& source, std::uint64_t seed,
                                       int jobs, nlohmann::json& record) {
  if (source == "phantom") {
    std::vector<AffineMatrix> out;
    for (const auto& ph : ds.phantoms) out.push_back(ph.misalignment);
    record = {{"source", "phantom"}};
    return out;
  }
  if (source != "mi") throw ConfigError("--ground-truth must be 'mi' or 'phantom', got '" + source + "'");
  std::fprintf(stderr, "estimating A_g by mutual information for %zu pairs\n", ds.phantoms.size());
  const auto results = mi_ground_truth(ds, seed, jobs);
  record = {{"source", "mi"}, {"items", nlohmann::json::array()}};
  for (std::size_t i = 0; i < results.size(); ++i) {
    record["items"].push_back({{"id", ds.manifest.items[i].id},
                               {"matrix", results[i].matrix},
                               {"mi_score", results[i].mi_score},
                               {"converged", results[i].converged}});
  }
  return matrices_of(results);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ',');) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

std::vector<std::vector<std::string>> folds_for(const DatasetManifest& m, int k, std::uint64_t seed) {
  if (static_cast<int>(m.folds.size()) == k) return m.folds;
  return make_folds(m, k, seed);
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  int n = 0;
  Index size = 64;
  std::uint64_t seed = 0;
  int slices = 1;
  int folds = 10;
  std::string out;
};

fs::path cmd_generate(const GenerateArgs& a) {
  if (!valid_phantom_size(a.size)) throw ConfigError("--size must be 64, 128 or 256");
  GenerateOptions o;
  o.count = a.n;
  o.size = a.size;
  o.seed = a.seed;
  o.slices_per_subject = a.slices;
  o.folds = a.folds;
  const auto m = generate_dataset(a.out, o);
  RunRecord r{"generate", a.seed, {{"n", a.n}, {"size", a.size}, {"slices_per_subject", a.slices}, {"folds", a.folds}}, {}, {}, {}};
  r.outputs.push_back("manifest.json");
  for (const auto& it : m.items) {
    for (const auto* f : {&it.mri_image, &it.msot_image, &it.mri_mask, &it.msot_mask, &it.misalignment,
                          &it.mri_landmarks, &it.msot_landmarks}) {
      r.outputs.push_back(*f);
    }
  }
  write_run_record(a.out, r);
  return fs::path(a.out) / "manifest.json";
}

struct TrainArgs {
  ProfileArgs profile;
  std::string data;
  std::string out;
  std::string truth = "mi";
  int jobs = 1;
  int test_fold = 0;
  bool resume = false;
};

fs::path cmd_train(const TrainArgs& a) {
  std::optional<TrainTarget> target;
  if (!a.profile.target.empty()) target = train_target_from_string(a.profile.target);
  const auto p = resolve_profile(a.profile, target);
  const auto data = resolve_data_dir(a.data);
  auto ds = load_dataset(data);
  check_size(a.profile, ds.manifest.size, "dataset");
  if (a.test_fold > 0) {
    if (a.test_fold > static_cast<int>(ds.manifest.folds.size())) {
      throw ConfigError("--test-fold " + std::to_string(a.test_fold) + " but the manifest has " +
                        std::to_string(ds.manifest.folds.size()) + " folds");
    }
    const auto& held = ds.manifest.folds[static_cast<std::size_t>(a.test_fold - 1)];
    LoadedDataset kept{ds.dir, ds.manifest, {}};
    kept.manifest.items.clear();
    for (std::size_t i = 0; i < ds.phantoms.size(); ++i) {
      if (std::find(held.begin(), held.end(), ds.manifest.items[i].subject) != held.end()) continue;
      kept.manifest.items.push_back(ds.manifest.items[i]);
      kept.phantoms.push_back(ds.phantoms[i]);
    }
    ds = std::move(kept);
  }
  ensure_directory(a.out);
  const fs::path out(a.out);
  TrainOptions options;
  options.state_path = out / "state.rgnt";
  options.resume = a.resume;
  options.on_epoch = [&](const EpochRecord& r) { log_epoch(to_string(p.target), r); };

  RunRecord record{"train", p.seed, {{"profile", p}, {"test_fold", a.test_fold}}, {}, {}, {}};
  record.inputs.push_back(data / "manifest.json");
  nlohmann::json report{{"target", to_string(p.target)}, {"profile", p}, {"items", ds.phantoms.size()}};
  std::vector<EpochRecord> curve;
  if (p.target == TrainTarget::stn) {
    nlohmann::json truth;
    const auto items = stn_items(ds, ground_truth(ds, a.truth, p.seed, a.jobs, truth));
    write_json(out / "ground_truth.json", truth);
    record.outputs.push_back("ground_truth.json");
    if (stn_config_for(p).input_size != ds.manifest.size) {
      throw ConfigError("dataset is " + std::to_string(ds.manifest.size) + " px, the " + to_string(p.scale) +
                        " stn expects " + std::to_string(stn_config_for(p).input_size));
    }
    auto outcome = train_stn(p, items, options);
    save_stn(out / "model.rgnt", outcome.net, {{"profile", p}});
    curve = outcome.curve;
    report["best_epoch"] = outcome.best_epoch;
    report["refitted"] = outcome.refitted;
    report["ground_truth"] = a.truth;
    report["mse_term"] = "masks";
  } else {
    const auto items = seg_items(ds, p.target);
    if (segnet_config_for(p).input_size != ds.manifest.size) {
      throw ConfigError("dataset is " + std::to_string(ds.manifest.size) + " px, the " + to_string(p.scale) +
                        " segnet expects " + std::to_string(segnet_config_for(p).input_size));
    }
    auto outcome = train_segnet(p, items, options);
    save_segnet(out / "model.rgnt", outcome.net, {{"profile", p}});
    curve = outcome.curve;
    report["best_epoch"] = outcome.best_epoch;
    report["refitted"] = outcome.refitted;
  }
  report["curve"] = curve;
  write_loss_curve(out / "loss_curve.csv", curve);
  write_json(out / "profile.json", p);
  write_json(out / "train_report.json", report);
  for (const char* f : {"model.rgnt", "loss_curve.csv", "profile.json", "train_report.json"}) record.outputs.push_back(f);
  write_run_record(out, record);
  return out / "train_report.json";
}

struct CrossValidateArgs {
  ProfileArgs profile;
  std::string data;
  std::string out;
  std::string truth = "mi";
  int folds = 10;
  int jobs = 1;
};

fs::path cmd_cross_validate(const CrossValidateArgs& a) {
  const auto data = resolve_data_dir(a.data);
  const auto ds = load_dataset(data);
  check_size(a.profile, ds.manifest.size, "dataset");
  ensure_directory(a.out);
  const fs::path out(a.out);
  const bool both = a.profile.target == "seg";
  std::vector<TrainTarget> targets;
  if (both) {
    targets = {TrainTarget::mri_seg, TrainTarget::msot_seg};
  } else {
    if (a.profile.target.empty()) throw ConfigError("--target is required");
    targets = {train_target_from_string(a.profile.target)};
  }
  RunRecord record{"cross-validate", 0, {{"folds", a.folds}}, {}, {}, {}};
  record.inputs.push_back(data / "manifest.json");
  std::vector<std::string> columns;
  std::vector<std::vector<FoldResult>> runs;
  EvaluationReport table;
  for (auto t : targets) {
    const auto p = resolve_profile(a.profile, t);
    record.seed = p.seed;
    record.parameters["profile_" + to_string(t)] = p;
    const auto folds = folds_for(ds.manifest, a.folds, p.seed);
    if (t == TrainTarget::stn) {
      nlohmann::json truth;
      const auto items = stn_items(ds, ground_truth(ds, a.truth, p.seed, a.jobs, truth));
      write_json(out / "ground_truth.json", truth);
      record.outputs.push_back("ground_truth.json");
      runs.push_back(cross_validate_stn(p, items, folds));
      columns.push_back("STN");
    } else {
      runs.push_back(cross_validate_segnet(p, seg_items(ds, t), folds));
      columns.push_back(t == TrainTarget::mri_seg ? "MRI" : "MSOT");
    }
    for (std::size_t f = 0; f < runs.back().size(); ++f) {
      const auto name = "curve_" + to_string(t) + "_fold" + std::to_string(f + 1) + ".csv";
      write_loss_curve(out / name, runs.back()[f].curve);
      record.outputs.push_back(name);
    }
  }
  const bool stn = targets.front() == TrainTarget::stn;
  table = fold_table(stn ? "Cross validation target registration error" : "Cross validation Dice coefficient",
                     stn ? "px" : "", columns, runs);
  write_json(out / "cv_report.json", table);
  {
    std::ofstream os(out / "cv_report.txt");
    os << table.to_text();
    if (!os) throw IoError("cannot write '" + (out / "cv_report.txt").string() + "'");
  }
  record.outputs.push_back("cv_report.json");
  record.outputs.push_back("cv_report.txt");
  write_run_record(out, record);
  return out / "cv_report.json";
}

struct PairArgs {
  std::string mri, msot, mri_landmarks, msot_landmarks;
  std::string data;
  std::string items;
  int fold = 0;
};

void add_pair_options(CLI::App* cmd, PairArgs& a) {
  cmd->add_option("--mri", a.mri, "MRI image (PNG)");
  cmd->add_option("--msot", a.msot, "MSOT image (PNG)");
  cmd->add_option("--mri-landmarks", a.mri_landmarks, "MRI landmark JSON");
  cmd->add_option("--msot-landmarks", a.msot_landmarks, "MSOT landmark JSON");
  cmd->add_option("--data", a.data, "dataset directory for batch registration (default $REGNET_DATA_DIR)");
  cmd->add_option("--items", a.items, "comma-separated item ids to register");
  cmd->add_option("--fold", a.fold, "register the test subjects of this manifest fold (1-based)");
}

std::vector<PairInput> resolve_pairs(const PairArgs& a) {
  if (!a.mri.empty() || !a.msot.empty()) {
    if (a.mri.empty() || a.msot.empty()) throw ConfigError("--mri and --msot must be given together");
    return {{fs::path(a.msot).stem().string(), a.mri, a.msot, a.mri_landmarks, a.msot_landmarks}};
  }
  const auto dir = resolve_data_dir(a.data);
  const auto m = read_manifest(dir / "manifest.json");
  std::vector<std::string> ids = split_list(a.items);
  if (a.fold > 0) {
    if (a.fold > static_cast<int>(m.folds.size())) throw ConfigError("manifest has no fold " + std::to_string(a.fold));
    const auto& subjects = m.folds[static_cast<std::size_t>(a.fold - 1)];
    for (const auto& it : m.items) {
      if (std::find(subjects.begin(), subjects.end(), it.subject) != subjects.end()) ids.push_back(it.id);
    }
  }
  return pairs_from_manifest(dir, m, ids);
}

fs::path finish_registration(const fs::path& out, const std::string& command, std::uint64_t seed,
                             nlohmann::json parameters, const std::vector<PairInput>& pairs,
                             const std::vector<RegistrationOutput>& results, const DlModels* models = nullptr) {
  RunRecord record{command, seed, std::move(parameters), {}, {}, {}};
  if (models) {
    for (std::size_t k = 0; k < models->files.size(); ++k) {
      record.inputs.push_back(models->files[k]);
      record.known_hashes[models->files[k]] = models->hashes[k];
    }
  }
  nlohmann::json summary{{"reports", nlohmann::json::array()}};
  for (std::size_t i = 0; i < results.size(); ++i) {
    record.inputs.push_back(pairs[i].mri);
    record.inputs.push_back(pairs[i].msot);
    record.outputs.push_back(results[i].report_path.filename());
    for (const auto& [key, name] : results[i].report.at("outputs").items()) record.outputs.push_back(name.get<std::string>());
    summary["reports"].push_back(results[i].report_path.filename().string());
  }
  if (results.size() == 1) {
    write_run_record(out, record);
    return results.front().report_path;
  }
  write_json(out / "summary.json", summary);
  record.outputs.push_back("summary.json");
  write_run_record(out, record);
  return out / "summary.json";
}

struct RegisterArgs {
  PairArgs pair;
  std::string seg_mri, seg_msot, stn;
  std::string out;
  int jobs = 1;
  double alpha = 0.6;
  std::optional<Index> size;
};

fs::path cmd_register(const RegisterArgs& a) {
  const auto models = load_dl_models(a.seg_mri, a.seg_msot, a.stn);
  if (a.size && *a.size != models.input_size()) {
    throw ConfigError("checkpoints are " + std::to_string(models.input_size()) + " px but --size is " +
                      std::to_string(*a.size));
  }
  const auto pairs = resolve_pairs(a.pair);
  ensure_directory(a.out);
  OverlayOptions overlay;
  overlay.alpha = a.alpha;
  const auto results = parallel_map(pairs.size(), a.jobs,
                                    [&](std::size_t i) { return register_pair_dl(models, pairs[i], a.out, overlay); });
  return finish_registration(a.out, "register", 0, {{"overlay_alpha", a.alpha}, {"jobs", a.jobs}}, pairs, results,
                             &models);
}

struct RegisterMiArgs {
  PairArgs pair;
  std::string out;
  std::uint64_t seed = 0;
  int jobs = 1;
  double alpha = 0.6;
};

fs::path cmd_register_mi(const RegisterMiArgs& a) {
  const auto pairs = resolve_pairs(a.pair);
  ensure_directory(a.out);
  OverlayOptions overlay;
  overlay.alpha = a.alpha;
  const auto results = parallel_map(pairs.size(), a.jobs, [&](std::size_t i) {
    return register_pair_mi(pairs[i], a.out, mi_search_for(a.seed, pairs[i].id), overlay);
  });
  return finish_registration(a.out, "register-mi", a.seed, {{"overlay_alpha", a.alpha}, {"jobs", a.jobs}}, pairs,
                             results);
}

struct EvaluateArgs {
  std::vector<std::string> reports;
  std::string out;
};

fs::path cmd_evaluate(const EvaluateArgs& a) {
  std::vector<fs::path> files;
  for (const auto& r : a.reports) {
    if (fs::is_directory(r)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(r)) {
        if (e.path().filename().string().ends_with("_report.json")) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.emplace_back(r);
    }
  }
  if (files.empty()) throw ConfigError("evaluate: no registration reports found");
  std::vector<nlohmann::json> reports;
  for (const auto& f : files) reports.push_back(read_json(f));
  const auto table = compare_reports(reports);
  ensure_directory(a.out);
  const fs::path out(a.out);
  write_json(out / "evaluation.json", to_json(table));
  {
    std::ofstream os(out / "evaluation.txt");
    os << to_text(table);
    if (!os) throw IoError("cannot write '" + (out / "evaluation.txt").string() + "'");
  }
  RunRecord record{"evaluate", 0, nlohmann::json::object(), files, {"evaluation.json", "evaluation.txt"}, {}};
  write_run_record(out, record);
  return out / "evaluation.json";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"regnet: automated MSOT to MRI registration with segmentation and spatial transformer networks"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "write a phantom dataset and its manifest");
  generate->add_option("--n", gen.n, "number of phantoms")->required()->check(CLI::NonNegativeNumber);
  generate->add_option("--size", gen.size, "image size: 64, 128 or 256")->capture_default_str();
  generate->add_option("--seed", gen.seed, "dataset seed")->capture_default_str();
  generate->add_option("--slices-per-subject", gen.slices, "phantoms sharing one anatomy")->capture_default_str();
  generate->add_option("--folds", gen.folds, "cross-validation folds stored in the manifest")->capture_default_str();
  generate->add_option("--out", gen.out, "output directory")->required();

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train a segmentation network or the stn");
  add_profile_options(train, tr.profile);
  train->add_option("--data", tr.data, "dataset directory (default $REGNET_DATA_DIR)");
  train->add_option("--out", tr.out, "output directory")->required();
  train->add_option("--ground-truth", tr.truth, "stn supervision: mi or phantom")->capture_default_str();
  train->add_option("--jobs", tr.jobs, "threads for MI ground truth")->capture_default_str();
  train->add_option("--test-fold", tr.test_fold, "leave out the subjects of this manifest fold (1-based)");
  train->add_flag("--resume", tr.resume, "continue from state.rgnt in --out");

  CrossValidateArgs cv;
  auto* cross = app.add_subcommand("cross-validate", "k-fold cross-validation table");
  add_profile_options(cross, cv.profile);
  cross->add_option("--data", cv.data, "dataset directory (default $REGNET_DATA_DIR)");
  cross->add_option("--out", cv.out, "output directory")->required();
  cross->add_option("--folds", cv.folds, "number of folds")->capture_default_str();
  cross->add_option("--ground-truth", cv.truth, "stn supervision: mi or phantom")->capture_default_str();
  cross->add_option("--jobs", cv.jobs, "threads for MI ground truth")->capture_default_str();

  RegisterArgs reg;
  auto* registration = app.add_subcommand("register", "segment, register with the stn, warp and render");
  registration->add_option("--seg-mri", reg.seg_mri, "MRI segnet checkpoint")->required();
  registration->add_option("--seg-msot", reg.seg_msot, "MSOT segnet checkpoint")->required();
  registration->add_option("--stn", reg.stn, "stn checkpoint")->required();
  add_pair_options(registration, reg.pair);
  registration->add_option("--out", reg.out, "output directory")->required();
  registration->add_option("--jobs", reg.jobs, "pairs registered concurrently")->capture_default_str();
  registration->add_option("--overlay-alpha", reg.alpha, "MSOT layer opacity")->capture_default_str();
  registration->add_option("--size", reg.size, "expected image size; a mismatch is an error");

  RegisterMiArgs regmi;
  auto* registration_mi = app.add_subcommand("register-mi", "mutual-information baseline registration");
  add_pair_options(registration_mi, regmi.pair);
  registration_mi->add_option("--out", regmi.out, "output directory")->required();
  registration_mi->add_option("--seed", regmi.seed, "search seed")->capture_default_str();
  registration_mi->add_option("--jobs", regmi.jobs, "pairs registered concurrently")->capture_default_str();
  registration_mi->add_option("--overlay-alpha", regmi.alpha, "MSOT layer opacity")->capture_default_str();

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "TRE tables from registration reports");
  evaluate->add_option("--reports", ev.reports, "report files or directories")->required();
  evaluate->add_option("--out", ev.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    fs::path report;
    if (*generate) report = cmd_generate(gen);
    if (*train) report = cmd_train(tr);
    if (*cross) report = cmd_cross_validate(cv);
    if (*registration) report = cmd_register(reg);
    if (*registration_mi) report = cmd_register_mi(regmi);
    if (*evaluate) report = cmd_evaluate(ev);
    std::cout << report.string() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "regnet: configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "regnet: error: " << e.what() << '\n';
    return kExitFailure;
  }
}

#pragma once
// Workflow steps shared by the command-line tool and the acceptance suite:
// dataset loading, MI ground truth, the automated registration chain,
// overlay rendering, Table-2 style evaluation and run provenance.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "regnet/dataset.hpp"
#include "regnet/mi.hpp"
#include "regnet/trainer.hpp"

namespace regnet {

inline constexpr const char* kDataDirEnv = "REGNET_DATA_DIR";
inline constexpr const char* kRegistrationSchema = "regnet.registration/1";

// ---------------------------------------------------------------------------
// Concurrency

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results keep input
/// order; the exception of the lowest failing index is rethrown.
template <typename Fn>
auto parallel_map(std::size_t n, int jobs, Fn fn) -> std::vector<decltype(fn(std::size_t{}))> {
  using R = decltype(fn(std::size_t{}));
  std::vector<std::optional<R>> slots(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        slots[i].emplace(fn(i));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const auto threads = static_cast<std::size_t>(std::max(1, jobs));
  if (threads == 1 || n <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<R> out;
  out.reserve(n);
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

// ---------------------------------------------------------------------------
// Provenance

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_hash(const std::filesystem::path& path) {
  return hex64(fnv1a64(read_file_bytes(path)));
}

/// Machine-readable record of one command: parameters, seeds and the FNV-1a
/// hash of every input and output file. Output paths are stored relative to
/// the output directory so that identical runs give identical records.
struct RunRecord {
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::json parameters = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;  // relative to the output directory
  std::map<std::filesystem::path, std::string> known_hashes;  // inputs already hashed while loading
};

inline std::filesystem::path write_run_record(const std::filesystem::path& out_dir, const RunRecord& r) {
  nlohmann::json j{{"command", r.command}, {"seed", r.seed}, {"parameters", r.parameters}};
  j["inputs"] = nlohmann::json::array();
  for (const auto& p : r.inputs) {
    const auto known = r.known_hashes.find(p);
    j["inputs"].push_back({{"path", p.string()}, {"fnv1a64", known != r.known_hashes.end() ? known->second : file_hash(p)}});
  }
  j["outputs"] = nlohmann::json::array();
  for (const auto& p : r.outputs) {
    j["outputs"].push_back({{"path", p.generic_string()}, {"fnv1a64", file_hash(out_dir / p)}});
  }
  const auto path = out_dir / "run.json";
  write_json(path, j);
  return path;
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// Datasets

/// Explicit flag first, then REGNET_DATA_DIR.
inline std::filesystem::path resolve_data_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(kDataDirEnv); env != nullptr && *env != '\0') return env;
  throw ConfigError(std::string("no dataset given: pass --data or set ") + kDataDirEnv);
}

struct LoadedDataset {
  std::filesystem::path dir;
  DatasetManifest manifest;
  std::vector<Phantom> phantoms;  // manifest order
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
  LoadedDataset ds;
  ds.dir = dir;
  ds.manifest = read_manifest(dir / "manifest.json");
  for (const auto& it : ds.manifest.items) {
    auto ph = read_phantom(dir, it);
    if (ph.size != ds.manifest.size) {
      throw ConfigError("item '" + it.id + "' is " + std::to_string(ph.size) + " px, manifest says " +
                        std::to_string(ds.manifest.size));
    }
    ds.phantoms.push_back(std::move(ph));
  }
  return ds;
}

/// In-memory dataset with the same ids, subjects and seeds generate_dataset writes.
inline LoadedDataset generate_in_memory(const GenerateOptions& o) {
  LoadedDataset ds;
  ds.manifest.seed = o.seed;
  ds.manifest.size = o.size;
  for (int i = 0; i < o.count; ++i) {
    ManifestItem it;
    it.id = item_id(i);
    it.subject = subject_id(i / std::max(o.slices_per_subject, 1));
    ds.phantoms.push_back(generate_item(o, i));
    it.seed = ds.phantoms.back().seed;
    ds.manifest.items.push_back(it);
  }
  return ds;
}

inline std::vector<SegItem> seg_items(const LoadedDataset& ds, TrainTarget target) {
  std::vector<SegItem> out;
  for (std::size_t i = 0; i < ds.phantoms.size(); ++i) {
    const auto& it = ds.manifest.items[i];
    out.push_back(seg_item_from_phantom(ds.phantoms[i], target, it.id, it.subject));
  }
  return out;
}

/// `truths[i]` supervises item i.
inline std::vector<StnItem> stn_items(const LoadedDataset& ds, const std::vector<AffineMatrix>& truths) {
  if (truths.size() != ds.phantoms.size()) throw DimensionError("stn_items: one ground truth per item");
  std::vector<StnItem> out;
  for (std::size_t i = 0; i < ds.phantoms.size(); ++i) {
    const auto& it = ds.manifest.items[i];
    out.push_back(stn_item_from_phantom(ds.phantoms[i], truths[i], it.id, it.subject));
  }
  return out;
}

// ---------------------------------------------------------------------------
// MI ground truth

/// Registration search used for ground truth and the MI baseline. Each item
/// gets its own search seed derived from its id.
inline SearchConfig mi_search_for(std::uint64_t seed, const std::string& id) {
  SearchConfig c;
  c.seed = derive_seed(seed, fnv1a64(id));
  return c;
}

inline std::vector<MiResult> mi_ground_truth(const LoadedDataset& ds, std::uint64_t seed, int jobs) {
  return parallel_map(ds.phantoms.size(), jobs, [&](std::size_t i) {
    return register_mi(ds.phantoms[i].mri_image, ds.phantoms[i].msot_image,
                       mi_search_for(seed, ds.manifest.items[i].id));
  });
}

inline std::vector<AffineMatrix> matrices_of(const std::vector<MiResult>& results) {
  std::vector<AffineMatrix> out;
  for (const auto& r : results) out.push_back(r.matrix);
  return out;
}

// ---------------------------------------------------------------------------
// Overlay

struct OverlayOptions {
  double alpha = 0.6;  // opacity of the MSOT layer
  std::array<std::uint8_t, 3> contour{0, 255, 255};
};

/// Warm "hot" colormap: black, red, yellow, white.
inline std::array<std::uint8_t, 3> warm_color(double v) {
  auto ramp = [](double x) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); };
  return {ramp(3.0 * v), ramp(3.0 * v - 1.0), ramp(3.0 * v - 2.0)};
}

/// RGB bytes: grayscale MRI, the warped MSOT blended on top wherever it has
/// signal, and the MRI brain contour.
inline std::vector<std::uint8_t> render_overlay(const Image& mri, const Image& warped_msot, const Mask& brain,
                                                const OverlayOptions& o = {}) {
  if (!same_dimensions(mri, warped_msot) || mri.width != brain.width || mri.height != brain.height) {
    throw DimensionError("render_overlay: images and mask must share dimensions");
  }
  if (!(o.alpha >= 0.0 && o.alpha <= 1.0)) throw ConfigError("overlay alpha must lie in [0, 1]");
  const Image base = normalize_intensity(mri), top = normalize_intensity(warped_msot);
  const Index w = mri.width, h = mri.height;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(3 * w * h));
  auto inside = [&](Index x, Index y) { return x >= 0 && y >= 0 && x < w && y < h && brain.at(x, y) != 0; };
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const std::size_t k = static_cast<std::size_t>(3 * (y * w + x));
      const bool edge = inside(x, y) && (!inside(x - 1, y) || !inside(x + 1, y) || !inside(x, y - 1) || !inside(x, y + 1));
      if (edge) {
        for (int c = 0; c < 3; ++c) rgb[k + c] = o.contour[c];
        continue;
      }
      const double g = 255.0 * base.at(x, y);
      const double v = top.at(x, y);
      const auto warm = warm_color(v);
      const double a = warped_msot.at(x, y) > 0.0 ? o.alpha : 0.0;
      for (int c = 0; c < 3; ++c) rgb[k + c] = static_cast<std::uint8_t>(std::lround((1.0 - a) * g + a * warm[c]));
    }
  }
  return rgb;
}

// ---------------------------------------------------------------------------
// Registration chain

struct PairInput {
  std::string id;
  std::filesystem::path mri;
  std::filesystem::path msot;
  std::filesystem::path mri_landmarks;   // optional
  std::filesystem::path msot_landmarks;  // optional
};

inline std::vector<PairInput> pairs_from_manifest(const std::filesystem::path& dir, const DatasetManifest& m,
                                                  const std::vector<std::string>& ids = {}) {
  std::vector<PairInput> out;
  for (const auto& it : m.items) {
    if (!ids.empty() && std::find(ids.begin(), ids.end(), it.id) == ids.end()) continue;
    out.push_back({it.id, dir / it.mri_image, dir / it.msot_image, dir / it.mri_landmarks, dir / it.msot_landmarks});
  }
  for (const auto& id : ids) {
    if (std::none_of(out.begin(), out.end(), [&](const PairInput& p) { return p.id == id; })) {
      throw ConfigError("dataset has no item '" + id + "'");
    }
  }
  return out;
}

struct DlModels {
  SegNet mri;
  SegNet msot;
  Stn stn;
  std::vector<std::filesystem::path> files;  // mri, msot, stn
  std::vector<std::string> hashes;           // FNV-1a of each file

  Index input_size() const { return stn.config().input_size; }
};

inline DlModels load_dl_models(const std::filesystem::path& seg_mri, const std::filesystem::path& seg_msot,
                               const std::filesystem::path& stn) {
  DlModels m;
  m.files = {seg_mri, seg_msot, stn};
  // Each file is read once; the bytes serve both the checkpoint and its provenance hash.
  std::vector<Checkpoint> checkpoints;
  for (const auto& f : m.files) {
    std::string bytes;
    try {
      bytes = read_file_bytes(f);
    } catch (const IoError&) {
      throw IoError("cannot read checkpoint '" + f.string() + "'");
    }
    m.hashes.push_back(hex64(fnv1a64(bytes)));
    checkpoints.push_back(decode_checkpoint(bytes, f.string()));
  }
  m.mri = segnet_from_checkpoint(checkpoints[0], seg_mri);
  m.msot = segnet_from_checkpoint(checkpoints[1], seg_msot);
  m.stn = stn_from_checkpoint(checkpoints[2], stn);
  if (m.mri.config().variant != Modality::mri) throw ConfigError("'" + seg_mri.string() + "' is not an MRI segnet");
  if (m.msot.config().variant != Modality::msot) throw ConfigError("'" + seg_msot.string() + "' is not an MSOT segnet");
  const Index n = m.input_size();
  if (m.mri.config().input_size != n || m.msot.config().input_size != n) {
    throw ConfigError("checkpoint sizes disagree: segnets " + std::to_string(m.mri.config().input_size) + "/" +
                      std::to_string(m.msot.config().input_size) + " px, stn " + std::to_string(n) + " px");
  }
  return m;
}

/// Both methods emit this schema; the MI fields are null for the network.
inline nlohmann::json registration_report(const std::string& method, const PairInput& pair, Index size,
                                          const AffineMatrix& matrix, bool degenerate, double seconds) {
  nlohmann::json j;
  j["schema"] = kRegistrationSchema;
  j["method"] = method;
  j["pair"] = pair.id;
  j["size"] = size;
  j["inputs"] = {{"mri", pair.mri.string()},
                 {"msot", pair.msot.string()},
                 {"mri_landmarks", pair.mri_landmarks.empty() ? nlohmann::json(nullptr) : nlohmann::json(pair.mri_landmarks.string())},
                 {"msot_landmarks", pair.msot_landmarks.empty() ? nlohmann::json(nullptr) : nlohmann::json(pair.msot_landmarks.string())}};
  j["matrix"] = matrix;
  j["degenerate"] = degenerate;
  j["landmarks"] = nlohmann::json::array();
  j["mean_tre"] = nullptr;
  if (!pair.mri_landmarks.empty() && !pair.msot_landmarks.empty()) {
    const auto pairs = pair_landmarks(read_json(pair.msot_landmarks).get<std::vector<Landmark>>(),
                                      read_json(pair.mri_landmarks).get<std::vector<Landmark>>());
    const auto e = evaluate_registration(matrix, pairs);
    for (std::size_t k = 0; k < pairs.size(); ++k) j["landmarks"].push_back({{"id", pairs[k].id}, {"tre", e.tre[k]}});
    j["mean_tre"] = e.summary.mean;
  }
  j["wall_time_seconds"] = seconds;
  j["mi_score"] = nullptr;
  j["restarts_used"] = nullptr;
  j["converged"] = nullptr;
  j["outputs"] = nlohmann::json::object();
  return j;
}

struct RegistrationOutput {
  nlohmann::json report;
  std::filesystem::path report_path;
  AffineMatrix matrix;
};

namespace detail {

inline Image read_pair_image(const std::filesystem::path& path, Index expected) {
  Image img = read_image_png(path.string());
  if (expected > 0 && (img.width != expected || img.height != expected)) {
    throw ConfigError("'" + path.string() + "' is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                      " px, the checkpoints expect " + std::to_string(expected) + "x" + std::to_string(expected));
  }
  return img;
}

/// Writes matrix, warped image, overlay and report; returns the report path.
inline std::filesystem::path write_registration(const std::filesystem::path& out_dir, const std::string& id,
                                                nlohmann::json& report, const AffineMatrix& matrix,
                                                const Image& warped, const Image& mri, const Mask& brain,
                                                const OverlayOptions& overlay) {
  ensure_directory(out_dir);
  const std::string stem = id.empty() ? "pair" : id;
  const auto matrix_path = out_dir / (stem + "_matrix.json");
  const auto warped_path = out_dir / (stem + "_warped.png");
  const auto overlay_path = out_dir / (stem + "_overlay.png");
  const auto report_path = out_dir / (stem + "_report.json");
  write_json(matrix_path, matrix);
  write_png(warped_path.string(), warped);
  write_png_rgb(overlay_path.string(), mri.width, mri.height, render_overlay(mri, warped, brain, overlay));
  report["outputs"] = {{"matrix", matrix_path.filename().string()},
                       {"warped", warped_path.filename().string()},
                       {"overlay", overlay_path.filename().string()}};
  write_json(report_path, report);
  return report_path;
}

}  // namespace detail

/// Segments both images, feeds the masks to the stn, warps the MSOT image and
/// writes matrix, warped image, overlay and report. wall_time_seconds covers
/// reading the images through the warped result.
inline RegistrationOutput register_pair_dl(const DlModels& models, const PairInput& pair,
                                           const std::filesystem::path& out_dir, const OverlayOptions& overlay = {}) {
  const auto start = std::chrono::steady_clock::now();
  const Image mri = detail::read_pair_image(pair.mri, models.input_size());
  const Image msot = detail::read_pair_image(pair.msot, models.input_size());
  const auto mri_seg = segment(models.mri, mri);
  const auto msot_seg = segment(models.msot, msot);
  const auto reg = register_stn(models.stn, msot_seg.mask, mri_seg.mask, msot);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  RegistrationOutput out;
  out.matrix = reg.matrix;
  out.report = registration_report("dl", pair, mri.width, reg.matrix, reg.degenerate, seconds);
  out.report["checkpoints"] = nlohmann::json::array();
  for (std::size_t k = 0; k < models.files.size(); ++k) {
    out.report["checkpoints"].push_back({{"path", models.files[k].string()}, {"fnv1a64", models.hashes[k]}});
  }
  out.report_path = detail::write_registration(out_dir, pair.id, out.report, reg.matrix, reg.warped, mri, mri_seg.mask,
                                               overlay);
  return out;
}

/// MI baseline on the raw images. Without a segmentation the overlay has no
/// brain contour.
inline RegistrationOutput register_pair_mi(const PairInput& pair, const std::filesystem::path& out_dir,
                                           const SearchConfig& search, const OverlayOptions& overlay = {}) {
  const auto start = std::chrono::steady_clock::now();
  const Image mri = detail::read_pair_image(pair.mri, 0);
  const Image msot = detail::read_pair_image(pair.msot, mri.width);
  const auto r = register_mi(mri, msot, search);
  const Image warped = warp_image(msot, invert(r.matrix));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  RegistrationOutput out;
  out.matrix = r.matrix;
  out.report = registration_report("mi", pair, mri.width, r.matrix, false, seconds);
  out.report["mi_score"] = r.mi_score;
  out.report["restarts_used"] = r.restarts_used;
  out.report["converged"] = r.converged;
  out.report_path =
      detail::write_registration(out_dir, pair.id, out.report, r.matrix, warped, mri, Mask(mri.width, mri.height), overlay);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

/// Per-landmark TRE recomputed from a report's matrix and landmark files.
inline std::vector<std::pair<std::string, double>> report_landmark_tre(const nlohmann::json& report) {
  const auto& in = report.at("inputs");
  if (in.at("mri_landmarks").is_null() || in.at("msot_landmarks").is_null()) {
    throw ConfigError("report for pair '" + report.at("pair").get<std::string>() + "' has no landmark files");
  }
  const auto pairs = pair_landmarks(read_json(in.at("msot_landmarks").get<std::string>()).get<std::vector<Landmark>>(),
                                    read_json(in.at("mri_landmarks").get<std::string>()).get<std::vector<Landmark>>());
  const auto e = evaluate_registration(report.at("matrix").get<AffineMatrix>(), pairs);
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t k = 0; k < pairs.size(); ++k) out.emplace_back(pairs[k].id, e.tre[k]);
  return out;
}

struct TreComparison {
  std::vector<std::string> methods;          // first-seen order
  std::vector<EvaluationReport> per_method;  // one row per image
  EvaluationReport comparison;               // one row per method: mean over images
};

/// Table-2 shaped tables: columns Landmark 1..n plus the mean for each image.
inline TreComparison compare_reports(const std::vector<nlohmann::json>& reports) {
  TreComparison out;
  std::vector<std::string> landmark_ids;
  std::map<std::string, std::size_t> index;
  for (const auto& r : reports) {
    if (r.value("schema", "") != kRegistrationSchema) throw ConfigError("not a registration report");
    const auto method = r.at("method").get<std::string>();
    const auto tre = report_landmark_tre(r);
    if (landmark_ids.empty()) {
      for (const auto& [id, v] : tre) landmark_ids.push_back(id);
    }
    if (tre.size() != landmark_ids.size()) throw DimensionError("reports disagree on the landmark count");
    if (!index.count(method)) {
      index[method] = out.methods.size();
      out.methods.push_back(method);
      EvaluationReport rep;
      rep.title = "Target registration error, " + method;
      rep.unit = "px";
      for (const auto& id : landmark_ids) rep.columns.push_back("Landmark " + id);
      rep.columns.push_back("Mean for each image");
      out.per_method.push_back(rep);
    }
    std::vector<double> values;
    double sum = 0.0;
    for (const auto& [id, v] : tre) {
      values.push_back(v);
      sum += v;
    }
    values.push_back(sum / static_cast<double>(tre.size()));
    out.per_method[index[method]].add_row(r.at("pair").get<std::string>(), values);
  }
  out.comparison.title = "Target registration error by method";
  out.comparison.unit = "px";
  if (!out.per_method.empty()) out.comparison.columns = out.per_method.front().columns;
  for (std::size_t m = 0; m < out.methods.size(); ++m) {
    std::vector<double> means;
    for (const auto& s : out.per_method[m].summary()) means.push_back(s.mean);
    out.comparison.add_row(out.methods[m], means);
  }
  return out;
}

inline nlohmann::json to_json(const TreComparison& c) {
  nlohmann::json j{{"methods", c.methods}, {"comparison", c.comparison}};
  j["per_method"] = nlohmann::json::object();
  for (std::size_t m = 0; m < c.methods.size(); ++m) j["per_method"][c.methods[m]] = c.per_method[m];
  return j;
}

inline std::string to_text(const TreComparison& c) {
  std::string s;
  for (const auto& r : c.per_method) s += r.to_text() + "\n";
  return s + c.comparison.to_text();
}

}  // namespace regnet

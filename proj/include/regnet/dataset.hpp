#pragma once
// On-disk phantom datasets: a JSON manifest listing per-item files, plus
// subject-level cross-validation folds.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "regnet/phantom.hpp"

namespace regnet {

inline constexpr int kManifestVersion = 1;

struct ManifestItem {
  std::string id;
  std::string subject;
  std::uint64_t seed = 0;
  // Paths relative to the manifest directory.
  std::string mri_image;
  std::string msot_image;
  std::string mri_mask;
  std::string msot_mask;
  std::string misalignment;
  std::string mri_landmarks;
  std::string msot_landmarks;
};

struct DatasetManifest {
  int version = kManifestVersion;
  std::uint64_t seed = 0;
  Index size = 0;
  std::vector<ManifestItem> items;
  std::vector<std::vector<std::string>> folds;  // test subjects per fold

  std::vector<std::string> subjects() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& it : items) {
      if (seen.insert(it.subject).second) out.push_back(it.subject);
    }
    return out;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ManifestItem, id, subject, seed, mri_image, msot_image, mri_mask, msot_mask,
                                   misalignment, mri_landmarks, msot_landmarks)

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"version", m.version}, {"seed", m.seed},   {"size", m.size},
                     {"items", m.items},     {"folds", m.folds}};
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.version = j.at("version").get<int>();
  if (m.version != kManifestVersion) {
    throw std::runtime_error("manifest version " + std::to_string(m.version) + " is not supported");
  }
  m.seed = j.at("seed").get<std::uint64_t>();
  m.size = j.at("size").get<Index>();
  m.items = j.at("items").get<std::vector<ManifestItem>>();
  m.folds = j.value("folds", std::vector<std::vector<std::string>>{});
}

// ---------------------------------------------------------------------------
// Folds

/// Subject-level partition into k folds, deterministic under `seed`.
inline std::vector<std::vector<std::string>> make_folds(const std::vector<std::string>& subjects, int k,
                                                        std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("make_folds: k must be >= 1");
  if (static_cast<int>(subjects.size()) < k) {
    throw std::invalid_argument("make_folds: " + std::to_string(subjects.size()) + " subjects cannot fill " +
                                std::to_string(k) + " folds");
  }
  auto order = subjects;
  std::sort(order.begin(), order.end());
  Rng rng(derive_seed(seed, 0x666f6c64));
  std::shuffle(order.begin(), order.end(), rng.engine());
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < order.size(); ++i) folds[i % static_cast<std::size_t>(k)].push_back(order[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

inline std::vector<std::vector<std::string>> make_folds(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  return make_folds(manifest.subjects(), k, seed);
}

/// Item indices whose subject is (or is not) in `subjects`.
inline std::vector<std::size_t> select_items(const DatasetManifest& m, const std::vector<std::string>& subjects,
                                             bool inside) {
  const std::set<std::string> set(subjects.begin(), subjects.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.items.size(); ++i) {
    if ((set.count(m.items[i].subject) > 0) == inside) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Disk IO

namespace detail {

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read '" + path.string() + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace detail

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { detail::write_json_file(path, j); }
inline nlohmann::json read_json(const std::filesystem::path& path) { return detail::read_json_file(path); }

/// Writes one phantom's files into `dir` and returns its manifest entry.
inline ManifestItem write_phantom(const std::filesystem::path& dir, const std::string& id, const std::string& subject,
                                  const Phantom& ph) {
  ManifestItem it;
  it.id = id;
  it.subject = subject;
  it.seed = ph.seed;
  it.mri_image = id + "_mri.png";
  it.msot_image = id + "_msot.png";
  it.mri_mask = id + "_mri_mask.png";
  it.msot_mask = id + "_msot_mask.png";
  it.misalignment = id + "_misalignment.json";
  it.mri_landmarks = id + "_mri_landmarks.json";
  it.msot_landmarks = id + "_msot_landmarks.json";
  write_png((dir / it.mri_image).string(), ph.mri_image);
  write_png((dir / it.msot_image).string(), ph.msot_image);
  write_png((dir / it.mri_mask).string(), ph.brain_mask);
  write_png((dir / it.msot_mask).string(), ph.msot_mask);
  write_json(dir / it.misalignment, ph.misalignment);
  write_json(dir / it.mri_landmarks, ph.mri_landmarks);
  write_json(dir / it.msot_landmarks, ph.msot_landmarks);
  return it;
}

/// Loads an item back. Intensities carry 8-bit quantisation; seed and size
/// are taken from the manifest.
inline Phantom read_phantom(const std::filesystem::path& dir, const ManifestItem& it) {
  Phantom ph;
  ph.seed = it.seed;
  ph.mri_image = read_image_png((dir / it.mri_image).string());
  ph.msot_image = read_image_png((dir / it.msot_image).string());
  ph.brain_mask = read_mask_png((dir / it.mri_mask).string());
  ph.msot_mask = read_mask_png((dir / it.msot_mask).string());
  ph.size = ph.mri_image.width;
  ph.misalignment = read_json(dir / it.misalignment).get<AffineMatrix>();
  ph.mri_landmarks = read_json(dir / it.mri_landmarks).get<std::vector<Landmark>>();
  ph.msot_landmarks = read_json(dir / it.msot_landmarks).get<std::vector<Landmark>>();
  return ph;
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) { write_json(path, m); }

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  try {
    return read_json(path).get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("invalid manifest '" + path.string() + "': " + e.what());
  }
}

struct GenerateOptions {
  int count = 0;
  Index size = 64;
  std::uint64_t seed = 0;
  int slices_per_subject = 1;
  int folds = 10;
  PhantomOptions phantom;
};

/// Item i of subject s uses seed derive_seed(seed, i) and anatomy seed
/// derive_seed(seed, 1000000 + s).
inline Phantom generate_item(const GenerateOptions& o, int index) {
  PhantomOptions po = o.phantom;
  const int subject = index / std::max(o.slices_per_subject, 1);
  if (o.slices_per_subject > 1) po.anatomy_seed = derive_seed(o.seed, 1000000 + static_cast<std::uint64_t>(subject));
  return generate_phantom(derive_seed(o.seed, static_cast<std::uint64_t>(index)), o.size, po);
}

inline std::string item_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "item%04d", index);
  return buf;
}

inline std::string subject_id(int subject) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "subject%04d", subject);
  return buf;
}

/// Generates `count` phantoms into `dir` and writes manifest.json. Folds are
/// filled when there are at least as many subjects as folds.
inline DatasetManifest generate_dataset(const std::filesystem::path& dir, const GenerateOptions& o) {
  if (o.count < 0) throw std::invalid_argument("generate_dataset: negative count");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  DatasetManifest m;
  m.seed = o.seed;
  m.size = o.size;
  for (int i = 0; i < o.count; ++i) {
    const auto ph = generate_item(o, i);
    m.items.push_back(write_phantom(dir, item_id(i), subject_id(i / std::max(o.slices_per_subject, 1)), ph));
  }
  const auto subjects = m.subjects();
  if (o.folds > 0 && static_cast<int>(subjects.size()) >= o.folds) m.folds = make_folds(subjects, o.folds, o.seed);
  write_manifest(dir / "manifest.json", m);
  return m;
}

}  // namespace regnet

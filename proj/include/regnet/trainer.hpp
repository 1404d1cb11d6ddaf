#pragma once
// Training loops, model files and cross-validation for the segmentation and
// transformation networks.
//
// Every random choice of a run derives from profile.seed:
//   network initialisation  derive_seed(seed, kInitStream)
//   validation split        derive_seed(seed, kSplitStream)
//   epoch e shuffle         derive_seed(derive_seed(seed, kShuffleStream), e)
//   epoch e, item i augment derive_seed(derive_seed(seed, kAugmentStream + e), i)
// so a run resumed from a checkpoint after epoch e replays epochs e+1.. exactly.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "regnet/adam.hpp"
#include "regnet/checkpoint.hpp"
#include "regnet/dataset.hpp"
#include "regnet/metrics.hpp"
#include "regnet/phantom.hpp"
#include "regnet/segnet.hpp"
#include "regnet/stn.hpp"

namespace regnet {

enum class TrainTarget { mri_seg, msot_seg, stn };
enum class ProfileScale { paper, desk };

NLOHMANN_JSON_SERIALIZE_ENUM(TrainTarget, {{TrainTarget::mri_seg, "mri_seg"},
                                           {TrainTarget::msot_seg, "msot_seg"},
                                           {TrainTarget::stn, "stn"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ProfileScale, {{ProfileScale::paper, "paper"}, {ProfileScale::desk, "desk"}})

inline std::string to_string(TrainTarget t) { return nlohmann::json(t).get<std::string>(); }
inline std::string to_string(ProfileScale s) { return nlohmann::json(s).get<std::string>(); }

inline TrainTarget train_target_from_string(const std::string& s) {
  if (s == "mri_seg") return TrainTarget::mri_seg;
  if (s == "msot_seg") return TrainTarget::msot_seg;
  if (s == "stn") return TrainTarget::stn;
  throw ConfigError("unknown training target '" + s + "' (mri_seg, msot_seg, stn)");
}

inline ProfileScale profile_scale_from_string(const std::string& s) {
  if (s == "paper") return ProfileScale::paper;
  if (s == "desk") return ProfileScale::desk;
  throw ConfigError("unknown profile '" + s + "' (paper, desk)");
}

/// Geometric augmentation of a registration pair: the MSOT mask moves by Q,
/// the MRI mask by S, and the supervised point map becomes S * A_g * Q^-1.
struct PairAugmentOptions {
  double moving_rotation_deg = 10.0;
  double moving_min_scale = 0.92;
  double moving_max_scale = 1.08;
  double moving_shear = 0.03;
  double moving_translation_fraction = 3.0 / 64.0;
  double fixed_rotation_deg = 10.0;
  double fixed_min_scale = 0.95;
  double fixed_max_scale = 1.05;
  double fixed_translation_fraction = 2.0 / 64.0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PairAugmentOptions, moving_rotation_deg, moving_min_scale,
                                                moving_max_scale, moving_shear, moving_translation_fraction,
                                                fixed_rotation_deg, fixed_min_scale, fixed_max_scale,
                                                fixed_translation_fraction)

struct TrainProfile {
  TrainTarget target = TrainTarget::mri_seg;
  ProfileScale scale = ProfileScale::desk;
  double learning_rate = 1e-5;
  int batch_size = 16;
  int epochs = 1;
  double alpha = kDefaultTransformAlpha;  // stn only
  std::uint64_t seed = 0;
  int augment_variants = 3;               // per item and epoch, on top of the original
  double validation_fraction = 0.2;       // of training subjects
  bool refit = false;                     // retrain on train + validation for the best epoch count
  int patience = 0;                       // stop after this many epochs without improvement; 0 = never
  AugmentOptions augment;                 // segmentation targets
  PairAugmentOptions pair_augment;        // stn

  static TrainProfile paper(TrainTarget t) {
    TrainProfile p;
    p.target = t;
    p.scale = ProfileScale::paper;
    p.augment_variants = 7;
    switch (t) {
      case TrainTarget::mri_seg:
        p.learning_rate = 1e-5, p.batch_size = 128, p.epochs = 200;
        break;
      case TrainTarget::msot_seg:
        p.learning_rate = 5e-5, p.batch_size = 32, p.epochs = 5000;
        break;
      case TrainTarget::stn:
        p.learning_rate = 1e-6, p.batch_size = 128, p.epochs = 1000, p.refit = true;
        break;
    }
    return p;
  }

  /// Same learning rates and losses as the full-scale profiles; smaller batches,
  /// fewer epochs and (via the network configs) narrower networks.
  static TrainProfile desk(TrainTarget t) {
    TrainProfile p = paper(t);
    p.scale = ProfileScale::desk;
    p.refit = false;
    if (t == TrainTarget::stn) {
      p.batch_size = 16, p.epochs = 300, p.augment_variants = 4;
    } else {
      // Small batches give the unchanged learning rates enough Adam steps.
      p.batch_size = 2, p.epochs = t == TrainTarget::msot_seg ? 80 : 40, p.augment_variants = 1;
    }
    return p;
  }

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("profile: learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigError("profile: batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("profile: epochs must be >= 1");
    if (!(alpha >= 0.0)) throw ConfigError("profile: alpha must be >= 0");
    if (augment_variants < 0) throw ConfigError("profile: augment_variants must be >= 0");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      throw ConfigError("profile: validation_fraction must lie in [0, 1)");
    }
    if (patience < 0) throw ConfigError("profile: patience must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainProfile& p) {
  j = nlohmann::json{{"target", p.target},
                     {"scale", p.scale},
                     {"learning_rate", p.learning_rate},
                     {"batch_size", p.batch_size},
                     {"epochs", p.epochs},
                     {"alpha", p.alpha},
                     {"seed", p.seed},
                     {"augment_variants", p.augment_variants},
                     {"validation_fraction", p.validation_fraction},
                     {"refit", p.refit},
                     {"patience", p.patience},
                     {"augment",
                      {{"max_rotation_deg", p.augment.max_rotation_deg},
                       {"min_scale", p.augment.min_scale},
                       {"max_scale", p.augment.max_scale}}},
                     {"pair_augment", p.pair_augment}};
}

inline void from_json(const nlohmann::json& j, TrainProfile& p) {
  p = TrainProfile::desk(j.at("target").get<TrainTarget>());
  p.scale = j.value("scale", p.scale);
  p.learning_rate = j.value("learning_rate", p.learning_rate);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.epochs = j.value("epochs", p.epochs);
  p.alpha = j.value("alpha", p.alpha);
  p.seed = j.value("seed", p.seed);
  p.augment_variants = j.value("augment_variants", p.augment_variants);
  p.validation_fraction = j.value("validation_fraction", p.validation_fraction);
  p.refit = j.value("refit", p.refit);
  p.patience = j.value("patience", p.patience);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    p.augment.max_rotation_deg = a.value("max_rotation_deg", p.augment.max_rotation_deg);
    p.augment.min_scale = a.value("min_scale", p.augment.min_scale);
    p.augment.max_scale = a.value("max_scale", p.augment.max_scale);
  }
  if (j.contains("pair_augment")) p.pair_augment = j.at("pair_augment").get<PairAugmentOptions>();
}

inline std::uint64_t profile_hash(const TrainProfile& p) { return fnv1a64(nlohmann::json(p).dump()); }

inline SegNetConfig segnet_config_for(const TrainProfile& p) {
  const Modality m = p.target == TrainTarget::msot_seg ? Modality::msot : Modality::mri;
  return p.scale == ProfileScale::paper ? SegNetConfig::paper(m) : SegNetConfig::desk(m);
}

inline StnConfig stn_config_for(const TrainProfile& p) {
  return p.scale == ProfileScale::paper ? StnConfig::paper() : StnConfig::desk();
}

// ---------------------------------------------------------------------------
// Training data

struct SegItem {
  std::string id;
  std::string subject;
  Image image;
  Mask mask;
};

struct StnItem {
  std::string id;
  std::string subject;
  Mask msot;
  Mask mri;
  AffineMatrix truth;                    // A_g: pixel point map MSOT -> MRI
  std::vector<LandmarkPair> landmarks;   // optional, for evaluation
};

inline SegItem seg_item_from_phantom(const Phantom& ph, TrainTarget target, std::string id, std::string subject) {
  const bool msot = target == TrainTarget::msot_seg;
  return {std::move(id), std::move(subject), msot ? ph.msot_image : ph.mri_image, msot ? ph.msot_mask : ph.brain_mask};
}

/// `truth` is the supervision target, typically an MI estimate rather than
/// the phantom's exact misalignment.
inline StnItem stn_item_from_phantom(const Phantom& ph, const AffineMatrix& truth, std::string id,
                                     std::string subject) {
  return {std::move(id), std::move(subject), ph.msot_mask, ph.brain_mask, truth, ph.landmark_pairs()};
}

// ---------------------------------------------------------------------------
// Records and errors

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
  double val_metric = std::numeric_limits<double>::quiet_NaN();
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  j = nlohmann::json{{"epoch", r.epoch},
                     {"train_loss", num(r.train_loss)},
                     {"val_loss", num(r.val_loss)},
                     {"val_metric", num(r.val_metric)}};
}

inline void from_json(const nlohmann::json& j, EpochRecord& r) {
  auto num = [](const nlohmann::json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  r.epoch = j.at("epoch").get<int>();
  r.train_loss = num(j.at("train_loss"));
  r.val_loss = num(j.at("val_loss"));
  r.val_metric = num(j.at("val_metric"));
}

/// Writes epoch,train_loss,val_loss,val_metric with one row per epoch.
inline void write_loss_curve(const std::filesystem::path& path, const std::vector<EpochRecord>& curve) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << "epoch,train_loss,val_loss,val_metric\n";
  os.precision(9);
  for (const auto& r : curve) {
    os << r.epoch << ',' << r.train_loss << ',';
    if (std::isfinite(r.val_loss)) os << r.val_loss;
    os << ',';
    if (std::isfinite(r.val_metric)) os << r.val_metric;
    os << '\n';
  }
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class LeakageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct TrainOptions {
  /// Resumable state written after every epoch when set.
  std::filesystem::path state_path;
  /// Continue from state_path if it exists.
  bool resume = false;
  /// Stop after this many epochs in this call (< 0: run to completion).
  int max_epochs_this_call = -1;
  /// Called with the ids of every training batch.
  std::function<void(const std::vector<std::string>&)> on_batch;
  /// Called after every epoch.
  std::function<void(const EpochRecord&)> on_epoch;
};

template <typename Net>
struct TrainOutcome {
  Net net;  // best-on-validation parameters (refit parameters when refit ran)
  std::vector<EpochRecord> curve;
  int best_epoch = -1;
  double best_val_loss = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  bool finished = false;  // false when max_epochs_this_call stopped the run
  bool stopped_early = false;
  bool refitted = false;
};

// ---------------------------------------------------------------------------
// Generic loop

namespace detail {

inline constexpr std::uint64_t kInitStream = 0x696e6974;
inline constexpr std::uint64_t kSplitStream = 0x73706c6974;
inline constexpr std::uint64_t kShuffleStream = 0x73687566;
inline constexpr std::uint64_t kAugmentStream = 0x61756700000000;

/// Training subjects held out for validation, chosen by seed.
inline std::set<std::string> validation_subjects(std::vector<std::string> subjects, double fraction,
                                                 std::uint64_t seed) {
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  if (fraction <= 0.0 || subjects.size() < 2) return {};
  Rng rng(derive_seed(seed, kSplitStream));
  std::shuffle(subjects.begin(), subjects.end(), rng.engine());
  const auto n = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * subjects.size())), 1,
                                         subjects.size() - 1);
  return {subjects.begin(), subjects.begin() + static_cast<std::ptrdiff_t>(n)};
}

template <typename Item>
void split_train_validation(const std::vector<Item>& items, double fraction, std::uint64_t seed,
                            std::vector<Item>& train, std::vector<Item>& val) {
  std::vector<std::string> subjects;
  for (const auto& it : items) subjects.push_back(it.subject);
  const auto held = validation_subjects(subjects, fraction, seed);
  for (const auto& it : items) (held.count(it.subject) ? val : train).push_back(it);
}

inline std::vector<std::vector<float>> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& [name, t] : params) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

inline void restore(const std::vector<NamedTensor>& params, const std::vector<std::vector<float>>& values) {
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].second;
    std::copy(values[k].begin(), values[k].end(), t.mutable_data().begin());
  }
}

/// What the loop needs to know about a task.
template <typename Net, typename Item, typename Sample>
struct Task {
  std::function<Net()> build;
  /// Training samples of one epoch (originals plus augmentation).
  std::function<std::vector<Sample>(const std::vector<Item>&, int epoch)> expand;
  std::function<Tensor(const Net&, const std::vector<const Sample*>&)> loss;
  /// (mean loss, mean metric) over validation items.
  std::function<std::pair<double, double>(const Net&, const std::vector<Item>&)> validate;
  std::string kind;
  nlohmann::json config;
};

template <typename Net, typename Item, typename Sample>
TrainOutcome<Net> run_training(const TrainProfile& profile, const Task<Net, Item, Sample>& task,
                               const std::vector<Item>& train, const std::vector<Item>& val,
                               const TrainOptions& options, int fixed_epochs = -1) {
  TrainOutcome<Net> out;
  out.net = task.build();
  const auto named = out.net.named_parameters();
  BasicAdam<float> opt(tensors_of(named), AdamConfig{profile.learning_rate});
  const bool has_val = !val.empty();
  const int total_epochs = fixed_epochs > 0 ? fixed_epochs : profile.epochs;
  std::vector<std::vector<float>> best = snapshot(named);
  int start_epoch = 0;

  if (options.resume && !options.state_path.empty() && std::filesystem::exists(options.state_path)) {
    const auto c = load_checkpoint(options.state_path);
    if (c.metadata.at("profile_hash").get<std::uint64_t>() != profile_hash(profile)) {
      throw ConfigError("state '" + options.state_path.string() + "' was written by a different profile");
    }
    load_parameters(c, named);
    opt.set_state(load_adam_state(c, named));
    out.curve = c.metadata.at("curve").get<std::vector<EpochRecord>>();
    out.best_epoch = c.metadata.at("best_epoch").get<int>();
    out.best_val_loss = c.metadata.at("best_val_loss").get<double>();
    std::vector<NamedTensor> best_named;
    for (const auto& [name, t] : named) best_named.emplace_back("best." + name, Tensor(t.shape()));
    load_parameters(c, best_named);
    best = snapshot(best_named);
    start_epoch = static_cast<int>(out.curve.size());
  }

  auto save_state = [&]() {
    if (options.state_path.empty()) return;
    Checkpoint c;
    c.metadata = {{"kind", task.kind + "_training_state"},
                  {"config", task.config},
                  {"profile", profile},
                  {"profile_hash", profile_hash(profile)},
                  {"curve", out.curve},
                  {"best_epoch", out.best_epoch},
                  {"best_val_loss", out.best_val_loss}};
    store_parameters(c, named);
    for (std::size_t k = 0; k < named.size(); ++k) {
      c.tensors.push_back({"best." + named[k].first, named[k].second.shape(), best[k]});
    }
    store_adam_state(c, named, opt.state());
    save_checkpoint(options.state_path, c);
  };

  int ran = 0;
  for (int epoch = start_epoch; epoch < total_epochs; ++epoch) {
    if (options.max_epochs_this_call >= 0 && ran >= options.max_epochs_this_call) {
      out.epochs_run = epoch;
      return out;
    }
    const auto samples = task.expand(train, epoch);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(derive_seed(derive_seed(profile.seed, kShuffleStream), static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());

    double loss_sum = 0.0;
    std::size_t seen = 0;
    const auto batch = static_cast<std::size_t>(profile.batch_size);
    for (std::size_t b = 0; b < order.size(); b += batch) {
      std::vector<const Sample*> items;
      std::vector<std::string> ids;
      for (std::size_t i = b; i < std::min(order.size(), b + batch); ++i) {
        items.push_back(&samples[order[i]]);
        ids.push_back(samples[order[i]].id);
      }
      if (options.on_batch) options.on_batch(ids);
      opt.zero_grad();
      Tensor loss = task.loss(out.net, items);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        std::string list;
        for (const auto& id : ids) list += (list.empty() ? "" : ", ") + id;
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                               std::to_string(b / batch) + " [" + list + "], learning rate " +
                               std::to_string(profile.learning_rate));
      }
      loss.backward();
      opt.step();
      loss_sum += value * static_cast<double>(items.size());
      seen += items.size();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    if (has_val) std::tie(rec.val_loss, rec.val_metric) = task.validate(out.net, val);
    const double selection = has_val ? rec.val_loss : rec.train_loss;
    if (selection < out.best_val_loss || out.best_epoch < 0) {
      out.best_val_loss = selection;
      out.best_epoch = epoch;
      best = snapshot(named);
    }
    out.curve.push_back(rec);
    ++ran;
    save_state();
    if (options.on_epoch) options.on_epoch(rec);
    if (profile.patience > 0 && epoch - out.best_epoch >= profile.patience) {
      out.stopped_early = true;
      break;
    }
  }
  restore(named, best);
  out.epochs_run = static_cast<int>(out.curve.size());
  out.finished = true;
  return out;
}

/// Trains, then optionally refits on train + validation for best_epoch + 1 epochs.
template <typename Net, typename Item, typename Sample>
TrainOutcome<Net> train_with_selection(const TrainProfile& profile, const Task<Net, Item, Sample>& task,
                                       const std::vector<Item>& items, const TrainOptions& options) {
  profile.validate();
  if (items.empty()) throw std::invalid_argument("train: no training items");
  std::vector<Item> train, val;
  split_train_validation(items, profile.validation_fraction, profile.seed, train, val);
  auto out = run_training(profile, task, train, val, options);
  if (!out.finished || !profile.refit || val.empty()) return out;
  TrainOptions refit_options;
  refit_options.on_batch = options.on_batch;
  auto refit = run_training(profile, task, items, std::vector<Item>{}, refit_options, out.best_epoch + 1);
  out.net = refit.net;
  out.refitted = true;
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Segmentation

inline std::vector<SegItem> expand_seg_items(const std::vector<SegItem>& items, const TrainProfile& p, int epoch) {
  std::vector<SegItem> out;
  out.reserve(items.size() * static_cast<std::size_t>(p.augment_variants + 1));
  const std::uint64_t epoch_seed = derive_seed(p.seed, detail::kAugmentStream + static_cast<std::uint64_t>(epoch));
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (p.augment_variants == 0) {
      out.push_back(items[i]);
      continue;
    }
    for (auto& s : augment(items[i].image, items[i].mask, p.augment_variants, p.augment, derive_seed(epoch_seed, i))) {
      out.push_back({items[i].id, items[i].subject, std::move(s.image), std::move(s.mask)});
    }
  }
  return out;
}

inline Tensor segnet_batch_loss(const SegNet& net, const std::vector<const SegItem*>& batch) {
  std::vector<const Image*> images;
  std::vector<const Mask*> masks;
  for (const auto* it : batch) {
    images.push_back(&it->image);
    masks.push_back(&it->mask);
  }
  return bce_loss(net.forward(segnet_input(images)), masks_to_tensor(masks));
}

/// Dice of the thresholded prediction for every item.
inline std::vector<double> evaluate_segnet(const SegNet& net, const std::vector<SegItem>& items) {
  std::vector<double> out;
  for (const auto& it : items) out.push_back(dice(segment(net, it.image).mask, it.mask));
  return out;
}

inline detail::Task<SegNet, SegItem, SegItem> segnet_task(const TrainProfile& p) {
  detail::Task<SegNet, SegItem, SegItem> t;
  const auto config = segnet_config_for(p);
  t.build = [config, p] { return build_segnet(config, derive_seed(p.seed, detail::kInitStream)); };
  t.expand = [p](const std::vector<SegItem>& items, int epoch) { return expand_seg_items(items, p, epoch); };
  t.loss = segnet_batch_loss;
  t.validate = [](const SegNet& net, const std::vector<SegItem>& val) {
    NoGradGuard guard;
    double loss = 0.0;
    for (const auto& it : val) loss += segnet_batch_loss(net, {&it}).item();
    const auto d = evaluate_segnet(net, val);
    return std::make_pair(loss / static_cast<double>(val.size()),
                          std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size()));
  };
  t.kind = "segnet";
  t.config = config;
  return t;
}

/// Validation metric: mean Dice.
inline TrainOutcome<SegNet> train_segnet(const TrainProfile& profile, const std::vector<SegItem>& items,
                                         const TrainOptions& options = {}) {
  if (profile.target == TrainTarget::stn) throw ConfigError("train_segnet: profile targets the stn");
  return detail::train_with_selection(profile, segnet_task(profile), items, options);
}

// ---------------------------------------------------------------------------
// Transformation

struct StnSample {
  std::string id;
  Mask msot;
  Mask mri;
  AffineMatrix theta;  // normalized sampling theta of the supervised point map
};

inline StnSample augment_pair(const StnItem& it, const PairAugmentOptions& o, Rng& rng) {
  const Index n = it.msot.width;
  const auto centre = image_centre(n, it.msot.height);
  const double w = static_cast<double>(n);
  const AffineGeometry gq{rng.uniform(-o.moving_rotation_deg, o.moving_rotation_deg),
                          rng.uniform(o.moving_min_scale, o.moving_max_scale),
                          rng.uniform(o.moving_min_scale, o.moving_max_scale),
                          rng.uniform(-o.moving_shear, o.moving_shear),
                          w * rng.uniform(-o.moving_translation_fraction, o.moving_translation_fraction),
                          w * rng.uniform(-o.moving_translation_fraction, o.moving_translation_fraction)};
  const double s = rng.uniform(o.fixed_min_scale, o.fixed_max_scale);
  const AffineGeometry gs{rng.uniform(-o.fixed_rotation_deg, o.fixed_rotation_deg),
                          s,
                          s,
                          0.0,
                          w * rng.uniform(-o.fixed_translation_fraction, o.fixed_translation_fraction),
                          w * rng.uniform(-o.fixed_translation_fraction, o.fixed_translation_fraction)};
  const auto q = from_geometry(gq, centre), sm = from_geometry(gs, centre);
  return {it.id, warp_mask(it.msot, invert(q)), warp_mask(it.mri, invert(sm)),
          sampling_theta(compose(sm, compose(it.truth, invert(q))), n)};
}

inline std::vector<StnSample> expand_stn_items(const std::vector<StnItem>& items, const TrainProfile& p, int epoch) {
  std::vector<StnSample> out;
  out.reserve(items.size() * static_cast<std::size_t>(p.augment_variants + 1));
  const std::uint64_t epoch_seed = derive_seed(p.seed, detail::kAugmentStream + static_cast<std::uint64_t>(epoch));
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& it = items[i];
    out.push_back({it.id, it.msot, it.mri, sampling_theta(it.truth, it.msot.width)});
    Rng rng(derive_seed(epoch_seed, i));
    for (int k = 0; k < p.augment_variants; ++k) out.push_back(augment_pair(it, p.pair_augment, rng));
  }
  return out;
}

inline Tensor stn_batch_loss(const Stn& net, const std::vector<const StnSample*>& batch, double alpha) {
  std::vector<const Mask*> msot, mri;
  std::vector<AffineMatrix> thetas;
  for (const auto* s : batch) {
    msot.push_back(&s->msot);
    mri.push_back(&s->mri);
    thetas.push_back(s->theta);
  }
  const Tensor xm = masks_to_tensor(msot), xr = masks_to_tensor(mri), tg = thetas_to_tensor(thetas);
  Tensor target;
  {
    NoGradGuard guard;
    target = affine_grid_sample(xm, tg);
  }
  const auto out = net.forward(xm, xr);
  return transform_loss(out.theta, tg, out.warped, target, alpha);
}

/// Mean displacement in pixels between two point maps over a 5 x 5 grid
/// spanning the central 80% of the image.
inline double grid_displacement(const AffineMatrix& a, const AffineMatrix& b, Index width, Index height) {
  double sum = 0.0;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 5; ++j) {
      const Point2 p{(0.1 + 0.2 * i) * static_cast<double>(width - 1), (0.1 + 0.2 * j) * static_cast<double>(height - 1)};
      sum += tre(a.apply(p), b.apply(p));
    }
  }
  return sum / 25.0;
}

struct StnEvaluation {
  std::vector<double> tre;         // mean landmark TRE per item (empty landmarks: grid displacement to truth)
  std::vector<double> identity;    // the same for the identity transform
  std::vector<AffineMatrix> matrices;
  int degenerate = 0;
};

inline StnEvaluation evaluate_stn(const Stn& net, const std::vector<StnItem>& items) {
  StnEvaluation e;
  for (const auto& it : items) {
    const auto p = predict_stn(net, it.msot, it.mri);
    e.degenerate += p.degenerate;
    e.matrices.push_back(p.matrix);
    if (!it.landmarks.empty()) {
      e.tre.push_back(evaluate_registration(p.matrix, it.landmarks).summary.mean);
      e.identity.push_back(evaluate_registration(AffineMatrix::identity(), it.landmarks).summary.mean);
    } else {
      e.tre.push_back(grid_displacement(p.matrix, it.truth, it.msot.width, it.msot.height));
      e.identity.push_back(grid_displacement(AffineMatrix::identity(), it.truth, it.msot.width, it.msot.height));
    }
  }
  return e;
}

inline detail::Task<Stn, StnItem, StnSample> stn_task(const TrainProfile& p) {
  detail::Task<Stn, StnItem, StnSample> t;
  const auto config = stn_config_for(p);
  t.build = [config, p] { return build_stn(config, derive_seed(p.seed, detail::kInitStream)); };
  t.expand = [p](const std::vector<StnItem>& items, int epoch) { return expand_stn_items(items, p, epoch); };
  const double alpha = p.alpha;
  t.loss = [alpha](const Stn& net, const std::vector<const StnSample*>& b) { return stn_batch_loss(net, b, alpha); };
  t.validate = [alpha](const Stn& net, const std::vector<StnItem>& val) {
    NoGradGuard guard;
    double loss = 0.0, metric = 0.0;
    for (const auto& it : val) {
      const StnSample s{it.id, it.msot, it.mri, sampling_theta(it.truth, it.msot.width)};
      loss += stn_batch_loss(net, {&s}, alpha).item();
      metric += grid_displacement(predict_stn(net, it.msot, it.mri).matrix, it.truth, it.msot.width, it.msot.height);
    }
    const double n = static_cast<double>(val.size());
    return std::make_pair(loss / n, metric / n);
  };
  t.kind = "stn";
  t.config = config;
  return t;
}

/// Validation metric: mean grid displacement (px) against the supervised point map.
inline TrainOutcome<Stn> train_stn(const TrainProfile& profile, const std::vector<StnItem>& items,
                                   const TrainOptions& options = {}) {
  if (profile.target != TrainTarget::stn) throw ConfigError("train_stn: profile targets a segmentation network");
  for (const auto& it : items) {
    if (it.msot.width != stn_config_for(profile).input_size) {
      throw ConfigError("train_stn: item '" + it.id + "' is " + std::to_string(it.msot.width) +
                        " px, the profile's network expects " + std::to_string(stn_config_for(profile).input_size));
    }
  }
  return detail::train_with_selection(profile, stn_task(profile), items, options);
}

// ---------------------------------------------------------------------------
// Model files

struct ModelInfo {
  std::string kind;  // "segnet" or "stn"
  nlohmann::json config;
  nlohmann::json metadata;
};

template <typename Net>
void save_model(const std::filesystem::path& path, const Net& net, const std::string& kind,
                const nlohmann::json& extra = nlohmann::json::object()) {
  Checkpoint c;
  c.metadata = extra;
  c.metadata["kind"] = kind;
  c.metadata["config"] = net.config();
  store_parameters(c, net.named_parameters());
  save_checkpoint(path, c);
}

inline void save_segnet(const std::filesystem::path& path, const SegNet& net,
                        const nlohmann::json& extra = nlohmann::json::object()) {
  save_model(path, net, "segnet", extra);
}

inline void save_stn(const std::filesystem::path& path, const Stn& net,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  save_model(path, net, "stn", extra);
}

inline ModelInfo read_model_info(const Checkpoint& c, const std::filesystem::path& path) {
  ModelInfo info;
  info.metadata = c.metadata;
  if (!c.metadata.contains("kind") || !c.metadata.contains("config")) {
    throw CheckpointError("'" + path.string() + "' is not a model file (missing kind/config)");
  }
  info.kind = c.metadata.at("kind").get<std::string>();
  info.config = c.metadata.at("config");
  return info;
}

inline SegNet segnet_from_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto info = read_model_info(c, path);
  if (info.kind != "segnet") throw ConfigError("'" + path.string() + "' holds a " + info.kind + ", not a segnet");
  auto net = SegNet::uninitialized(info.config.get<SegNetConfig>());
  load_parameters(c, net.named_parameters());
  return net;
}

inline Stn stn_from_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const auto info = read_model_info(c, path);
  if (info.kind != "stn") throw ConfigError("'" + path.string() + "' holds a " + info.kind + ", not an stn");
  auto net = Stn::uninitialized(info.config.get<StnConfig>());
  load_parameters(c, net.named_parameters());
  return net;
}

inline SegNet load_segnet(const std::filesystem::path& path) { return segnet_from_checkpoint(load_checkpoint(path), path); }

inline Stn load_stn(const std::filesystem::path& path) { return stn_from_checkpoint(load_checkpoint(path), path); }

// ---------------------------------------------------------------------------
// Cross-validation

struct FoldResult {
  bool failed = false;
  std::string note;
  double value = 0.0;               // mean over the fold's test items
  std::vector<double> item_values;  // per test item
  std::vector<std::string> item_ids;
  std::vector<EpochRecord> curve;
};

namespace detail {

template <typename Item>
void check_no_leakage(const std::vector<Item>& test, const std::set<std::uint64_t>& trained) {
  for (const auto& it : test) {
    if (trained.count(fnv1a64(it.id))) throw LeakageError("test item '" + it.id + "' appeared in a training batch");
  }
}

template <typename Item, typename TrainFn, typename EvalFn>
std::vector<FoldResult> cross_validate_items(const std::vector<Item>& items,
                                             const std::vector<std::vector<std::string>>& folds, TrainFn train,
                                             EvalFn evaluate) {
  if (folds.empty()) throw std::invalid_argument("cross_validate: no folds");
  std::vector<FoldResult> out;
  for (const auto& fold : folds) {
    const std::set<std::string> test_subjects(fold.begin(), fold.end());
    std::vector<Item> train_items, test_items;
    for (const auto& it : items) (test_subjects.count(it.subject) ? test_items : train_items).push_back(it);
    FoldResult r;
    try {
      if (test_items.empty()) throw std::invalid_argument("fold has no test items");
      std::set<std::uint64_t> trained;
      TrainOptions options;
      options.on_batch = [&](const std::vector<std::string>& ids) {
        for (const auto& id : ids) trained.insert(fnv1a64(id));
      };
      auto outcome = train(train_items, options);
      check_no_leakage(test_items, trained);
      r.curve = outcome.curve;
      r.item_values = evaluate(outcome.net, test_items);
      for (const auto& it : test_items) r.item_ids.push_back(it.id);
      r.value = std::accumulate(r.item_values.begin(), r.item_values.end(), 0.0) /
                static_cast<double>(r.item_values.size());
    } catch (const LeakageError&) {
      throw;
    } catch (const std::exception& e) {
      r.failed = true;
      r.note = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace detail

/// Per fold: train on the other folds' subjects, report mean Dice on this fold.
inline std::vector<FoldResult> cross_validate_segnet(const TrainProfile& profile, const std::vector<SegItem>& items,
                                                     const std::vector<std::vector<std::string>>& folds) {
  return detail::cross_validate_items(
      items, folds,
      [&](const std::vector<SegItem>& train, const TrainOptions& o) { return train_segnet(profile, train, o); },
      [](const SegNet& net, const std::vector<SegItem>& test) { return evaluate_segnet(net, test); });
}

/// Per fold: train on the other folds' subjects, report mean landmark TRE on this fold.
inline std::vector<FoldResult> cross_validate_stn(const TrainProfile& profile, const std::vector<StnItem>& items,
                                                  const std::vector<std::vector<std::string>>& folds) {
  return detail::cross_validate_items(
      items, folds, [&](const std::vector<StnItem>& train, const TrainOptions& o) { return train_stn(profile, train, o); },
      [](const Stn& net, const std::vector<StnItem>& test) { return evaluate_stn(net, test).tre; });
}

/// One row per fold and one column per cross-validation run, with mean and
/// standard deviation rows added by the report itself.
inline EvaluationReport fold_table(const std::string& title, const std::string& unit,
                                   const std::vector<std::string>& columns,
                                   const std::vector<std::vector<FoldResult>>& runs) {
  if (runs.size() != columns.size()) throw DimensionError("fold_table: one column per run");
  EvaluationReport report;
  report.title = title;
  report.unit = unit;
  report.columns = columns;
  const std::size_t folds = runs.empty() ? 0 : runs.front().size();
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<double> values;
    std::string note;
    bool failed = false;
    for (const auto& run : runs) {
      const auto& r = run.at(f);
      failed = failed || r.failed;
      if (r.failed) note += (note.empty() ? "" : "; ") + r.note;
      values.push_back(r.value);
    }
    const std::string label = std::to_string(f + 1);
    if (failed) {
      report.add_failure(label, note);
    } else {
      report.add_row(label, values);
    }
  }
  return report;
}

}  // namespace regnet

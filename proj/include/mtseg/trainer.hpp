// Training, evaluation, gradient checking, and the ablation driver. All loops
// are single-threaded and fully seeded; identical inputs give byte-identical
// outputs.
#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>

#include "mtseg/checkpoint.hpp"
#include "mtseg/config.hpp"
#include "mtseg/dataset.hpp"
#include "mtseg/losses.hpp"
#include "mtseg/metrics.hpp"
#include "mtseg/model.hpp"
#include "mtseg/phantom.hpp"

namespace mtseg {

// ---------------------------------------------------------------------------
// data plumbing
// ---------------------------------------------------------------------------

struct LoadedData {
  std::vector<SliceSample> train, val, test;
};

inline std::vector<SliceSample> load_split_slices(const DatasetManifest& m,
                                                  const std::filesystem::path& base, Split split,
                                                  SlicePolicy policy) {
  std::vector<SliceSample> out;
  for (const auto& e : m.of_split(split)) {
    const auto dir = std::filesystem::path(e.path).is_absolute()
                         ? std::filesystem::path(e.path)
                         : base / e.path;
    Volume vol = read_volume(dir.string(), e.id);
    auto slices = extract_slices(vol, policy);
    out.insert(out.end(), std::make_move_iterator(slices.begin()),
               std::make_move_iterator(slices.end()));
  }
  return out;
}

inline LoadedData load_dataset(const RunConfig& rc) {
  if (rc.data.manifest.empty()) throw ConfigError("no dataset manifest configured");
  DatasetManifest m = load_manifest(rc.data.manifest);
  const auto base = std::filesystem::path(rc.data.manifest).parent_path();
  LoadedData d;
  d.train = load_split_slices(m, base, Split::Train, rc.data.train_slices);
  d.val = load_split_slices(m, base, Split::Val, rc.data.eval_slices);
  d.test = load_split_slices(m, base, Split::Test, rc.data.eval_slices);
  return d;
}

template <typename T>
std::array<Tensor<T>, 4> slice_inputs(const SliceSample& s) {
  std::array<Tensor<T>, 4> out;
  for (int m = 0; m < 4; ++m) {
    std::vector<T> v(s.channels[m].size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(s.channels[m][i]);
    out[m] = Tensor<T>({1, s.h, s.w}, std::move(v));
  }
  return out;
}

template <typename T>
std::array<Tensor<T>, 3> slice_targets(const SliceSample& s) {
  std::array<Tensor<T>, 3> out;
  for (int t = 0; t < 3; ++t) {
    std::vector<T> v(s.masks[t].v.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(s.masks[t].v[i]);
    out[t] = Tensor<T>({1, s.h, s.w}, std::move(v));
  }
  return out;
}

// Inference masks for one slice; optionally intersect the hierarchy
// (TC within WT, ET within TC).
template <typename T>
std::array<BinaryMask, 3> predict_masks(const Model<T>& model, const SliceSample& s,
                                        bool hierarchy) {
  auto fwd = model.forward(slice_inputs<T>(s));
  std::array<BinaryMask, 3> masks;
  for (int t = 0; t < 3; ++t) masks[t] = threshold_mask({s.h, s.w}, fwd.prob[t].values());
  if (hierarchy) {
    for (std::size_t i = 0; i < masks[0].v.size(); ++i) {
      masks[1].v[i] = masks[1].v[i] & masks[0].v[i];
      masks[2].v[i] = masks[2].v[i] & masks[1].v[i];
    }
  }
  return masks;
}

// ---------------------------------------------------------------------------
// evaluation reports
// ---------------------------------------------------------------------------

struct SampleMetricsRow {
  std::string subject;
  Index index = 0;
  std::array<double, 3> dice{};
  std::array<double, 3> hd95{};
  std::array<bool, 3> hd95_undefined{};
  std::array<double, 3> sens{};
};

struct MetricsReport {
  std::array<double, 3> dice{};   // region means, WT/TC/ET
  std::array<double, 3> hd95{};   // over defined samples only
  std::array<double, 3> sens{};
  std::array<Index, 3> hd95_undefined_count{};
  double dice_mean = 0.0, hd95_mean = 0.0, sens_mean = 0.0;
  std::vector<SampleMetricsRow> samples;
  std::string fingerprint;
  std::string conventions = empty_mask_conventions();
  bool volume_mode = false;

  void finalize();
};

inline void MetricsReport::finalize() {
  for (int t = 0; t < 3; ++t) {
    double dsum = 0, hsum = 0, ssum = 0;
    Index hdef = 0;
    for (const auto& r : samples) {
      dsum += r.dice[t];
      ssum += r.sens[t];
      if (!r.hd95_undefined[t]) {
        hsum += r.hd95[t];
        ++hdef;
      }
    }
    const auto n = static_cast<double>(samples.size());
    dice[t] = samples.empty() ? 0.0 : dsum / n;
    sens[t] = samples.empty() ? 0.0 : ssum / n;
    hd95[t] = hdef == 0 ? 0.0 : hsum / static_cast<double>(hdef);
    hd95_undefined_count[t] = static_cast<Index>(samples.size()) - hdef;
  }
  dice_mean = (dice[0] + dice[1] + dice[2]) / 3.0;
  hd95_mean = (hd95[0] + hd95[1] + hd95[2]) / 3.0;
  sens_mean = (sens[0] + sens[1] + sens[2]) / 3.0;
}

inline SampleMetricsRow score_sample(const std::string& subject, Index index,
                                     const std::array<BinaryMask, 3>& pred,
                                     const std::array<BinaryMask, 3>& target, bool hd95_pooled) {
  SampleMetricsRow row;
  row.subject = subject;
  row.index = index;
  for (int t = 0; t < 3; ++t) {
    row.dice[t] = dice_coef(pred[t], target[t]);
    row.sens[t] = sensitivity(pred[t], target[t]);
    const auto h = hd95(pred[t], target[t], hd95_pooled);
    row.hd95[t] = h.value;
    row.hd95_undefined[t] = h.undefined;
  }
  return row;
}

template <typename T>
MetricsReport evaluate_slices(const Model<T>& model, const std::vector<SliceSample>& slices,
                              const RunConfig& rc) {
  MetricsReport rep;
  rep.fingerprint = rc.fingerprint();
  if (!rc.data.volume_metrics) {
    for (const auto& s : slices) {
      auto pred = predict_masks(model, s, rc.hierarchy_postprocess);
      rep.samples.push_back(score_sample(s.subject, s.index, pred, s.masks, rc.hd95_pooled));
    }
  } else {
    rep.volume_mode = true;
    // stack per subject, in first-seen order
    std::vector<std::string> order;
    std::map<std::string, std::vector<const SliceSample*>> groups;
    for (const auto& s : slices) {
      if (!groups.count(s.subject)) order.push_back(s.subject);
      groups[s.subject].push_back(&s);
    }
    for (const auto& subject : order) {
      const auto& group = groups[subject];
      const Index d = static_cast<Index>(group.size());
      const Index h = group.front()->h, w = group.front()->w;
      std::array<std::vector<std::uint8_t>, 3> pv, tv;
      for (int t = 0; t < 3; ++t) {
        pv[t].reserve(static_cast<std::size_t>(d * h * w));
        tv[t].reserve(static_cast<std::size_t>(d * h * w));
      }
      for (const auto* s : group) {
        auto pred = predict_masks(model, *s, rc.hierarchy_postprocess);
        for (int t = 0; t < 3; ++t) {
          pv[t].insert(pv[t].end(), pred[t].v.begin(), pred[t].v.end());
          tv[t].insert(tv[t].end(), s->masks[t].v.begin(), s->masks[t].v.end());
        }
      }
      std::array<BinaryMask, 3> pred, target;
      for (int t = 0; t < 3; ++t) {
        pred[t] = BinaryMask({d, h, w}, std::move(pv[t]));
        target[t] = BinaryMask({d, h, w}, std::move(tv[t]));
      }
      rep.samples.push_back(score_sample(subject, 0, pred, target, rc.hd95_pooled));
    }
  }
  rep.finalize();
  return rep;
}

void write_report_json(const MetricsReport& rep, const std::string& path);
void write_report_csv(const MetricsReport& rep, const std::string& model_name,
                      const std::string& path);
void write_report_samples_csv(const MetricsReport& rep, const std::string& path);
void write_comparison_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows,
                          const std::string& path);

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct EpochRow {
  int epoch = 0;
  double loss = 0.0;
  std::array<double, 3> dice{};
};

struct TrainResult {
  std::vector<EpochRow> rows;
  int best_epoch = 0;
  double best_mean_dice = 0.0;
  std::string best_checkpoint, last_checkpoint, csv_path;
  bool dice_from_train_split = false;  // true when the val split was empty
  int steps_taken = 0;
};

template <typename T>
std::array<double, 3> mean_region_dice(const Model<T>& model,
                                       const std::vector<SliceSample>& slices, bool hierarchy) {
  std::array<double, 3> acc = {0, 0, 0};
  if (slices.empty()) return acc;
  for (const auto& s : slices) {
    auto pred = predict_masks(model, s, hierarchy);
    for (int t = 0; t < 3; ++t) acc[t] += dice_coef(pred[t], s.masks[t]);
  }
  for (auto& v : acc) v /= static_cast<double>(slices.size());
  return acc;
}

template <typename T>
TrainResult train_model(Model<T>& model, const LoadedData& data, const RunConfig& rc,
                        std::ostream& log) {
  if (data.train.empty()) throw InputError("training split has no slices");
  namespace fs = std::filesystem;
  fs::create_directories(rc.out_dir);

  const auto& eval_slices = data.val.empty() ? data.train : data.val;
  TrainResult result;
  result.dice_from_train_split = data.val.empty();
  if (result.dice_from_train_split)
    log << "note: empty val split, epoch dice computed on the training split\n";

  Rng shuffle_rng(Rng::mix_stream(rc.seed, 0x0d0d));
  const int batch = std::max(1, rc.optim.batch_size);
  std::vector<Index> order(data.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);

  std::vector<T> best_values;
  double best_dice = -1.0;
  int best_epoch = 0;
  int steps = 0;
  bool step_cap_hit = false;

  const std::string csv_path = (fs::path(rc.out_dir) / "train_log.csv").string();
  std::ofstream csv(csv_path);
  if (!csv) throw InputError(str_cat("cannot write ", csv_path));
  csv << "epoch,loss,dice_wt,dice_tc,dice_et\n";

  auto snapshot = [&] {
    best_values.clear();
    for (const auto& p : model.params().all())
      best_values.insert(best_values.end(), p.values().begin(), p.values().end());
  };
  auto restore = [&](std::vector<T>& vals) {
    std::size_t off = 0;
    for (auto& p : model.params().all()) {
      std::copy(vals.begin() + static_cast<std::ptrdiff_t>(off),
                vals.begin() + static_cast<std::ptrdiff_t>(off + p.values().size()),
                p.values().begin());
      off += p.values().size();
    }
  };

  for (int epoch = 1; epoch <= rc.optim.epochs && !step_cap_hit; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch));
      Tape<T> tape;
      double batch_loss;
      {
        typename Tape<T>::Scope scope(tape);
        Tensor<T> total;
        for (std::size_t i = start; i < stop; ++i) {
          const auto& s = data.train[static_cast<std::size_t>(order[i])];
          auto fwd = model.forward(slice_inputs<T>(s));
          auto loss = training_loss(fwd.prob, slice_targets<T>(s));
          total = i == start ? loss : add(total, loss);
        }
        auto mean = mul_scalar(total, 1.0 / static_cast<double>(stop - start));
        batch_loss = static_cast<double>(mean.item());
        backward(mean, tape);
      }
      sgd_step(model.params(), rc.optim.lr);
      model.params().zero_grads();
      tape.clear();
      loss_sum += batch_loss;
      ++batches;
      ++steps;
      if (rc.optim.max_steps > 0 && steps >= rc.optim.max_steps) {
        step_cap_hit = true;
        break;
      }
    }

    EpochRow row;
    row.epoch = epoch;
    row.loss = loss_sum / std::max(1, batches);
    row.dice = mean_region_dice(model, eval_slices, rc.hierarchy_postprocess);
    result.rows.push_back(row);
    csv << epoch << "," << row.loss << "," << row.dice[0] << "," << row.dice[1] << ","
        << row.dice[2] << "\n";
    log << "epoch " << epoch << " loss " << row.loss << " dice " << row.dice[0] << "/"
        << row.dice[1] << "/" << row.dice[2] << "\n";

    const double mean_dice = (row.dice[0] + row.dice[1] + row.dice[2]) / 3.0;
    if (mean_dice > best_dice) {
      best_dice = mean_dice;
      best_epoch = epoch;
      snapshot();
    }
  }

  result.steps_taken = steps;
  result.best_epoch = best_epoch;
  result.best_mean_dice = best_dice;

  const std::string fingerprint = rc.fingerprint();
  result.last_checkpoint = (fs::path(rc.out_dir) / "last.ckpt").string();
  save_checkpoint(result.last_checkpoint, model.params(), fingerprint);

  if (!best_values.empty()) {
    std::vector<T> last_values;
    for (const auto& p : model.params().all())
      last_values.insert(last_values.end(), p.values().begin(), p.values().end());
    restore(best_values);
    result.best_checkpoint = (fs::path(rc.out_dir) / "best.ckpt").string();
    save_checkpoint(result.best_checkpoint, model.params(), fingerprint);
    restore(last_values);
  }

  if (!result.rows.empty()) {
    // final row: the best-validation epoch
    const auto& b = result.rows[static_cast<std::size_t>(best_epoch - 1)];
    csv << "best," << b.loss << "," << b.dice[0] << "," << b.dice[1] << "," << b.dice[2] << "\n";
  }
  result.csv_path = csv_path;
  return result;
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

struct GradCheckRow {
  std::string param;
  Index index = 0;
  double analytic = 0.0, fd = 0.0, rel_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double max_rel_err = 0.0;  // over rows where the difference quotient is informative
  bool pass = true;
  double tol = 1e-4;
  double fd_noise_floor = 0.0;  // absolute uncertainty of one difference quotient
};

// Optional test seam: rewrite the analytic gradient before comparison, which
// behaves exactly like a wrong backward rule for the named parameter.
using AnalyticOverride = std::function<double(const std::string& id, Index index, double g)>;

inline GradCheckReport gradcheck_model(Model<double>& model, const SliceSample& sample,
                                       int n_params, std::uint64_t seed, double tol = 1e-4,
                                       double h = 1e-4,
                                       const AnalyticOverride& override_fn = nullptr) {
  const auto inputs = slice_inputs<double>(sample);
  const auto targets = slice_targets<double>(sample);
  auto loss_value = [&]() {
    auto fwd = model.forward(inputs);
    return total_loss(fwd.prob, targets).item();
  };

  model.params().zero_grads();
  double loss_scale = 0.0;
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    auto fwd = model.forward(inputs);
    auto loss = total_loss(fwd.prob, targets);
    loss_scale = std::fabs(loss.item());
    backward(loss, tape);
  }
  tape.clear();

  // group parameters by module so every part of the network is sampled
  auto group_of = [](const std::string& id) {
    const auto dot = id.find('.');
    std::string head = dot == std::string::npos ? id : id.substr(0, dot);
    if (head == "enc" || head == "dec") {
      const auto dot2 = id.find('.', dot + 1);
      return id.substr(0, dot2 == std::string::npos ? id.size() : dot2);
    }
    return head;
  };
  std::vector<std::string> group_order;
  std::map<std::string, std::vector<const Parameter<double>*>> groups;
  for (const auto& p : model.params().all()) {
    const auto g = group_of(p.id());
    if (!groups.count(g)) group_order.push_back(g);
    groups[g].push_back(&p);
  }

  Rng rng(Rng::mix_stream(seed, 0x6c6c));
  GradCheckReport report;
  report.tol = tol;
  // rounding in the two forward passes bounds what a difference quotient can
  // resolve; differences below this floor carry no signal about the backward
  // rule
  report.fd_noise_floor =
      8.0 * std::numeric_limits<double>::epsilon() * std::max(loss_scale, 1.0) / h;
  for (int i = 0; i < n_params; ++i) {
    const auto& gname = group_order[static_cast<std::size_t>(i) % group_order.size()];
    const auto& plist = groups[gname];
    const auto* p = plist[static_cast<std::size_t>(rng.below(static_cast<Index>(plist.size())))];
    const Index idx = rng.below(p->numel());

    auto* mp = model.params().find(p->id());
    const double keep = mp->values()[idx];
    mp->values()[idx] = keep + h;
    const double up = loss_value();
    mp->values()[idx] = keep - h;
    const double dn = loss_value();
    mp->values()[idx] = keep;

    GradCheckRow row;
    row.param = p->id();
    row.index = idx;
    row.fd = (up - dn) / (2.0 * h);
    row.analytic = mp->grad()[idx];
    if (override_fn) row.analytic = override_fn(row.param, idx, row.analytic);
    const double denom = std::max(std::fabs(row.fd), std::fabs(row.analytic));
    const double abs_err = std::fabs(row.fd - row.analytic);
    row.rel_err = denom < 1e-12 ? 0.0 : abs_err / denom;
    row.pass = row.rel_err < tol || abs_err <= report.fd_noise_floor;
    if (abs_err > report.fd_noise_floor)
      report.max_rel_err = std::max(report.max_rel_err, row.rel_err);
    report.pass = report.pass && row.pass;
    report.rows.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// harness drivers
// ---------------------------------------------------------------------------

// Generates `count` phantoms (per-subject seeds derived from the spec seed),
// writes them in the native format, and emits a manifest with the 8:1:1
// split. Returns the manifest path.
inline std::string synthesize_dataset(const PhantomSpec& spec, int count,
                                      const std::string& out_dir, std::ostream& log) {
  namespace fs = std::filesystem;
  if (count < 0) throw ConfigError("synth: count must be >= 0");
  fs::create_directories(out_dir);
  std::vector<std::string> ids, paths;
  for (int i = 0; i < count; ++i) {
    PhantomSpec subject_spec = spec;
    subject_spec.seed = Rng::mix_stream(spec.seed, static_cast<std::uint64_t>(i));
    char name[32];
    std::snprintf(name, sizeof(name), "phantom_%04d", i);
    Volume vol = generate_phantom(subject_spec, name);
    write_volume(vol, (fs::path(out_dir) / name).string());
    ids.push_back(name);
    paths.push_back(name);  // relative to the manifest
  }
  std::vector<std::string> warnings;
  DatasetManifest manifest = split_dataset(ids, paths, spec.seed, &warnings);
  for (const auto& w : warnings) log << "warning: " << w << "\n";
  if (count == 0) log << "warning: empty dataset requested\n";
  const std::string manifest_path = (fs::path(out_dir) / "manifest.json").string();
  save_manifest(manifest, manifest_path);
  return manifest_path;
}

// Stable identity of a data split: subject ids and their split tags.
inline std::string split_fingerprint(const DatasetManifest& m) {
  std::string acc;
  for (const auto& e : m.entries) acc += e.id + ":" + split_name(e.split) + ";";
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(acc)));
  return buf;
}

template <typename T>
MetricsReport run_eval(const RunConfig& rc, const std::string& checkpoint_path, Split split,
                       std::ostream& log) {
  namespace fs = std::filesystem;
  Model<T> model(rc.model, rc.seed);
  const std::string ckpt_fp = load_checkpoint(checkpoint_path, model.params());
  log << "loaded checkpoint " << checkpoint_path << " (fingerprint " << ckpt_fp << ")\n";

  DatasetManifest m = load_manifest(rc.data.manifest);
  const auto base = fs::path(rc.data.manifest).parent_path();
  auto slices = load_split_slices(m, base, split, rc.data.eval_slices);
  if (slices.empty())
    throw InputError(str_cat("split '", split_name(split), "' has zero samples"));

  auto rep = evaluate_slices(model, slices, rc);
  fs::create_directories(rc.out_dir);
  write_report_json(rep, (fs::path(rc.out_dir) / "report.json").string());
  write_report_csv(rep, ablation_name(rc.ablation), (fs::path(rc.out_dir) / "report.csv").string());
  write_report_samples_csv(rep, (fs::path(rc.out_dir) / "report_samples.csv").string());
  return rep;
}

struct AblateOutcome {
  std::vector<std::pair<std::string, MetricsReport>> rows;  // variant name -> test metrics
  std::vector<TrainResult> training;
  std::string csv_path;
  std::string split_fp;
};

// Trains the full model and the three derived variants under one seed and
// data split, then compares them on the test split.
template <typename T>
AblateOutcome run_ablation(const RunConfig& base, std::ostream& log) {
  namespace fs = std::filesystem;
  AblateOutcome out;
  DatasetManifest manifest = load_manifest(base.data.manifest);
  out.split_fp = split_fingerprint(manifest);
  log << "data split fingerprint " << out.split_fp << "\n";

  const std::array<Ablation, 4> variants = {Ablation::None, Ablation::MtAff, Ablation::MtTsfi,
                                            Ablation::MtFe};
  for (Ablation v : variants) {
    RunConfig rc = base;
    rc.ablation = v;
    rc.apply_ablation();
    const std::string name = v == Ablation::None ? "full" : ablation_name(v);
    rc.out_dir = (fs::path(base.out_dir) / name).string();
    log << "== variant " << name << "\n";

    LoadedData data = load_dataset(rc);
    Model<T> model(rc.model, rc.seed);
    auto tr = train_model(model, data, rc, log);
    if (!tr.best_checkpoint.empty()) load_checkpoint(tr.best_checkpoint, model.params());
    const auto& test_slices = data.test.empty() ? data.val : data.test;
    if (test_slices.empty()) throw InputError("ablation: no held-out slices to compare on");
    auto rep = evaluate_slices(model, test_slices, rc);
    out.rows.emplace_back(name, std::move(rep));
    out.training.push_back(std::move(tr));
  }

  fs::create_directories(base.out_dir);
  out.csv_path = (fs::path(base.out_dir) / "ablation.csv").string();
  write_comparison_csv(out.rows, out.csv_path);
  return out;
}

}  // namespace mtseg

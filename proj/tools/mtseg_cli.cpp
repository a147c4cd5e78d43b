// Command-line entry point: synth, train, eval, gradcheck, ablate.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "mtseg/trainer.hpp"

namespace {

using namespace mtseg;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> precision;
  std::optional<std::string> ablate;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "JSON run configuration");
  cmd->add_option("--seed", f.seed, "override the run seed");
  cmd->add_option("--out", f.out_dir, "output directory");
  cmd->add_option("--precision", f.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  cmd->add_option("--ablate", f.ablate, "ablation variant")
      ->check(CLI::IsMember({"mt-aff", "mt-tsfi", "mt-fe"}));
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig rc = f.config_path.empty() ? RunConfig{} : load_run_config(f.config_path);
  if (f.seed) rc.seed = *f.seed;
  if (f.out_dir) rc.out_dir = *f.out_dir;
  if (f.precision) rc.precision = precision_from_name(*f.precision);
  if (f.ablate) rc.ablation = ablation_from_name(*f.ablate);
  rc.apply_ablation();
  return rc;
}

template <typename F>
int with_precision(Precision p, F&& body) {
  if (p == Precision::F64) return body(double{});
  return body(float{});
}

int fail(const Error& e) {
  nlohmann::json j = {{"error", {{"kind", e.kind()}, {"message", e.what()}}}};
  std::cerr << j.dump() << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-branch transformer segmentation workbench"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a phantom dataset + manifest");
  CommonFlags synth_flags;
  int synth_count = 10;
  add_common(synth, synth_flags);
  synth->add_option("--count", synth_count, "number of phantom subjects");

  // train
  auto* train = app.add_subcommand("train", "train a model from a run config");
  CommonFlags train_flags;
  add_common(train, train_flags);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  CommonFlags eval_flags;
  std::string eval_checkpoint, eval_split = "test", eval_manifest;
  add_common(eval, eval_flags);
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint path")->required();
  eval->add_option("--split", eval_split, "train|val|test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--manifest", eval_manifest, "override the dataset manifest");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  CommonFlags gc_flags;
  int gc_params = 100;
  add_common(gradcheck, gc_flags);
  gradcheck->add_option("--n-params", gc_params, "number of sampled parameters");

  // ablate
  auto* ablate_cmd = app.add_subcommand("ablate", "train + compare ablation variants");
  CommonFlags ablate_flags;
  add_common(ablate_cmd, ablate_flags);

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      PhantomSpec spec = synth_flags.config_path.empty()
                             ? PhantomSpec{}
                             : load_phantom_spec(synth_flags.config_path);
      if (synth_flags.seed) spec.seed = *synth_flags.seed;
      const std::string out = synth_flags.out_dir.value_or("phantoms");
      const auto manifest = synthesize_dataset(spec, synth_count, out, std::cout);
      std::cout << "manifest: " << manifest << "\n";
      return 0;
    }

    if (train->parsed()) {
      RunConfig rc = resolve_config(train_flags);
      return with_precision(rc.precision, [&](auto tag) {
        using T = decltype(tag);
        LoadedData data = load_dataset(rc);
        Model<T> model(rc.model, rc.seed);
        auto result = train_model(model, data, rc, std::cout);
        std::cout << "fingerprint: " << rc.fingerprint() << "\n";
        std::cout << "best epoch " << result.best_epoch << " mean dice "
                  << result.best_mean_dice << "\n";
        std::cout << "checkpoints: " << result.best_checkpoint << " " << result.last_checkpoint
                  << "\n";
        return 0;
      });
    }

    if (eval->parsed()) {
      RunConfig rc = resolve_config(eval_flags);
      if (!eval_manifest.empty()) rc.data.manifest = eval_manifest;
      return with_precision(rc.precision, [&](auto tag) {
        using T = decltype(tag);
        auto rep = run_eval<T>(rc, eval_checkpoint, split_from_name(eval_split), std::cout);
        std::printf("dice %.4f/%.4f/%.4f mean %.4f  hd95 %.3f  sens %.4f\n", rep.dice[0],
                    rep.dice[1], rep.dice[2], rep.dice_mean, rep.hd95_mean, rep.sens_mean);
        std::cout << "conventions: " << rep.conventions << "\n";
        return 0;
      });
    }

    if (gradcheck->parsed()) {
      RunConfig rc = resolve_config(gc_flags);
      if (gc_flags.config_path.empty()) rc.model = tiny_model_config();
      if (rc.model.input_extent > 16)
        throw ConfigError(str_cat("gradcheck requires a tiny config (input extent <= 16), got ",
                                  rc.model.input_extent));
      Model<double> model(rc.model, rc.seed);

      PhantomSpec spec;
      spec.d = 4;
      spec.h = rc.model.input_extent;
      spec.w = rc.model.input_extent;
      spec.ed_radius_min = 3.0;
      spec.ed_radius_max = spec.h >= 16 ? 6.0 : 3.5;
      spec.seed = rc.seed;
      auto slices = extract_slices(generate_phantom(spec, "gradcheck"), SlicePolicy::TumorOnly);
      if (slices.empty()) throw ContractError("gradcheck phantom produced no tumor slices");

      auto report = gradcheck_model(model, slices.front(), gc_params, rc.seed);
      std::printf("%-28s %6s %14s %14s %10s\n", "parameter", "index", "analytic", "fd",
                  "rel_err");
      for (const auto& r : report.rows)
        std::printf("%-28s %6lld %14.6e %14.6e %10.3e %s\n", r.param.c_str(),
                    static_cast<long long>(r.index), r.analytic, r.fd, r.rel_err,
                    r.pass ? "" : "FAIL");
      std::printf("max rel err %.3e over %zu parameters (tol %.1e): %s\n", report.max_rel_err,
                  report.rows.size(), report.tol, report.pass ? "PASS" : "FAIL");
      return report.pass ? 0 : 2;
    }

    if (ablate_cmd->parsed()) {
      RunConfig rc = resolve_config(ablate_flags);
      return with_precision(rc.precision, [&](auto tag) {
        using T = decltype(tag);
        auto outcome = run_ablation<T>(rc, std::cout);
        std::cout << "comparison: " << outcome.csv_path << "\n";
        for (const auto& [name, rep] : outcome.rows)
          std::printf("%-8s mean dice %.4f\n", name.c_str(), rep.dice_mean);
        return 0;
      });
    }
  } catch (const Error& e) {
    return fail(e);
  } catch (const std::exception& e) {
    nlohmann::json j = {{"error", {{"kind", "internal"}, {"message", e.what()}}}};
    std::cerr << j.dump() << "\n";
    return 1;
  }
  return 0;
}

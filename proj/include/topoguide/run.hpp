#pragma once

// Run directory layout and the pipeline stages behind the CLI and service.
//
//   <data>/manifest.json, *.vf2d, *.gt.json, config/synth.json
//   <run>/siren.{json,bin}         meta-learned network
//   <run>/latents.{json,bin}       fitted latents + normalization
//   <run>/denoiser.{json,bin}      denoiser, schedule, normalization
//   <run>/config/<stage>.json      config snapshots
//
// Snapshots are {"stage", "versions", "config", "inputs"}; passing one back
// through --config reruns the stage with identical hyperparameters.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "topoguide/checkpoint.hpp"
#include "topoguide/dataset.hpp"
#include "topoguide/diffusion.hpp"
#include "topoguide/evaluation.hpp"
#include "topoguide/guidance.hpp"
#include "topoguide/latent_fit.hpp"
#include "topoguide/topo_extract.hpp"

namespace topoguide {

namespace fs = std::filesystem;

inline constexpr int kRunFormatVersion = 1;

/// A run directory is missing a stage's output.
class IncompleteRun : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunPaths {
  fs::path root;
  fs::path siren() const { return root / "siren"; }
  fs::path latents() const { return root / "latents"; }
  fs::path denoiser() const { return root / "denoiser"; }
  fs::path snapshot(const std::string& stage) const { return root / "config" / (stage + ".json"); }
};

inline bool store_exists(const fs::path& stem) {
  return fs::exists(stem.string() + ".json") && fs::exists(stem.string() + ".bin");
}

inline nlohmann::json format_versions() {
  return {{"run", kRunFormatVersion}, {"tensors", kTensorStoreVersion}, {"vf2d", kVf2dVersion}};
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

inline void write_snapshot(const fs::path& path, const std::string& stage, const nlohmann::json& config,
                           const nlohmann::json& inputs = nlohmann::json::object()) {
  write_json(path, {{"stage", stage}, {"versions", format_versions()}, {"config", config}, {"inputs", inputs}});
}

/// The "config" member of a snapshot, or the whole document for a bare config.
inline nlohmann::json config_section(const nlohmann::json& doc) {
  if (!doc.is_object()) throw std::invalid_argument("config file: expected a JSON object");
  return doc.contains("config") ? doc["config"] : doc;
}

// ---------------------------------------------------------------------------
// synth

inline std::vector<FieldRecord> run_synth(const SynthConfig& cfg, const fs::path& out) {
  auto records = synth_generate(cfg);
  save_dataset(out, records, to_json(cfg));
  write_snapshot(out / "config" / "synth.json", "synth", to_json(cfg));
  return records;
}

inline std::vector<VectorFieldGrid> dataset_grids(const std::vector<FieldRecord>& records) {
  std::vector<VectorFieldGrid> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.grid);
  return out;
}

// ---------------------------------------------------------------------------
// train-inr

struct InrStageConfig {
  MetaConfig meta;
  SirenConfig siren;
};

inline nlohmann::json to_json(const InrStageConfig& c) { return {{"meta", to_json(c.meta)}, {"siren", to_json(c.siren)}}; }

inline InrStageConfig inr_stage_config_from_json(const nlohmann::json& j) {
  InrStageConfig c;
  if (j.contains("meta")) c.meta = meta_config_from_json(j["meta"]);
  if (j.contains("siren")) c.siren = siren_config_from_json(j["siren"]);
  c.meta.validate();
  c.siren.validate();
  return c;
}

inline SirenWeights<double> run_train_inr(const fs::path& data, const fs::path& run, const InrStageConfig& cfg,
                                          const std::function<void(const MetaProgress&)>& progress = {}) {
  const auto grids = dataset_grids(load_dataset(data));
  auto w = meta_train(grids, cfg.meta, cfg.siren, progress);
  const RunPaths p{run};
  save_siren(p.siren(), w, to_json(cfg));
  write_snapshot(p.snapshot("train-inr"), "train-inr", to_json(cfg), {{"fields", grids.size()}});
  return w;
}

// ---------------------------------------------------------------------------
// fit-latents

inline nlohmann::json to_json(const FitOptions& o) {
  return {{"steps", o.steps}, {"lr", o.lr}, {"points", o.points}, {"seed", o.seed}};
}

inline FitOptions fit_options_from_json(const nlohmann::json& j) {
  FitOptions o;
  o.steps = j.value("steps", o.steps);
  o.lr = j.value("lr", o.lr);
  o.points = j.value("points", o.points);
  o.seed = j.value("seed", o.seed);
  if (o.steps < 1 || !(o.lr > 0) || o.points < 0) throw std::invalid_argument("fit-latents: invalid options");
  return o;
}

struct FitProgress {
  int done;
  int total;
  double psnr;
};

/// Fits every field, then records normalization statistics and the mean PSNR.
inline LatentSet fit_all(const SirenWeights<double>& w, const std::vector<FieldRecord>& records, const FitOptions& opt,
                         const std::function<void(const FitProgress&)>& progress = {}) {
  if (records.size() < 2) throw std::invalid_argument("fit-latents: need at least 2 fields");
  const auto wf = w.cast<float>();
  const auto grids = dataset_grids(records);
  const double range = data_range(grids);
  LatentSet s;
  s.latents.resize(static_cast<Eigen::Index>(records.size()), w.config.latent_dim);
  double total = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto z = fit_latent(wf, records[i].grid, opt);
    s.latents.row(static_cast<Eigen::Index>(i)) = z.transpose();
    s.field_ids.push_back(records[i].id);
    const double q = psnr(records[i].grid, evaluate_grid(w, z, records[i].grid.width(), records[i].grid.height()), range);
    total += q;
    if (progress) progress({static_cast<int>(i) + 1, static_cast<int>(records.size()), q});
  }
  s.stats = latent_stats(s.latents);
  s.meta = {{"fit", to_json(opt)}, {"mean_psnr", total / static_cast<double>(records.size())}, {"data_range", range}};
  return s;
}

inline LatentSet run_fit_latents(const fs::path& data, const fs::path& run, const FitOptions& opt,
                                 const std::function<void(const FitProgress&)>& progress = {}) {
  const RunPaths p{run};
  if (!store_exists(p.siren())) throw IncompleteRun("run has no siren checkpoint; run train-inr first");
  const auto w = load_siren(p.siren());
  const auto records = load_dataset(data);
  auto s = fit_all(w, records, opt, progress);
  save_latents(p.latents(), s);
  // Training reads the stored latents, so report statistics of what was stored.
  write_snapshot(p.snapshot("fit-latents"), "fit-latents", to_json(opt),
                 {{"fields", records.size()}, {"mean_psnr", s.meta["mean_psnr"]}});
  return load_latents(p.latents());
}

// ---------------------------------------------------------------------------
// train-ddpm

struct DdpmStageConfig {
  DenoiserConfig denoiser;
  DiffusionTrainConfig train;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

inline nlohmann::json to_json(const DdpmStageConfig& c) {
  return {{"denoiser", to_json(c.denoiser)},
          {"train", to_json(c.train)},
          {"T", c.T},
          {"beta_start", c.beta_start},
          {"beta_end", c.beta_end}};
}

inline DdpmStageConfig ddpm_stage_config_from_json(const nlohmann::json& j) {
  DdpmStageConfig c;
  if (j.contains("denoiser")) c.denoiser = denoiser_config_from_json(j["denoiser"]);
  if (j.contains("train")) c.train = diffusion_train_config_from_json(j["train"]);
  c.T = j.value("T", c.T);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  c.denoiser.validate();
  c.train.validate();
  return c;
}

inline Eigen::MatrixXd normalized_rows(const LatentStats& s, const Eigen::MatrixXd& Z) {
  Eigen::MatrixXd out(Z.rows(), Z.cols());
  for (Eigen::Index i = 0; i < Z.rows(); ++i) out.row(i) = normalize(s, Z.row(i).transpose()).transpose();
  return out;
}

inline DiffusionModel train_diffusion(const LatentSet& latents, const DdpmStageConfig& cfg,
                                      const std::function<void(const DiffusionProgress&)>& progress = {}) {
  if (cfg.denoiser.latent_dim != latents.latents.cols())
    throw std::invalid_argument("train-ddpm: denoiser latent_dim " + std::to_string(cfg.denoiser.latent_dim) +
                                " does not match latents of dimension " + std::to_string(latents.latents.cols()));
  DiffusionModel m;
  m.schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  m.stats = latents.stats;
  m.denoiser = train_denoiser(normalized_rows(m.stats, latents.latents), m.schedule, cfg.denoiser, cfg.train, progress);
  return m;
}

inline DiffusionModel run_train_ddpm(const fs::path& run, DdpmStageConfig cfg,
                                     const std::function<void(const DiffusionProgress&)>& progress = {}) {
  const RunPaths p{run};
  if (!store_exists(p.latents())) throw IncompleteRun("run has no latents; run fit-latents first");
  const auto latents = load_latents(p.latents());
  auto m = train_diffusion(latents, cfg, progress);
  save_diffusion(p.denoiser(), m, to_json(cfg));
  write_snapshot(p.snapshot("train-ddpm"), "train-ddpm", to_json(cfg), {{"latents", latents.latents.rows()}});
  return m;
}

// ---------------------------------------------------------------------------
// Loading a complete run.

struct LoadedRun {
  SirenWeights<double> siren;
  DiffusionModel model;
  LatentSet latents;
};

inline LoadedRun load_run(const fs::path& run) {
  const RunPaths p{run};
  std::vector<std::string> missing;
  if (!store_exists(p.siren())) missing.push_back("siren");
  if (!store_exists(p.latents())) missing.push_back("latents");
  if (!store_exists(p.denoiser())) missing.push_back("denoiser");
  if (!missing.empty()) {
    std::string msg = "incomplete run " + run.string() + ": missing";
    for (const auto& m : missing) msg += " " + m;
    throw IncompleteRun(msg);
  }
  LoadedRun r{load_siren(p.siren()), load_diffusion(p.denoiser()), load_latents(p.latents())};
  if (r.model.denoiser.config.latent_dim != r.siren.config.latent_dim)
    throw FormatError("run: denoiser and siren latent dimensions differ");
  if (r.model.stats.fingerprint() != r.latents.stats.fingerprint())
    throw FormatError("run: denoiser was trained with a different latent normalization");
  return r;
}

inline nlohmann::json model_info(const LoadedRun& r) {
  return {{"siren", to_json(r.siren.config)},
          {"denoiser", to_json(r.model.denoiser.config)},
          {"schedule", to_json(r.model.schedule)},
          {"stats", to_json(r.model.stats)},
          {"stats_id", r.model.stats.fingerprint()},
          {"latents", r.latents.latents.rows()},
          {"versions", format_versions()}};
}

// ---------------------------------------------------------------------------
// Sampling.

struct SampleOptions {
  int resolution = 64;
  ExtractConfig extract;
};

inline nlohmann::json to_json(const SampleOptions& o) {
  return {{"resolution", o.resolution}, {"extract", to_json(o.extract)}};
}

inline SampleOptions sample_options_from_json(const nlohmann::json& j, SampleOptions o = {}) {
  o.resolution = j.value("resolution", o.resolution);
  if (j.contains("extract")) o.extract = extract_config_from_json(j["extract"], o.extract);
  if (o.resolution < 2 || o.resolution > 1024) throw std::invalid_argument("resolution must be in [2, 1024]");
  return o;
}

struct GeneratedSample {
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  Eigen::VectorXd latent;  // denormalized
  VectorFieldGrid grid;
  std::vector<CriticalPoint> critical_points;
};

/// One sample from noise stream (seed, index); guided when spec is given.
/// Shared by the CLI and the service so both produce identical fields.
inline GeneratedSample generate_sample(const LoadedRun& run, const TopologySpec* spec, const GuidanceConfig& g,
                                       std::uint64_t seed, std::uint64_t index, const SampleOptions& opt) {
  GeneratedSample s;
  s.seed = seed;
  s.index = index;
  if (spec)
    s.latent = guided_sample(*spec, run.siren, run.model, g, seed, index);
  else
    s.latent = denormalize(run.model.stats, reverse_process(run.model.denoiser, run.model.schedule, seed, index));
  s.grid = evaluate_grid(run.siren, s.latent, opt.resolution, opt.resolution);
  s.critical_points = extract(run.siren, s.latent, opt.extract);
  return s;
}

inline nlohmann::json field_to_json(const VectorFieldGrid& g) {
  std::vector<double> vals(g.values().begin(), g.values().end());
  return {{"width", g.width()}, {"height", g.height()}, {"values", vals}};
}

/// Parses {"width", "height", "values": [u0, v0, u1, v1, ...]} (row-major).
inline VectorFieldGrid field_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("width") || !j.contains("height") || !j.contains("values"))
    throw std::invalid_argument("field: expected width, height and values");
  try {
    const int W = j["width"].get<int>(), H = j["height"].get<int>();
    if (W < 2 || H < 2 || W > 4096 || H > 4096) throw std::invalid_argument("field: width and height must be in [2, 4096]");
    const auto& v = j["values"];
    if (!v.is_array() || v.size() != static_cast<std::size_t>(W) * static_cast<std::size_t>(H) * 2)
      throw std::invalid_argument("field: values must hold width*height*2 numbers");
    VectorFieldGrid g(W, H);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double x = v[i].get<double>();
      if (!std::isfinite(x)) throw std::invalid_argument("field: non-finite value");
      g.values()[i] = static_cast<float>(x);
    }
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("field: ") + e.what());
  }
}

/// Built-in guidance for a schedule of length T; the window start keeps the
/// default's 600/1000 ratio so short schedules stay valid.
inline GuidanceConfig default_guidance(int T) {
  GuidanceConfig g;
  g.t_start = std::max(1, static_cast<int>((static_cast<long long>(g.t_start) * T + 500) / 1000));
  return g;
}

struct SampleStageConfig {
  std::vector<TopologySpec> specs;  // empty samples unguided
  GuidanceConfig guidance;
  int count = 1;
  std::uint64_t seed = 0;
  bool lock_noise = false;  // sample i of every spec shares noise stream i
  SampleOptions options;
};

inline nlohmann::json to_json(const SampleStageConfig& c) {
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& s : c.specs) specs.push_back(to_json(s));
  return {{"specs", specs},         {"guidance", to_json(c.guidance)}, {"count", c.count},
          {"seed", c.seed},         {"lock_noise", c.lock_noise},      {"options", to_json(c.options)}};
}

inline SampleStageConfig sample_stage_config_from_json(const nlohmann::json& j, int T) {
  SampleStageConfig c;
  c.guidance = default_guidance(T);
  if (j.contains("guidance")) c.guidance = guidance_config_from_json(j["guidance"], c.guidance);
  if (j.contains("specs"))
    for (const auto& s : j["specs"]) c.specs.push_back(guidance_request_from_json(s, c.guidance, T).spec);
  c.count = j.value("count", c.count);
  c.seed = j.value("seed", c.seed);
  c.lock_noise = j.value("lock_noise", c.lock_noise);
  if (j.contains("options")) c.options = sample_options_from_json(j["options"]);
  if (c.count < 1) throw std::invalid_argument("sample: count must be >= 1");
  c.guidance.validate(T);
  return c;
}

struct SampleProgress {
  int done;
  int total;
};

inline std::string sample_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%04d", k);
  return buf;
}

/// Writes <name>.vf2d, <name>.cp.json per sample, the latents store and
/// summary.json. Returns the summary.
inline nlohmann::json run_sample(const fs::path& run_dir, const SampleStageConfig& cfg, const fs::path& out,
                                 const std::function<void(const SampleProgress&)>& progress = {}) {
  const auto run = load_run(run_dir);
  cfg.guidance.validate(run.model.schedule.T);
  fs::create_directories(out);
  const int n_specs = cfg.specs.empty() ? 1 : static_cast<int>(cfg.specs.size());
  const int total = n_specs * cfg.count;
  LatentSet set;
  set.latents.resize(total, run.siren.config.latent_dim);
  set.stats = run.model.stats;
  nlohmann::json entries = nlohmann::json::array();
  int k = 0;
  for (int si = 0; si < n_specs; ++si) {
    const TopologySpec* spec = cfg.specs.empty() ? nullptr : &cfg.specs[static_cast<std::size_t>(si)];
    for (int i = 0; i < cfg.count; ++i, ++k) {
      const auto index = static_cast<std::uint64_t>(cfg.lock_noise ? i : k);
      const auto s = generate_sample(run, spec, cfg.guidance, cfg.seed, index, cfg.options);
      const auto name = sample_name(k);
      write_vf2d(s.grid, out / (name + ".vf2d"));
      write_json(out / (name + ".cp.json"), extraction_report(s.critical_points));
      set.latents.row(k) = s.latent.transpose();
      set.field_ids.push_back(name);
      entries.push_back({{"name", name},
                         {"seed", s.seed},
                         {"index", s.index},
                         {"spec", spec ? nlohmann::json(si) : nlohmann::json(nullptr)},
                         {"critical_points", s.critical_points.size()}});
      if (progress) progress({k + 1, total});
    }
  }
  set.meta = {{"stats_id", run.model.stats.fingerprint()}};
  save_latents(out / "latents", set);
  const nlohmann::json summary = {{"count", total},
                                  {"seed", cfg.seed},
                                  {"guided", !cfg.specs.empty()},
                                  {"guidance", to_json(cfg.guidance)},
                                  {"specs", to_json(cfg)["specs"]},
                                  {"samples", entries}};
  write_json(out / "summary.json", summary);
  write_snapshot(out / "config" / "sample.json", "sample", to_json(cfg), {{"model", run_dir.string()}});
  return summary;
}

// ---------------------------------------------------------------------------
// Evaluation over a sample directory.

/// FD between a sample directory's latents and the run's training latents,
/// both in the run's normalized space.
inline nlohmann::json eval_fd(const fs::path& run_dir, const fs::path& samples) {
  const auto run = load_run(run_dir);
  const auto set = load_latents(samples / "latents");
  const auto sid = run.model.stats.fingerprint();
  if (set.meta.contains("stats_id") && set.meta["stats_id"].get<std::uint64_t>() != sid)
    throw std::invalid_argument("eval: samples were drawn from a model with a different normalization");
  if (set.latents.rows() < 2) throw std::invalid_argument("eval: need at least 2 samples for FD");
  const auto g = gaussian_summary(normalized_rows(run.model.stats, set.latents), sid);
  const auto d = gaussian_summary(normalized_rows(run.model.stats, run.latents.latents), sid);
  return {{"fd", frechet_distance(g, d)}, {"n_samples", set.latents.rows()}, {"n_data", run.latents.latents.rows()}};
}

inline nlohmann::json eval_alignment(const fs::path& samples, double hit_radius) {
  const auto summary = read_json(samples / "summary.json");
  const auto& specs = summary.at("specs");
  if (specs.empty()) throw std::invalid_argument("eval: samples are unguided; alignment needs a spec");
  std::vector<SampleResult> results;
  for (const auto& e : summary.at("samples")) {
    const auto spec = guidance_request_from_json(specs.at(e.at("spec").get<std::size_t>()), {}, 1 << 30).spec;
    results.push_back({spec, critical_points_from_json(read_json(samples / (e.at("name").get<std::string>() + ".cp.json")))});
  }
  auto j = to_json(alignment(results, hit_radius));
  j["hit_radius"] = hit_radius;
  return j;
}

}  // namespace topoguide

// topoguide: pipeline driver and HTTP service.
//
// Exit codes: 0 success, 1 usage or invalid input, 2 runtime failure.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "topoguide/run.hpp"
#include "topoguide/service.hpp"

using namespace topoguide;
using nlohmann::json;

namespace {

// Optional override: only applied when the flag was given.
template <typename T>
CLI::Option* opt(CLI::App* app, const std::string& name, std::optional<T>& dst, const std::string& desc) {
  return app->add_option_function<T>(name, [&dst](const T& v) { dst = v; }, desc);
}

template <typename T>
void apply(const std::optional<T>& v, T& dst) {
  if (v) dst = *v;
}

json config_or_empty(const std::string& path) {
  return path.empty() ? json::object() : config_section(read_json(path));
}

bool should_log(int i, int total) { return i == 1 || i == total || i % std::max(1, total / 20) == 0; }

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out, config;
  std::optional<int> count, resolution, modes, anchors, gt_resolution;
  std::optional<std::uint64_t> seed;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* c = app.add_subcommand("synth", "Generate a synthetic vector-field dataset");
  c->add_option("--out", a.out, "Dataset directory")->required();
  c->add_option("--config", a.config, "Config or snapshot JSON");
  opt(c, "--count", a.count, "Number of fields");
  opt(c, "--resolution", a.resolution, "Grid resolution");
  opt(c, "--modes", a.modes, "Fourier modes per component");
  opt(c, "--anchors", a.anchors, "Linear anchors per field");
  opt(c, "--gt-resolution", a.gt_resolution, "Ground-truth search resolution (0 disables)");
  opt(c, "--seed", a.seed, "Seed");
}

int do_synth(const SynthArgs& a) {
  auto cfg = synth_config_from_json(config_or_empty(a.config));
  apply(a.count, cfg.n_fields);
  apply(a.resolution, cfg.resolution);
  apply(a.modes, cfg.n_modes);
  apply(a.anchors, cfg.n_linear_anchors);
  apply(a.gt_resolution, cfg.gt_resolution);
  apply(a.seed, cfg.seed);
  cfg.validate();
  const auto records = run_synth(cfg, a.out);
  std::cout << "wrote " << records.size() << " fields to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct InrArgs {
  std::string data, run, config;
  std::optional<int> iterations, batch, points, inner_steps, latent_dim, width, layers;
  std::optional<double> inner_lr, outer_lr, omega0, modulation_init;
  std::optional<std::uint64_t> seed;
  bool first_order = false;
};

void add_inr(CLI::App& app, InrArgs& a) {
  auto* c = app.add_subcommand("train-inr", "Meta-learn the shared SIREN");
  c->add_option("--data", a.data, "Dataset directory")->required();
  c->add_option("--run", a.run, "Run directory")->required();
  c->add_option("--config", a.config, "Config or snapshot JSON");
  opt(c, "--iterations", a.iterations, "Outer iterations");
  opt(c, "--batch", a.batch, "Fields per outer batch");
  opt(c, "--points", a.points, "Points per field per visit");
  opt(c, "--inner-steps", a.inner_steps, "Inner-loop steps");
  opt(c, "--inner-lr", a.inner_lr, "Inner-loop learning rate");
  opt(c, "--outer-lr", a.outer_lr, "Outer Adam learning rate");
  opt(c, "--latent-dim", a.latent_dim, "Latent dimension");
  opt(c, "--width", a.width, "Hidden width");
  opt(c, "--layers", a.layers, "Hidden layers");
  opt(c, "--omega0", a.omega0, "First-layer frequency");
  opt(c, "--modulation-init", a.modulation_init, "Modulation init scale");
  opt(c, "--seed", a.seed, "Seed");
  c->add_flag("--first-order", a.first_order, "Drop second-order inner-loop terms");
}

int do_inr(const InrArgs& a) {
  auto cfg = inr_stage_config_from_json(config_or_empty(a.config));
  apply(a.iterations, cfg.meta.outer_iterations);
  apply(a.batch, cfg.meta.fields_per_batch);
  apply(a.points, cfg.meta.points_per_field);
  apply(a.inner_steps, cfg.meta.inner_steps);
  apply(a.inner_lr, cfg.meta.inner_lr);
  apply(a.outer_lr, cfg.meta.outer_lr);
  apply(a.modulation_init, cfg.meta.modulation_init);
  apply(a.seed, cfg.meta.seed);
  if (a.first_order) cfg.meta.first_order = true;
  apply(a.latent_dim, cfg.siren.latent_dim);
  apply(a.width, cfg.siren.hidden_width);
  apply(a.layers, cfg.siren.hidden_layers);
  apply(a.omega0, cfg.siren.omega0);
  cfg.meta.validate();
  cfg.siren.validate();
  const int total = cfg.meta.outer_iterations;
  run_train_inr(a.data, a.run, cfg, [total](const MetaProgress& p) {
    if (should_log(p.iteration, total)) std::fprintf(stderr, "train-inr %d/%d loss %.6g\n", p.iteration, total, p.loss);
  });
  std::cout << "wrote " << RunPaths{a.run}.siren().string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct FitArgs {
  std::string data, run, config;
  std::optional<int> steps;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
};

void add_fit(CLI::App& app, FitArgs& a) {
  auto* c = app.add_subcommand("fit-latents", "Fit one latent per field");
  c->add_option("--data", a.data, "Dataset directory")->required();
  c->add_option("--run", a.run, "Run directory")->required();
  c->add_option("--config", a.config, "Config or snapshot JSON");
  opt(c, "--steps", a.steps, "Gradient steps per field");
  opt(c, "--lr", a.lr, "Step size");
  opt(c, "--seed", a.seed, "Seed");
}

int do_fit(const FitArgs& a) {
  auto o = fit_options_from_json(config_or_empty(a.config));
  apply(a.steps, o.steps);
  apply(a.lr, o.lr);
  apply(a.seed, o.seed);
  o = fit_options_from_json(to_json(o));
  const auto s = run_fit_latents(a.data, a.run, o, [](const FitProgress& p) {
    if (should_log(p.done, p.total)) std::fprintf(stderr, "fit-latents %d/%d psnr %.2f dB\n", p.done, p.total, p.psnr);
  });
  std::cout << "fitted " << s.latents.rows() << " latents, mean PSNR " << s.meta.value("mean_psnr", 0.0) << " dB\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct DdpmArgs {
  std::string run, config;
  std::optional<int> iterations, batch, T, width, blocks, time_dim;
  std::optional<double> lr, dropout;
  std::optional<std::uint64_t> seed;
};

void add_ddpm(CLI::App& app, DdpmArgs& a) {
  auto* c = app.add_subcommand("train-ddpm", "Train the latent denoiser");
  c->add_option("--run", a.run, "Run directory")->required();
  c->add_option("--config", a.config, "Config or snapshot JSON");
  opt(c, "--iterations", a.iterations, "Training iterations");
  opt(c, "--batch", a.batch, "Batch size");
  opt(c, "--lr", a.lr, "Adam learning rate");
  opt(c, "--T", a.T, "Diffusion steps");
  opt(c, "--width", a.width, "Residual block width");
  opt(c, "--blocks", a.blocks, "Residual blocks");
  opt(c, "--time-dim", a.time_dim, "Time embedding size");
  opt(c, "--dropout", a.dropout, "Dropout rate");
  opt(c, "--seed", a.seed, "Seed");
}

int do_ddpm(const DdpmArgs& a) {
  auto cfg = ddpm_stage_config_from_json(config_or_empty(a.config));
  apply(a.iterations, cfg.train.iterations);
  apply(a.batch, cfg.train.batch_size);
  apply(a.lr, cfg.train.lr);
  apply(a.seed, cfg.train.seed);
  apply(a.T, cfg.T);
  apply(a.width, cfg.denoiser.width);
  apply(a.blocks, cfg.denoiser.blocks);
  apply(a.time_dim, cfg.denoiser.time_dim);
  apply(a.dropout, cfg.denoiser.dropout);
  // Latent dimension follows the run unless a config pins it.
  if (!config_or_empty(a.config).contains("denoiser") || !config_or_empty(a.config)["denoiser"].contains("latent_dim")) {
    const RunPaths p{a.run};
    if (!store_exists(p.siren())) throw IncompleteRun("run has no siren checkpoint; run train-inr first");
    cfg.denoiser.latent_dim = load_siren(p.siren()).config.latent_dim;
  }
  cfg = ddpm_stage_config_from_json(to_json(cfg));
  const int total = cfg.train.iterations;
  run_train_ddpm(a.run, cfg, [total](const DiffusionProgress& p) {
    if (should_log(p.iteration, total)) std::fprintf(stderr, "train-ddpm %d/%d loss %.6g\n", p.iteration, total, p.loss);
  });
  std::cout << "wrote " << RunPaths{a.run}.denoiser().string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string model, out, config;
  std::vector<std::string> specs;
  std::optional<int> count, t_start, t_end, resolution;
  std::optional<double> omega;
  std::optional<std::uint64_t> seed;
  bool lock_noise = false, stop_gradient = false, unguided = false;
};

void add_sample(CLI::App& app, SampleArgs& a) {
  auto* c = app.add_subcommand("sample", "Draw guided or unguided samples");
  c->add_option("--model", a.model, "Run directory")->required();
  c->add_option("--out", a.out, "Output directory")->required();
  c->add_option("--spec", a.specs, "Topology spec JSON (repeatable)");
  c->add_option("--config", a.config, "Config or snapshot JSON");
  opt(c, "--count", a.count, "Samples per spec");
  opt(c, "--seed", a.seed, "Seed");
  opt(c, "--omega", a.omega, "Guidance strength");
  opt(c, "--t-start", a.t_start, "First guided step");
  opt(c, "--t-end", a.t_end, "Guidance stops after this step");
  opt(c, "--resolution", a.resolution, "Output grid resolution");
  c->add_flag("--lock-noise", a.lock_noise, "Sample i of every spec shares one noise stream");
  c->add_flag("--stop-gradient", a.stop_gradient, "Skip the denoiser Jacobian in the guidance gradient");
  c->add_flag("--unguided", a.unguided, "Ignore specs from --config");
}

// Merges spec-file guidance keys; conflicting explicit values are an error.
void merge_spec_key(const json& doc, const char* key, std::optional<json>& seen, const std::string& file) {
  if (!doc.contains(key) || doc[key].is_null()) return;
  if (seen && *seen != doc[key]) throw std::invalid_argument(file + ": '" + key + "' conflicts with an earlier spec file");
  seen = doc[key];
}

int do_sample(const SampleArgs& a) {
  const auto run = load_run(a.model);
  const int T = run.model.schedule.T;
  const json base = config_or_empty(a.config);
  auto cfg = sample_stage_config_from_json(base, T);
  if (a.unguided) cfg.specs.clear();

  if (!a.specs.empty()) {
    cfg.specs.clear();
    std::optional<json> omega, t_start, t_end, seed;
    for (const auto& f : a.specs) {
      const auto doc = read_json(f);
      std::vector<json> docs;
      if (doc.contains("specs")) docs.assign(doc["specs"].begin(), doc["specs"].end());
      else docs.push_back(doc);
      for (const auto& d : docs) {
        try {
          cfg.specs.push_back(guidance_request_from_json(d, cfg.guidance, T).spec);
        } catch (const std::invalid_argument& e) {
          throw std::invalid_argument(f + ": " + e.what());
        }
        merge_spec_key(d, "omega", omega, f);
        merge_spec_key(d, "t_start", t_start, f);
        merge_spec_key(d, "t_end", t_end, f);
        merge_spec_key(d, "seed", seed, f);
      }
    }
    if (omega) cfg.guidance.omega = omega->get<double>();
    if (t_start) cfg.guidance.t_start = t_start->get<int>();
    if (t_end) cfg.guidance.t_end = t_end->get<int>();
    if (seed) cfg.seed = seed->get<std::uint64_t>();
  }
  apply(a.omega, cfg.guidance.omega);
  apply(a.t_start, cfg.guidance.t_start);
  apply(a.t_end, cfg.guidance.t_end);
  apply(a.count, cfg.count);
  apply(a.seed, cfg.seed);
  apply(a.resolution, cfg.options.resolution);
  if (a.lock_noise) cfg.lock_noise = true;
  if (a.stop_gradient) cfg.guidance.full_chain = false;
  cfg = sample_stage_config_from_json(to_json(cfg), T);

  const auto summary = run_sample(a.model, cfg, a.out, [](const SampleProgress& p) {
    std::fprintf(stderr, "sample %d/%d\n", p.done, p.total);
  });
  std::cout << "wrote " << summary["count"] << " samples to " << a.out << " (omega " << cfg.guidance.omega << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ExtractArgs {
  std::string input, model, out, config;
  std::optional<int> index, grid_res;
  std::optional<double> tau;
  std::optional<std::uint64_t> seed;
};

void add_extract(CLI::App& app, ExtractArgs& a) {
  auto* c = app.add_subcommand("extract", "Extract critical points from a grid or a fitted latent");
  auto* in = c->add_option("--input", a.input, "VF2D file");
  auto* m = c->add_option("--model", a.model, "Run directory (with --index)");
  opt(c, "--index", a.index, "Latent row in the run")->needs(m);
  in->excludes(m);
  c->add_option("--out", a.out, "Report JSON (default: stdout)");
  c->add_option("--config", a.config, "Extraction config JSON");
  opt(c, "--grid-res", a.grid_res, "Candidate grid resolution");
  opt(c, "--tau", a.tau, "Norm acceptance factor");
  opt(c, "--seed", a.seed, "Seed");
}

int do_extract(const ExtractArgs& a) {
  if (a.input.empty() && a.model.empty()) throw std::invalid_argument("extract: give --input or --model with --index");
  auto cfg = extract_config_from_json(config_or_empty(a.config));
  apply(a.grid_res, cfg.grid_res);
  apply(a.tau, cfg.norm_accept_tau);
  apply(a.seed, cfg.seed);
  cfg = extract_config_from_json(to_json(cfg));
  std::vector<CriticalPoint> pts;
  if (!a.input.empty()) {
    const auto grid = read_vf2d(a.input);
    pts = extract(GridField{grid}, cfg);
  } else {
    if (!a.index) throw std::invalid_argument("extract: --model needs --index");
    const RunPaths p{a.model};
    if (!store_exists(p.siren()) || !store_exists(p.latents())) throw IncompleteRun("run has no siren or latents");
    const auto w = load_siren(p.siren());
    const auto set = load_latents(p.latents());
    if (*a.index < 0 || *a.index >= set.latents.rows()) throw std::invalid_argument("extract: --index out of range");
    pts = extract(w, Eigen::VectorXd(set.latents.row(*a.index).transpose()), cfg);
  }
  const json report = {{"critical_points", extraction_report(pts)}, {"config", to_json(cfg)}};
  if (a.out.empty()) std::cout << report.dump(2) << "\n";
  else write_json(a.out, report);
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string mode, model, samples, out, config, protocol;
  std::optional<double> hit_radius;
  std::optional<int> locations, seeds;
  std::optional<std::uint64_t> seed;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* c = app.add_subcommand("eval", "Evaluate samples or run a protocol");
  c->add_option("--mode", a.mode, "fd | alignment | histogram | protocol")
      ->required()
      ->check(CLI::IsMember({"fd", "alignment", "histogram", "protocol"}));
  c->add_option("--model", a.model, "Run directory");
  c->add_option("--samples", a.samples, "Sample directory");
  c->add_option("--out", a.out, "Report JSON");
  c->add_option("--config", a.config, "Protocol config JSON");
  c->add_option("--protocol", a.protocol, "Protocol kind");
  opt(c, "--hit-radius", a.hit_radius, "Alignment radius");
  opt(c, "--locations", a.locations, "Protocol locations");
  opt(c, "--seeds", a.seeds, "Protocol noise streams");
  opt(c, "--seed", a.seed, "Protocol seed");
}

std::vector<std::vector<CriticalPoint>> sample_reports(const std::string& dir) {
  std::vector<std::vector<CriticalPoint>> out;
  const auto summary = read_json(fs::path(dir) / "summary.json");
  for (const auto& e : summary.at("samples"))
    out.push_back(critical_points_from_json(read_json(fs::path(dir) / (e.at("name").get<std::string>() + ".cp.json"))));
  return out;
}

int do_eval(const EvalArgs& a) {
  const auto need = [&](const std::string& v, const char* flag) {
    if (v.empty()) throw std::invalid_argument("eval --mode " + a.mode + " needs " + flag);
  };
  json report;
  if (a.mode == "fd") {
    need(a.model, "--model");
    need(a.samples, "--samples");
    report = eval_fd(a.model, a.samples);
    std::cout << "FD " << report["fd"].get<double>() << "\n";
  } else if (a.mode == "alignment") {
    need(a.samples, "--samples");
    report = eval_alignment(a.samples, a.hit_radius.value_or(kDefaultHitRadius));
    std::cout << "alignment " << report["aligned_fraction"].get<double>() << "\n";
  } else if (a.mode == "histogram") {
    need(a.samples, "--samples");
    report = to_json(topology_histogram(sample_reports(a.samples)));
    std::cout << report.dump(2) << "\n";
  } else {
    need(a.model, "--model");
    const auto run = load_run(a.model);
    const json doc = config_or_empty(a.config);
    auto cfg = protocol_config_from_json(doc);
    if (!doc.contains("guidance") || !doc["guidance"].contains("t_start"))
      cfg.guidance.t_start = default_guidance(run.model.schedule.T).t_start;
    if (!a.protocol.empty()) cfg.kind = protocol_from_string(a.protocol);
    apply(a.hit_radius, cfg.hit_radius);
    apply(a.locations, cfg.n_locations);
    apply(a.seeds, cfg.n_seeds);
    apply(a.seed, cfg.seed);
    cfg = protocol_config_from_json(to_json(cfg));
    const auto r = run_protocol(cfg, run.siren, run.model, normalized_rows(run.model.stats, run.latents.latents),
                                [](const ProtocolProgress& p) {
                                  std::fprintf(stderr, "%s %d/%d\n", p.row.c_str(), p.done, p.total);
                                });
    report = to_json(r);
    report["config"] = to_json(cfg);
    std::cout << format_table(r);
  }
  if (!a.out.empty()) write_json(a.out, report);
  else if (!a.samples.empty() && a.mode != "histogram") write_json(fs::path(a.samples) / ("eval_" + a.mode + ".json"), report);
  return 0;
}

// ---------------------------------------------------------------------------

struct ServeArgs {
  std::string model, host = "127.0.0.1";
  std::optional<int> port;
};

void add_serve(CLI::App& app, ServeArgs& a) {
  auto* c = app.add_subcommand("serve", "Serve the HTTP API over a run directory");
  c->add_option("--model", a.model, "Run directory")->required();
  c->add_option("--host", a.host, "Bind address");
  opt(c, "--port", a.port, "Port (default: TOPOGUIDE_PORT or 8080)");
}

int do_serve(const ServeArgs& a) {
  const Service svc(a.model);
  if (!svc.ready()) std::fprintf(stderr, "warning: run is incomplete; model routes will answer 409\n");
  httplib::Server srv;
  bind_routes(srv, svc);
  const int port = a.port.value_or(default_port());
  std::fprintf(stderr, "listening on %s:%d\n", a.host.c_str(), port);
  if (!srv.listen(a.host, port)) throw std::runtime_error("cannot bind " + a.host + ":" + std::to_string(port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Topology-guided latent diffusion for 2D vector fields", "topoguide"};
  app.require_subcommand(1);
  SynthArgs synth;
  InrArgs inr;
  FitArgs fit;
  DdpmArgs ddpm;
  SampleArgs sample;
  ExtractArgs ext;
  EvalArgs ev;
  ServeArgs serve;
  add_synth(app, synth);
  add_inr(app, inr);
  add_fit(app, fit);
  add_ddpm(app, ddpm);
  add_sample(app, sample);
  add_extract(app, ext);
  add_eval(app, ev);
  add_serve(app, serve);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "synth") return do_synth(synth);
    if (name == "train-inr") return do_inr(inr);
    if (name == "fit-latents") return do_fit(fit);
    if (name == "train-ddpm") return do_ddpm(ddpm);
    if (name == "sample") return do_sample(sample);
    if (name == "extract") return do_extract(ext);
    if (name == "eval") return do_eval(ev);
    return do_serve(serve);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}

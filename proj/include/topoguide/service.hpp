#pragma once

// HTTP/JSON service over a run directory. Handlers are plain functions of
// (body) -> {status, json} so they can be tested without a socket;
// bind_routes() attaches them to cpp-httplib routes.

#include <cstdlib>
#include <memory>
#include <optional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "topoguide/run.hpp"

namespace topoguide {

inline constexpr int kDefaultPort = 8080;
inline constexpr int kMaxSamplesPerRequest = 64;
inline constexpr int kMaxServedResolution = 256;

struct Response {
  int status = 200;
  nlohmann::json body;
};

inline Response error_response(int status, const std::string& msg, nlohmann::json extra = nlohmann::json::object()) {
  extra["error"] = msg;
  return {status, extra};
}

/// Port from TOPOGUIDE_PORT, else the default.
inline int default_port() {
  if (const char* s = std::getenv("TOPOGUIDE_PORT")) {
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (end != s && *end == '\0' && v > 0 && v < 65536) return static_cast<int>(v);
  }
  return kDefaultPort;
}

class Service {
 public:
  /// An incomplete run is not fatal: model-backed routes answer 409 and
  /// /api/extract keeps working.
  explicit Service(const fs::path& run_dir, SampleOptions defaults = {}) : defaults_(defaults) {
    try {
      run_ = std::make_unique<LoadedRun>(load_run(run_dir));
    } catch (const IncompleteRun& e) {
      load_error_ = e.what();
    }
  }

  bool ready() const { return run_ != nullptr; }

  Response health() const { return {200, {{"status", "ok"}}}; }

  Response model() const {
    if (!run_) return error_response(409, load_error_);
    return {200, model_info(*run_)};
  }

  /// Body: a spec document ({"points", "omega", "t_start", "t_end", "seed"})
  /// plus optional "count" and "resolution". Sample i uses noise stream (seed, i).
  Response sample(const std::string& body) const {
    if (!run_) return error_response(409, load_error_);
    GuidanceRequest req;
    int count = 1;
    SampleOptions opt = defaults_;
    try {
      const auto j = parse(body);
      req = guidance_request_from_json(j, default_guidance(run_->model.schedule.T), run_->model.schedule.T);
      if (j.contains("count")) {
        if (!j["count"].is_number_integer()) throw std::invalid_argument("count: expected an integer");
        count = j["count"].get<int>();
      }
      if (count < 1 || count > kMaxSamplesPerRequest)
        throw std::invalid_argument("count: must be in [1, " + std::to_string(kMaxSamplesPerRequest) + "]");
      if (j.contains("resolution")) {
        if (!j["resolution"].is_number_integer()) throw std::invalid_argument("resolution: expected an integer");
        opt.resolution = j["resolution"].get<int>();
      }
      if (opt.resolution < 2 || opt.resolution > kMaxServedResolution)
        throw std::invalid_argument("resolution: must be in [2, " + std::to_string(kMaxServedResolution) + "]");
    } catch (const std::invalid_argument& e) {
      return error_response(400, e.what());
    }
    const std::uint64_t seed = req.seed.value_or(0);
    nlohmann::json samples = nlohmann::json::array();
    for (int i = 0; i < count; ++i) {
      try {
        const auto s = generate_sample(*run_, &req.spec, req.config, seed, static_cast<std::uint64_t>(i), opt);
        samples.push_back({{"seed", seed},
                           {"index", i},
                           {"field", field_to_json(s.grid)},
                           {"critical_points", extraction_report(s.critical_points)}});
      } catch (const SamplingDiverged& e) {
        return error_response(500, e.what(), {{"step", e.step}, {"index", i}});
      } catch (const std::exception& e) {
        return error_response(500, e.what(), {{"index", i}});
      }
    }
    return {200,
            {{"samples", samples},
             {"spec", to_json(req.spec)},
             {"guidance", to_json(req.config)},
             {"seed", seed},
             {"count", count}}};
  }

  /// Body: {"width", "height", "values"} optionally with an "extract" config.
  Response extract_field(const std::string& body) const {
    try {
      const auto j = parse(body);
      const auto grid = field_from_json(j.contains("field") ? j["field"] : j);
      ExtractConfig cfg = defaults_.extract;
      if (j.contains("extract")) cfg = extract_config_from_json(j["extract"], cfg);
      return {200, {{"critical_points", extraction_report(extract(GridField{grid}, cfg))}}};
    } catch (const std::invalid_argument& e) {
      return error_response(400, e.what());
    }
  }

 private:
  static nlohmann::json parse(const std::string& body) {
    try {
      auto j = nlohmann::json::parse(body);
      if (!j.is_object()) throw std::invalid_argument("body: expected a JSON object");
      return j;
    } catch (const nlohmann::json::exception& e) {
      throw std::invalid_argument(std::string("body: ") + e.what());
    }
  }

  std::unique_ptr<LoadedRun> run_;
  std::string load_error_;
  SampleOptions defaults_;
};

inline void bind_routes(httplib::Server& srv, const Service& svc) {
  const auto send = [](httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  srv.Get("/api/health", [&svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc.health()); });
  srv.Get("/api/model", [&svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc.model()); });
  srv.Post("/api/sample",
           [&svc, send](const httplib::Request& req, httplib::Response& res) { send(res, svc.sample(req.body)); });
  srv.Post("/api/extract",
           [&svc, send](const httplib::Request& req, httplib::Response& res) { send(res, svc.extract_field(req.body)); });
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  srv.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

}  // namespace topoguide

#pragma once

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "gpsurr/surrogate.hpp"

// After Eigen: <resolv.h> (pulled in by httplib) defines a `_res` macro.
#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 128 // the default of 5 refuses short bursts
#endif
#include <httplib.h>
#include <json.hpp>

namespace gpsurr::service {

inline constexpr std::size_t kMaxSweepCount = 10'000;

struct RegistryEntry {
    std::string model_id;
    LoadedModel loaded;
    std::string sweep_feature;

    [[nodiscard]] const AnyModel &model() const { return loaded.model; }
    [[nodiscard]] std::string kind() const { return model_kind(loaded.model); }
};

/// model_id -> model. Filled once before the service reports ready, then read-only.
class ModelRegistry {
  public:
    /// Loads every *.json in dir; files that fail validation are skipped and reported in `rejected`.
    static ModelRegistry load_dir(const std::string &dir, std::vector<std::string> *rejected = nullptr) {
        namespace fs = std::filesystem;
        if (!fs::is_directory(dir)) throw IoError("models directory '" + dir + "' does not exist");
        std::vector<fs::path> files;
        for (const auto &e : fs::directory_iterator(dir)) {
            if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
        ModelRegistry reg;
        for (const auto &f : files) {
            try {
                reg.add(f.stem().string(), load_any_model(f.string()));
            } catch (const std::exception &e) {
                if (rejected) rejected->push_back(f.filename().string() + ": " + e.what());
            }
        }
        return reg;
    }

    void add(const std::string &id, LoadedModel loaded) {
        if (entries_.count(id)) throw InvalidArgument("duplicate model_id '" + id + "'");
        RegistryEntry e{id, std::move(loaded), {}};
        e.sweep_feature = e.loaded.metadata.sweep_feature;
        if (e.sweep_feature.empty()) e.sweep_feature = default_sweep_feature(model_feature_names(e.model()));
        entries_.emplace(id, std::move(e));
    }

    [[nodiscard]] const RegistryEntry *find(const std::string &id) const {
        auto it = entries_.find(id);
        return it == entries_.end() ? nullptr : &it->second;
    }
    [[nodiscard]] std::size_t size() const { return entries_.size(); }
    [[nodiscard]] const std::map<std::string, RegistryEntry> &entries() const { return entries_; }

  private:
    std::map<std::string, RegistryEntry> entries_;
};

/// Transport-independent response.
struct Reply {
    int status = 200;
    nlohmann::json body;
};

namespace detail {

/// Raised inside handlers; carries the HTTP status and the offending field(s).
struct RequestError {
    int status;
    std::string message;
    std::vector<std::string> fields;
};

inline Reply error_reply(const RequestError &e) {
    nlohmann::json body{{"error", e.message}};
    if (!e.fields.empty()) body["fields"] = e.fields;
    return {e.status, std::move(body)};
}

inline std::string new_incident_id() {
    static std::atomic<std::uint64_t> counter{0};
    static const std::uint64_t salt = std::random_device{}();
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>((salt << 20) ^ counter.fetch_add(1) ^ 0x5bd1e995ULL));
    return buf;
}

/// Logs the details server-side; the client only sees the incident id.
inline Reply internal_error(const std::string &what) {
    const std::string id = new_incident_id();
    std::cerr << "gpsurr-service: incident " << id << ": " << what << std::endl;
    return {500, {{"error", "internal error"}, {"incident_id", id}}};
}

inline nlohmann::json parse_body(const std::string &text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception &) { // includes out-of-range numbers such as 1e999
        throw RequestError{422, "request body is not valid JSON", {"body"}};
    }
    if (!j.is_object()) throw RequestError{422, "request body must be a JSON object", {"body"}};
    return j;
}

inline double number_field(const nlohmann::json &v, const std::string &field) {
    if (!v.is_number()) throw RequestError{422, "field must be a finite number", {field}};
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw RequestError{422, "field must be a finite number", {field}};
    return d;
}

/// Parses `fixed` and checks it against the model's features (all but `sweep`).
inline std::map<std::string, double> parse_fixed(const nlohmann::json &body, const std::vector<std::string> &features,
                                                 const std::string &sweep) {
    std::map<std::string, double> fixed;
    if (body.contains("fixed")) {
        const auto &f = body["fixed"];
        if (!f.is_object()) throw RequestError{422, "'fixed' must be an object", {"fixed"}};
        std::vector<std::string> unknown;
        for (const auto &[name, v] : f.items()) {
            if (std::find(features.begin(), features.end(), name) == features.end()) {
                unknown.push_back(name);
                continue;
            }
            fixed[name] = number_field(v, "fixed." + name);
        }
        if (!unknown.empty()) throw RequestError{422, "unknown feature(s)", unknown};
    }
    std::vector<std::string> missing;
    for (const auto &name : features) {
        if (name != sweep && !fixed.count(name)) missing.push_back(name);
    }
    if (!missing.empty()) throw RequestError{422, "missing feature(s)", missing};
    return fixed;
}

inline double parse_z(const nlohmann::json &body) {
    if (!body.contains("z")) return 2.0;
    const double z = number_field(body["z"], "z");
    if (z < 0.0) throw RequestError{422, "z must be >= 0", {"z"}};
    return z;
}

struct Sweep {
    std::string feature;
    std::vector<double> values;
};

inline Sweep parse_sweep(const nlohmann::json &body, const RegistryEntry &entry) {
    Sweep s;
    if (!body.contains("sweep") || !body["sweep"].is_object()) {
        throw RequestError{422, "'sweep' object is required", {"sweep"}};
    }
    const auto &sw = body["sweep"];
    if (sw.contains("feature")) {
        if (!sw["feature"].is_string()) throw RequestError{422, "sweep feature must be a string", {"sweep.feature"}};
        s.feature = sw["feature"].get<std::string>();
    } else {
        s.feature = entry.sweep_feature;
    }
    const auto &names = model_feature_names(entry.model());
    if (std::find(names.begin(), names.end(), s.feature) == names.end()) {
        throw RequestError{422, "unknown sweep feature '" + s.feature + "'", {"sweep.feature"}};
    }
    if (sw.contains("values")) {
        if (!sw["values"].is_array()) throw RequestError{422, "sweep values must be an array", {"sweep.values"}};
        if (sw["values"].empty()) throw RequestError{422, "sweep values must be non-empty", {"sweep.values"}};
        if (sw["values"].size() > kMaxSweepCount) {
            throw RequestError{422, "sweep has more than 10000 points", {"sweep.values"}};
        }
        for (std::size_t i = 0; i < sw["values"].size(); ++i) {
            s.values.push_back(number_field(sw["values"][i], "sweep.values[" + std::to_string(i) + "]"));
        }
        return s;
    }
    for (const char *k : {"start", "stop", "count"}) {
        if (!sw.contains(k)) {
            throw RequestError{422, "sweep needs 'values' or 'start', 'stop' and 'count'", {std::string("sweep.") + k}};
        }
    }
    const double start = number_field(sw["start"], "sweep.start");
    const double stop = number_field(sw["stop"], "sweep.stop");
    if (!sw["count"].is_number_integer() || sw["count"].get<long long>() < 1) {
        throw RequestError{422, "sweep count must be a positive integer", {"sweep.count"}};
    }
    const auto count = sw["count"].get<long long>();
    if (count > static_cast<long long>(kMaxSweepCount)) {
        throw RequestError{422, "sweep has more than 10000 points", {"sweep.count"}};
    }
    s.values = linspace(start, stop, static_cast<std::size_t>(count));
    return s;
}

inline const RegistryEntry &require_model(const ModelRegistry &reg, const std::string &id) {
    const RegistryEntry *e = reg.find(id);
    if (!e) throw RequestError{404, "unknown model '" + id + "'", {}};
    return *e;
}

template <typename F>
Reply guarded(F &&f) {
    try {
        return f();
    } catch (const RequestError &e) {
        return error_reply(e);
    } catch (const std::exception &e) {
        // Requests are fully validated up front, so anything else is a server-side fault.
        return internal_error(e.what());
    }
}

} // namespace detail

inline Reply list_models(const ModelRegistry &reg) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto &[id, e] : reg.entries()) {
        out.push_back({{"model_id", id},
                       {"kind", e.kind()},
                       {"feature_names", model_feature_names(e.model())},
                       {"target_name", model_target_name(e.model())},
                       {"sweep_feature", e.sweep_feature.empty() ? nlohmann::json(nullptr) : nlohmann::json(e.sweep_feature)},
                       {"created_at", e.loaded.created_at},
                       {"file_sha256", e.loaded.file_sha256}});
    }
    return {200, std::move(out)};
}

inline Reply predict_profile(const ModelRegistry &reg, const std::string &id, const std::string &body_text) {
    return detail::guarded([&]() -> Reply {
        const RegistryEntry &e = detail::require_model(reg, id);
        const nlohmann::json body = detail::parse_body(body_text);
        const detail::Sweep sweep = detail::parse_sweep(body, e);
        const auto fixed = detail::parse_fixed(body, model_feature_names(e.model()), sweep.feature);
        const double z = detail::parse_z(body);
        const ProfileWithCI p = predict_profile_any(e.model(), fixed, sweep.feature, sweep.values, z);
        nlohmann::json out = profile_to_json(p, sweep.feature);
        out["model_id"] = id;
        return {200, std::move(out)};
    });
}

inline Reply back_predict(const ModelRegistry &reg, const std::string &id, const std::string &body_text) {
    return detail::guarded([&]() -> Reply {
        const RegistryEntry &e = detail::require_model(reg, id);
        const std::string &target = model_target_name(e.model());
        if (!is_design_feature(target)) {
            throw detail::RequestError{409, "model target '" + target + "' is not a design parameter", {}};
        }
        const nlohmann::json body = detail::parse_body(body_text);
        const auto &names = model_feature_names(e.model());
        const auto fixed = detail::parse_fixed(body, names, "");
        const double z = detail::parse_z(body);
        Vector x(static_cast<Eigen::Index>(names.size()));
        for (std::size_t k = 0; k < names.size(); ++k) x(static_cast<Eigen::Index>(k)) = fixed.at(names[k]);
        const AnyPrediction p = predict_any(e.model(), x);
        nlohmann::json out{{"model_id", id}, {"target_name", target}, {"mean", p.mean}, {"z", z}};
        if (p.variance) {
            const double half = z * std::sqrt(*p.variance);
            out["variance"] = *p.variance;
            out["ci_lower"] = p.mean - half;
            out["ci_upper"] = p.mean + half;
        } else {
            out["variance"] = nullptr;
            out["ci_lower"] = nullptr;
            out["ci_upper"] = nullptr;
        }
        return {200, std::move(out)};
    });
}

struct ServiceConfig {
    std::string models_dir = "models";
    std::string host = "0.0.0.0";
    int port = 8080;
    /// Empty disables CORS headers.
    std::string cors_origin;
};

/// HTTP front end. /healthz answers 503 until set_registry() publishes the models.
class Service {
  public:
    explicit Service(ServiceConfig cfg) : cfg_(std::move(cfg)) { install_routes(); }

    Service(const Service &) = delete;
    Service &operator=(const Service &) = delete;
    ~Service() { stop(); }

    /// Binds the socket and starts serving on a background thread. Returns the bound port
    /// (useful with port 0).
    int start() {
        int port = cfg_.port;
        if (port == 0) {
            port = server_.bind_to_any_port(cfg_.host);
        } else if (!server_.bind_to_port(cfg_.host, port)) {
            port = -1;
        }
        if (port < 0) throw IoError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
        bound_port_ = port;
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port;
    }

    /// Publishes the registry; from here on the service is ready and the registry is never mutated.
    void set_registry(ModelRegistry reg) {
        registry_ = std::move(reg);
        ready_.store(true, std::memory_order_release);
    }

    /// Loads cfg.models_dir, logging rejected files, and publishes it.
    void load_models() {
        std::vector<std::string> rejected;
        ModelRegistry reg = ModelRegistry::load_dir(cfg_.models_dir, &rejected);
        for (const auto &r : rejected) std::cerr << "gpsurr-service: rejected " << r << std::endl;
        std::cerr << "gpsurr-service: " << reg.size() << " model(s) loaded from " << cfg_.models_dir << std::endl;
        set_registry(std::move(reg));
    }

    void wait() {
        if (thread_.joinable()) thread_.join();
    }

    void stop() {
        server_.stop();
        wait();
    }

    [[nodiscard]] bool ready() const { return ready_.load(std::memory_order_acquire); }
    [[nodiscard]] int port() const { return bound_port_; }

  private:
    void send(httplib::Response &res, const Reply &r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    }

    void not_ready(httplib::Response &res) {
        send(res, {503, {{"status", "starting"}, {"models_loaded", 0}}});
    }

    void install_routes() {
        if (!cfg_.cors_origin.empty()) {
            server_.set_default_headers({{"Access-Control-Allow-Origin", cfg_.cors_origin},
                                         {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                                         {"Access-Control-Allow-Headers", "Content-Type"},
                                         {"Vary", "Origin"}});
            server_.Options(R"(/.*)", [](const httplib::Request &, httplib::Response &res) { res.status = 204; });
        }
        server_.Get("/healthz", [this](const httplib::Request &, httplib::Response &res) {
            if (!ready()) return not_ready(res);
            send(res, {200, {{"status", "ok"}, {"models_loaded", registry_.size()}}});
        });
        server_.Get("/models", [this](const httplib::Request &, httplib::Response &res) {
            if (!ready()) return not_ready(res);
            send(res, list_models(registry_));
        });
        server_.Post(R"(/models/([^/]+)/predict-profile)", [this](const httplib::Request &req, httplib::Response &res) {
            if (!ready()) return not_ready(res);
            send(res, predict_profile(registry_, req.matches[1], req.body));
        });
        server_.Post(R"(/models/([^/]+)/back-predict)", [this](const httplib::Request &req, httplib::Response &res) {
            if (!ready()) return not_ready(res);
            send(res, back_predict(registry_, req.matches[1], req.body));
        });
        server_.set_error_handler([](const httplib::Request &, httplib::Response &res) {
            if (res.body.empty() && res.status == 404) res.set_content(R"({"error":"not found"})", "application/json");
        });
        server_.set_exception_handler([this](const httplib::Request &, httplib::Response &res, std::exception_ptr ep) {
            std::string what = "unknown exception";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception &e) {
                what = e.what();
            } catch (...) {
            }
            send(res, detail::internal_error(what));
        });
    }

    ServiceConfig cfg_;
    httplib::Server server_;
    std::thread thread_;
    std::atomic<bool> ready_{false};
    ModelRegistry registry_;
    int bound_port_ = -1;
};

/// Blocking entry point used by `gpsurr serve`.
inline void run(const ServiceConfig &cfg) {
    Service svc(cfg);
    const int port = svc.start();
    std::cerr << "gpsurr-service: listening on " << cfg.host << ":" << port << std::endl;
    svc.load_models();
    svc.wait();
}

} // namespace gpsurr::service

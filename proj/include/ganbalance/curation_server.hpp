#pragma once

// JSON API over a CurationStore:
//   GET  /api/pending?class=&limit=&after=
//   GET  /api/image/{id}
//   POST /api/verdict   {"id", "decision": "accept"|"reject", "reviewer"}
//   GET  /api/stats

#include <httplib.h>
// <resolv.h>, reached through httplib, defines `_res`, which breaks Eigen
// included afterwards. httplib does not use it.
#ifdef _res
#undef _res
#endif

#include "ganbalance/curation.hpp"

#include <json.hpp>
#include <string>

namespace ganbalance {

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

inline nlohmann::json counts_json(const StatusCounts& c) {
  return {{"pending", c.pending}, {"accepted", c.accepted}, {"rejected", c.rejected}};
}

inline nlohmann::json summary_json(const GeneratedSample& s) {
  return {{"id", s.id},
          {"class", std::string(name(s.label))},
          {"class_name", std::string(display_name(s.label))},
          {"image_url", "/api/image/" + s.id},
          {"created_at", s.created_at},
          {"status", std::string(status_name(s.status))}};
}

}  // namespace detail

inline constexpr std::size_t kDefaultPageSize = 50;

inline void register_curation_routes(httplib::Server& server, CurationStore& store) {
  server.Get("/api/pending", [&store](const httplib::Request& req, httplib::Response& res) {
    std::optional<ClassLabel> label;
    if (req.has_param("class") && !req.get_param_value("class").empty()) {
      label = parse_label(req.get_param_value("class"));
      if (!label) return detail::send_error(res, 400, "unknown class " + req.get_param_value("class"));
    }
    std::size_t limit = kDefaultPageSize;
    if (req.has_param("limit")) {
      try {
        const long v = std::stol(req.get_param_value("limit"));
        if (v < 1) throw std::invalid_argument("limit");
        limit = static_cast<std::size_t>(v);
      } catch (const std::exception&) {
        return detail::send_error(res, 400, "limit must be a positive integer");
      }
    }
    std::optional<std::string> after;
    if (req.has_param("after") && !req.get_param_value("after").empty()) after = req.get_param_value("after");
    try {
      // One extra tells whether another page exists.
      auto page = store.list_pending(label, limit + 1, after);
      const bool more = page.size() > limit;
      if (more) page.pop_back();
      nlohmann::json body{{"samples", nlohmann::json::array()}, {"next", nullptr}};
      for (const auto& s : page) body["samples"].push_back(detail::summary_json(s));
      if (more) body["next"] = page.back().id;
      detail::send_json(res, 200, body);
    } catch (const NotFound& e) {
      detail::send_error(res, 400, e.what());
    }
  });

  server.Get(R"(/api/image/([^/]+))", [&store](const httplib::Request& req, httplib::Response& res) {
    const auto sample = store.find(req.matches[1]);
    if (!sample) return detail::send_error(res, 404, "unknown sample");
    try {
      const auto bytes = read_file_bytes(sample->png_path);
      res.status = 200;
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    } catch (const ImageError& e) {
      detail::send_error(res, 500, e.what());
    }
  });

  server.Post("/api/verdict", [&store](const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      return detail::send_error(res, 400, "body is not JSON");
    }
    if (!body.is_object() || !body.contains("id") || !body["id"].is_string() || !body.contains("decision") ||
        !body["decision"].is_string())
      return detail::send_error(res, 400, "expected {\"id\", \"decision\", \"reviewer\"}");
    const auto decision = parse_decision(body["decision"].get<std::string>());
    if (!decision) return detail::send_error(res, 400, "decision must be accept or reject");
    const std::string reviewer =
        body.contains("reviewer") && body["reviewer"].is_string() ? body["reviewer"].get<std::string>() : "";
    try {
      const auto s = store.post_verdict(body["id"].get<std::string>(), *decision, reviewer);
      detail::send_json(res, 200, detail::summary_json(s));
    } catch (const NotFound& e) {
      detail::send_error(res, 404, e.what());
    } catch (const Conflict& e) {
      detail::send_error(res, 409, e.what());
    }
  });

  server.Get("/api/stats", [&store](const httplib::Request&, httplib::Response& res) {
    const auto st = store.stats();
    nlohmann::json classes = nlohmann::json::object();
    for (auto c : kAllClasses) classes[std::string(name(c))] = detail::counts_json(st.per_class[static_cast<std::size_t>(c)]);
    detail::send_json(res, 200, {{"classes", classes}, {"total", detail::counts_json(st.total())}});
  });
}

}  // namespace ganbalance

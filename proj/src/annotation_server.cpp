#include "cmer/annotation_server.hpp"

#include <httplib.h>

#include <algorithm>

#include "cmer/error.hpp"

namespace cmer {

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, nlohmann::ordered_json{{"error", message}});
}

std::string kappa_display(double kappa) {
  auto s = format_metric(kappa);
  return s == "-0.00" ? "0.00" : s;
}

}  // namespace

struct AnnotationServer::Impl {
  AnnotationProject& project;
  std::map<std::string, std::string> tokens;
  httplib::Server server;

  Impl(AnnotationProject& p, std::map<std::string, std::string> t) : project(p), tokens(std::move(t)) {}

  // Annotator id for the request's bearer token, or nullopt after writing a 401.
  std::optional<std::string> authenticate(const httplib::Request& req, httplib::Response& res) const {
    const auto header = req.get_header_value("Authorization");
    constexpr std::string_view kPrefix = "Bearer ";
    if (header.rfind(kPrefix, 0) == 0) {
      if (auto it = tokens.find(header.substr(kPrefix.size())); it != tokens.end()) return it->second;
    }
    send_error(res, 401, "missing or unknown bearer token");
    return std::nullopt;
  }

  bool project_matches(const httplib::Request& req, httplib::Response& res) const {
    if (req.matches[1] == project.spec().name) return true;
    send_error(res, 404, "unknown project '" + std::string(req.matches[1]) + "'");
    return false;
  }

  // Wraps a handler with authentication, project lookup and error mapping.
  template <typename F>
  httplib::Server::Handler guarded(F f) {
    return [this, f](const httplib::Request& req, httplib::Response& res) {
      try {
        if (!project_matches(req, res)) return;
        auto who = authenticate(req, res);
        if (!who) return;
        f(req, res, *who);
      } catch (const AuthorizationError& e) {
        send_error(res, 403, e.what());
      } catch (const NotFoundError& e) {
        send_error(res, 404, e.what());
      } catch (const ConflictError& e) {
        send_error(res, 409, e.what());
      } catch (const ValidationError& e) {
        send_error(res, 400, e.what());
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, std::string("malformed request: ") + e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      }
    };
  }

  void info(const httplib::Request&, httplib::Response& res, const std::string& who) {
    const auto& spec = project.spec();
    nlohmann::ordered_json j;
    j["name"] = spec.name;
    j["annotator"] = who;
    j["guideline"] = spec.guideline_text;
    j["coverage"] = spec.coverage;
    j["reviews"] = project.reviews().size();
    j["unresolved"] = project.unresolved().size();
    send_json(res, 200, j);
  }

  void queue(const httplib::Request& req, httplib::Response& res, const std::string& who) {
    const auto requested = req.get_param_value("annotator");
    if (!requested.empty() && requested != who) {
      throw AuthorizationError("token does not belong to annotator '" + requested + "'");
    }
    nlohmann::ordered_json j;
    j["annotator"] = who;
    auto& pending = j["tasks"] = nlohmann::ordered_json::array();
    std::size_t total = 0, labeled = 0;
    for (const auto& t : project.tasks_for(who)) {
      ++total;
      if (t.status == TaskStatus::labeled) {
        ++labeled;
        continue;
      }
      const auto r = project.review(t.review_id);
      nlohmann::ordered_json e;
      e["review_id"] = t.review_id;
      e["kind"] = std::string(to_string(t.kind));
      e["text"] = r->text;
      e["app"] = r->app;
      e["date"] = to_iso(r->date);
      pending.push_back(std::move(e));
    }
    j["progress"] = {{"labeled", labeled}, {"total", total}};
    send_json(res, 200, j);
  }

  void label(const httplib::Request& req, httplib::Response& res, const std::string& who) {
    const auto body = nlohmann::json::parse(req.body);
    if (!body.is_object()) throw ValidationError("body must be a JSON object");
    const auto review_id = body.at("review_id").get<std::string>();
    const auto l = parse_label_token(body.at("label").get<std::string>());
    project.submit_label(who, review_id, l);
    nlohmann::ordered_json j;
    j["review_id"] = review_id;
    j["label"] = std::string(label_token(l));
    const auto adj = project.adjudications();
    if (auto it = adj.find(review_id); it != adj.end()) {
      j["final_label"] = std::string(label_token(it->second.final_label));
      j["resolved_by"] = std::string(to_string(it->second.resolved_by));
    } else {
      j["final_label"] = nullptr;
      j["resolved_by"] = nullptr;
    }
    send_json(res, 200, j);
  }

  void disagreements(const httplib::Request&, httplib::Response& res, const std::string& who) {
    nlohmann::ordered_json j;
    auto& items = j["disagreements"] = nlohmann::ordered_json::array();
    for (const auto& id : project.open_disagreements()) {
      const auto tasks = project.tasks_of_review(id);
      const bool first_pass_rater = std::any_of(tasks.begin(), tasks.end(), [&](const AnnotationTask& t) {
        return t.kind == TaskKind::first_pass && t.assigned_to == who;
      });
      if (first_pass_rater) continue;
      const auto r = project.review(id);
      nlohmann::ordered_json e;
      e["review_id"] = id;
      e["text"] = r->text;
      e["app"] = r->app;
      e["date"] = to_iso(r->date);
      auto& labels = e["first_labels"] = nlohmann::ordered_json::array();
      for (const auto& t : tasks) {
        if (t.kind == TaskKind::first_pass && t.label) labels.push_back(std::string(label_token(*t.label)));
      }
      e["assigned_to_you"] = std::any_of(tasks.begin(), tasks.end(), [&](const AnnotationTask& t) {
        return t.kind == TaskKind::tiebreak && t.assigned_to == who && t.status == TaskStatus::pending;
      });
      items.push_back(std::move(e));
    }
    send_json(res, 200, j);
  }

  void agreement(const httplib::Request&, httplib::Response& res, const std::string&) {
    nlohmann::ordered_json j;
    j["pairs"] = project.completed_pairs();
    if (auto s = project.agreement()) {
      j["p_o"] = s->p_o;
      j["p_e"] = s->p_e;
      j["kappa"] = s->kappa;
      j["kappa_display"] = kappa_display(s->kappa);
    } else {
      j["p_o"] = nullptr;
      j["p_e"] = nullptr;
      j["kappa"] = nullptr;
      j["kappa_display"] = "n/a";
    }
    send_json(res, 200, j);
  }

  void export_truth(const httplib::Request&, httplib::Response& res, const std::string&) {
    const auto unresolved = project.unresolved();
    if (!unresolved.empty()) {
      nlohmann::ordered_json j;
      j["error"] = "unresolved reviews";
      j["unresolved"] = unresolved;
      send_json(res, 409, j);
      return;
    }
    res.status = 200;
    res.set_content(to_jsonl(project.export_ground_truth()), "application/x-ndjson");
  }
};

AnnotationServer::AnnotationServer(AnnotationProject& project, std::map<std::string, std::string> tokens)
    : impl_(std::make_unique<Impl>(project, std::move(tokens))) {
  auto& s = impl_->server;
  auto* i = impl_.get();
  const std::string base = R"(/api/projects/([^/]+))";
  s.Get(base, i->guarded([i](auto& q, auto& r, auto& w) { i->info(q, r, w); }));
  s.Get(base + "/queue", i->guarded([i](auto& q, auto& r, auto& w) { i->queue(q, r, w); }));
  s.Post(base + "/labels", i->guarded([i](auto& q, auto& r, auto& w) { i->label(q, r, w); }));
  s.Get(base + "/disagreements", i->guarded([i](auto& q, auto& r, auto& w) { i->disagreements(q, r, w); }));
  s.Get(base + "/agreement", i->guarded([i](auto& q, auto& r, auto& w) { i->agreement(q, r, w); }));
  s.Get(base + "/export", i->guarded([i](auto& q, auto& r, auto& w) { i->export_truth(q, r, w); }));
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw IoError("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void AnnotationServer::listen() { impl_->server.listen_after_bind(); }

void AnnotationServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace cmer

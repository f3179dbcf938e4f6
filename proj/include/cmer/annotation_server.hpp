#pragma once

#include <map>
#include <memory>
#include <string>

#include "cmer/annotation.hpp"

namespace cmer {

/// JSON API over one AnnotationProject, authenticated by bearer token:
///
///   GET  /api/projects/{p}                         project info and guidelines
///   GET  /api/projects/{p}/queue?annotator=<id>    caller's pending tasks
///   POST /api/projects/{p}/labels                  {"review_id", "label": "psr"|"non_psr"}
///   GET  /api/projects/{p}/disagreements           open tie-breaks, rater identities hidden
///   GET  /api/projects/{p}/agreement               kappa over first-pass pairs
///   GET  /api/projects/{p}/export                  ground truth as JSONL
///
/// Errors are {"error": message} with 400, 401, 403, 404 or 409.
class AnnotationServer {
 public:
  /// `tokens` maps bearer token to annotator id.
  AnnotationServer(AnnotationProject& project, std::map<std::string, std::string> tokens);
  ~AnnotationServer();

  AnnotationServer(const AnnotationServer&) = delete;
  AnnotationServer& operator=(const AnnotationServer&) = delete;

  /// Binds to host:port (port 0 picks a free one) and returns the port.
  int bind(const std::string& host, int port);
  /// Serves until stop(). Call after bind().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cmer

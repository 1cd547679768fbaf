#include "fakescope/server.hpp"

#include <sys/socket.h>

#include <cmath>

// Eigen before httplib: <resolv.h> defines a _res macro that collides with Eigen parameter names.
#include "fakescope/artifact.hpp"
#include "fakescope/error.hpp"
#include "fakescope/image_io.hpp"
#include "fakescope/service.hpp"

#include <httplib.h>

namespace fs = std::filesystem;

namespace fakescope {

namespace {

constexpr const char* kJson = "application/json";

int status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NotFound: return 404;
    case ErrorKind::Validation:
    case ErrorKind::Argument: return 400;
    case ErrorKind::Capability:
    case ErrorKind::DegenerateModel: return 422;
    default: return 500;
  }
}

void send_error(httplib::Response& res, int status, std::string_view kind, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", {{"kind", kind}, {"message", message}}}}.dump(), kJson);
}

void send_json(httplib::Response& res, const json& body) { res.set_content(body.dump(), kJson); }

int parse_int(const std::string& text, const char* what) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::Argument, std::string("invalid ") + what + " '" + text + "'");
}

CellId parse_cell_text(const std::string& text) {
  const auto comma = text.find(',');
  if (comma == std::string::npos) throw Error(ErrorKind::Argument, "cell must be row,col");
  return {parse_int(text.substr(0, comma), "row"), parse_int(text.substr(comma + 1), "col")};
}

CellId parse_cell_json(const json& j) {
  if (j.is_array() && j.size() == 2 && j[0].is_number_integer() && j[1].is_number_integer()) {
    return {j[0].get<int>(), j[1].get<int>()};
  }
  if (j.is_object() && j.contains("row") && j.contains("col")) return {j["row"].get<int>(), j["col"].get<int>()};
  if (j.is_string()) return parse_cell_text(j.get<std::string>());
  throw Error(ErrorKind::Argument, "cell must be [row, col]");
}

json parse_body(const httplib::Request& req) {
  try {
    json body = json::parse(req.body);
    if (!body.is_object()) throw Error(ErrorKind::Argument, "request body must be a JSON object");
    return body;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Argument, std::string("malformed JSON body: ") + e.what());
  }
}

}  // namespace

struct ApiServer::Impl {
  SnapshotStore store;
  AnnotationStore annotations;
  httplib::Server http;

  Impl(const fs::path& root, const fs::path& notes) : store(root), annotations(notes) {}

  // Wraps a handler so library errors map to JSON error responses.
  template <typename Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        send_error(res, status_for(e.kind()), to_string(e.kind()), e.what());
      } catch (const json::exception& e) {
        send_error(res, 400, "argument", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
      }
    };
  }

  void routes() {
    const std::string base = "/api/v1/snapshots";
    const std::string snap = base + R"(/([^/]+))";
    const std::string cell = snap + R"(/cells/(-?\d+),(-?\d+))";

    http.Get(base, guarded([this](const httplib::Request&, httplib::Response& res) {
      json list = json::array();
      for (const auto& id : store.list()) {
        const auto s = store.get(id);
        const json& m = s->meta();
        list.push_back({{"id", id},
                        {"dataset", m.value("dataset", "")},
                        {"created_at", m.value("created_at", "")},
                        {"grid", s->grid()},
                        {"points", s->size()},
                        {"cells", m.value("cells", 0)},
                        {"adapter", m.value("adapter", "")},
                        {"errors", m.value("errors", json::array())}});
      }
      send_json(res, {{"snapshots", list}});
    }));

    http.Get(snap + "/points", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = store.get(req.matches[1]);
      json points = json::array();
      std::istringstream in(s->points_jsonl());
      std::string line;
      while (std::getline(in, line)) {
        if (!line.empty()) points.push_back(json::parse(line));
      }
      send_json(res, {{"snapshot_id", s->id()}, {"grid", s->grid()}, {"points", points}});
    }));

    http.Get(snap + "/cells", guarded([this](const httplib::Request& req, httplib::Response& res) {
      res.set_content(store.get(req.matches[1])->cells_json(), kJson);
    }));

    http.Get(cell, guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = store.get(req.matches[1]);
      send_json(res, s->cell({parse_int(req.matches[2], "row"), parse_int(req.matches[3], "col")}));
    }));

    http.Get(cell + "/layout", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = store.get(req.matches[1]);
      send_json(res, s->layout({parse_int(req.matches[2], "row"), parse_int(req.matches[3], "col")}));
    }));

    http.Get(cell + "/concepts", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = store.get(req.matches[1]);
      send_json(res, s->concepts({parse_int(req.matches[2], "row"), parse_int(req.matches[3], "col")}));
    }));

    http.Get(snap + R"(/images/(.+)/relevance/(\d+))",
             guarded([this](const httplib::Request& req, httplib::Response& res) {
               const auto s = store.get(req.matches[1]);
               const std::string image_id = req.matches[2];
               const int dim = parse_int(req.matches[3], "dimension");
               if (dim < 1 || dim > 16) throw Error(ErrorKind::Argument, "dimension must be in 1..16");
               const std::string format = req.has_param("format") ? req.get_param_value("format") : "png";
               const auto stack = s->relevance(image_id);
               const PixelRelevanceMap& map = stack->maps.at(static_cast<std::size_t>(dim - 1));
               if (format == "raw") {
                 res.set_header("X-Relevance-Dim", std::to_string(dim));
                 res.set_content(read_file(s->relevance_path(image_id)), "application/octet-stream");
               } else if (format == "json") {
                 send_json(res, {{"image_id", image_id},
                                 {"dim", dim},
                                 {"height", map.height},
                                 {"width", map.width},
                                 {"degenerate", map.degenerate},
                                 {"values", map.values}});
               } else if (format == "png") {
                 std::vector<std::uint8_t> gray(map.values.size());
                 for (std::size_t i = 0; i < gray.size(); ++i) {
                   gray[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map.values[i], 0.0f, 1.0f) * 255.0f));
                 }
                 res.set_content(encode_png_gray(map.width, map.height, gray), "image/png");
               } else {
                 throw Error(ErrorKind::Argument, "format must be png, raw or json");
               }
             }));

    http.Get(snap + R"(/images/(.+)/contributions)",
             guarded([this](const httplib::Request& req, httplib::Response& res) {
               send_json(res, store.get(req.matches[1])->contributions(req.matches[2]));
             }));

    http.Get(snap + "/dimensions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = store.get(req.matches[1]);
      const std::string scope = req.has_param("scope") ? req.get_param_value("scope") : "global";
      const std::string filter_text = req.has_param("filter") ? req.get_param_value("filter") : "all";
      const auto filter = parse_filter(filter_text);
      if (!filter) throw Error(ErrorKind::Argument, "filter must be all, correct or incorrect");
      std::optional<CellId> cell;
      if (scope == "cell") {
        if (!req.has_param("cell")) throw Error(ErrorKind::Argument, "scope=cell needs cell=row,col");
        cell = parse_cell_text(req.get_param_value("cell"));
      } else if (scope != "global") {
        throw Error(ErrorKind::Argument, "scope must be global or cell");
      }
      send_json(res, s->dimensions(cell, *filter));
    }));

    http.Post(snap + "/whatif", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = store.get(req.matches[1]);
      const json body = parse_body(req);
      if (!body.contains("image_id") || !body["image_id"].is_string()) {
        throw Error(ErrorKind::Argument, "whatif needs image_id");
      }
      const double epsilon = body.value("epsilon", 1e-3);
      const std::string mode = body.value("mode", "joint");
      if (mode != "joint" && mode != "axis") throw Error(ErrorKind::Argument, "mode must be joint or axis");
      send_json(res, s->whatif(body["image_id"].get<std::string>(), epsilon,
                               mode == "joint" ? WhatIfMode::Joint : WhatIfMode::Axis));
    }));

    http.Post(snap + "/annotations", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = store.get(req.matches[1]);
      const json body = parse_body(req);
      if (!body.contains("cell")) throw Error(ErrorKind::Argument, "annotation needs cell");
      if (!body.contains("text") || !body["text"].is_string()) throw Error(ErrorKind::Argument, "annotation needs text");
      std::optional<std::string> author;
      if (body.contains("author") && body["author"].is_string()) author = body["author"].get<std::string>();
      const Annotation a = annotations.add(*s, parse_cell_json(body["cell"]), body["text"].get<std::string>(), author);
      res.status = 201;
      send_json(res, to_json(a));
    }));

    http.Get(snap + "/annotations", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = store.get(req.matches[1]);
      std::optional<CellId> only;
      if (req.has_param("cell")) only = parse_cell_text(req.get_param_value("cell"));
      json list = json::array();
      for (const auto& a : annotations.list(s->id())) {
        if (!only || a.cell == *only) list.push_back(to_json(a));
      }
      send_json(res, {{"annotations", list}});
    }));

    const auto remove = [this](const std::string& snapshot_id, const std::string& annotation_id,
                               httplib::Response& res) {
      const auto s = store.get(snapshot_id);
      annotations.remove(s->id(), annotation_id);
      send_json(res, {{"removed", annotation_id}});
    };
    http.Delete(snap + R"(/annotations/([^/]+))",
                guarded([remove](const httplib::Request& req, httplib::Response& res) {
                  remove(req.matches[1], req.matches[2], res);
                }));
    http.Delete(snap + "/annotations", guarded([remove](const httplib::Request& req, httplib::Response& res) {
      std::string id = req.has_param("id") ? req.get_param_value("id") : "";
      if (id.empty() && !req.body.empty()) id = parse_body(req).value("id", "");
      if (id.empty()) throw Error(ErrorKind::Argument, "annotation id required");
      remove(req.matches[1], id, res);
    }));

    http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "not-found" : "http", "no such route");
    });
  }
};

ApiServer::ApiServer(const fs::path& store, const fs::path& annotations)
    : impl_(std::make_unique<Impl>(store, annotations.empty() ? store / ".annotations" : annotations)) {
  // No SO_REUSEPORT.
  impl_->http.set_socket_options([](int sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  impl_->routes();
}

ApiServer::~ApiServer() { stop(); }

int ApiServer::bind(const std::string& host, int port) {
  if (port < 0 || port > 65535) throw Error(ErrorKind::Startup, "port out of range: " + std::to_string(port));
  if (port == 0) {
    const int bound = impl_->http.bind_to_any_port(host);
    if (bound <= 0) throw Error(ErrorKind::Startup, "cannot bind " + host);
    return bound;
  }
  if (!impl_->http.bind_to_port(host, port)) {
    throw Error(ErrorKind::Startup, "cannot bind " + host + ":" + std::to_string(port) + " (address in use?)");
  }
  return port;
}

void ApiServer::run() { impl_->http.listen_after_bind(); }

void ApiServer::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

void ApiServer::wait_until_ready() const { impl_->http.wait_until_ready(); }

std::pair<std::string, int> parse_address(const std::string& addr) {
  const auto colon = addr.rfind(':');
  std::string host = colon == std::string::npos ? "127.0.0.1" : addr.substr(0, colon);
  const std::string port = colon == std::string::npos ? addr : addr.substr(colon + 1);
  if (host.empty()) host = "127.0.0.1";
  return {host, parse_int(port, "port")};
}

}  // namespace fakescope

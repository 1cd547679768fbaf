#pragma once

#include <filesystem>
#include <memory>
#include <string>

namespace fakescope {

class SnapshotStore;
class AnnotationStore;

/// JSON HTTP API under /api/v1 over a snapshot store. Annotations live in a hidden
/// .annotations folder of the store unless another directory is given.
class ApiServer {
 public:
  explicit ApiServer(const std::filesystem::path& store, const std::filesystem::path& annotations = {});
  ~ApiServer();

  ApiServer(const ApiServer&) = delete;
  ApiServer& operator=(const ApiServer&) = delete;

  /// Port 0 picks a free port. Returns the bound port; throws a startup error when
  /// the address is unavailable.
  int bind(const std::string& host, int port);

  /// Blocks until stop().
  void run();
  void stop();
  void wait_until_ready() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// "host:port", ":port" or "port".
std::pair<std::string, int> parse_address(const std::string& addr);

}  // namespace fakescope

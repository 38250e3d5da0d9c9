#pragma once

#include "bm/dataset.hpp"
#include "bm/nn.hpp"
#include "bm/session.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

namespace bm {

struct ServerConfig {
  std::string bind = "0.0.0.0";
  std::uint16_t port = 8080;
  RevealPolicy reveal;
  std::size_t max_players = 40;
  std::size_t max_sessions = 8;
  std::optional<std::filesystem::path> ui_dir;
  std::filesystem::path log_path = "breakable-machine.log";
  std::string log_level = "info";
  std::size_t io_threads = 4;
  double frames_per_second = 5.0;  // per player, bursts of the same size
  /// Empty: a random credential is generated.
  std::string teacher_credential;
};

/// Observable counters for the privacy audit.
struct ServerStats {
  RegistryStats registry;
  std::size_t image_buffers = 0;  // every decoded image alive in the process
  std::size_t connections = 0;
  std::size_t queued_frames = 0;  // outgoing frames not yet written
};

/// One-port HTTP + WebSocket host: static UI, /join/{token}, the /rt
/// realtime channel, the dataset endpoints and /introspect.
class Server {
 public:
  Server(ServerConfig config, std::shared_ptr<const Model> model, Dataset dataset);
  ~Server();

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds, creates the first session and starts the I/O threads.
  void start();
  /// Closes every connection and joins the I/O threads. Not callable from
  /// an I/O thread.
  void stop();

  std::uint16_t port() const;
  std::string base_url() const;
  const std::string& teacher_credential() const;
  SessionId first_session() const;
  std::string join_url() const;

  SessionRegistry& registry();
  ServerStats stats() const;

  struct Impl;  // shared with the connection types in server.cpp

 private:
  std::unique_ptr<Impl> impl_;
};

/// First non-loopback IPv4 address of this host, or 127.0.0.1.
std::string local_ipv4();

}  // namespace bm

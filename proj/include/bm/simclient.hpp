#pragma once

#include "bm/protocol.hpp"

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bm::sim {

using protocol::json;

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One line of a scenario file: a verb followed by key=value tokens.
struct Step {
  std::string verb;
  std::map<std::string, std::string> args;
  std::size_t line = 0;

  const std::string& arg(const std::string& key) const;
  std::string arg_or(const std::string& key, std::string fallback) const;
};

/// Plain ordered step list. Blank lines and lines starting with '#' are
/// ignored; relative image paths resolve against base_dir.
struct Scenario {
  std::vector<Step> steps;
  std::filesystem::path base_dir = ".";

  static Scenario parse(std::string_view text, std::filesystem::path base_dir = ".");
  static Scenario load(const std::filesystem::path& file);
};

/// What a client knows about its session: the joined snapshot with every
/// later broadcast applied in seq order.
class ClientState {
 public:
  void apply(const protocol::Message& message);
  bool ready() const { return !state_.is_null(); }
  bool teacher() const { return teacher_; }
  /// The state in the shape of a joined payload, with order-free parts sorted.
  json normalized() const;

  static json normalize(json joined_payload);

 private:
  json state_;
  bool teacher_ = false;
  std::string self_;
};

struct Received {
  std::string client;
  double t_ms = 0.0;
  protocol::Message message;
};

struct ClientInfo {
  std::string role;
  std::string player_id;
  std::string display_name;
};

struct Transcript {
  std::map<std::string, ClientInfo> clients;
  std::vector<Received> messages;  // merged, ordered by seq then client
  std::vector<std::string> failures;

  bool ok() const { return failures.empty(); }
  std::vector<Received> of(const std::string& client) const;
  /// Payload of the last board broadcast the client received.
  std::optional<json> last_board(const std::string& client) const;
  json to_json() const;
};

struct SimOptions {
  std::string server;  // http://host:port
  std::string credential;
  std::chrono::milliseconds timeout{10000};
};

/// Runs every step against a live server. Connection failures and
/// unexpected protocol errors are recorded as failures; malformed scenarios
/// throw ScenarioError.
Transcript run_scenario(const Scenario& scenario, const SimOptions& options);

}  // namespace bm::sim

#pragma once

#include "bm/cam.hpp"
#include "bm/codec.hpp"
#include "bm/image.hpp"
#include "bm/nn.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

namespace bm {

using SessionId = std::string;
using PlayerId = std::string;
using Clock = std::chrono::system_clock;

/// How many top-ranked players show a numeric score; nullopt hides all.
using RevealPolicy = std::optional<std::size_t>;

struct SessionConfig {
  RevealPolicy reveal;
  std::size_t max_players = 40;
  std::size_t initial_label = 0;
};

struct RegistryConfig {
  std::size_t max_sessions = 8;
  std::string base_url = "http://127.0.0.1:8080";
  std::size_t thumbnail_side = 96;
  float heatmap_alpha = 0.6f;
};

struct Challenge {
  std::size_t label_index = 0;
  std::string label_name;
  std::uint64_t epoch = 0;

  bool operator==(const Challenge&) const = default;
};

/// Either every player or an explicit list.
struct ChallengeScope {
  std::optional<std::vector<PlayerId>> players;

  static ChallengeScope all() { return {}; }
  static ChallengeScope only(std::vector<PlayerId> ids) { return {std::move(ids)}; }
  bool is_all() const { return !players.has_value(); }
};

struct PlayerView {
  PlayerId player_id;
  std::string display_name;
  std::shared_ptr<const RgbImage> avatar;
};

struct BoardRow {
  PlayerId player_id;
  std::string display_name;
  std::size_t rank = 0;
  std::optional<double> confidence;  // absent when masked by the reveal policy
  std::shared_ptr<const RgbImage> thumbnail;
};

struct LeaderboardEntry {
  double best_confidence = 0.0;
  std::shared_ptr<const RgbImage> thumbnail;
  std::optional<Clock::time_point> achieved_at;
  std::uint64_t achieved_order = 0;  // logical clock, breaks equal timestamps
};

struct SessionSnapshot {
  SessionId session_id;
  std::string join_url;
  std::vector<std::string> labels;
  std::vector<PlayerView> roster;
  Challenge challenge;
  std::map<PlayerId, Challenge> overrides;
  bool paused = false;
  bool heatmap_enabled = false;
  bool dataset_unlocked = false;
  RevealPolicy reveal;
  std::vector<BoardRow> board;  // the board as last broadcast

  const Challenge& challenge_for(const PlayerId& player) const {
    auto it = overrides.find(player);
    return it == overrides.end() ? challenge : it->second;
  }
};

struct RosterEvent {
  std::vector<PlayerView> players;
};
struct ChallengeEvent {
  ChallengeScope scope;
  Challenge challenge;
};
struct PauseEvent {
  bool paused = false;
};
struct BoardEvent {
  std::vector<BoardRow> rows;
};
struct FlagsEvent {
  bool heatmap_enabled = false;
  bool dataset_unlocked = false;
  RevealPolicy reveal;
};
struct EndedEvent {};

using SessionEvent = std::variant<RosterEvent, ChallengeEvent, PauseEvent, BoardEvent, FlagsEvent, EndedEvent>;

/// Receives every state change of every session, in mutation order. Called
/// while the session's writer lock is held: implementations must copy what
/// they need and must not call back into the registry.
class SessionEventSink {
 public:
  virtual ~SessionEventSink() = default;
  virtual void publish(const SessionId& session, const SessionEvent& event) = 0;
};

struct SubmitOptions {
  bool render_png = false;
};

struct SubmissionOutcome {
  double confidence = 0.0;
  bool is_new_best = false;
  Challenge challenge;
  std::size_t top_label = 0;
  std::optional<CamGrid> cam;  // normalized, present when heatmaps are enabled
  std::optional<Bytes> heatmap_png;
};

struct CreatedSession {
  SessionId session_id;
  std::string join_token;
};

struct JoinResult {
  SessionId session_id;
  PlayerId player_id;
};

struct RegistryStats {
  std::size_t sessions = 0;
  std::size_t players = 0;
  std::size_t retained_images = 0;
};

/// Called under the session writer lock right after a join or attach so
/// that the caller can subscribe to broadcasts without missing or
/// duplicating any.
using SnapshotCallback = std::function<void(const SessionSnapshot&)>;

/// Owns every live session. Mutations of one session are serialized; reads
/// take consistent snapshots; distinct sessions run in parallel. Inference
/// runs outside the session lock.
class SessionRegistry {
 public:
  explicit SessionRegistry(std::shared_ptr<const Model> model, RegistryConfig config = {});
  ~SessionRegistry();

  SessionRegistry(const SessionRegistry&) = delete;
  SessionRegistry& operator=(const SessionRegistry&) = delete;

  /// Must be set before the registry is shared between threads.
  void set_sink(SessionEventSink* sink) { sink_ = sink; }
  void set_base_url(std::string url);

  const Model& model() const { return *model_; }

  CreatedSession create_session(const SessionConfig& config = {});
  void end_session(const SessionId& session);

  JoinResult join(std::string_view join_token, std::string_view display_name,
                  std::optional<RgbImage> avatar = std::nullopt, const SnapshotCallback& on_joined = {});
  /// Reconnect an existing player; returns false if the player is unknown.
  bool resume(const SessionId& session, const PlayerId& player, const SnapshotCallback& on_resumed);
  void attach(const SessionId& session, const SnapshotCallback& on_attached);

  SubmissionOutcome submit_frame(const SessionId& session, const PlayerId& player, const RgbImage& frame,
                                 SubmitOptions options = {});
  SubmissionOutcome submit_encoded(const SessionId& session, const PlayerId& player,
                                   std::span<const std::uint8_t> encoded, SubmitOptions options = {});

  void set_challenge(const SessionId& session, const ChallengeScope& scope, std::size_t label_index);
  void set_pause(const SessionId& session, bool paused);
  void set_reveal(const SessionId& session, RevealPolicy reveal);
  void set_heatmap(const SessionId& session, bool enabled);
  void set_dataset_unlock(const SessionId& session, bool unlocked);
  void set_avatar(const SessionId& session, const PlayerId& player, RgbImage avatar);

  std::vector<BoardRow> leaderboard_view(const SessionId& session) const;
  SessionSnapshot snapshot(const SessionId& session) const;
  std::optional<LeaderboardEntry> entry(const SessionId& session, const PlayerId& player) const;

  std::string join_url(const SessionId& session) const;
  std::string join_token(const SessionId& session) const;
  /// Issues a fresh join token; the previous one stops resolving.
  std::string regenerate_token(const SessionId& session);
  std::optional<SessionId> session_for_token(std::string_view token) const;
  std::optional<SessionId> newest_session() const;
  bool is_live(const SessionId& session) const;
  bool dataset_unlocked(const SessionId& session) const;

  RegistryStats stats() const;

 private:
  struct Session;

  std::shared_ptr<Session> find(const SessionId& session) const;
  std::shared_ptr<Session> find_by_token(std::string_view token) const;
  void publish(const Session& session, const SessionEvent& event) const;
  void publish_board(Session& session) const;
  std::vector<BoardRow> compute_board(const Session& session) const;
  SessionSnapshot make_snapshot(const Session& session) const;
  std::vector<PlayerView> roster_of(const Session& session) const;
  Challenge make_challenge(std::size_t label_index, std::uint64_t epoch) const;

  std::shared_ptr<const Model> model_;
  RegistryConfig config_;
  SessionEventSink* sink_ = nullptr;

  mutable std::shared_mutex registry_mutex_;
  std::unordered_map<SessionId, std::shared_ptr<Session>> sessions_;
  std::unordered_map<std::string, SessionId> tokens_;
  std::vector<SessionId> creation_order_;
};

}  // namespace bm

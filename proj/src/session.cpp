#include "bm/session.hpp"

#include "bm/errors.hpp"
#include "bm/tokens.hpp"

#include <algorithm>
#include <set>

namespace bm {

struct SessionRegistry::Session {
  struct Player {
    PlayerId id;
    std::string display_name;
    std::shared_ptr<const RgbImage> avatar;
    std::uint64_t join_order = 0;
  };

  mutable std::mutex writer;
  bool alive = true;

  SessionId id;
  std::string join_token;
  SessionConfig config;
  Clock::time_point created_at;

  std::map<PlayerId, Player> players;
  std::map<PlayerId, LeaderboardEntry> leaderboard;
  Challenge challenge;
  std::map<PlayerId, Challenge> overrides;
  bool paused = false;
  bool heatmap_enabled = false;
  bool dataset_unlocked = false;
  RevealPolicy reveal;

  std::vector<BoardRow> published_board;
  bool board_dirty = false;

  std::uint64_t epoch_counter = 0;
  std::uint64_t achievement_counter = 0;
  std::uint64_t join_counter = 0;

  const Challenge& challenge_for(const PlayerId& player) const {
    auto it = overrides.find(player);
    return it == overrides.end() ? challenge : it->second;
  }

  void purge() {
    players.clear();
    leaderboard.clear();
    overrides.clear();
    published_board.clear();
    published_board.shrink_to_fit();
  }
};

namespace {

std::size_t utf8_length(std::string_view text) {
  return std::size_t(std::count_if(text.begin(), text.end(),
                                   [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
}

/// Cuts to at most max_chars code points without splitting a sequence.
std::string utf8_prefix(std::string_view text, std::size_t max_chars) {
  std::size_t chars = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if ((static_cast<unsigned char>(text[i]) & 0xC0) != 0x80) {
      if (chars == max_chars) return std::string(text.substr(0, i));
      ++chars;
    }
  }
  return std::string(text);
}

constexpr std::size_t kMaxNameChars = 32;

[[noreturn]] void unknown_session() { throw Error(ErrorCode::UnknownSession, "unknown or ended session"); }

}  // namespace

SessionRegistry::SessionRegistry(std::shared_ptr<const Model> model, RegistryConfig config)
    : model_(std::move(model)), config_(std::move(config)) {
  if (!model_) throw std::invalid_argument("SessionRegistry: model required");
}

SessionRegistry::~SessionRegistry() = default;

void SessionRegistry::set_base_url(std::string url) {
  std::unique_lock lock(registry_mutex_);
  config_.base_url = std::move(url);
}

Challenge SessionRegistry::make_challenge(std::size_t label_index, std::uint64_t epoch) const {
  if (label_index >= model_->num_classes()) {
    throw Error(ErrorCode::InvalidLabel, "label index " + std::to_string(label_index) + " out of range");
  }
  return {label_index, model_->labels()[label_index], epoch};
}

std::shared_ptr<SessionRegistry::Session> SessionRegistry::find(const SessionId& session) const {
  std::shared_lock lock(registry_mutex_);
  auto it = sessions_.find(session);
  if (it == sessions_.end()) unknown_session();
  return it->second;
}

std::shared_ptr<SessionRegistry::Session> SessionRegistry::find_by_token(std::string_view token) const {
  std::shared_lock lock(registry_mutex_);
  auto it = tokens_.find(std::string(token));
  if (it == tokens_.end()) throw Error(ErrorCode::UnknownToken, "unknown join token");
  return sessions_.at(it->second);
}

void SessionRegistry::publish(const Session& session, const SessionEvent& event) const {
  if (sink_ != nullptr) sink_->publish(session.id, event);
}

std::vector<BoardRow> SessionRegistry::compute_board(const Session& s) const {
  struct Ranked {
    const Session::Player* player;
    const LeaderboardEntry* entry;
  };
  std::vector<Ranked> ranked;
  ranked.reserve(s.leaderboard.size());
  for (const auto& [id, entry] : s.leaderboard) ranked.push_back({&s.players.at(id), &entry});

  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.entry->best_confidence != b.entry->best_confidence) {
      return a.entry->best_confidence > b.entry->best_confidence;
    }
    const bool a_set = a.entry->achieved_at.has_value();
    const bool b_set = b.entry->achieved_at.has_value();
    if (a_set != b_set) return a_set;
    if (a_set && a.entry->achieved_order != b.entry->achieved_order) {
      return a.entry->achieved_order < b.entry->achieved_order;
    }
    return a.player->join_order < b.player->join_order;
  });

  std::vector<BoardRow> rows;
  rows.reserve(ranked.size());
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    BoardRow row;
    row.player_id = ranked[i].player->id;
    row.display_name = ranked[i].player->display_name;
    row.rank = i + 1;
    if (s.reveal && row.rank <= *s.reveal) row.confidence = ranked[i].entry->best_confidence;
    row.thumbnail = ranked[i].entry->thumbnail;
    rows.push_back(std::move(row));
  }
  return rows;
}

void SessionRegistry::publish_board(Session& s) const {
  if (s.paused) {
    s.board_dirty = true;
    return;
  }
  s.published_board = compute_board(s);
  s.board_dirty = false;
  publish(s, BoardEvent{s.published_board});
}

std::vector<PlayerView> SessionRegistry::roster_of(const Session& s) const {
  std::vector<const Session::Player*> ordered;
  for (const auto& [id, p] : s.players) ordered.push_back(&p);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto* a, const auto* b) { return a->join_order < b->join_order; });
  std::vector<PlayerView> roster;
  for (const auto* p : ordered) roster.push_back({p->id, p->display_name, p->avatar});
  return roster;
}

SessionSnapshot SessionRegistry::make_snapshot(const Session& s) const {
  SessionSnapshot snap;
  snap.session_id = s.id;
  {
    std::shared_lock lock(registry_mutex_);
    snap.join_url = config_.base_url + "/join/" + s.join_token;
  }
  snap.labels = model_->labels();
  snap.roster = roster_of(s);
  snap.challenge = s.challenge;
  snap.overrides = s.overrides;
  snap.paused = s.paused;
  snap.heatmap_enabled = s.heatmap_enabled;
  snap.dataset_unlocked = s.dataset_unlocked;
  snap.reveal = s.reveal;
  snap.board = s.published_board;
  return snap;
}

CreatedSession SessionRegistry::create_session(const SessionConfig& config) {
  if (config.max_players == 0) throw std::invalid_argument("max_players must be positive");
  auto s = std::make_shared<Session>();
  s->config = config;
  s->reveal = config.reveal;
  s->challenge = make_challenge(config.initial_label, 0);
  s->created_at = Clock::now();

  std::unique_lock lock(registry_mutex_);
  if (sessions_.size() >= config_.max_sessions) {
    throw Error(ErrorCode::RegistryFull, "session registry is full");
  }
  do {
    s->id = random_token(12);
  } while (sessions_.contains(s->id));
  do {
    s->join_token = random_token(16);
  } while (tokens_.contains(s->join_token));
  sessions_.emplace(s->id, s);
  tokens_.emplace(s->join_token, s->id);
  creation_order_.push_back(s->id);
  return {s->id, s->join_token};
}

void SessionRegistry::end_session(const SessionId& session) {
  std::shared_ptr<Session> s;
  {
    std::unique_lock lock(registry_mutex_);
    auto it = sessions_.find(session);
    if (it == sessions_.end()) return;  // idempotent
    s = std::move(it->second);
    sessions_.erase(it);
    tokens_.erase(s->join_token);
    std::erase(creation_order_, session);
  }
  std::lock_guard writer(s->writer);
  s->alive = false;
  s->purge();
  publish(*s, EndedEvent{});
}

JoinResult SessionRegistry::join(std::string_view join_token, std::string_view display_name,
                                 std::optional<RgbImage> avatar, const SnapshotCallback& on_joined) {
  const auto s = find_by_token(join_token);
  if (display_name.empty() || utf8_length(display_name) > kMaxNameChars) {
    throw Error(ErrorCode::InvalidName, "display name must be 1 to 32 characters");
  }

  std::lock_guard writer(s->writer);
  if (!s->alive) throw Error(ErrorCode::UnknownToken, "unknown join token");
  if (s->players.size() >= s->config.max_players) {
    throw Error(ErrorCode::Capacity, "session is full");
  }

  std::set<std::string, std::less<>> taken;
  for (const auto& [id, p] : s->players) taken.insert(p.display_name);
  std::string name(display_name);
  for (std::size_t n = 2; taken.contains(name); ++n) {
    const std::string suffix = "-" + std::to_string(n);
    name = utf8_prefix(display_name, kMaxNameChars - suffix.size()) + suffix;
  }

  Session::Player player;
  do {
    player.id = random_token(9);
  } while (s->players.contains(player.id));
  player.display_name = std::move(name);
  if (avatar && !avatar->empty()) {
    player.avatar = std::make_shared<const RgbImage>(make_thumbnail(*avatar, config_.thumbnail_side));
  }
  player.join_order = s->join_counter++;
  const PlayerId id = player.id;
  s->players.emplace(id, std::move(player));
  s->leaderboard.emplace(id, LeaderboardEntry{});

  if (on_joined) on_joined(make_snapshot(*s));
  publish(*s, RosterEvent{roster_of(*s)});
  publish_board(*s);
  return {s->id, id};
}

bool SessionRegistry::resume(const SessionId& session, const PlayerId& player,
                             const SnapshotCallback& on_resumed) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  if (!s->players.contains(player)) return false;
  if (on_resumed) on_resumed(make_snapshot(*s));
  return true;
}

void SessionRegistry::attach(const SessionId& session, const SnapshotCallback& on_attached) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  if (on_attached) on_attached(make_snapshot(*s));
}

SubmissionOutcome SessionRegistry::submit_encoded(const SessionId& session, const PlayerId& player,
                                                  std::span<const std::uint8_t> encoded,
                                                  SubmitOptions options) {
  return submit_frame(session, player, decode_image(encoded), options);
}

SubmissionOutcome SessionRegistry::submit_frame(const SessionId& session, const PlayerId& player,
                                                const RgbImage& frame, SubmitOptions options) {
  const auto s = find(session);
  Challenge target;
  bool heatmap = false;
  {
    std::lock_guard writer(s->writer);
    if (!s->alive) unknown_session();
    if (!s->players.contains(player)) throw Error(ErrorCode::UnknownPlayer, "unknown player");
    if (s->paused) throw Error(ErrorCode::Paused, "paused");
    target = s->challenge_for(player);
    heatmap = s->heatmap_enabled;
  }
  if (frame.empty()) throw Error(ErrorCode::UndecodableFrame, "empty frame");

  const ClassificationResult result = forward(*model_, preprocess(frame, model_->input_size()));
  SubmissionOutcome outcome;
  outcome.confidence = result.probs(Eigen::Index(target.label_index));
  outcome.challenge = target;
  outcome.top_label = result.top_label;
  if (heatmap) {
    outcome.cam = normalize_cam(compute_cam(result.feature_maps, model_->head_weights(), target.label_index));
    if (options.render_png) {
      const RowMatrixXf overlay = upsample_bilinear(*outcome.cam, frame.height(), frame.width());
      outcome.heatmap_png = encode_png(render_heatmap(overlay, frame, config_.heatmap_alpha));
    }
  }

  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  if (!s->players.contains(player)) throw Error(ErrorCode::UnknownPlayer, "unknown player");
  if (s->paused) throw Error(ErrorCode::Paused, "paused");

  auto& p = s->players.at(player);
  if (!p.avatar) {
    p.avatar = std::make_shared<const RgbImage>(make_thumbnail(frame, config_.thumbnail_side));
    publish(*s, RosterEvent{roster_of(*s)});
  }
  // A challenge change while inference ran starts a new epoch; the stale
  // score is reported but never recorded.
  if (s->challenge_for(player) != target) return outcome;

  auto& entry = s->leaderboard.at(player);
  if (outcome.confidence > entry.best_confidence) {
    entry.best_confidence = outcome.confidence;
    entry.thumbnail = std::make_shared<const RgbImage>(make_thumbnail(frame, config_.thumbnail_side));
    entry.achieved_at = Clock::now();
    entry.achieved_order = ++s->achievement_counter;
    outcome.is_new_best = true;
    publish_board(*s);
  }
  return outcome;
}

void SessionRegistry::set_challenge(const SessionId& session, const ChallengeScope& scope,
                                    std::size_t label_index) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  const Challenge next = make_challenge(label_index, s->epoch_counter + 1);

  std::vector<PlayerId> affected;
  if (scope.is_all()) {
    for (const auto& [id, p] : s->players) affected.push_back(id);
  } else {
    for (const auto& id : *scope.players) {
      if (!s->players.contains(id)) throw Error(ErrorCode::UnknownPlayer, "unknown player in challenge scope");
      affected.push_back(id);
    }
  }

  s->epoch_counter = next.epoch;
  if (scope.is_all()) {
    s->challenge = next;
    s->overrides.clear();
  } else {
    for (const auto& id : affected) s->overrides[id] = next;
  }
  for (const auto& id : affected) s->leaderboard[id] = LeaderboardEntry{};

  publish(*s, ChallengeEvent{scope, next});
  publish_board(*s);
}

void SessionRegistry::set_pause(const SessionId& session, bool paused) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  s->paused = paused;
  publish(*s, PauseEvent{paused});
  if (!paused && s->board_dirty) publish_board(*s);
}

void SessionRegistry::set_reveal(const SessionId& session, RevealPolicy reveal) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  s->reveal = reveal;
  publish(*s, FlagsEvent{s->heatmap_enabled, s->dataset_unlocked, s->reveal});
  publish_board(*s);
}

void SessionRegistry::set_heatmap(const SessionId& session, bool enabled) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  s->heatmap_enabled = enabled;
  publish(*s, FlagsEvent{s->heatmap_enabled, s->dataset_unlocked, s->reveal});
}

void SessionRegistry::set_dataset_unlock(const SessionId& session, bool unlocked) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  s->dataset_unlocked = unlocked;
  publish(*s, FlagsEvent{s->heatmap_enabled, s->dataset_unlocked, s->reveal});
}

void SessionRegistry::set_avatar(const SessionId& session, const PlayerId& player, RgbImage avatar) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  auto it = s->players.find(player);
  if (it == s->players.end()) throw Error(ErrorCode::UnknownPlayer, "unknown player");
  it->second.avatar = std::make_shared<const RgbImage>(make_thumbnail(avatar, config_.thumbnail_side));
  publish(*s, RosterEvent{roster_of(*s)});
}

std::vector<BoardRow> SessionRegistry::leaderboard_view(const SessionId& session) const {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  return compute_board(*s);
}

SessionSnapshot SessionRegistry::snapshot(const SessionId& session) const {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  return make_snapshot(*s);
}

std::optional<LeaderboardEntry> SessionRegistry::entry(const SessionId& session, const PlayerId& player) const {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  auto it = s->leaderboard.find(player);
  if (it == s->leaderboard.end()) return std::nullopt;
  return it->second;
}

std::string SessionRegistry::join_url(const SessionId& session) const {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  std::shared_lock lock(registry_mutex_);
  return config_.base_url + "/join/" + s->join_token;
}

std::string SessionRegistry::join_token(const SessionId& session) const {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  return s->join_token;
}

std::string SessionRegistry::regenerate_token(const SessionId& session) {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  std::unique_lock lock(registry_mutex_);
  std::string token;
  do {
    token = random_token(16);
  } while (tokens_.contains(token));
  tokens_.erase(s->join_token);
  tokens_.emplace(token, s->id);
  s->join_token = token;
  return token;
}

std::optional<SessionId> SessionRegistry::session_for_token(std::string_view token) const {
  std::shared_lock lock(registry_mutex_);
  auto it = tokens_.find(std::string(token));
  if (it == tokens_.end()) return std::nullopt;
  return it->second;
}

std::optional<SessionId> SessionRegistry::newest_session() const {
  std::shared_lock lock(registry_mutex_);
  if (creation_order_.empty()) return std::nullopt;
  return creation_order_.back();
}

bool SessionRegistry::is_live(const SessionId& session) const {
  std::shared_lock lock(registry_mutex_);
  return sessions_.contains(session);
}

bool SessionRegistry::dataset_unlocked(const SessionId& session) const {
  const auto s = find(session);
  std::lock_guard writer(s->writer);
  if (!s->alive) unknown_session();
  return s->dataset_unlocked;
}

RegistryStats SessionRegistry::stats() const {
  std::vector<std::shared_ptr<Session>> live;
  {
    std::shared_lock lock(registry_mutex_);
    for (const auto& [id, s] : sessions_) live.push_back(s);
  }
  RegistryStats stats;
  stats.sessions = live.size();
  for (const auto& s : live) {
    std::lock_guard writer(s->writer);
    stats.players += s->players.size();
    std::set<const RgbImage*> images;
    for (const auto& [id, p] : s->players) {
      if (p.avatar) images.insert(p.avatar.get());
    }
    for (const auto& [id, e] : s->leaderboard) {
      if (e.thumbnail) images.insert(e.thumbnail.get());
    }
    for (const auto& row : s->published_board) {
      if (row.thumbnail) images.insert(row.thumbnail.get());
    }
    stats.retained_images += images.size();
  }
  return stats;
}

}  // namespace bm

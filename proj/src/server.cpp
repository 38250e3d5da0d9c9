#include "bm/server.hpp"

#include "bm/errors.hpp"
#include "bm/protocol.hpp"
#include "bm/tokens.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/spdlog.h>

#include <arpa/inet.h>
#include <ifaddrs.h>
#include <net/if.h>

#include <atomic>
#include <deque>
#include <fstream>
#include <thread>

namespace bm {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using protocol::json;

namespace {

// Encoded once per broadcast; each connection frames it with its own seq.
struct Outgoing {
  std::string type;
  std::string payload;
  bool close_after = false;
};
using OutgoingPtr = std::shared_ptr<const Outgoing>;

OutgoingPtr make_outgoing(std::string type, json payload, bool close_after = false) {
  protocol::schema().validate({type, 0, payload});
  return std::make_shared<const Outgoing>(Outgoing{std::move(type), payload.dump(), close_after});
}

std::string frame_text(const Outgoing& out, std::uint64_t seq) {
  std::string s;
  s.reserve(out.payload.size() + 48);
  s += R"({"type":")";
  s += out.type;
  s += R"(","seq":)";
  s += std::to_string(seq);
  s += R"(,"payload":)";
  s += out.payload;
  s += '}';
  return s;
}

OutgoingPtr error_outgoing(ErrorCode code, std::string_view detail, bool close_after = false) {
  const auto m = protocol::error_message(code, detail);
  return make_outgoing(m.type, m.payload, close_after);
}

class TokenBucket {
 public:
  explicit TokenBucket(double rate) : rate_(rate), tokens_(rate) {}

  bool take() {
    const auto now = std::chrono::steady_clock::now();
    tokens_ = std::min(rate_, tokens_ + rate_ * std::chrono::duration<double>(now - last_).count());
    last_ = now;
    if (tokens_ < 1.0) return false;
    tokens_ -= 1.0;
    return true;
  }

 private:
  double rate_;
  double tokens_;
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

std::string percent_decode(std::string_view in) {
  auto hex = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  std::string out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] == '%' && i + 2 < in.size() && hex(in[i + 1]) >= 0 && hex(in[i + 2]) >= 0) {
      out += static_cast<char>(hex(in[i + 1]) * 16 + hex(in[i + 2]));
      i += 2;
    } else {
      out += in[i] == '+' ? ' ' : in[i];
    }
  }
  return out;
}

std::map<std::string, std::string> parse_query(std::string_view query) {
  std::map<std::string, std::string> out;
  while (!query.empty()) {
    const auto amp = query.find('&');
    const auto pair = query.substr(0, amp);
    const auto eq = pair.find('=');
    if (eq == std::string_view::npos) {
      out[percent_decode(pair)] = "";
    } else {
      out[percent_decode(pair.substr(0, eq))] = percent_decode(pair.substr(eq + 1));
    }
    if (amp == std::string_view::npos) break;
    query.remove_prefix(amp + 1);
  }
  return out;
}

std::vector<std::string> split_path(std::string_view path) {
  std::vector<std::string> parts;
  while (!path.empty()) {
    const auto slash = path.find('/');
    if (slash != 0) parts.push_back(percent_decode(path.substr(0, slash)));
    if (slash == std::string_view::npos) break;
    path.remove_prefix(slash + 1);
  }
  return parts;
}

std::string mime_type(const std::filesystem::path& p) {
  static const std::map<std::string, std::string> types = {
      {".html", "text/html; charset=utf-8"}, {".js", "text/javascript"}, {".mjs", "text/javascript"},
      {".css", "text/css"},                  {".json", "application/json"}, {".png", "image/png"},
      {".jpg", "image/jpeg"},                {".jpeg", "image/jpeg"},       {".svg", "image/svg+xml"},
      {".ico", "image/x-icon"},              {".wasm", "application/wasm"},
  };
  auto it = types.find(p.extension().string());
  return it == types.end() ? "application/octet-stream" : it->second;
}

constexpr std::string_view kBuiltinPage = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>Breakable Machine</title></head>
<body><h1>Breakable Machine</h1>
<p>The server is running. No web UI directory was configured; start the server with <code>--ui &lt;dir&gt;</code> to serve the student and teacher apps.</p>
<p>Realtime endpoint: <code>/rt</code></p></body></html>
)";

}  // namespace

class Connection;

/// Fans session events out to subscribed connections. publish() runs under
/// the session's writer lock, so per-session delivery order is mutation order.
class Hub : public SessionEventSink {
 public:
  struct Subscriber {
    std::weak_ptr<Connection> connection;
    bool teacher = false;
    PlayerId player;
  };

  void subscribe(const SessionId& session, Subscriber sub);
  void unsubscribe(const SessionId& session, const Connection* connection);
  void publish(const SessionId& session, const SessionEvent& event) override;

 private:
  std::mutex mutex_;
  std::unordered_map<SessionId, std::vector<Subscriber>> subscribers_;
};

struct Server::Impl {
  Impl(ServerConfig c, std::shared_ptr<const Model> m, Dataset d)
      : config(std::move(c)),
        model(std::move(m)),
        dataset(std::move(d)),
        registry(model, RegistryConfig{config.max_sessions, "", 96, 0.6f}) {
    credential = config.teacher_credential.empty() ? random_token(18) : config.teacher_credential;
    log = std::make_shared<spdlog::logger>(
        "server", std::make_shared<spdlog::sinks::basic_file_sink_mt>(config.log_path.string()));
    log->set_level(spdlog::level::from_str(config.log_level));
    log->flush_on(spdlog::level::trace);
    registry.set_sink(&hub);
  }

  SessionConfig session_config() const {
    SessionConfig sc;
    sc.reveal = config.reveal;
    sc.max_players = config.max_players;
    return sc;
  }

  void do_accept();
  http::response<http::string_body> handle_http(const http::request<http::string_body>& req);
  http::response<http::string_body> dataset_response(const http::request<http::string_body>& req,
                                                     const std::vector<std::string>& parts,
                                                     const std::map<std::string, std::string>& query);
  std::optional<http::response<http::string_body>> static_file(const http::request<http::string_body>& req,
                                                               const std::filesystem::path& relative);

  void track(const std::shared_ptr<Connection>& c) {
    std::lock_guard lock(connections_mutex);
    std::erase_if(live, [](const auto& w) { return w.expired(); });
    live.push_back(c);
  }

  ServerConfig config;
  std::shared_ptr<const Model> model;
  Dataset dataset;
  std::shared_ptr<spdlog::logger> log;
  std::string credential;
  std::string base_url;
  SessionId first;

  Hub hub;
  SessionRegistry registry;

  std::atomic<std::size_t> connections{0};
  std::atomic<std::size_t> queued{0};
  std::mutex connections_mutex;
  std::vector<std::weak_ptr<Connection>> live;

  // Declared last: destroying the context drops pending handlers, which
  // release connections that still reference the members above.
  asio::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::vector<std::thread> threads;
  bool running = false;
};

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  enum class Role { None, Teacher, Student };

  Connection(Server::Impl& server, tcp::socket socket)
      : server_(server), ws_(std::move(socket)), bucket_(server.config.frames_per_second) {
    ++server_.connections;
  }

  ~Connection() {
    if (!session_.empty()) server_.hub.unsubscribe(session_, this);
    server_.queued -= queue_.size();
    --server_.connections;
  }

  void accept(http::request<http::string_body> req) {
    upgrade_ = std::move(req);
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.read_message_max(2 * protocol::kMaxFrameBytes);
    ws_.async_accept(upgrade_, [self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->server_.log->debug("realtime connection opened");
      self->do_read();
    });
  }

  /// Thread-safe: hops onto this connection's strand.
  void deliver(OutgoingPtr out) {
    asio::post(ws_.get_executor(), [self = shared_from_this(), out = std::move(out)] { self->enqueue(*out); });
  }

  void shutdown() {
    asio::post(ws_.get_executor(), [self = shared_from_this()] {
      if (self->closing_) return;
      self->closing_ = true;
      if (!self->writing_) self->ws_.async_close(websocket::close_code::going_away, [self](beast::error_code) {});
    });
  }

 private:
  void enqueue(const Outgoing& out) {
    if (closing_) return;
    queue_.push_back(frame_text(out, ++out_seq_));
    ++server_.queued;
    if (out.close_after) closing_ = true;
    if (!writing_) do_write();
  }

  void send(OutgoingPtr out) { enqueue(*out); }

  void do_write() {
    writing_ = true;
    ws_.text(true);
    ws_.async_write(asio::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->on_write(ec);
    });
  }

  void on_write(beast::error_code ec) {
    queue_.pop_front();
    --server_.queued;
    if (ec) {
      server_.queued -= queue_.size();
      queue_.clear();
      writing_ = false;
      return;
    }
    if (!queue_.empty()) return do_write();
    writing_ = false;
    if (closing_) ws_.async_close(websocket::close_code::normal, [self = shared_from_this()](beast::error_code) {});
  }

  void do_read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        if (ec == websocket::error::message_too_big) {
          self->server_.log->warn("connection dropped: {}", to_string(ErrorCode::Oversize));
        }
        return;
      }
      std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->handle(text);
      self->do_read();
    });
  }

  void handle(std::string_view text) {
    try {
      protocol::Message m = protocol::decode(text);
      if (last_in_seq_ && m.seq <= *last_in_seq_) throw Error(ErrorCode::Sequence, "seq must strictly increase");
      last_in_seq_ = m.seq;
      if (role_ == Role::None) {
        if (m.type != "hello") throw Error(ErrorCode::Auth, "hello required first");
        on_hello(m);
      } else if (m.type == "frame_submit" && role_ == Role::Student) {
        on_frame(m);
      } else if (m.type == "control" && role_ == Role::Teacher) {
        on_control(m);
      } else {
        throw Error(ErrorCode::Auth, "message '" + m.type + "' not allowed here");
      }
    } catch (const Error& e) {
      server_.log->info("request rejected: {}", to_string(e.code()));
      send(error_outgoing(e.code(), e.what()));
    } catch (const std::exception& e) {
      server_.log->error("internal error while handling a frame");
      send(error_outgoing(ErrorCode::Internal, "internal error"));
    }
  }

  void on_hello(const protocol::Message& m) {
    const json& p = m.payload;
    if (!protocol::compatible_version(p.at("protocol_version").get<std::string>())) {
      server_.log->info("hello rejected: {}", to_string(ErrorCode::Version));
      send(error_outgoing(ErrorCode::Version, "protocol version " + std::string(protocol::kVersion) + " required",
                          true));
      return;
    }
    auto self = shared_from_this();
    auto& registry = server_.registry;
    if (p.at("role") == "teacher") {
      if (p.at("credential").get<std::string>() != server_.credential) {
        server_.log->warn("teacher hello rejected: {}", to_string(ErrorCode::Auth));
        send(error_outgoing(ErrorCode::Auth, "invalid teacher credential", true));
        return;
      }
      SessionId sid;
      if (p.contains("session_id")) {
        sid = p.at("session_id").get<std::string>();
      } else if (auto newest = registry.newest_session()) {
        sid = *newest;
      } else {
        sid = registry.create_session(server_.session_config()).session_id;
        server_.log->info("session {} created", sid);
      }
      attach_teacher(sid);
      server_.log->info("teacher attached to session {}", sid);
      return;
    }

    if (p.contains("resume_player_id") && p.contains("session_id")) {
      const SessionId sid = p.at("session_id").get<std::string>();
      const PlayerId pid = p.at("resume_player_id").get<std::string>();
      const bool resumed = registry.resume(sid, pid, [&](const SessionSnapshot& snap) {
        become_student(sid, pid, snap);
      });
      if (resumed) {
        server_.log->info("player {} resumed in session {}", pid, sid);
        return;
      }
    }
    std::optional<RgbImage> avatar;
    if (auto it = p.find("avatar"); it != p.end()) {
      Bytes bytes;
      base64_decode(it->get<std::string>(), bytes);
      avatar = decode_image(bytes);
    }
    const auto joined = registry.join(p.at("join_token").get<std::string>(), p.at("display_name").get<std::string>(),
                                      std::move(avatar), [&](const SessionSnapshot& snap) {
                                        become_student(snap.session_id, snap.roster.back().player_id, snap);
                                      });
    server_.log->info("player {} joined session {} ({} players)", joined.player_id, joined.session_id,
                      registry.snapshot(joined.session_id).roster.size());
  }

  void attach_teacher(const SessionId& sid) {
    server_.registry.attach(sid, [&](const SessionSnapshot& snap) {
      role_ = Role::Teacher;
      session_ = sid;
      server_.hub.subscribe(sid, {weak_from_this(), true, {}});
      send(make_outgoing("joined", protocol::snapshot_payload(snap, true, {})));
    });
  }

  // Runs under the session lock, before any later broadcast can be queued.
  void become_student(const SessionId& sid, const PlayerId& pid, const SessionSnapshot& snap) {
    role_ = Role::Student;
    session_ = sid;
    player_ = pid;
    server_.hub.subscribe(sid, {weak_from_this(), false, pid});
    send(make_outgoing("joined", protocol::snapshot_payload(snap, false, pid)));
  }

  void on_frame(const protocol::Message& m) {
    if (!bucket_.take()) throw Error(ErrorCode::RateLimited, "frame rate limit exceeded");
    Bytes bytes;
    base64_decode(m.payload.at("image").get<std::string>(), bytes);
    SubmitOptions options;
    options.render_png = m.payload.value("want_png", false);
    const auto outcome = server_.registry.submit_encoded(session_, player_, bytes, options);
    server_.log->debug("frame scored in session {}", session_);
    send(make_outgoing("score", protocol::score_payload(outcome)));
  }

  void on_control(const protocol::Message& m) {
    const json& p = m.payload;
    const std::string action = p.at("action");
    auto& registry = server_.registry;
    server_.log->info("control {} in session {}", action, session_);
    if (action == "set_challenge") {
      std::size_t label = 0;
      if (p.contains("label_index")) {
        const auto index = p.at("label_index").get<std::int64_t>();
        if (index < 0) throw Error(ErrorCode::InvalidLabel, "label index out of range");
        label = static_cast<std::size_t>(index);
      } else if (p.contains("label_name")) {
        const auto& labels = server_.model->labels();
        auto it = std::find(labels.begin(), labels.end(), p.at("label_name").get<std::string>());
        if (it == labels.end()) throw Error(ErrorCode::InvalidLabel, "unknown label");
        label = static_cast<std::size_t>(it - labels.begin());
      } else {
        throw Error(ErrorCode::Schema, "set_challenge needs label_index or label_name");
      }
      const auto scope = p.contains("players") ? ChallengeScope::only(p.at("players").get<std::vector<PlayerId>>())
                                               : ChallengeScope::all();
      registry.set_challenge(session_, scope, label);
    } else if (action == "set_pause") {
      registry.set_pause(session_, p.at("value").get<bool>());
    } else if (action == "set_reveal") {
      if (p.value("reveal_hidden", false)) {
        registry.set_reveal(session_, std::nullopt);
      } else if (p.contains("reveal_n")) {
        const auto n = p.at("reveal_n").get<std::int64_t>();
        if (n < 0) throw Error(ErrorCode::Schema, "reveal_n must be non-negative");
        registry.set_reveal(session_, static_cast<std::size_t>(n));
      } else {
        throw Error(ErrorCode::Schema, "set_reveal needs reveal_n or reveal_hidden");
      }
    } else if (action == "set_heatmap") {
      registry.set_heatmap(session_, p.at("value").get<bool>());
    } else if (action == "set_dataset_unlock") {
      registry.set_dataset_unlock(session_, p.at("value").get<bool>());
    } else if (action == "end_session") {
      registry.end_session(session_);
      server_.log->info("session {} ended and purged", session_);
    } else if (action == "regenerate_token") {
      registry.regenerate_token(session_);
      attach_teacher(session_);
    }
  }

  Server::Impl& server_;
  websocket::stream<beast::tcp_stream> ws_;
  http::request<http::string_body> upgrade_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  bool writing_ = false;
  bool closing_ = false;
  std::uint64_t out_seq_ = 0;
  std::optional<std::uint64_t> last_in_seq_;
  Role role_ = Role::None;
  SessionId session_;
  PlayerId player_;
  TokenBucket bucket_;
};

void Hub::subscribe(const SessionId& session, Subscriber sub) {
  std::lock_guard lock(mutex_);
  auto& list = subscribers_[session];
  const auto* raw = sub.connection.lock().get();
  std::erase_if(list, [&](const Subscriber& s) { return s.connection.expired() || s.connection.lock().get() == raw; });
  list.push_back(std::move(sub));
}

void Hub::unsubscribe(const SessionId& session, const Connection* connection) {
  std::lock_guard lock(mutex_);
  auto it = subscribers_.find(session);
  if (it == subscribers_.end()) return;
  // Called from the destructor, where weak pointers to the object are already expired.
  std::erase_if(it->second, [&](const Subscriber& s) {
    auto c = s.connection.lock();
    return !c || c.get() == connection;
  });
  if (it->second.empty()) subscribers_.erase(it);
}

void Hub::publish(const SessionId& session, const SessionEvent& event) {
  std::vector<Subscriber> subs;
  {
    std::lock_guard lock(mutex_);
    auto it = subscribers_.find(session);
    if (it == subscribers_.end()) return;
    subs = it->second;
    if (std::holds_alternative<EndedEvent>(event)) subscribers_.erase(it);
  }
  const bool any_teacher = std::any_of(subs.begin(), subs.end(), [](const auto& s) { return s.teacher; });

  OutgoingPtr teacher, student;
  std::optional<std::vector<PlayerId>> scope;
  std::visit(
      [&](const auto& ev) {
        using T = std::decay_t<decltype(ev)>;
        if constexpr (std::is_same_v<T, RosterEvent>) {
          if (any_teacher) teacher = make_outgoing("roster", protocol::roster_payload(ev.players, true));
          student = make_outgoing("roster", protocol::roster_payload(ev.players, false));
        } else if constexpr (std::is_same_v<T, ChallengeEvent>) {
          teacher = student = make_outgoing("challenge", protocol::challenge_payload(ev));
          scope = ev.scope.players;
        } else if constexpr (std::is_same_v<T, PauseEvent>) {
          teacher = student = make_outgoing("pause", {{"paused", ev.paused}});
        } else if constexpr (std::is_same_v<T, BoardEvent>) {
          if (any_teacher) teacher = make_outgoing("board", protocol::board_payload(ev.rows, true));
          student = make_outgoing("board", protocol::board_payload(ev.rows, false));
        } else if constexpr (std::is_same_v<T, FlagsEvent>) {
          teacher = student =
              make_outgoing("flags", protocol::flags_json(ev.heatmap_enabled, ev.dataset_unlocked, ev.reveal));
        } else {
          teacher = student = make_outgoing("bye", {{"reason", "session_ended"}}, true);
        }
      },
      event);

  for (const auto& sub : subs) {
    auto c = sub.connection.lock();
    if (!c) continue;
    if (sub.teacher) {
      c->deliver(teacher);
    } else if (!scope || std::find(scope->begin(), scope->end(), sub.player) != scope->end()) {
      c->deliver(student);
    }
  }
}

class HttpSession : public std::enable_shared_from_this<HttpSession> {
 public:
  HttpSession(Server::Impl& server, tcp::socket socket) : server_(server), stream_(std::move(socket)) {}

  void run() { do_read(); }

 private:
  void do_read() {
    parser_.emplace();
    parser_->body_limit(64 * 1024);
    stream_.expires_after(std::chrono::seconds(30));
    http::async_read(stream_, buffer_, *parser_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) return self->close();
      self->on_request(self->parser_->release());
    });
  }

  void on_request(http::request<http::string_body> req) {
    const std::string target(req.target().data(), req.target().size());
    if (websocket::is_upgrade(req) && target.substr(0, target.find('?')) == "/rt") {
      stream_.expires_never();
      auto connection = std::make_shared<Connection>(server_, stream_.release_socket());
      server_.track(connection);
      connection->accept(std::move(req));
      return;
    }
    auto res = std::make_shared<http::response<http::string_body>>(server_.handle_http(req));
    res->keep_alive(req.keep_alive());
    res->prepare_payload();
    http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
      if (ec || !res->keep_alive()) return self->close();
      self->do_read();
    });
  }

  void close() {
    beast::error_code ec;
    stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
  }

  Server::Impl& server_;
  beast::tcp_stream stream_;
  beast::flat_buffer buffer_;
  std::optional<http::request_parser<http::string_body>> parser_;
};

namespace {

http::response<http::string_body> text_response(const http::request<http::string_body>& req, http::status status,
                                                 std::string body, std::string type) {
  http::response<http::string_body> res{status, req.version()};
  res.set(http::field::server, "breakable-machine");
  res.set(http::field::content_type, type);
  res.set(http::field::cache_control, "no-store");
  res.body() = req.method() == http::verb::head ? std::string() : std::move(body);
  return res;
}

http::response<http::string_body> error_response(const http::request<http::string_body>& req, http::status status,
                                                  ErrorCode code, std::string_view detail) {
  return text_response(req, status, json{{"code", to_string(code)}, {"detail", detail}}.dump(), "application/json");
}

}  // namespace

void Server::Impl::do_accept() {
  acceptor.async_accept(asio::make_strand(ioc), [this](beast::error_code ec, tcp::socket socket) {
    if (ec) {
      if (ec == asio::error::operation_aborted) return;
    } else {
      std::make_shared<HttpSession>(*this, std::move(socket))->run();
    }
    do_accept();
  });
}

std::optional<http::response<http::string_body>> Server::Impl::static_file(
    const http::request<http::string_body>& req, const std::filesystem::path& relative) {
  if (!config.ui_dir) return std::nullopt;
  for (const auto& part : relative) {
    if (part == ".." || part == ".") return std::nullopt;
  }
  const auto path = *config.ui_dir / relative;
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) return std::nullopt;
  std::ifstream in(path, std::ios::binary);
  std::string body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text_response(req, http::status::ok, std::move(body), mime_type(path));
}

http::response<http::string_body> Server::Impl::dataset_response(const http::request<http::string_body>& req,
                                                                 const std::vector<std::string>& parts,
                                                                 const std::map<std::string, std::string>& query) {
  // Teachers bypass the gate; students name their session by join token or id.
  const bool teacher = query.contains("credential") && query.at("credential") == credential;
  if (!teacher) {
    std::optional<SessionId> sid;
    if (query.contains("token")) sid = registry.session_for_token(query.at("token"));
    if (!sid && query.contains("session") && registry.is_live(query.at("session"))) sid = query.at("session");
    if (!sid) return error_response(req, http::status::forbidden, ErrorCode::UnknownToken, "unknown session");
    if (!registry.dataset_unlocked(*sid)) {
      return error_response(req, http::status::forbidden, ErrorCode::DatasetLocked, "dataset is locked");
    }
  }
  try {
    if (parts.size() == 1) return text_response(req, http::status::ok, dataset.manifest().dump(), "application/json");
    if (parts.size() == 2) {
      return text_response(req, http::status::ok, dataset.label_listing(parts[1]).dump(), "application/json");
    }
    if (parts.size() == 3) {
      const Bytes bytes = dataset.read_image(parts[1], parts[2]);
      return text_response(req, http::status::ok, std::string(bytes.begin(), bytes.end()),
                           Dataset::content_type(parts[2]));
    }
  } catch (const Error& e) {
    return error_response(req, http::status::not_found, e.code(), e.what());
  }
  return error_response(req, http::status::not_found, ErrorCode::NotFound, "not found");
}

http::response<http::string_body> Server::Impl::handle_http(const http::request<http::string_body>& req) {
  if (req.method() != http::verb::get && req.method() != http::verb::head) {
    return text_response(req, http::status::method_not_allowed, "method not allowed", "text/plain");
  }
  const std::string_view target(req.target().data(), req.target().size());
  const auto q = target.find('?');
  const auto parts = split_path(target.substr(0, q));
  const auto query = q == std::string_view::npos ? std::map<std::string, std::string>{}
                                                 : parse_query(target.substr(q + 1));

  auto index = [&] {
    if (auto file = static_file(req, "index.html")) return std::move(*file);
    return text_response(req, http::status::ok, std::string(kBuiltinPage), "text/html; charset=utf-8");
  };

  if (parts.empty()) return index();
  if (parts[0] == "join" && parts.size() == 2) {
    if (!registry.session_for_token(parts[1])) {
      return error_response(req, http::status::not_found, ErrorCode::UnknownToken, "this join link is no longer valid");
    }
    return index();
  }
  if (parts[0] == "dataset") return dataset_response(req, parts, query);
  if (parts[0] == "introspect" && parts.size() == 1) {
    if (!query.contains("credential") || query.at("credential") != credential) {
      return error_response(req, http::status::forbidden, ErrorCode::Auth, "teacher credential required");
    }
    const auto r = registry.stats();
    json body = {{"sessions", r.sessions},
                 {"players", r.players},
                 {"retained_images", r.retained_images},
                 {"image_buffers", RgbImage::live_buffers()},
                 {"connections", connections.load()},
                 {"queued", queued.load()}};
    return text_response(req, http::status::ok, body.dump(), "application/json");
  }
  std::filesystem::path relative;
  for (const auto& p : parts) relative /= p;
  if (auto file = static_file(req, relative)) return std::move(*file);
  return error_response(req, http::status::not_found, ErrorCode::NotFound, "not found");
}

Server::Server(ServerConfig config, std::shared_ptr<const Model> model, Dataset dataset)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(model), std::move(dataset))) {}

Server::~Server() { stop(); }

void Server::start() {
  auto& s = *impl_;
  beast::error_code ec;
  const auto address = asio::ip::make_address(s.config.bind, ec);
  if (ec) throw std::runtime_error("invalid bind address: " + s.config.bind);
  const tcp::endpoint endpoint(address, s.config.port);
  s.acceptor.open(endpoint.protocol());
  s.acceptor.set_option(asio::socket_base::reuse_address(true));
  s.acceptor.bind(endpoint, ec);
  if (ec) {
    throw std::runtime_error("cannot bind " + s.config.bind + ":" + std::to_string(s.config.port) + ": " +
                             ec.message());
  }
  s.acceptor.listen();

  const std::string host = address.is_unspecified() ? local_ipv4() : s.config.bind;
  s.base_url = "http://" + host + ":" + std::to_string(port());
  s.registry.set_base_url(s.base_url);
  s.first = s.registry.create_session(s.session_config()).session_id;
  s.log->info("listening on port {}; session {} created", port(), s.first);

  s.do_accept();
  s.running = true;
  for (std::size_t i = 0; i < std::max<std::size_t>(1, s.config.io_threads); ++i) {
    s.threads.emplace_back([&s] { s.ioc.run(); });
  }
}

void Server::stop() {
  auto& s = *impl_;
  if (!s.running) return;
  s.running = false;
  asio::post(s.ioc, [&s] {
    beast::error_code ec;
    s.acceptor.close(ec);
  });
  {
    std::lock_guard lock(s.connections_mutex);
    for (auto& w : s.live) {
      if (auto c = w.lock()) c->shutdown();
    }
  }
  // Give close handshakes a moment, then stop regardless.
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  s.ioc.stop();
  for (auto& t : s.threads) t.join();
  s.threads.clear();
  s.log->info("server stopped");
  s.log->flush();
}

std::uint16_t Server::port() const { return impl_->acceptor.local_endpoint().port(); }
std::string Server::base_url() const { return impl_->base_url; }
const std::string& Server::teacher_credential() const { return impl_->credential; }
SessionId Server::first_session() const { return impl_->first; }
std::string Server::join_url() const { return impl_->registry.join_url(impl_->first); }
SessionRegistry& Server::registry() { return impl_->registry; }

ServerStats Server::stats() const {
  return {impl_->registry.stats(), RgbImage::live_buffers(), impl_->connections.load(), impl_->queued.load()};
}

std::string local_ipv4() {
  ifaddrs* list = nullptr;
  std::string found = "127.0.0.1";
  if (getifaddrs(&list) != 0) return found;
  for (auto* a = list; a != nullptr; a = a->ifa_next) {
    if (a->ifa_addr == nullptr || a->ifa_addr->sa_family != AF_INET) continue;
    if ((a->ifa_flags & IFF_LOOPBACK) != 0 || (a->ifa_flags & IFF_UP) == 0) continue;
    char text[INET_ADDRSTRLEN];
    const auto* in = reinterpret_cast<const sockaddr_in*>(a->ifa_addr);
    if (inet_ntop(AF_INET, &in->sin_addr, text, sizeof text) != nullptr) {
      found = text;
      break;
    }
  }
  freeifaddrs(list);
  return found;
}

}  // namespace bm

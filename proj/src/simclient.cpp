#include "bm/simclient.hpp"

#include "bm/codec.hpp"
#include "bm/errors.hpp"

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <condition_variable>
#include <deque>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>

namespace bm::sim {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using SteadyClock = std::chrono::steady_clock;

// --- ClientState -------------------------------------------------------------

json ClientState::normalize(json s) {
  if (auto it = s.find("overrides"); it != s.end()) {
    std::sort(it->begin(), it->end(), [](const json& a, const json& b) { return a.at("player_id") < b.at("player_id"); });
  }
  return s;
}

void ClientState::apply(const protocol::Message& m) {
  const json& p = m.payload;
  if (m.type == "joined") {
    state_ = p;
    teacher_ = p.at("role") == "teacher";
    self_ = p.value("player_id", "");
    return;
  }
  if (!ready()) return;
  if (m.type == "roster") {
    state_["roster"] = p.at("players");
  } else if (m.type == "board") {
    state_["board"] = p.at("entries");
  } else if (m.type == "pause") {
    state_["paused"] = p.at("paused");
  } else if (m.type == "flags") {
    state_["flags"] = p;
  } else if (m.type == "challenge") {
    const json c = {{"label_index", p.at("label_index")}, {"label_name", p.at("label_name")}, {"epoch", p.at("epoch")}};
    if (!teacher_) {
      state_["challenge"] = c;
    } else if (p.at("scope") == "all") {
      state_["challenge"] = c;
      state_["overrides"] = json::array();
    } else {
      json& overrides = state_["overrides"];
      for (const auto& id : p.at("players")) {
        auto it = std::find_if(overrides.begin(), overrides.end(), [&](const json& o) { return o.at("player_id") == id; });
        if (it == overrides.end()) {
          overrides.push_back({{"player_id", id}, {"challenge", c}});
        } else {
          (*it)["challenge"] = c;
        }
      }
    }
  }
}

json ClientState::normalized() const { return normalize(state_); }

// --- Transcript --------------------------------------------------------------

std::vector<Received> Transcript::of(const std::string& client) const {
  std::vector<Received> out;
  for (const auto& r : messages) {
    if (r.client == client) out.push_back(r);
  }
  return out;
}

std::optional<json> Transcript::last_board(const std::string& client) const {
  std::optional<json> board;
  for (const auto& r : messages) {
    if (r.client == client && r.message.type == "board") board = r.message.payload;
  }
  return board;
}

json Transcript::to_json() const {
  json clients_json = json::object();
  for (const auto& [name, info] : clients) {
    clients_json[name] = {{"role", info.role}, {"player_id", info.player_id}, {"display_name", info.display_name}};
  }
  json list = json::array();
  for (const auto& r : messages) {
    json entry = {{"client", r.client}, {"t_ms", r.t_ms}, {"type", r.message.type}, {"seq", r.message.seq},
                  {"payload", r.message.payload}};
    list.push_back(std::move(entry));
  }
  return {{"clients", std::move(clients_json)}, {"messages", std::move(list)}, {"failures", failures}};
}

// --- connection --------------------------------------------------------------

namespace {

struct Endpoint {
  std::string host;
  std::string port;
};

Endpoint parse_server(const std::string& url) {
  std::string rest = url;
  for (const std::string scheme : {"http://", "ws://"}) {
    if (rest.starts_with(scheme)) rest = rest.substr(scheme.size());
  }
  rest = rest.substr(0, rest.find('/'));
  const auto colon = rest.rfind(':');
  if (colon == std::string::npos || rest.empty()) throw ScenarioError("server URL needs host:port: " + url);
  return {rest.substr(0, colon), rest.substr(colon + 1)};
}

/// One realtime connection. Reads and writes run on the shared I/O thread;
/// the scenario thread talks to it through send() and wait_for().
class Client : public std::enable_shared_from_this<Client> {
 public:
  Client(asio::io_context& ioc, std::string name, SteadyClock::time_point start)
      : name_(std::move(name)), start_(start), ws_(asio::make_strand(ioc)) {}

  const std::string& name() const { return name_; }

  void connect(const Endpoint& ep) {
    tcp::resolver resolver(ws_.get_executor());
    beast::get_lowest_layer(ws_).connect(resolver.resolve(ep.host, ep.port));
    ws_.handshake(ep.host + ":" + ep.port, "/rt");
    asio::post(ws_.get_executor(), [self = shared_from_this()] { self->do_read(); });
  }

  void send(std::string type, json payload) {
    protocol::Message m{std::move(type), ++seq_, std::move(payload)};
    std::string text = protocol::encode(m);
    asio::post(ws_.get_executor(), [self = shared_from_this(), text = std::move(text)]() mutable {
      self->queue_.push_back(std::move(text));
      if (self->queue_.size() == 1) self->do_write();
    });
  }

  /// First message at index >= from matching pred.
  std::optional<protocol::Message> wait_for(std::size_t from, const std::function<bool(const protocol::Message&)>& pred,
                                            std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    std::optional<protocol::Message> found;
    cv_.wait_for(lock, timeout, [&] {
      for (std::size_t i = from; i < received_.size(); ++i) {
        if (pred(received_[i].message)) {
          found = received_[i].message;
          return true;
        }
      }
      return closed_;
    });
    if (!found) {
      for (std::size_t i = from; i < received_.size(); ++i) {
        if (pred(received_[i].message)) found = received_[i].message;
      }
    }
    return found;
  }

  bool wait_closed(std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, timeout, [&] { return closed_; });
  }

  std::size_t count() const {
    std::lock_guard lock(mutex_);
    return received_.size();
  }

  SteadyClock::time_point last_receive() const {
    std::lock_guard lock(mutex_);
    return last_receive_;
  }

  std::vector<Received> received() const {
    std::lock_guard lock(mutex_);
    return received_;
  }

  std::vector<std::string> failures() const {
    std::lock_guard lock(mutex_);
    return failures_;
  }

  json state() const {
    std::lock_guard lock(mutex_);
    return state_.normalized();
  }

  void close() {
    asio::post(ws_.get_executor(), [self = shared_from_this()] {
      if (self->ws_.is_open()) self->ws_.async_close(websocket::close_code::normal, [self](beast::error_code) {});
    });
  }

 private:
  void do_write() {
    ws_.text(true);
    ws_.async_write(asio::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->queue_.pop_front();
      if (ec) {
        self->queue_.clear();
        return;
      }
      if (!self->queue_.empty()) self->do_write();
    });
  }

  void do_read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        std::lock_guard lock(self->mutex_);
        self->closed_ = true;
        self->cv_.notify_all();
        return;
      }
      const std::string text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->on_text(text);
      self->do_read();
    });
  }

  void on_text(const std::string& text) {
    const auto now = SteadyClock::now();
    std::lock_guard lock(mutex_);
    last_receive_ = now;
    try {
      protocol::Message m = protocol::decode(text);
      if (last_seq_ && m.seq <= *last_seq_) failures_.push_back(name_ + ": server seq did not increase");
      last_seq_ = m.seq;
      state_.apply(m);
      received_.push_back({name_, std::chrono::duration<double, std::milli>(now - start_).count(), std::move(m)});
    } catch (const Error& e) {
      failures_.push_back(name_ + ": undecodable server frame (" + std::string(to_string(e.code())) + ")");
    }
    cv_.notify_all();
  }

  std::string name_;
  SteadyClock::time_point start_;
  websocket::stream<beast::tcp_stream> ws_;
  beast::flat_buffer buffer_;
  std::deque<std::string> queue_;
  std::uint64_t seq_ = 0;

  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::vector<Received> received_;
  std::vector<std::string> failures_;
  std::optional<std::uint64_t> last_seq_;
  ClientState state_;
  bool closed_ = false;
  SteadyClock::time_point last_receive_ = SteadyClock::now();
};

using ClientPtr = std::shared_ptr<Client>;

bool parse_bool(const Step& step, const std::string& key) {
  const std::string& v = step.arg(key);
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  throw ScenarioError("line " + std::to_string(step.line) + ": " + key + " must be true or false");
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string describe_error(const protocol::Message& m) {
  return m.payload.value("code", "?") + " " + m.payload.value("detail", "");
}

class Runner {
 public:
  Runner(const Scenario& scenario, const SimOptions& options)
      : scenario_(scenario),
        options_(options),
        endpoint_(parse_server(options.server)),
        start_(SteadyClock::now()),
        work_(asio::make_work_guard(ioc_)),
        io_thread_([this] { ioc_.run(); }) {}

  ~Runner() {
    for (auto& [name, c] : clients_) c->close();
    for (auto& p : probes_) p->close();
    work_.reset();
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    ioc_.stop();
    io_thread_.join();
  }

  Transcript run() {
    for (const auto& step : scenario_.steps) {
      try {
        execute(step);
      } catch (const ScenarioError&) {
        throw;
      } catch (const std::exception& e) {
        fail(step, e.what());
        break;
      }
    }
    return collect();
  }

 private:
  void fail(const Step& step, const std::string& what) {
    transcript_.failures.push_back("line " + std::to_string(step.line) + " (" + step.verb + "): " + what);
  }

  ClientPtr connect(const std::string& name) {
    auto c = std::make_shared<Client>(ioc_, name, start_);
    c->connect(endpoint_);
    return c;
  }

  ClientPtr teacher() {
    auto it = clients_.find("teacher");
    if (it == clients_.end()) throw std::runtime_error("no teacher connected");
    return it->second;
  }

  ClientPtr player(const std::string& alias) {
    auto it = clients_.find(alias);
    if (it == clients_.end() || alias == "teacher") throw std::runtime_error("unknown player alias " + alias);
    return it->second;
  }

  std::vector<std::string> player_aliases(const std::string& spec) {
    if (spec != "all") return split_list(spec);
    std::vector<std::string> out;
    for (const auto& [alias, info] : transcript_.clients) {
      if (info.role == "student") out.push_back(alias);
    }
    return out;
  }

  // Waits for joined or error after a hello.
  protocol::Message await_joined(const ClientPtr& c, std::size_t from) {
    auto reply = c->wait_for(from, [](const auto& m) { return m.type == "joined" || m.type == "error"; },
                             options_.timeout);
    if (!reply) throw std::runtime_error(c->name() + ": no reply to hello");
    if (reply->type == "error") throw std::runtime_error(c->name() + ": hello rejected: " + describe_error(*reply));
    return *reply;
  }

  void execute(const Step& step) {
    const std::string& verb = step.verb;
    if (verb == "teacher") {
      auto c = connect("teacher");
      clients_["teacher"] = c;
      json hello = {{"protocol_version", protocol::kVersion}, {"role", "teacher"}, {"credential", options_.credential}};
      if (step.args.contains("session")) hello["session_id"] = step.arg("session");
      c->send("hello", hello);
      const auto joined = await_joined(c, 0);
      session_ = joined.payload.at("session_id");
      join_url_ = joined.payload.at("join_url");
      transcript_.clients["teacher"] = {"teacher", "", ""};
    } else if (verb == "join") {
      std::vector<std::string> names;
      if (step.args.contains("name")) {
        names.push_back(step.arg("name"));
      } else {
        const int count = std::stoi(step.arg_or("count", "1"));
        const std::string prefix = step.arg_or("prefix", "player");
        for (int i = 1; i <= count; ++i) names.push_back(prefix + "-" + std::to_string(i));
      }
      const std::string token = step.arg_or("token", join_token());
      std::vector<std::pair<std::string, ClientPtr>> pending;
      for (const auto& name : names) {
        if (clients_.contains(name)) throw ScenarioError("line " + std::to_string(step.line) + ": duplicate alias " + name);
        auto c = connect(name);
        json hello = {{"protocol_version", protocol::kVersion},
                      {"role", "student"},
                      {"join_token", token},
                      {"display_name", name}};
        if (step.args.contains("avatar")) hello["avatar"] = base64_encode(read_file(step.arg("avatar")));
        c->send("hello", hello);
        pending.emplace_back(name, c);
      }
      for (auto& [name, c] : pending) {
        const auto joined = await_joined(c, 0);
        clients_[name] = c;
        const std::string pid = joined.payload.at("player_id");
        std::string display = name;
        for (const auto& p : joined.payload.at("roster")) {
          if (p.at("player_id") == pid) display = p.at("display_name");
        }
        transcript_.clients[name] = {"student", pid, display};
      }
    } else if (verb == "submit") {
      const Bytes image = read_file(step.arg("image"));
      const std::string encoded = base64_encode(image);
      const std::string expect = step.arg_or("expect", "score");
      std::vector<std::pair<ClientPtr, std::size_t>> sent;
      for (const auto& alias : player_aliases(step.arg("player"))) {
        auto c = player(alias);
        const std::size_t from = c->count();
        json payload = {{"image", encoded}};
        if (step.args.contains("want_png")) payload["want_png"] = parse_bool(step, "want_png");
        c->send("frame_submit", payload);
        sent.emplace_back(c, from);
      }
      for (auto& [c, from] : sent) {
        auto reply = c->wait_for(from, [](const auto& m) { return m.type == "score" || m.type == "error"; },
                                 options_.timeout);
        if (!reply) {
          fail(step, c->name() + ": no reply to frame_submit");
        } else if (reply->type == "score" && expect != "score") {
          fail(step, c->name() + ": expected " + expect + ", got a score");
        } else if (reply->type == "error" && reply->payload.at("code") != expect) {
          fail(step, c->name() + ": " + describe_error(*reply));
        }
      }
    } else if (verb == "challenge") {
      json payload = {{"action", "set_challenge"}};
      const std::string& label = step.arg("label");
      if (!label.empty() && std::all_of(label.begin(), label.end(), ::isdigit)) {
        payload["label_index"] = std::stoll(label);
      } else {
        payload["label_name"] = label;
      }
      if (step.args.contains("players")) {
        json ids = json::array();
        for (const auto& alias : split_list(step.arg("players"))) {
          auto it = transcript_.clients.find(alias);
          if (it == transcript_.clients.end()) throw std::runtime_error("unknown player alias " + alias);
          ids.push_back(it->second.player_id);
        }
        payload["players"] = ids;
      }
      control(step, payload, "challenge");
    } else if (verb == "pause") {
      control(step, {{"action", "set_pause"}, {"value", parse_bool(step, "value")}}, "pause");
    } else if (verb == "reveal") {
      const std::string& v = step.arg("value");
      json payload = {{"action", "set_reveal"}};
      if (v == "hidden") {
        payload["reveal_hidden"] = true;
      } else {
        payload["reveal_n"] = std::stoll(v);
      }
      control(step, payload, "flags");
    } else if (verb == "heatmap") {
      control(step, {{"action", "set_heatmap"}, {"value", parse_bool(step, "value")}}, "flags");
    } else if (verb == "dataset") {
      control(step, {{"action", "set_dataset_unlock"}, {"value", parse_bool(step, "value")}}, "flags");
    } else if (verb == "regenerate") {
      const auto reply = control(step, {{"action", "regenerate_token"}}, "joined");
      if (reply) join_url_ = reply->payload.at("join_url");
    } else if (verb == "wait") {
      std::this_thread::sleep_for(std::chrono::milliseconds(std::stoll(step.arg("ms"))));
    } else if (verb == "settle") {
      settle(std::chrono::milliseconds(std::stoll(step.arg_or("ms", "200"))));
    } else if (verb == "converge") {
      converge(step);
    } else if (verb == "end") {
      control(step, {{"action", "end_session"}}, "bye");
      if (step.arg_or("wait", "true") == "true") expect_bye(step);
    } else if (verb == "expect_bye") {
      expect_bye(step);
    }
  }

  std::optional<protocol::Message> control(const Step& step, const json& payload, const std::string& echo) {
    auto t = teacher();
    const std::size_t from = t->count();
    t->send("control", payload);
    auto reply = t->wait_for(from, [&](const auto& m) { return m.type == echo || m.type == "error"; },
                             options_.timeout);
    if (!reply) {
      fail(step, "teacher saw no " + echo + " after control");
    } else if (reply->type == "error" && step.arg_or("expect", "") != reply->payload.value("code", "")) {
      fail(step, describe_error(*reply));
    }
    return reply;
  }

  void settle(std::chrono::milliseconds quiet) {
    const auto deadline = SteadyClock::now() + options_.timeout;
    while (SteadyClock::now() < deadline) {
      auto latest = SteadyClock::time_point::min();
      for (const auto& [name, c] : clients_) latest = std::max(latest, c->last_receive());
      if (SteadyClock::now() - latest >= quiet) return;
      std::this_thread::sleep_for(quiet / 4);
    }
  }

  // Every client's applied state must equal a fresh snapshot.
  void converge(const Step& step) {
    settle(std::chrono::milliseconds(150));
    for (const auto& [alias, c] : clients_) {
      const auto& info = transcript_.clients.at(alias);
      auto probe = connect("probe:" + alias);
      probes_.push_back(probe);
      json hello = {{"protocol_version", protocol::kVersion}};
      if (info.role == "teacher") {
        hello.update({{"role", "teacher"}, {"credential", options_.credential}, {"session_id", session_}});
      } else {
        hello.update({{"role", "student"},
                      {"session_id", session_},
                      {"resume_player_id", info.player_id},
                      {"join_token", join_token()},
                      {"display_name", info.display_name}});
      }
      probe->send("hello", hello);
      const auto joined = await_joined(probe, 0);
      probe->close();
      const json fresh = ClientState::normalize(joined.payload);
      const json held = c->state();
      if (fresh != held) {
        const json diff = json::diff(held, fresh);
        fail(step, alias + " diverged from the server snapshot: " + diff.dump().substr(0, 400));
      }
    }
  }

  void expect_bye(const Step& step) {
    for (const auto& [alias, c] : clients_) {
      if (!c->wait_closed(options_.timeout)) {
        fail(step, alias + ": connection still open");
        continue;
      }
      const auto received = c->received();
      if (received.empty() || received.back().message.type != "bye") {
        fail(step, alias + ": last message was not bye");
      }
    }
  }

  std::string join_token() const {
    const auto pos = join_url_.rfind("/join/");
    if (pos == std::string::npos) throw std::runtime_error("no join URL yet; run the teacher step first");
    return join_url_.substr(pos + 6);
  }

  Bytes read_file(const std::string& name) const {
    std::filesystem::path path(name);
    if (path.is_relative()) path = scenario_.base_dir / path;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ScenarioError("cannot read image " + path.string());
    return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  }

  Transcript collect() {
    for (const auto& [alias, c] : clients_) {
      auto received = c->received();
      transcript_.messages.insert(transcript_.messages.end(), received.begin(), received.end());
      for (auto& f : c->failures()) transcript_.failures.push_back(std::move(f));
    }
    std::stable_sort(transcript_.messages.begin(), transcript_.messages.end(), [](const auto& a, const auto& b) {
      return std::tie(a.message.seq, a.client) < std::tie(b.message.seq, b.client);
    });
    return std::move(transcript_);
  }

  const Scenario& scenario_;
  const SimOptions& options_;
  Endpoint endpoint_;
  SteadyClock::time_point start_;
  asio::io_context ioc_;
  asio::executor_work_guard<asio::io_context::executor_type> work_;
  std::thread io_thread_;

  std::map<std::string, ClientPtr> clients_;
  std::vector<ClientPtr> probes_;
  std::string session_;
  std::string join_url_;
  Transcript transcript_;
};

}  // namespace

Transcript run_scenario(const Scenario& scenario, const SimOptions& options) {
  Runner runner(scenario, options);
  return runner.run();
}

}  // namespace bm::sim

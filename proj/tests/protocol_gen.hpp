#pragma once

#include "bm/codec.hpp"
#include "bm/protocol.hpp"

#include <random>
#include <string>
#include <vector>

namespace bm::protogen {

using protocol::json;

// Random values and messages that conform to protocol/schema.json, driven by
// the schema document itself so new fields are covered automatically.
class Generator {
 public:
  explicit Generator(std::uint64_t seed) : rng_(seed) {}

  protocol::Message message() {
    const auto types = protocol::schema().message_types();
    protocol::Message m;
    m.type = types[pick(types.size())];
    m.seq = std::uniform_int_distribution<std::uint64_t>(0, 1ull << 53)(rng_);
    const json& spec = protocol::schema().message(m.type);
    m.payload = object(spec.at("fields"));
    if (auto rw = spec.find("required_when"); rw != spec.end()) {
      for (const auto& [selector, cases] : rw->items()) {
        if (!m.payload.contains(selector)) continue;
        auto needed = cases.find(m.payload[selector].get<std::string>());
        if (needed == cases.end()) continue;
        for (const auto& f : *needed) {
          const std::string name = f.get<std::string>();
          if (!m.payload.contains(name)) m.payload[name] = value(spec.at("fields").at(name), 0);
        }
      }
    }
    if (coin()) m.payload["x_future_field"] = string();
    if (coin()) m.extras["x_trace"] = string();
    return m;
  }

  json value(const json& raw, int depth) {
    const json& spec = protocol::schema().resolve(raw);
    const std::string kind = spec.at("kind");
    if (kind == "string") return string();
    if (kind == "bool") return coin();
    if (kind == "int") return std::uniform_int_distribution<std::int64_t>(-1000, 1000000)(rng_);
    if (kind == "number") return std::uniform_real_distribution<double>(-1e3, 1e3)(rng_);
    if (kind == "bytes") {
      Bytes b(pick(64));
      for (auto& v : b) v = static_cast<std::uint8_t>(pick(256));
      return base64_encode(b);
    }
    if (kind == "enum") return spec.at("values")[pick(spec.at("values").size())];
    if (kind == "array") {
      json out = json::array();
      const std::size_t n = depth > 2 ? 0 : pick(4);
      for (std::size_t i = 0; i < n; ++i) out.push_back(value(spec.at("items"), depth + 1));
      return out;
    }
    return object(spec.at("fields"), depth + 1);
  }

  json object(const json& fields, int depth = 0) {
    json out = json::object();
    for (const auto& [name, spec] : fields.items()) {
      if (spec.value("required", false) || coin()) out[name] = value(spec, depth);
    }
    return out;
  }

  std::string string() {
    static const std::vector<std::string> pieces = {"a", "Zoë", "名前", "\"q\"", "\\", "\n", "🙂", " ", "x7"};
    std::string s;
    for (std::size_t i = pick(6); i > 0; --i) s += pieces[pick(pieces.size())];
    return s;
  }

  bool coin() { return pick(2) == 1; }
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

 private:
  std::mt19937_64 rng_;
};

struct MalformedCase {
  std::string name;
  std::string frame;
  ErrorCode expected;
};

inline std::vector<MalformedCase> malformed_corpus() {
  std::vector<MalformedCase> out = {
      {"truncated JSON", R"({"type":"hello","seq":1,"payload":{)", ErrorCode::Malformed},
      {"not JSON", "hello there", ErrorCode::Malformed},
      {"array frame", "[1,2,3]", ErrorCode::Malformed},
      {"empty frame", "", ErrorCode::Malformed},
      {"unknown type", R"({"type":"teleport","seq":1,"payload":{}})", ErrorCode::UnknownType},
      {"missing type", R"({"seq":1,"payload":{}})", ErrorCode::Schema},
      {"negative seq", R"({"type":"pause","seq":-1,"payload":{"paused":true}})", ErrorCode::Schema},
      {"payload not object", R"({"type":"pause","seq":1,"payload":[]})", ErrorCode::Schema},
      {"student hello without display_name",
       R"({"type":"hello","seq":1,"payload":{"protocol_version":"1.0","role":"student","join_token":"t"}})",
       ErrorCode::Schema},
      {"teacher hello without credential",
       R"({"type":"hello","seq":1,"payload":{"protocol_version":"1.0","role":"teacher"}})", ErrorCode::Schema},
      {"bad enum", R"({"type":"hello","seq":1,"payload":{"protocol_version":"1.0","role":"admin"}})",
       ErrorCode::Schema},
      {"wrong field type", R"({"type":"pause","seq":1,"payload":{"paused":"yes"}})", ErrorCode::Schema},
      {"bad base64", R"({"type":"frame_submit","seq":1,"payload":{"image":"***"}})", ErrorCode::Schema},
      {"control without value", R"({"type":"control","seq":1,"payload":{"action":"set_pause"}})",
       ErrorCode::Schema},
  };
  std::string big = R"({"type":"frame_submit","seq":1,"payload":{"image":")";
  big.append(protocol::kMaxFrameBytes, 'A');
  big += "\"}}";
  out.push_back({"oversize frame", std::move(big), ErrorCode::Oversize});
  return out;
}

}  // namespace bm::protogen

#include "bm/protocol.hpp"

#include "bm/codec.hpp"
#include "bm/schema_text.hpp"

#include <algorithm>
#include <charconv>

namespace bm {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Malformed: return "E_MALFORMED";
    case ErrorCode::Schema: return "E_SCHEMA";
    case ErrorCode::UnknownType: return "E_UNKNOWN_TYPE";
    case ErrorCode::Oversize: return "E_OVERSIZE";
    case ErrorCode::Version: return "E_VERSION";
    case ErrorCode::Sequence: return "E_SEQ";
    case ErrorCode::Auth: return "E_AUTH";
    case ErrorCode::UnknownSession: return "E_UNKNOWN_SESSION";
    case ErrorCode::UnknownToken: return "E_UNKNOWN_TOKEN";
    case ErrorCode::UnknownPlayer: return "E_UNKNOWN_PLAYER";
    case ErrorCode::Capacity: return "E_CAPACITY";
    case ErrorCode::RegistryFull: return "E_REGISTRY_FULL";
    case ErrorCode::InvalidName: return "E_INVALID_NAME";
    case ErrorCode::InvalidLabel: return "E_INVALID_LABEL";
    case ErrorCode::Paused: return "E_PAUSED";
    case ErrorCode::UndecodableFrame: return "E_UNDECODABLE_FRAME";
    case ErrorCode::RateLimited: return "E_RATE_LIMITED";
    case ErrorCode::DatasetLocked: return "E_DATASET_LOCKED";
    case ErrorCode::NotFound: return "E_NOT_FOUND";
    case ErrorCode::Internal: return "E_INTERNAL";
  }
  return "E_INTERNAL";
}

}  // namespace bm

namespace bm::protocol {
namespace {

[[noreturn]] void schema_error(const std::string& detail) { throw Error(ErrorCode::Schema, detail); }

int major_of(std::string_view version) {
  int major = -1;
  const auto dot = version.find('.');
  const auto head = version.substr(0, dot);
  const auto [end, ec] = std::from_chars(head.data(), head.data() + head.size(), major);
  if (ec != std::errc() || end != head.data() + head.size()) return -1;
  return major;
}

std::string jpeg_b64(const RgbImage& image) { return base64_encode(encode_jpeg(image, 85)); }

}  // namespace

Schema Schema::parse(std::string_view text) {
  Schema s;
  s.doc_ = json::parse(text);
  s.version_ = s.doc_.at("protocol_version").get<std::string>();
  s.max_frame_bytes_ = s.doc_.at("max_frame_bytes").get<std::size_t>();
  return s;
}

const Schema& schema() {
  static const Schema instance = Schema::parse(detail::kSchemaText);
  return instance;
}

std::vector<std::string> Schema::message_types() const {
  std::vector<std::string> out;
  for (const auto& [name, spec] : doc_.at("messages").items()) out.push_back(name);
  return out;
}

bool Schema::knows(std::string_view type) const { return doc_.at("messages").contains(std::string(type)); }

const json& Schema::message(std::string_view type) const { return doc_.at("messages").at(std::string(type)); }

const json& Schema::resolve(const json& field_spec) const {
  if (field_spec.at("kind") == "ref") return doc_.at("types").at(field_spec.at("type").get<std::string>());
  return field_spec;
}

void Schema::validate_value(const json& raw_spec, const json& value, const std::string& path) const {
  const json& spec = resolve(raw_spec);
  const std::string kind = spec.at("kind");
  if (kind == "string") {
    if (!value.is_string()) schema_error(path + ": expected string");
  } else if (kind == "bool") {
    if (!value.is_boolean()) schema_error(path + ": expected bool");
  } else if (kind == "int") {
    if (!value.is_number_integer()) schema_error(path + ": expected integer");
  } else if (kind == "number") {
    if (!value.is_number()) schema_error(path + ": expected number");
  } else if (kind == "bytes") {
    Bytes scratch;
    if (!value.is_string() || !base64_decode(value.get_ref<const std::string&>(), scratch)) {
      schema_error(path + ": expected base64 bytes");
    }
  } else if (kind == "enum") {
    const auto& values = spec.at("values");
    if (!value.is_string() || std::find(values.begin(), values.end(), value) == values.end()) {
      schema_error(path + ": value not in enumeration");
    }
  } else if (kind == "array") {
    if (!value.is_array()) schema_error(path + ": expected array");
    for (std::size_t i = 0; i < value.size(); ++i) {
      validate_value(spec.at("items"), value[i], path + "/" + std::to_string(i));
    }
  } else if (kind == "object") {
    if (!value.is_object()) schema_error(path + ": expected object");
    validate_fields(spec.at("fields"), value, path);
  } else {
    throw std::logic_error("schema: unknown kind " + kind);
  }
}

void Schema::validate_fields(const json& fields, const json& object, const std::string& path) const {
  for (const auto& [name, spec] : fields.items()) {
    auto it = object.find(name);
    if (it == object.end()) {
      if (spec.value("required", false)) schema_error(path + "/" + name + ": missing required field");
      continue;
    }
    validate_value(spec, *it, path + "/" + name);
  }
}

void Schema::validate(const Message& message) const {
  if (!knows(message.type)) throw Error(ErrorCode::UnknownType, "unknown message type '" + message.type + "'");
  if (!message.payload.is_object()) schema_error("payload must be an object");
  const json& spec = this->message(message.type);
  validate_fields(spec.at("fields"), message.payload, "/payload");

  if (auto rw = spec.find("required_when"); rw != spec.end()) {
    for (const auto& [selector, cases] : rw->items()) {
      auto selected = message.payload.find(selector);
      if (selected == message.payload.end() || !selected->is_string()) continue;
      auto required = cases.find(selected->get<std::string>());
      if (required == cases.end()) continue;
      for (const auto& field : *required) {
        if (!message.payload.contains(field.get<std::string>())) {
          schema_error("/payload/" + field.get<std::string>() + ": required when " + selector + " is " +
                       selected->get<std::string>());
        }
      }
    }
  }
}

void Schema::collect_images(const json& raw_spec, const json& value, const std::string& path,
                            std::vector<std::string>& out) const {
  const json& spec = resolve(raw_spec);
  const std::string kind = spec.at("kind");
  if (kind == "bytes" && spec.value("image", false)) {
    out.push_back(path);
  } else if (kind == "array" && value.is_array()) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      collect_images(spec.at("items"), value[i], path + "/" + std::to_string(i), out);
    }
  } else if (kind == "object" && value.is_object()) {
    for (const auto& [name, field] : spec.at("fields").items()) {
      if (auto it = value.find(name); it != value.end()) collect_images(field, *it, path + "/" + name, out);
    }
  }
}

std::vector<std::string> Schema::image_fields(const Message& message) const {
  std::vector<std::string> out;
  if (!knows(message.type)) return out;
  for (const auto& [name, field] : this->message(message.type).at("fields").items()) {
    if (auto it = message.payload.find(name); it != message.payload.end()) {
      collect_images(field, *it, "/payload/" + name, out);
    }
  }
  return out;
}

std::string encode(const Message& message) {
  schema().validate(message);
  json frame = message.extras;
  frame["type"] = message.type;
  frame["seq"] = message.seq;
  frame["payload"] = message.payload;
  std::string text = frame.dump();
  if (text.size() > schema().max_frame_bytes()) throw Error(ErrorCode::Oversize, "frame exceeds 4 MiB");
  return text;
}

Message decode(std::string_view frame) {
  if (frame.size() > schema().max_frame_bytes()) throw Error(ErrorCode::Oversize, "frame exceeds 4 MiB");
  json doc = json::parse(frame, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw Error(ErrorCode::Malformed, "frame is not a JSON object");

  Message message;
  auto type = doc.find("type");
  if (type == doc.end() || !type->is_string()) schema_error("missing message type");
  message.type = type->get<std::string>();
  if (!schema().knows(message.type)) {
    throw Error(ErrorCode::UnknownType, "unknown message type '" + message.type + "'");
  }
  auto seq = doc.find("seq");
  if (seq == doc.end() || !seq->is_number_unsigned()) schema_error("missing or negative seq");
  message.seq = seq->get<std::uint64_t>();
  auto payload = doc.find("payload");
  if (payload == doc.end() || !payload->is_object()) schema_error("missing payload object");
  message.payload = std::move(*payload);

  doc.erase("type");
  doc.erase("seq");
  doc.erase("payload");
  message.extras = std::move(doc);
  schema().validate(message);
  return message;
}

bool compatible_version(std::string_view peer_version) {
  const int ours = major_of(kVersion);
  return ours >= 0 && major_of(peer_version) == ours;
}

Message error_message(ErrorCode code, std::string_view detail) {
  return {"error", 0, {{"code", std::string(to_string(code))}, {"detail", std::string(detail)}}};
}

json challenge_json(const Challenge& c) {
  return {{"label_index", c.label_index}, {"label_name", c.label_name}, {"epoch", c.epoch}};
}

json flags_json(bool heatmap_enabled, bool dataset_unlocked, const RevealPolicy& reveal) {
  return {{"heatmap_enabled", heatmap_enabled},
          {"dataset_unlocked", dataset_unlocked},
          {"reveal_hidden", !reveal.has_value()},
          {"reveal_n", reveal.value_or(0)}};
}

json roster_payload(const std::vector<PlayerView>& players, bool include_images) {
  json list = json::array();
  for (const auto& p : players) {
    json entry = {{"player_id", p.player_id}, {"display_name", p.display_name}};
    if (include_images && p.avatar) entry["avatar"] = jpeg_b64(*p.avatar);
    list.push_back(std::move(entry));
  }
  return {{"players", std::move(list)}};
}

json board_payload(const std::vector<BoardRow>& rows, bool include_images) {
  json list = json::array();
  for (const auto& row : rows) {
    json entry = {{"player_id", row.player_id}, {"display_name", row.display_name}, {"rank", row.rank}};
    if (row.confidence) entry["confidence"] = *row.confidence;
    if (include_images && row.thumbnail) entry["thumbnail"] = jpeg_b64(*row.thumbnail);
    list.push_back(std::move(entry));
  }
  return {{"entries", std::move(list)}};
}

json challenge_payload(const ChallengeEvent& event) {
  json payload = challenge_json(event.challenge);
  payload["scope"] = event.scope.is_all() ? "all" : "players";
  if (!event.scope.is_all()) payload["players"] = *event.scope.players;
  return payload;
}

json snapshot_payload(const SessionSnapshot& snap, bool teacher, const PlayerId& player) {
  json payload;
  payload["role"] = teacher ? "teacher" : "student";
  payload["session_id"] = snap.session_id;
  if (teacher) {
    payload["join_url"] = snap.join_url;
  } else {
    payload["player_id"] = player;
  }
  payload["labels"] = snap.labels;
  payload["roster"] = roster_payload(snap.roster, teacher)["players"];
  payload["challenge"] = challenge_json(teacher ? snap.challenge : snap.challenge_for(player));
  if (teacher) {
    json overrides = json::array();
    for (const auto& [id, c] : snap.overrides) overrides.push_back({{"player_id", id}, {"challenge", challenge_json(c)}});
    payload["overrides"] = std::move(overrides);
  }
  payload["paused"] = snap.paused;
  payload["flags"] = flags_json(snap.heatmap_enabled, snap.dataset_unlocked, snap.reveal);
  payload["board"] = board_payload(snap.board, teacher)["entries"];
  return payload;
}

json score_payload(const SubmissionOutcome& outcome) {
  json payload = {{"confidence", outcome.confidence},
                  {"is_new_best", outcome.is_new_best},
                  {"challenge", challenge_json(outcome.challenge)},
                  {"top_label", outcome.top_label}};
  if (outcome.cam) {
    const auto& v = outcome.cam->values;
    payload["cam_grid"] = std::vector<float>(v.data(), v.data() + v.size());
    payload["cam_h"] = v.rows();
    payload["cam_w"] = v.cols();
  }
  if (outcome.heatmap_png) payload["heatmap_png"] = base64_encode(*outcome.heatmap_png);
  return payload;
}

}  // namespace bm::protocol

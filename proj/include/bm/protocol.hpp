#pragma once

#include "bm/errors.hpp"
#include "bm/session.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace bm::protocol {

using json = nlohmann::json;

inline constexpr std::string_view kVersion = "1.0";
inline constexpr std::size_t kMaxFrameBytes = 4u << 20;

/// One wire frame: {"type": ..., "seq": ..., "payload": {...}}. Unknown
/// payload fields and unknown top-level keys survive a decode/encode cycle.
struct Message {
  std::string type;
  std::uint64_t seq = 0;
  json payload = json::object();
  json extras = json::object();

  bool operator==(const Message&) const = default;
};

/// The machine-readable schema shipped in protocol/schema.json.
class Schema {
 public:
  static Schema parse(std::string_view text);

  const std::string& version() const { return version_; }
  std::size_t max_frame_bytes() const { return max_frame_bytes_; }
  std::vector<std::string> message_types() const;
  bool knows(std::string_view type) const;
  const json& message(std::string_view type) const;
  const json& document() const { return doc_; }

  /// Follows "ref" field specs to the named type.
  const json& resolve(const json& field_spec) const;

  /// Throws Error(UnknownType) or Error(Schema).
  void validate(const Message& message) const;

  /// JSON-pointer paths of every image-bearing field present in the message.
  std::vector<std::string> image_fields(const Message& message) const;

 private:
  void validate_value(const json& spec, const json& value, const std::string& path) const;
  void validate_fields(const json& fields, const json& object, const std::string& path) const;
  void collect_images(const json& spec, const json& value, const std::string& path,
                      std::vector<std::string>& out) const;

  json doc_;
  std::string version_;
  std::size_t max_frame_bytes_ = kMaxFrameBytes;
};

const Schema& schema();

/// Validates and serializes. Throws Error(Schema/UnknownType/Oversize).
std::string encode(const Message& message);

/// Parses and validates one frame. Throws Error(Malformed/Schema/UnknownType/Oversize).
Message decode(std::string_view frame);

/// True when the major components of two "major.minor" versions match.
bool compatible_version(std::string_view peer_version);

Message error_message(ErrorCode code, std::string_view detail);

// Domain -> wire payloads. Image-bearing fields are only filled when
// include_images is set; student-bound copies leave them out.
json challenge_json(const Challenge& challenge);
json flags_json(bool heatmap_enabled, bool dataset_unlocked, const RevealPolicy& reveal);
json roster_payload(const std::vector<PlayerView>& players, bool include_images);
json board_payload(const std::vector<BoardRow>& rows, bool include_images);
json challenge_payload(const ChallengeEvent& event);
json snapshot_payload(const SessionSnapshot& snapshot, bool teacher, const PlayerId& player);
json score_payload(const SubmissionOutcome& outcome);

}  // namespace bm::protocol

#pragma once

#include "bm/codec.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace bm {

struct DatasetLabel {
  std::string label_name;
  std::vector<std::string> image_refs;
};

/// Read-only training-image catalogue: one subdirectory per label, or an
/// explicit manifest.json ({"labels": [{"label_name", "image_refs"}]}).
class Dataset {
 public:
  Dataset() = default;

  /// Every referenced image must exist and decode; throws std::runtime_error
  /// naming the offending path otherwise.
  static Dataset load(const std::filesystem::path& root);

  const std::vector<DatasetLabel>& labels() const { return labels_; }
  const std::filesystem::path& root() const { return root_; }

  nlohmann::json manifest() const;
  /// Throws Error(NotFound) for unknown labels.
  nlohmann::json label_listing(std::string_view label) const;
  /// Throws Error(NotFound) for unknown labels or images.
  Bytes read_image(std::string_view label, std::string_view image_id) const;

  static std::string content_type(std::string_view image_id);

 private:
  const DatasetLabel* find(std::string_view label) const;

  std::filesystem::path root_;
  std::vector<DatasetLabel> labels_;
};

}  // namespace bm

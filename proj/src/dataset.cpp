#include "bm/dataset.hpp"

#include "bm/errors.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

namespace bm {
namespace {

namespace fs = std::filesystem;

bool is_image_name(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

bool is_plain_name(std::string_view name) {
  return !name.empty() && name != "." && name != ".." && name.find('/') == std::string_view::npos &&
         name.find('\\') == std::string_view::npos;
}

Bytes slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

Dataset Dataset::load(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("dataset directory not found: " + root.string());
  Dataset ds;
  ds.root_ = root;

  const fs::path manifest = root / "manifest.json";
  if (fs::exists(manifest)) {
    const Bytes raw = slurp(manifest);
    const auto doc = nlohmann::json::parse(raw.begin(), raw.end(), nullptr, false);
    if (doc.is_discarded() || !doc.contains("labels")) {
      throw std::runtime_error("malformed dataset manifest: " + manifest.string());
    }
    for (const auto& entry : doc.at("labels")) {
      ds.labels_.push_back({entry.at("label_name").get<std::string>(),
                            entry.at("image_refs").get<std::vector<std::string>>()});
    }
  } else {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory()) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
      DatasetLabel label{dir.filename().string(), {}};
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && is_image_name(e.path())) label.image_refs.push_back(e.path().filename().string());
      }
      std::sort(label.image_refs.begin(), label.image_refs.end());
      ds.labels_.push_back(std::move(label));
    }
  }

  for (const auto& label : ds.labels_) {
    if (!is_plain_name(label.label_name)) throw std::runtime_error("invalid dataset label: " + label.label_name);
    for (const auto& image : label.image_refs) {
      const fs::path path = root / label.label_name / image;
      if (!is_plain_name(image)) throw std::runtime_error("invalid dataset image id: " + path.string());
      try {
        (void)decode_image(slurp(path));
      } catch (const Error&) {
        throw std::runtime_error("undecodable dataset image: " + path.string());
      }
    }
  }
  return ds;
}

const DatasetLabel* Dataset::find(std::string_view label) const {
  auto it = std::find_if(labels_.begin(), labels_.end(), [&](const auto& l) { return l.label_name == label; });
  return it == labels_.end() ? nullptr : &*it;
}

nlohmann::json Dataset::manifest() const {
  nlohmann::json labels = nlohmann::json::array();
  for (const auto& l : labels_) labels.push_back({{"label_name", l.label_name}, {"image_refs", l.image_refs}});
  return {{"labels", std::move(labels)}};
}

nlohmann::json Dataset::label_listing(std::string_view label) const {
  const auto* l = find(label);
  if (l == nullptr) throw Error(ErrorCode::NotFound, "unknown dataset label");
  return {{"label_name", l->label_name}, {"image_refs", l->image_refs}};
}

Bytes Dataset::read_image(std::string_view label, std::string_view image_id) const {
  const auto* l = find(label);
  if (l == nullptr || std::find(l->image_refs.begin(), l->image_refs.end(), image_id) == l->image_refs.end()) {
    throw Error(ErrorCode::NotFound, "unknown dataset image");
  }
  return slurp(root_ / l->label_name / std::string(image_id));
}

std::string Dataset::content_type(std::string_view image_id) {
  const std::string ext = fs::path(std::string(image_id)).extension().string();
  if (ext == ".png" || ext == ".PNG") return "image/png";
  return "image/jpeg";
}

}  // namespace bm

// BMNet container:
//   "BMN1" | u32le header_length | header text | float32le blob
// The header is line-oriented: "bmnet 1", "input_size N", one "label <name>"
// line per class, one "layer <kind> key=value..." line per layer and a
// trailing "blob_bytes N". Tensor references are "offset:count" where the
// offset is in bytes from blob start and count is in floats.

#include "bm/nn.hpp"

#include <json.hpp>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <sstream>

namespace bm {
namespace {

using Kind = ModelFormatError::Kind;

[[noreturn]] void fail(Kind kind, const std::string& what) { throw ModelFormatError(kind, "bmnet: " + what); }

constexpr std::string_view kMagic = "BMN1";

std::uint32_t read_u32le(const std::uint8_t* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
         std::uint32_t(p[3]) << 24;
}

void append_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

std::size_t parse_count(std::string_view text, const std::string& field) {
  std::size_t value = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || end != text.data() + text.size()) {
    fail(Kind::MalformedHeader, "field '" + field + "' is not a non-negative integer");
  }
  return value;
}

struct TensorRef {
  std::size_t offset = 0;
  std::size_t count = 0;
};

using Fields = std::map<std::string, std::string, std::less<>>;

Fields split_fields(std::istringstream& line) {
  Fields fields;
  std::string token;
  while (line >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos || eq == 0) fail(Kind::MalformedHeader, "expected key=value, got '" + token + "'");
    if (!fields.emplace(token.substr(0, eq), token.substr(eq + 1)).second) {
      fail(Kind::MalformedHeader, "duplicate key '" + token.substr(0, eq) + "'");
    }
  }
  return fields;
}

std::string take(Fields& fields, const std::string& key) {
  auto it = fields.find(key);
  if (it == fields.end()) fail(Kind::MalformedHeader, "missing key '" + key + "'");
  std::string value = std::move(it->second);
  fields.erase(it);
  return value;
}

TensorRef parse_ref(const std::string& text, const std::string& key) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) fail(Kind::MalformedHeader, "tensor reference '" + key + "' needs offset:count");
  return {parse_count(std::string_view(text).substr(0, colon), key),
          parse_count(std::string_view(text).substr(colon + 1), key)};
}

class BlobReader {
 public:
  explicit BlobReader(std::span<const std::uint8_t> blob) : blob_(blob) {}

  void read(const TensorRef& ref, std::size_t expected, float* out, const std::string& what) const {
    if (ref.count != expected) {
      fail(Kind::MalformedHeader, what + " declares " + std::to_string(ref.count) + " values, shape needs " +
                                      std::to_string(expected));
    }
    if (ref.offset > blob_.size() || (blob_.size() - ref.offset) / 4 < ref.count) {
      fail(Kind::ByteLength, what + " extends past the end of the tensor blob");
    }
    for (std::size_t i = 0; i < ref.count; ++i) {
      out[i] = std::bit_cast<float>(read_u32le(blob_.data() + ref.offset + 4 * i));
    }
  }

 private:
  std::span<const std::uint8_t> blob_;
};

struct PendingLayer {
  std::string kind;
  Fields fields;
};

class BlobWriter {
 public:
  std::string put(const float* data, std::size_t count) {
    const std::size_t offset = bytes_.size();
    for (std::size_t i = 0; i < count; ++i) append_u32le(bytes_, std::bit_cast<std::uint32_t>(data[i]));
    return std::to_string(offset) + ":" + std::to_string(count);
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

bool valid_label(const std::string& label) {
  if (label.empty() || label.find_first_of("\r\n") != std::string::npos) return false;
  try {
    (void)nlohmann::json(label).dump();
  } catch (const nlohmann::json::type_error&) {
    return false;  // not UTF-8
  }
  return true;
}

}  // namespace

Model load_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0) {
    fail(Kind::MalformedHeader, "missing BMN1 magic");
  }
  const std::size_t header_len = read_u32le(bytes.data() + 4);
  if (header_len > bytes.size() - 8) fail(Kind::MalformedHeader, "header length exceeds file size");
  const std::string header(reinterpret_cast<const char*>(bytes.data() + 8), header_len);
  const auto blob = bytes.subspan(8 + header_len);

  std::istringstream lines(header);
  std::string line;
  if (!std::getline(lines, line) || line != "bmnet 1") fail(Kind::MalformedHeader, "unsupported header version");

  std::size_t input_size = 0;
  std::optional<std::size_t> blob_bytes;
  std::vector<std::string> labels;
  std::vector<PendingLayer> pending;

  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream in(line);
    std::string key;
    in >> key;
    if (key == "input_size") {
      std::string value;
      in >> value;
      input_size = parse_count(value, key);
    } else if (key == "label") {
      std::string name = line.substr(std::min(line.size(), key.size() + 1));
      if (!valid_label(name)) fail(Kind::MalformedHeader, "invalid label text");
      labels.push_back(std::move(name));
    } else if (key == "layer") {
      PendingLayer layer;
      in >> layer.kind;
      layer.fields = split_fields(in);
      pending.push_back(std::move(layer));
    } else if (key == "blob_bytes") {
      std::string value;
      in >> value;
      blob_bytes = parse_count(value, key);
    } else {
      fail(Kind::MalformedHeader, "unknown header key '" + key + "'");
    }
  }
  if (!blob_bytes) fail(Kind::MalformedHeader, "missing blob_bytes");
  if (*blob_bytes != blob.size()) {
    fail(Kind::ByteLength, "blob is " + std::to_string(blob.size()) + " bytes, header declares " +
                               std::to_string(*blob_bytes));
  }

  const BlobReader reader(blob);
  std::vector<Layer> layers;
  for (auto& p : pending) {
    auto& f = p.fields;
    if (p.kind == "conv2d") {
      Conv2d conv;
      conv.in_channels = parse_count(take(f, "in"), "in");
      conv.out_channels = parse_count(take(f, "out"), "out");
      conv.kernel = parse_count(take(f, "kernel"), "kernel");
      conv.stride = parse_count(take(f, "stride"), "stride");
      conv.padding = parse_count(take(f, "padding"), "padding");
      conv.groups = parse_count(take(f, "groups"), "groups");
      if (conv.groups == 0 || conv.in_channels % conv.groups != 0) {
        fail(Kind::ChannelMismatch, "conv2d groups do not divide input channels");
      }
      const std::size_t patch = conv.in_channels / conv.groups * conv.kernel * conv.kernel;
      conv.weights.resize(Eigen::Index(conv.out_channels), Eigen::Index(patch));
      conv.bias.resize(Eigen::Index(conv.out_channels));
      reader.read(parse_ref(take(f, "weight"), "weight"), conv.out_channels * patch, conv.weights.data(),
                  "conv2d weight");
      reader.read(parse_ref(take(f, "bias"), "bias"), conv.out_channels, conv.bias.data(), "conv2d bias");
      layers.emplace_back(std::move(conv));
    } else if (p.kind == "relu6") {
      layers.emplace_back(Relu6{});
    } else if (p.kind == "gap") {
      layers.emplace_back(GlobalAvgPool{});
    } else if (p.kind == "linear") {
      Linear head;
      const std::size_t in = parse_count(take(f, "in"), "in");
      const std::size_t out = parse_count(take(f, "out"), "out");
      head.weights.resize(Eigen::Index(out), Eigen::Index(in));
      head.bias.resize(Eigen::Index(out));
      reader.read(parse_ref(take(f, "weight"), "weight"), out * in, head.weights.data(), "linear weight");
      reader.read(parse_ref(take(f, "bias"), "bias"), out, head.bias.data(), "linear bias");
      layers.emplace_back(std::move(head));
    } else {
      fail(Kind::UnsupportedLayer, "unsupported layer kind '" + p.kind + "'");
    }
    if (!f.empty()) fail(Kind::MalformedHeader, "unknown key '" + f.begin()->first + "' on " + p.kind);
  }
  return Model::create(std::move(layers), std::move(labels), input_size);
}

Model load_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read model file: " + path);
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load_model(bytes);
}

std::vector<std::uint8_t> save_model(const Model& model) {
  BlobWriter blob;
  std::ostringstream header;
  header << "bmnet 1\n";
  header << "input_size " << model.input_size() << "\n";
  for (const auto& label : model.labels()) header << "label " << label << "\n";
  for (const Layer& layer : model.layers()) {
    if (const auto* conv = std::get_if<Conv2d>(&layer)) {
      header << "layer conv2d in=" << conv->in_channels << " out=" << conv->out_channels
             << " kernel=" << conv->kernel << " stride=" << conv->stride << " padding=" << conv->padding
             << " groups=" << conv->groups
             << " weight=" << blob.put(conv->weights.data(), std::size_t(conv->weights.size()))
             << " bias=" << blob.put(conv->bias.data(), std::size_t(conv->bias.size())) << "\n";
    } else if (std::holds_alternative<Relu6>(layer)) {
      header << "layer relu6\n";
    } else if (std::holds_alternative<GlobalAvgPool>(layer)) {
      header << "layer gap\n";
    } else {
      const auto& head = std::get<Linear>(layer);
      header << "layer linear in=" << head.weights.cols() << " out=" << head.weights.rows()
             << " weight=" << blob.put(head.weights.data(), std::size_t(head.weights.size()))
             << " bias=" << blob.put(head.bias.data(), std::size_t(head.bias.size())) << "\n";
    }
  }
  header << "blob_bytes " << blob.bytes().size() << "\n";

  const std::string text = header.str();
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  append_u32le(out, std::uint32_t(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), blob.bytes().begin(), blob.bytes().end());
  return out;
}

}  // namespace bm

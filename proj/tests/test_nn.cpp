#include "bm/nn.hpp"

#include "fixtures.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <cstring>

using namespace bm;

namespace {

std::vector<std::uint8_t> container(const std::string& header, std::size_t floats) {
  std::vector<std::uint8_t> out = {'B', 'M', 'N', '1'};
  const auto len = std::uint32_t(header.size());
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(len >> (8 * i)));
  out.insert(out.end(), header.begin(), header.end());
  out.resize(out.size() + floats * 4, 0);
  return out;
}

Model zero_model(std::size_t classes) {
  std::vector<Layer> layers = make_tiny_model(1, fixtures::labels(classes)).layers();
  for (auto& layer : layers) {
    if (auto* c = std::get_if<Conv2d>(&layer)) {
      c->weights.setZero();
      c->bias.setZero();
    } else if (auto* l = std::get_if<Linear>(&layer)) {
      l->weights.setZero();
      l->bias.setZero();
    }
  }
  return Model::create(std::move(layers), fixtures::labels(classes), 56);
}

ModelFormatError::Kind load_error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    (void)load_model(bytes);
  } catch (const ModelFormatError& e) {
    return e.kind();
  }
  FAIL("load_model accepted a malformed container");
  return ModelFormatError::Kind::MalformedHeader;
}

}  // namespace

TEST_SUITE("nn_core") {
  TEST_CASE("BMNet-Tiny round-trips through the container field by field") {
    const Model original = make_tiny_model(42, fixtures::labels());
    const Model reloaded = load_model(save_model(original));

    CHECK(reloaded.input_size() == 56);
    CHECK(reloaded.labels() == original.labels());
    CHECK(reloaded.feature_channels() == 32);
    CHECK(reloaded.feature_size() == 7);
    REQUIRE(reloaded.layers().size() == original.layers().size());
    for (std::size_t i = 0; i < original.layers().size(); ++i) {
      CHECK(reloaded.layers()[i].index() == original.layers()[i].index());
      if (const auto* a = std::get_if<Conv2d>(&original.layers()[i])) {
        const auto& b = std::get<Conv2d>(reloaded.layers()[i]);
        CHECK(a->in_channels == b.in_channels);
        CHECK(a->out_channels == b.out_channels);
        CHECK(a->kernel == b.kernel);
        CHECK(a->stride == b.stride);
        CHECK(a->padding == b.padding);
        CHECK(a->groups == b.groups);
        CHECK(a->weights == b.weights);
        CHECK(a->bias == b.bias);
      }
    }
    CHECK(reloaded.head_weights() == original.head_weights());
    CHECK(reloaded.head_bias() == original.head_bias());
    CHECK(save_model(reloaded) == save_model(original));
  }

  TEST_CASE("head wider than the backbone is a channel mismatch") {
    // Backbone 3 -> 8 -> 16, head declared [4 x 32].
    const std::string header =
        "bmnet 1\ninput_size 8\nlabel a\nlabel b\nlabel c\nlabel d\n"
        "layer conv2d in=3 out=8 kernel=3 stride=2 padding=1 groups=1 weight=0:216 bias=864:8\n"
        "layer relu6\n"
        "layer conv2d in=8 out=16 kernel=3 stride=2 padding=1 groups=1 weight=896:1152 bias=5504:16\n"
        "layer relu6\nlayer gap\n"
        "layer linear in=32 out=4 weight=5568:128 bias=6080:4\n"
        "blob_bytes 6096\n";
    CHECK(load_error_kind(container(header, 6096 / 4)) == ModelFormatError::Kind::ChannelMismatch);
  }

  TEST_CASE("truncated tensor blob is a byte-length error") {
    auto bytes = save_model(make_tiny_model(3, fixtures::labels()));
    bytes.resize(bytes.size() - 10);
    CHECK(load_error_kind(bytes) == ModelFormatError::Kind::ByteLength);
  }

  TEST_CASE("tensor reference past the blob end is a byte-length error") {
    const std::string header =
        "bmnet 1\ninput_size 4\nlabel a\n"
        "layer conv2d in=3 out=1 kernel=1 stride=1 padding=0 groups=1 weight=8:3 bias=0:1\n"
        "layer gap\nlayer linear in=1 out=1 weight=0:1 bias=0:1\nblob_bytes 16\n";
    CHECK(load_error_kind(container(header, 4)) == ModelFormatError::Kind::ByteLength);
  }

  TEST_CASE("malformed headers are rejected") {
    CHECK(load_error_kind({'N', 'O', 'P', 'E', 0, 0, 0, 0}) == ModelFormatError::Kind::MalformedHeader);
    auto bytes = save_model(make_tiny_model(3, fixtures::labels()));
    bytes[4] = 0xFF;  // header length far beyond the file
    bytes[5] = 0xFF;
    bytes[6] = 0xFF;
    CHECK(load_error_kind(bytes) == ModelFormatError::Kind::MalformedHeader);
    CHECK(load_error_kind(container("bmnet 1\ninput_size x\n", 0)) == ModelFormatError::Kind::MalformedHeader);
  }

  TEST_CASE("unsupported layer kinds are rejected") {
    const std::string header =
        "bmnet 1\ninput_size 4\nlabel a\n"
        "layer conv2d in=3 out=1 kernel=1 stride=1 padding=0 groups=1 weight=0:3 bias=12:1\n"
        "layer batchnorm\nlayer gap\nlayer linear in=1 out=1 weight=16:1 bias=20:1\nblob_bytes 24\n";
    CHECK(load_error_kind(container(header, 6)) == ModelFormatError::Kind::UnsupportedLayer);
  }

  TEST_CASE("topology invariants: one pool, head last") {
    auto layers = make_tiny_model(1, fixtures::labels()).layers();
    auto twice = layers;
    twice.insert(twice.end() - 1, GlobalAvgPool{});
    CHECK_THROWS_AS(Model::create(twice, fixtures::labels(), 56), ModelFormatError);
    auto relu_after_head = layers;
    relu_after_head.push_back(Relu6{});
    CHECK_THROWS_AS(Model::create(relu_after_head, fixtures::labels(), 56), ModelFormatError);
  }

  TEST_CASE("depthwise and pointwise convolutions load and match the oracle") {
    // A MobileNet-style block: 3x3 stem, depthwise 3x3 (groups = channels), 1x1 pointwise.
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(-0.5f, 0.5f);
    auto conv = [&](std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p, std::size_t g) {
      Conv2d c{in, out, k, s, p, g, RowMatrixXf(Eigen::Index(out), Eigen::Index(in / g * k * k)),
               Vector<float>(Eigen::Index(out))};
      for (Eigen::Index i = 0; i < c.weights.size(); ++i) c.weights.data()[i] = u(rng);
      for (Eigen::Index i = 0; i < c.bias.size(); ++i) c.bias(i) = u(rng);
      return c;
    };
    Linear head{RowMatrixXf::Random(3, 12), Vector<float>::Random(3)};
    std::vector<Layer> layers = {conv(3, 6, 3, 2, 1, 1), Relu6{}, conv(6, 6, 3, 1, 1, 6), Relu6{},
                                 conv(6, 12, 1, 1, 0, 1), GlobalAvgPool{}, head};
    const Model model = load_model(save_model(Model::create(layers, fixtures::labels(3), 16)));
    const Tensor input = fixtures::random_input(9, 16);
    const auto result = forward(model, input);
    const auto expected = oracle::forward(model, input);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(std::abs(double(result.logits(Eigen::Index(c))) - expected.logits[c]) <= 1e-4);
    }
  }

  TEST_CASE("preprocess normalization endpoints") {
    const Tensor white = preprocess(RgbImage(56, 56, 255), 56);
    const Tensor black = preprocess(RgbImage(56, 56, 0), 56);
    CHECK(white.shape() == Tensor::Shape{3, 56, 56});
    for (float v : white.data()) REQUIRE(v == 1.0f);
    for (float v : black.data()) REQUIRE(v == -1.0f);
  }

  TEST_CASE("preprocess matches the reference resampler on a 112x112 checkerboard") {
    for (std::size_t cell : {1u, 3u, 8u}) {
      const RgbImage board = fixtures::checkerboard(112, cell);
      const Tensor t = preprocess(board, 56);
      const auto expected = oracle::preprocess(board, 56);
      REQUIRE(t.size() == expected.size());
      for (std::size_t i = 0; i < expected.size(); ++i) {
        REQUIRE(std::abs(double(t.data()[i]) - expected[i]) <= 1e-5);
      }
    }
  }

  TEST_CASE("preprocess rejects empty images") {
    CHECK_THROWS_AS(preprocess(RgbImage(), 56), std::invalid_argument);
  }

  TEST_CASE("softmax examples") {
    Vector<float> z(2);
    z << 0, 0;
    auto p = softmax(z);
    CHECK(p(0) == doctest::Approx(0.5));
    CHECK(p(1) == doctest::Approx(0.5));

    Vector<float> z3(3);
    z3 << 1, 2, 3;
    p = softmax(z3);
    const double total = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    const double frozen[3] = {0.09003, 0.24473, 0.66524};
    for (int i = 0; i < 3; ++i) {
      CHECK(std::abs(p(i) - std::exp(double(i + 1)) / total) <= 1e-9);
      CHECK(std::abs(p(i) - frozen[i]) <= 1e-5);
    }

    Vector<float> big(2);
    big << 1000, 0;
    p = softmax(big);
    CHECK(p(0) == 1.0);
    CHECK(p(1) < 1e-300);
    CHECK(p.allFinite());

    CHECK_THROWS_AS(softmax(Vector<float>()), std::invalid_argument);
  }

  TEST_CASE("zero-weight model yields bias logits and uniform probabilities") {
    const Model model = zero_model(4);
    const auto r = forward(model, fixtures::random_input(1));
    for (Eigen::Index i = 0; i < 4; ++i) {
      CHECK(r.logits(i) == 0.0f);
      CHECK(r.probs(i) == doctest::Approx(0.25));
    }
    CHECK(r.top_label == 0);  // exact tie breaks to the lowest index
  }

  TEST_CASE("forward rejects inputs of the wrong shape") {
    const Model model = make_tiny_model(1, fixtures::labels());
    CHECK_THROWS_AS(forward(model, Tensor({3, 28, 28})), std::invalid_argument);
    CHECK_THROWS_AS(forward(model, Tensor({1, 56, 56})), std::invalid_argument);
  }

  TEST_CASE("forward matches the naive-loop oracle") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const Model model = make_tiny_model(seed, fixtures::labels());
      const Tensor input = preprocess(fixtures::synthetic_frame(seed + 100), 56);
      const auto r = forward(model, input);
      const auto expected = oracle::forward(model, input);
      for (std::size_t c = 0; c < 4; ++c) REQUIRE(std::abs(double(r.logits(Eigen::Index(c))) - expected.logits[c]) <= 1e-4);
      CHECK(r.feature_maps.shape() == Tensor::Shape{32, 7, 7});
      CHECK(std::abs(r.probs.sum() - 1.0) <= 1e-6);
      CHECK(r.top_confidence == r.probs.maxCoeff());
    }
  }

  TEST_CASE("adding a constant to every head bias leaves probabilities unchanged") {
    Model model = make_tiny_model(11, fixtures::labels());
    const Tensor input = fixtures::random_input(12);
    const auto before = forward(model, input);
    model.head_mut().bias.array() += 3.25f;
    const auto after = forward(model, input);
    CHECK((before.probs - after.probs).cwiseAbs().maxCoeff() <= 1e-6);
    CHECK(before.top_label == after.top_label);
  }

  TEST_CASE("forward is deterministic") {
    const Model model = make_tiny_model(13, fixtures::labels());
    const Tensor input = fixtures::random_input(14);
    const auto a = forward(model, input);
    const auto b = forward(model, input);
    CHECK(std::memcmp(a.logits.data(), b.logits.data(), sizeof(float) * 4) == 0);
  }
}

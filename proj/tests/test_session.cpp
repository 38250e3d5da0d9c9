#include "bm/errors.hpp"
#include "bm/session.hpp"

#include "fixtures.hpp"
#include "leaderboard_property.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>

using namespace bm;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected bm::Error");
  return ErrorCode::Internal;
}

struct Calibrated {
  std::shared_ptr<const Model> model = std::make_shared<const Model>(fixtures::calibrated_model());
  property::RecordingSink sink;
  SessionRegistry registry{model, RegistryConfig{8, "http://192.168.1.10:8080", 8, 0.6f}};
  Calibrated() { registry.set_sink(&sink); }

  double confidence_of(const RgbImage& frame) const {
    return forward(*model, preprocess(frame, model->input_size())).probs(0);
  }
};

}  // namespace

TEST_SUITE("session_state") {
  TEST_CASE("create_session defaults") {
    Calibrated c;
    const auto created = c.registry.create_session();
    const auto snap = c.registry.snapshot(created.session_id);
    CHECK_FALSE(snap.paused);
    CHECK_FALSE(snap.heatmap_enabled);
    CHECK_FALSE(snap.dataset_unlocked);
    CHECK_FALSE(snap.reveal.has_value());
    CHECK(snap.roster.empty());
    CHECK(c.registry.join_url(created.session_id) == "http://192.168.1.10:8080/join/" + created.join_token);
    CHECK(created.join_token.size() >= 22);  // 128 bits in base64url
  }

  TEST_CASE("join tokens are distinct and the reveal default is configurable") {
    Calibrated c;
    const auto a = c.registry.create_session();
    SessionConfig two;
    two.reveal = 2;
    const auto b = c.registry.create_session(two);
    CHECK(a.join_token != b.join_token);
    CHECK(a.session_id != b.session_id);
    CHECK(c.registry.snapshot(b.session_id).reveal == RevealPolicy{2});
  }

  TEST_CASE("registry cap") {
    Calibrated c;
    for (int i = 0; i < 8; ++i) c.registry.create_session();
    CHECK(code_of([&] { c.registry.create_session(); }) == ErrorCode::RegistryFull);
  }

  TEST_CASE("join, name collisions, capacity and stale tokens") {
    Calibrated c;
    SessionConfig cfg;
    cfg.max_players = 3;
    const auto s = c.registry.create_session(cfg);
    c.registry.join(s.join_token, "Alice");
    CHECK(c.registry.snapshot(s.session_id).roster.size() == 1);
    c.registry.join(s.join_token, "Alice");
    c.registry.join(s.join_token, "Alice");
    const auto roster = c.registry.snapshot(s.session_id).roster;
    CHECK(roster[0].display_name == "Alice");
    CHECK(roster[1].display_name == "Alice-2");
    CHECK(roster[2].display_name == "Alice-3");
    CHECK(code_of([&] { c.registry.join(s.join_token, "Bob"); }) == ErrorCode::Capacity);
    CHECK(code_of([&] { c.registry.join("nope", "Bob"); }) == ErrorCode::UnknownToken);

    const auto t = c.registry.create_session();
    CHECK(code_of([&] { c.registry.join(t.join_token, ""); }) == ErrorCode::InvalidName);
    CHECK(code_of([&] { c.registry.join(t.join_token, std::string(33, 'x')); }) == ErrorCode::InvalidName);
    CHECK_NOTHROW(c.registry.join(t.join_token, std::string(32, 'x')));
    c.registry.end_session(t.session_id);
    CHECK(code_of([&] { c.registry.join(t.join_token, "Carol"); }) == ErrorCode::UnknownToken);
  }

  TEST_CASE("join emits roster then board, and the snapshot callback runs first") {
    Calibrated c;
    const auto s = c.registry.create_session();
    bool called = false;
    c.registry.join(s.join_token, "Alice", std::nullopt, [&](const SessionSnapshot& snap) {
      called = true;
      CHECK(snap.roster.size() == 1);
      CHECK(c.sink.events().empty());
    });
    CHECK(called);
    const auto events = c.sink.events();
    REQUIRE(events.size() == 2);
    CHECK(std::holds_alternative<RosterEvent>(events[0]));
    CHECK(std::holds_alternative<BoardEvent>(events[1]));
  }

  TEST_CASE("best confidence follows max semantics") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const auto p = c.registry.join(s.join_token, "Alice").player_id;
    const RgbImage high = fixtures::frame_for_confidence(0.40);
    const RgbImage low = fixtures::frame_for_confidence(0.30);
    const double high_conf = c.confidence_of(high);
    REQUIRE(high_conf > c.confidence_of(low));

    const auto first = c.registry.submit_frame(s.session_id, p, high);
    CHECK(first.is_new_best);
    CHECK(first.confidence == doctest::Approx(0.40).epsilon(0.02));
    const auto second = c.registry.submit_frame(s.session_id, p, low);
    CHECK_FALSE(second.is_new_best);
    CHECK(c.registry.entry(s.session_id, p)->best_confidence == high_conf);
  }

  TEST_CASE("submissions while paused are rejected and leave the board alone") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const auto p = c.registry.join(s.join_token, "Alice").player_id;
    c.registry.submit_frame(s.session_id, p, fixtures::frame_for_confidence(0.3));
    c.registry.set_pause(s.session_id, true);
    const auto before = *c.registry.entry(s.session_id, p);
    CHECK(code_of([&] { c.registry.submit_frame(s.session_id, p, fixtures::frame_for_confidence(0.9)); }) ==
          ErrorCode::Paused);
    CHECK(c.registry.entry(s.session_id, p)->best_confidence == before.best_confidence);
    c.registry.set_pause(s.session_id, false);
    CHECK(c.registry.submit_frame(s.session_id, p, fixtures::frame_for_confidence(0.9)).is_new_best);
  }

  TEST_CASE("seeded frame sequence keeps the oracle maximum and its thumbnail") {
    const auto model = std::make_shared<const Model>(make_tiny_model(7, fixtures::labels()));
    // Order three seeded frames so that the oracle confidences go low, high, middle.
    std::vector<std::pair<double, RgbImage>> scored;
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
      RgbImage f = fixtures::synthetic_frame(seed);
      scored.emplace_back(oracle::forward(*model, preprocess(f, 56)).probs[0], std::move(f));
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    const std::array<std::size_t, 3> order = {0, scored.size() - 1, scored.size() / 2};

    SessionRegistry registry(model, RegistryConfig{});
    const auto s = registry.create_session();
    const auto p = registry.join(s.join_token, "Alice").player_id;
    std::vector<bool> new_best;
    for (std::size_t i : order) {
      const auto out = registry.submit_frame(s.session_id, p, scored[i].second);
      CHECK(std::abs(out.confidence - scored[i].first) <= 1e-4);
      new_best.push_back(out.is_new_best);
    }
    CHECK(new_best == std::vector<bool>{true, true, false});
    const auto entry = *registry.entry(s.session_id, p);
    CHECK(std::abs(entry.best_confidence - scored[order[1]].first) <= 1e-4);
    REQUIRE(entry.thumbnail);
    CHECK(*entry.thumbnail == make_thumbnail(scored[order[1]].second, RegistryConfig{}.thumbnail_side));
  }

  TEST_CASE("challenge changes reset scores by scope and bump the epoch") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const auto a = c.registry.join(s.join_token, "A").player_id;
    const auto b = c.registry.join(s.join_token, "B").player_id;
    auto score_both = [&] {
      c.registry.submit_frame(s.session_id, a, fixtures::frame_for_confidence(0.7));
      c.registry.submit_frame(s.session_id, b, fixtures::frame_for_confidence(0.6));
    };
    score_both();
    c.registry.set_challenge(s.session_id, ChallengeScope::all(), 1);
    for (const auto& p : {a, b}) {
      CHECK(c.registry.entry(s.session_id, p)->best_confidence == 0.0);
      CHECK_FALSE(c.registry.entry(s.session_id, p)->thumbnail);
    }

    score_both();
    const auto b_before = *c.registry.entry(s.session_id, b);
    const auto epoch_before = c.registry.snapshot(s.session_id).challenge_for(b);
    c.registry.set_challenge(s.session_id, ChallengeScope::only({a}), 0);
    const auto snap = c.registry.snapshot(s.session_id);
    CHECK(c.registry.entry(s.session_id, a)->best_confidence == 0.0);
    CHECK(snap.challenge_for(a).label_name == "target");
    CHECK(c.registry.entry(s.session_id, b)->best_confidence == b_before.best_confidence);
    CHECK(snap.challenge_for(b) == epoch_before);

    score_both();
    const auto epoch = c.registry.snapshot(s.session_id).challenge.epoch;
    c.registry.set_challenge(s.session_id, ChallengeScope::all(), 0);
    CHECK(c.registry.snapshot(s.session_id).challenge.epoch == epoch + 2);  // scoped change took one
    CHECK(c.registry.entry(s.session_id, a)->best_confidence == 0.0);

    CHECK(code_of([&] { c.registry.set_challenge(s.session_id, ChallengeScope::all(), 9); }) == ErrorCode::InvalidLabel);
    CHECK(code_of([&] { c.registry.set_challenge(s.session_id, ChallengeScope::only({"ghost"}), 0); }) ==
          ErrorCode::UnknownPlayer);
  }

  TEST_CASE("leaderboard ordering and reveal policy") {
    Calibrated c;
    const auto s = c.registry.create_session();
    std::map<std::string, double> target = {{"A", 0.9}, {"B", 0.4}, {"C", 0.7}};
    std::map<std::string, double> actual;
    for (const auto& [name, p] : target) {
      const auto id = c.registry.join(s.join_token, name).player_id;
      actual[name] = c.registry.submit_frame(s.session_id, id, fixtures::frame_for_confidence(p)).confidence;
    }
    // Sort oracle over the three entries.
    std::vector<std::string> expected_order;
    for (const auto& [name, v] : actual) expected_order.push_back(name);
    std::sort(expected_order.begin(), expected_order.end(),
              [&](const auto& x, const auto& y) { return actual[x] > actual[y]; });
    CHECK(expected_order == std::vector<std::string>{"A", "C", "B"});

    c.registry.set_reveal(s.session_id, 2);
    auto view = c.registry.leaderboard_view(s.session_id);
    REQUIRE(view.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(view[i].display_name == expected_order[i]);
      CHECK(view[i].rank == i + 1);
      CHECK(view[i].thumbnail);
    }
    CHECK(view[0].confidence == actual["A"]);
    CHECK(view[1].confidence == actual["C"]);
    CHECK_FALSE(view[2].confidence);

    c.registry.set_reveal(s.session_id, std::nullopt);
    view = c.registry.leaderboard_view(s.session_id);
    CHECK(view[0].display_name == "A");
    for (const auto& row : view) CHECK_FALSE(row.confidence);

    const auto empty = c.registry.create_session();
    CHECK(c.registry.leaderboard_view(empty.session_id).empty());
  }

  TEST_CASE("ties rank the earlier achiever first") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const auto b = c.registry.join(s.join_token, "B").player_id;
    const auto a = c.registry.join(s.join_token, "A").player_id;
    const RgbImage frame = fixtures::frame_for_confidence(0.5);
    c.registry.submit_frame(s.session_id, a, frame);
    c.registry.submit_frame(s.session_id, b, frame);
    const auto view = c.registry.leaderboard_view(s.session_id);
    CHECK(view[0].player_id == a);
    CHECK(view[1].player_id == b);
  }

  TEST_CASE("heatmap flag gates CAM grids") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const auto p = c.registry.join(s.join_token, "A").player_id;
    CHECK_FALSE(c.registry.submit_frame(s.session_id, p, fixtures::frame_for_confidence(0.5)).cam);
    c.registry.set_heatmap(s.session_id, true);
    const auto out = c.registry.submit_frame(s.session_id, p, fixtures::synthetic_frame(1, 8, 8), {true});
    REQUIRE(out.cam);
    CHECK(out.cam->normalized);
    CHECK(out.cam->values.rows() == 8);
    REQUIRE(out.heatmap_png);
    const RgbImage png = decode_png(*out.heatmap_png);
    CHECK(png.width() == 8);
  }

  TEST_CASE("the first frame becomes the avatar when none was supplied") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const auto p = c.registry.join(s.join_token, "A").player_id;
    CHECK_FALSE(c.registry.snapshot(s.session_id).roster[0].avatar);
    c.registry.submit_frame(s.session_id, p, fixtures::frame_for_confidence(0.5));
    CHECK(c.registry.snapshot(s.session_id).roster[0].avatar);
  }

  TEST_CASE("board changes while paused are deferred to resume") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const auto p = c.registry.join(s.join_token, "A").player_id;
    c.registry.submit_frame(s.session_id, p, fixtures::frame_for_confidence(0.5));
    c.registry.set_pause(s.session_id, true);
    c.sink.clear();
    c.registry.set_challenge(s.session_id, ChallengeScope::all(), 1);
    c.registry.join(s.join_token, "B");
    for (const auto& ev : c.sink.events()) CHECK_FALSE(std::holds_alternative<BoardEvent>(ev));
    // The snapshot still shows the board as last broadcast.
    CHECK(c.registry.snapshot(s.session_id).board.size() == 1);
    c.registry.set_pause(s.session_id, false);
    const auto events = c.sink.events();
    REQUIRE(std::holds_alternative<BoardEvent>(events.back()));
    CHECK(std::get<BoardEvent>(events.back()).rows.size() == 2);
  }

  TEST_CASE("end_session purges everything and is idempotent") {
    const std::size_t baseline = RgbImage::live_buffers();
    {
      Calibrated c;
      const auto s = c.registry.create_session();
      const auto p = c.registry.join(s.join_token, "A", fixtures::synthetic_frame(3, 16, 16)).player_id;
      c.registry.submit_frame(s.session_id, p, fixtures::frame_for_confidence(0.5));
      CHECK(c.registry.stats().retained_images == 2);
      c.sink.clear();
      c.registry.end_session(s.session_id);
      CHECK(std::holds_alternative<EndedEvent>(c.sink.events().back()));
      c.sink.clear();
      CHECK(c.registry.stats().sessions == 0);
      CHECK(c.registry.stats().retained_images == 0);
      CHECK(RgbImage::live_buffers() == baseline);
      CHECK(code_of([&] { c.registry.leaderboard_view(s.session_id); }) == ErrorCode::UnknownSession);
      CHECK(code_of([&] { c.registry.join(s.join_token, "B"); }) == ErrorCode::UnknownToken);
      CHECK(code_of([&] { c.registry.submit_frame(s.session_id, p, RgbImage(8, 8)); }) == ErrorCode::UnknownSession);
      CHECK_NOTHROW(c.registry.end_session(s.session_id));
      CHECK(code_of([&] { c.registry.join_url(s.session_id); }) == ErrorCode::UnknownSession);
    }
    CHECK(RgbImage::live_buffers() == baseline);
  }

  TEST_CASE("regenerated tokens retire the old join URL") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const std::string fresh = c.registry.regenerate_token(s.session_id);
    CHECK(fresh != s.join_token);
    CHECK(code_of([&] { c.registry.join(s.join_token, "A"); }) == ErrorCode::UnknownToken);
    CHECK_NOTHROW(c.registry.join(fresh, "A"));
    CHECK(c.registry.join_url(s.session_id).ends_with("/join/" + fresh));
  }

  TEST_CASE("undecodable frames are rejected") {
    Calibrated c;
    const auto s = c.registry.create_session();
    const auto p = c.registry.join(s.join_token, "A").player_id;
    const std::vector<std::uint8_t> junk = {0xFF, 0xD8, 0x00, 0x01, 0x02};
    CHECK(code_of([&] { c.registry.submit_encoded(s.session_id, p, junk); }) == ErrorCode::UndecodableFrame);
    CHECK(code_of([&] { c.registry.submit_frame(s.session_id, "ghost", RgbImage(8, 8)); }) == ErrorCode::UnknownPlayer);
  }

  TEST_CASE("randomized interleavings keep the leaderboard invariants") {
    const auto report = property::run(60, 5000);
    for (const auto& v : report.violations) INFO(v);
    CHECK(report.violations.empty());
    CHECK(report.submissions > 500);
  }
}

// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "milora/synthdata.hpp"
#include "oracles.hpp"

using namespace milora;
namespace fs = std::filesystem;

TEST_CASE("episodes are bitwise deterministic per seed") {
  GenConfig cfg;
  auto a = generate_episode<double>(cfg, 123);
  auto b = generate_episode<double>(cfg, 123);
  CHECK(a.frames.data() == b.frames.data());
  CHECK(a.importance == b.importance);
  CHECK(a.summary_tokens == b.summary_tokens);
  auto c = generate_episode<double>(cfg, 124);
  CHECK(a.frames.data() != c.frames.data());
}

TEST_CASE("every episode has a salient frame and both distractor kinds") {
  GenConfig cfg;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto ep = generate_episode<float>(cfg, seed);
    REQUIRE(!ep.salient_frames.empty());
    REQUIRE(!ep.temporal_only_frames.empty());
    REQUIRE(!ep.spatial_only_frames.empty());
    int positives = 0;
    for (std::size_t t = 0; t < cfg.frames; ++t) positives += ep.importance[t];
    CHECK(positives == static_cast<int>(ep.salient_frames.size()));
    for (std::size_t t : ep.salient_frames) CHECK(ep.importance[t] == 1);
    for (std::size_t t : ep.temporal_only_frames) CHECK(ep.importance[t] == 0);
    for (std::size_t t : ep.spatial_only_frames) CHECK(ep.importance[t] == 0);

    // Tokens are the salient indices offset by two, ascending.
    REQUIRE(ep.summary_tokens.size() == ep.salient_frames.size());
    for (std::size_t i = 0; i < ep.summary_tokens.size(); ++i) {
      CHECK(ep.summary_tokens[i] == ep.salient_frames[i] + 2);
      if (i) CHECK(ep.summary_tokens[i] > ep.summary_tokens[i - 1]);
    }
  }
}

TEST_CASE("marked frames respect the minimum gap and never use the last frame") {
  GenConfig cfg;
  for (std::uint64_t seed = 200; seed < 260; ++seed) {
    auto ep = generate_episode<float>(cfg, seed);
    std::vector<std::size_t> marked;
    for (auto& v : {ep.salient_frames, ep.temporal_only_frames, ep.spatial_only_frames})
      marked.insert(marked.end(), v.begin(), v.end());
    for (std::size_t t : marked) CHECK(t + 1 < cfg.frames);
    for (std::size_t i = 0; i < marked.size(); ++i)
      for (std::size_t j = i + 1; j < marked.size(); ++j) {
        std::size_t gap = marked[i] > marked[j] ? marked[i] - marked[j]
                                                : marked[j] - marked[i];
        CHECK(gap >= cfg.min_gap);
      }
  }
}

TEST_CASE("patch cells avoid the temporal block") {
  GenConfig cfg;
  for (std::size_t cell : cfg.patch_cells()) CHECK(cell >= cfg.block_a_end());
  GenConfig tiny;
  tiny.frames = 16;
  tiny.d = 8;
  tiny.h = 2;
  tiny.w = 4;
  for (std::size_t cell : tiny.patch_cells()) CHECK(cell >= tiny.block_a_end());
}

TEST_CASE("both-marker oracle recovers the labels exactly") {
  GenConfig cfg;
  oracle::DetectorScore both;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto ep = generate_episode<float>(cfg, seed);
    oracle::score_detector(cfg, ep, [&](std::size_t t) {
      return oracle::temporal_marker_at(cfg, ep.frames, t) &&
             oracle::spatial_marker_at(cfg, ep.frames, t);
    }, both);
  }
  CHECK(both.f1() == 1.0);
}

TEST_CASE("single-evidence detectors are capped by the distractors") {
  GenConfig cfg;
  oracle::DetectorScore temporal_only, spatial_only;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto ep = generate_episode<float>(cfg, seed);
    oracle::score_detector(cfg, ep, [&](std::size_t t) {
      return oracle::temporal_marker_at(cfg, ep.frames, t);
    }, temporal_only);
    oracle::score_detector(cfg, ep, [&](std::size_t t) {
      return oracle::spatial_marker_at(cfg, ep.frames, t);
    }, spatial_only);
  }
  // Perfect single-marker detection still confuses distractors with salient
  // frames; recall stays 1 while precision is capped.
  CHECK(temporal_only.fn == 0);
  CHECK(spatial_only.fn == 0);
  CHECK(temporal_only.f1() <= 0.7);
  CHECK(spatial_only.f1() <= 0.7);
  CHECK(temporal_only.f1() >= 0.5);
  CHECK(spatial_only.f1() >= 0.5);
}

TEST_CASE("background noise is stationary across seeds") {
  GenConfig cfg;
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::uint64_t seed = 1000; seed < 2000; ++seed) {
    auto ep = generate_episode<double>(cfg, seed);
    // Cells outside the temporal block and the patch are pure noise.
    auto patch = cfg.patch_cells();
    for (std::size_t t = 0; t < cfg.frames; ++t) {
      for (std::size_t j = cfg.block_a_end(); j < cfg.d; ++j) {
        if (std::find(patch.begin(), patch.end(), j) != patch.end()) continue;
        double v = ep.frames(t, j);
        sum += v;
        sq += v * v;
        ++n;
      }
    }
  }
  double mean = sum / static_cast<double>(n);
  double var = sq / static_cast<double>(n) - mean * mean;
  CHECK(std::abs(mean) <= 0.05 * cfg.noise_std);
  CHECK(std::abs(var - cfg.noise_std * cfg.noise_std) <= 0.05);
}

TEST_CASE("too few frames for the marker layout is a configuration error") {
  GenConfig cfg;
  cfg.frames = 6;
  CHECK_THROWS_AS(generate_episode<double>(cfg, 1), ConfigError);
  cfg = GenConfig{};
  cfg.salient_min = 1;
  cfg.salient_max = 1;
  cfg.temporal_only_max = 1;
  cfg.spatial_only_max = 1;
  cfg.frames = 10;  // 3 markers at gap 3 need slots 0..6
  CHECK_NOTHROW(generate_episode<double>(cfg, 1));
}

TEST_CASE("mixture generation jitters the marker scale deterministically") {
  GenConfig cfg;
  auto a = generate_mixture<double>(cfg, 4, 5);
  auto b = generate_mixture<double>(cfg, 4, 5);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    CHECK(a[i].frames.data() == b[i].frames.data());
}

TEST_CASE("feature files round-trip bitwise") {
  auto dir = fs::temp_directory_path() / "milora_test";
  fs::create_directories(dir);
  auto path = dir / "roundtrip.mlft";
  Rng rng(9);
  auto frames = randn<float>(rng, {5, 12});
  write_features(path, frames);
  auto back = read_features<float>(path);
  REQUIRE(back.shape() == frames.shape());
  CHECK(back.data() == frames.data());
}

TEST_CASE("feature file corruption yields distinct error kinds") {
  auto dir = fs::temp_directory_path() / "milora_test";
  fs::create_directories(dir);
  auto path = dir / "feat.mlft";
  Rng rng(10);
  write_features(path, randn<float>(rng, {4, 6}));

  auto bytes = [&] {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  }();

  SECTION("bad magic") {
    auto c = bytes;
    c[1] = 'x';
    auto p = dir / "feat_magic.mlft";
    std::ofstream(p, std::ios::binary).write(c.data(), c.size());
    try {
      read_features<float>(p);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.kind == IoError::Kind::BadMagic);
    }
  }
  SECTION("truncated mid-payload") {
    auto c = bytes;
    c.resize(c.size() - 30);
    auto p = dir / "feat_trunc.mlft";
    std::ofstream(p, std::ios::binary).write(c.data(), c.size());
    try {
      read_features<float>(p);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.kind == IoError::Kind::Truncated);
    }
  }
  SECTION("zero dims") {
    ByteWriter w;
    w.bytes(kFeatureMagic, 4);
    w.u32(kFeatureVersion);
    w.u64(0);
    w.u64(6);
    w.u8(0);
    w.append_crc();
    auto p = dir / "feat_zero.mlft";
    w.write_file(p);
    try {
      read_features<float>(p);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.kind == IoError::Kind::InvalidDims);
    }
  }
  SECTION("dim overflow") {
    ByteWriter w;
    w.bytes(kFeatureMagic, 4);
    w.u32(kFeatureVersion);
    w.u64(std::uint64_t(1) << 62);
    w.u64(std::uint64_t(1) << 62);
    w.u8(0);
    w.append_crc();
    auto p = dir / "feat_overflow.mlft";
    w.write_file(p);
    try {
      read_features<float>(p);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(e.kind == IoError::Kind::InvalidDims);
    }
  }
}

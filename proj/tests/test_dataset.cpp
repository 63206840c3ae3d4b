#include <doctest.h>

#include <cstring>
#include <fstream>
#include <iterator>

#include "scratch.hpp"
#include "semdvc/dataset.hpp"
#include "semdvc/error.hpp"

using namespace semdvc;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// DVCF written by hand: magic, u16 version, u32 rows, u32 cols, f32 payload.
std::string dvcf_bytes(std::uint32_t rows, std::uint32_t cols, const std::vector<float>& values) {
  std::string b = "DVCF";
  auto put = [&b](auto v) {
    for (std::size_t i = 0; i < sizeof(v); ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  };
  put(std::uint16_t{1});
  put(rows);
  put(cols);
  for (float f : values) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put(u);
  }
  return b;
}

void write(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kIo;
}

}  // namespace

TEST_CASE("feature file with a 2x3 header loads as a 2x3 sequence") {
  Scratch s("ds");
  write(s / "v_a.dvcf", dvcf_bytes(2, 3, {1, 2, 3, 4, 5, 6.5f}));
  const FeatureSequence fs = load_features(s / "v_a.dvcf");
  CHECK(fs.video_id == "v_a");
  CHECK(fs.length() == 2);
  CHECK(fs.dim() == 3);
  CHECK(fs.features(1, 2) == 6.5);
  CHECK(fs.duration_s() == doctest::Approx(2 * kDefaultClipDuration));
}

TEST_CASE("save after load reproduces the file byte for byte") {
  Scratch s("ds");
  const std::string original = dvcf_bytes(3, 2, {0.1f, -2.f, 3.25f, 1e-7f, 42.f, -0.f});
  write(s / "a.dvcf", original);
  save_features(s / "b.dvcf", load_features(s / "a.dvcf"));
  CHECK(slurp(s / "b.dvcf") == original);
}

TEST_CASE("feature file errors are reported distinctly") {
  Scratch s("ds");
  CHECK(kind_of([&] { load_features(s / "absent.dvcf"); }) == ErrorKind::kMissingFile);
  write(s / "short.dvcf", dvcf_bytes(2, 3, {1, 2, 3, 4, 5}));
  CHECK(kind_of([&] { load_features(s / "short.dvcf"); }) == ErrorKind::kTruncated);
  std::string bad = dvcf_bytes(1, 1, {1});
  bad[0] = 'X';
  write(s / "magic.dvcf", bad);
  CHECK(kind_of([&] { load_features(s / "magic.dvcf"); }) == ErrorKind::kBadMagic);
  write(s / "header.dvcf", std::string("DVCF\x01", 5));
  CHECK(kind_of([&] { load_features(s / "header.dvcf"); }) == ErrorKind::kTruncated);
}

TEST_CASE("annotations parse and validate") {
  const std::string good = R"({"v1": {"duration": 10, "timestamps": [[0, 4], [3, 9.5]],
                                       "sentences": ["A man runs.", "he stops"]}})";
  const AnnotationSet ann = parse_annotations(good);
  REQUIRE(ann.count("v1"));
  CHECK(ann.at("v1").events.size() == 2);
  CHECK(ann.at("v1").events[1].end_s == 9.5);
  CHECK(parse_annotations(dump_annotations(ann)) == ann);

  CHECK(kind_of([] { parse_annotations("{not json"); }) == ErrorKind::kMalformed);
  CHECK(kind_of([] {
          parse_annotations(R"({"v": {"duration": 10, "timestamps": [[5, 5]], "sentences": ["x"]}})");
        }) == ErrorKind::kValidation);
  CHECK(kind_of([] {
          parse_annotations(R"({"v": {"duration": 10, "timestamps": [[1, 2]], "sentences": []}})");
        }) == ErrorKind::kValidation);
  CHECK(kind_of([] {
          parse_annotations(R"({"v": {"duration": 10, "timestamps": [[1, 12]], "sentences": ["x"]}})");
        }) == ErrorKind::kValidation);
}

TEST_CASE("tokenize lowercases and splits on punctuation") {
  CHECK(tokenize("A man, slowly; RUNS!") == std::vector<std::string>{"a", "man", "slowly", "runs"});
  CHECK(tokenize("  ").empty());
}

TEST_CASE("synthetic corpus is seeded and respects its invariants") {
  SynthConfig cfg;
  cfg.num_videos = 12;
  cfg.clips_per_video_range = {6, 9};
  cfg.events_per_video_range = {1, 3};
  cfg.seed = 5;
  const SynthCorpus a = synth_corpus(cfg);
  const SynthCorpus b = synth_corpus(cfg);
  REQUIRE(a.videos.size() == 12);
  for (std::size_t i = 0; i < a.videos.size(); ++i) CHECK(a.videos[i].features == b.videos[i].features);
  CHECK(a.annotations == b.annotations);

  cfg.seed = 6;
  CHECK(synth_corpus(cfg).videos[0].features != a.videos[0].features);

  validate(a.annotations);
  for (const auto& v : a.videos) {
    validate(v);
    CHECK(v.length() >= 6);
    CHECK(v.length() <= 9);
    CHECK(v.dim() == cfg.feature_dim);
    const auto& ann = a.annotations.at(v.video_id);
    CHECK(ann.duration_s == doctest::Approx(v.duration_s()));
    CHECK(ann.events.size() >= 1);
    CHECK(ann.events.size() <= 3);
    CHECK(a.truth.clip_topic.at(v.video_id).size() == v.length());
  }
}

TEST_CASE("synth config rejects impossible ranges") {
  SynthConfig cfg;
  cfg.events_per_video_range = {2, 50};
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = SynthConfig{};
  cfg.noise_sigma = -1;
  CHECK_THROWS_AS(synth_corpus(cfg), Error);
}

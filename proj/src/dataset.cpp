#include "semdvc/dataset.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include <json.hpp>

#include "semdvc/error.hpp"

namespace semdvc {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kMissingFile: return "missing file";
    case ErrorKind::kBadMagic: return "bad magic";
    case ErrorKind::kTruncated: return "truncated payload";
    case ErrorKind::kMalformed: return "malformed input";
    case ErrorKind::kValidation: return "validation error";
    case ErrorKind::kDimensionMismatch: return "dimension mismatch";
    case ErrorKind::kInvalidArgument: return "invalid argument";
    case ErrorKind::kOutOfRange: return "out of range";
    case ErrorKind::kMissingArtifact: return "missing artifact";
    case ErrorKind::kIo: return "i/o error";
  }
  return "unknown";
}

namespace {

constexpr std::array<char, 4> kMagic{'D', 'V', 'C', 'F'};
constexpr std::uint16_t kFormatVersion = 1;
constexpr std::size_t kHeaderSize = 4 + 2 + 4 + 4;

template <typename T>
void put_le(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((u >> (8 * i)) & 0xFFu));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<T>(p[i]) << (8 * i));
  }
  return v;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorKind::kMissingFile, "cannot open " + path.string());
  }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorKind::kIo, "cannot write " + path.string());
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

const std::vector<std::string>& builtin_words() {
  static const std::vector<std::string> words = {
      "man",     "woman",   "child",   "dog",     "team",    "player",  "girl",
      "boy",     "chef",    "dancer",  "rider",   "crowd",   "throws",  "catches",
      "cuts",    "washes",  "paints",  "climbs",  "kicks",   "rides",   "pushes",
      "carries", "lifts",   "plays",   "ball",    "bike",    "knife",   "brush",
      "rope",    "board",   "guitar",  "drum",    "cake",    "car",     "horse",
      "wall",    "water",   "wheel",   "bread",   "tree",    "hat",     "door",
      "slowly",  "quickly", "outside", "together", "again",  "carefully", "loudly",
      "gently",  "happily", "calmly",  "boldly",  "firmly",  "kite",    "fence",
      "table",   "pan",     "net",     "sail",    "paddle",  "stick",   "box"};
  return words;
}

struct TopicTemplate {
  std::string subject;
  std::string verb;
  std::string adverb;
  std::vector<std::string> objects;  // one per variant
};

}  // namespace

void validate(const FeatureSequence& fs) {
  if (fs.features.rows() < 1) {
    throw Error(ErrorKind::kValidation, "feature sequence '" + fs.video_id + "' is empty");
  }
  if (fs.features.cols() < 1) {
    throw Error(ErrorKind::kValidation, "feature sequence '" + fs.video_id + "' has zero dimension");
  }
  if (!(fs.clip_duration_s > 0.0)) {
    throw Error(ErrorKind::kValidation, "clip duration must be positive");
  }
}

void validate(const AnnotationSet& ann) {
  for (const auto& [id, video] : ann) {
    if (video.events.size() != video.sentences.size()) {
      throw Error(ErrorKind::kValidation,
                  "video '" + id + "': " + std::to_string(video.events.size()) + " events but " +
                      std::to_string(video.sentences.size()) + " sentences");
    }
    for (const Event& e : video.events) {
      if (!(e.start_s >= 0.0) || !(e.start_s < e.end_s) || !(e.end_s <= video.duration_s)) {
        std::ostringstream msg;
        msg << "video '" << id << "': invalid event [" << e.start_s << ", " << e.end_s
            << "] for duration " << video.duration_s;
        throw Error(ErrorKind::kValidation, msg.str());
      }
    }
  }
}

void save_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::string bytes;
  bytes.reserve(kHeaderSize + static_cast<std::size_t>(m.size()) * 4);
  bytes.append(kMagic.data(), kMagic.size());
  put_le<std::uint16_t>(bytes, kFormatVersion);
  put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(m.rows()));
  put_le<std::uint32_t>(bytes, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      put_le<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(m(r, c))));
    }
  }
  write_file(path, bytes);
}

Matrix load_matrix(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw Error(ErrorKind::kBadMagic, path.string() + ": not a DVCF feature file");
  }
  if (bytes.size() < kHeaderSize) {
    throw Error(ErrorKind::kTruncated, path.string() + ": header is truncated");
  }
  const auto version = get_le<std::uint16_t>(p + 4);
  if (version != kFormatVersion) {
    throw Error(ErrorKind::kMalformed,
                path.string() + ": unsupported version " + std::to_string(version));
  }
  const auto rows = get_le<std::uint32_t>(p + 6);
  const auto cols = get_le<std::uint32_t>(p + 10);
  const std::size_t expected = kHeaderSize + static_cast<std::size_t>(rows) * cols * 4;
  if (bytes.size() < expected) {
    throw Error(ErrorKind::kTruncated,
                path.string() + ": payload holds " +
                    std::to_string((bytes.size() - kHeaderSize) / 4) + " values, header declares " +
                    std::to_string(static_cast<std::size_t>(rows) * cols));
  }
  if (bytes.size() > expected) {
    throw Error(ErrorKind::kMalformed, path.string() + ": trailing bytes after payload");
  }
  Matrix m(rows, cols);
  const unsigned char* q = p + kHeaderSize;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c, q += 4) {
      m(r, c) = static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(q)));
    }
  }
  return m;
}

void save_features(const std::filesystem::path& path, const FeatureSequence& fs) {
  save_matrix(path, fs.features);
}

FeatureSequence load_features(const std::filesystem::path& path, double clip_duration_s) {
  FeatureSequence fs;
  fs.video_id = path.stem().string();
  fs.clip_duration_s = clip_duration_s;
  fs.features = load_matrix(path);
  return fs;
}

AnnotationSet parse_annotations(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kMalformed, std::string("annotation text: ") + e.what());
  }
  if (!doc.is_object()) {
    throw Error(ErrorKind::kMalformed, "annotation file must be a JSON object keyed by video id");
  }
  AnnotationSet ann;
  for (const auto& [id, entry] : doc.items()) {
    try {
      VideoAnnotation video;
      video.duration_s = entry.at("duration").get<double>();
      for (const auto& ts : entry.at("timestamps")) {
        if (!ts.is_array() || ts.size() != 2) {
          throw Error(ErrorKind::kMalformed, "video '" + id + "': timestamp must be [start, end]");
        }
        video.events.push_back({ts[0].get<double>(), ts[1].get<double>()});
      }
      for (const auto& s : entry.at("sentences")) {
        video.sentences.push_back(s.get<std::string>());
      }
      ann.emplace(id, std::move(video));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::kMalformed, "video '" + id + "': " + e.what());
    }
  }
  validate(ann);
  return ann;
}

std::string dump_annotations(const AnnotationSet& ann) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& [id, video] : ann) {
    nlohmann::ordered_json entry;
    entry["duration"] = video.duration_s;
    entry["timestamps"] = nlohmann::ordered_json::array();
    for (const Event& e : video.events) {
      entry["timestamps"].push_back({e.start_s, e.end_s});
    }
    entry["sentences"] = video.sentences;
    doc[id] = std::move(entry);
  }
  return doc.dump(1) + "\n";
}

AnnotationSet load_annotations(const std::filesystem::path& path) {
  return parse_annotations(read_file(path));
}

void save_annotations(const std::filesystem::path& path, const AnnotationSet& ann) {
  write_file(path, dump_annotations(ann));
}

std::vector<std::string> tokenize(const std::string& sentence) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : sentence) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u) || std::ispunct(u)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::kValidation, "synth config: " + what); };
  if (num_videos < 1) fail("num_videos must be >= 1");
  if (num_topics < 1) fail("num_topics must be >= 1");
  if (clusters_per_topic < 1) fail("clusters_per_topic must be >= 1");
  if (feature_dim < 1) fail("feature_dim must be >= 1");
  if (clips_per_video_range.first < 1 || clips_per_video_range.first > clips_per_video_range.second)
    fail("clips_per_video_range must satisfy 1 <= lo <= hi");
  if (events_per_video_range.first < 1 ||
      events_per_video_range.first > events_per_video_range.second)
    fail("events_per_video_range must satisfy 1 <= lo <= hi");
  if (events_per_video_range.second > clips_per_video_range.first)
    fail("every video needs at least one clip per event");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma must be >= 0");
  if (!(clip_duration_s > 0.0)) fail("clip_duration_s must be > 0");
  if (!(dominant_prob >= 0.0 && dominant_prob <= 1.0)) fail("dominant_prob must be in [0, 1]");
}

SynthCorpus synth_corpus(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto uniform_index = [&rng](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };

  const std::size_t num_protos = cfg.num_topics * cfg.clusters_per_topic;
  SynthCorpus corpus;
  corpus.truth.prototypes.resize(static_cast<Eigen::Index>(num_protos),
                                 static_cast<Eigen::Index>(cfg.feature_dim));
  for (Eigen::Index i = 0; i < corpus.truth.prototypes.rows(); ++i) {
    for (Eigen::Index j = 0; j < corpus.truth.prototypes.cols(); ++j) {
      corpus.truth.prototypes(i, j) = gauss(rng);
    }
  }

  // Sentence templates: subject, verb, adverb per topic plus one object per variant.
  const std::size_t variants = std::min<std::size_t>(cfg.clusters_per_topic, 3);
  std::vector<std::string> pool = cfg.vocab.empty() ? builtin_words() : cfg.vocab;
  const std::size_t needed = cfg.num_topics * (3 + variants);
  for (std::size_t i = pool.size(); i < needed; ++i) {
    pool.push_back("word" + std::to_string(i));
  }
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<TopicTemplate> templates(cfg.num_topics);
  std::size_t next_word = 0;
  for (auto& t : templates) {
    t.subject = pool[next_word++];
    t.verb = pool[next_word++];
    t.adverb = pool[next_word++];
    for (std::size_t v = 0; v < variants; ++v) t.objects.push_back(pool[next_word++]);
  }

  const int id_width = static_cast<int>(std::to_string(cfg.num_videos).size());
  std::bernoulli_distribution take_dominant(cfg.dominant_prob);
  for (std::size_t v = 0; v < cfg.num_videos; ++v) {
    std::string num = std::to_string(v);
    const std::string id = "v_" + std::string(static_cast<std::size_t>(id_width) - num.size(), '0') + num;
    const std::size_t length = uniform_index(cfg.clips_per_video_range.first, cfg.clips_per_video_range.second);
    const std::size_t num_events = uniform_index(cfg.events_per_video_range.first, cfg.events_per_video_range.second);

    // Distinct cut points split [0, length) into num_events non-empty segments.
    std::vector<std::size_t> cuts(length - 1);
    for (std::size_t i = 0; i < cuts.size(); ++i) cuts[i] = i + 1;
    std::shuffle(cuts.begin(), cuts.end(), rng);
    cuts.resize(num_events - 1);
    std::sort(cuts.begin(), cuts.end());
    cuts.insert(cuts.begin(), 0);
    cuts.push_back(length);

    FeatureSequence fs;
    fs.video_id = id;
    fs.clip_duration_s = cfg.clip_duration_s;
    fs.features.resize(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(cfg.feature_dim));
    VideoAnnotation video;
    video.duration_s = static_cast<double>(length) * cfg.clip_duration_s;
    auto& protos = corpus.truth.clip_prototype[id];
    auto& topics = corpus.truth.clip_topic[id];

    for (std::size_t s = 0; s < num_events; ++s) {
      const std::size_t topic = uniform_index(0, cfg.num_topics - 1);
      const std::size_t variant = uniform_index(0, variants - 1);
      const std::size_t base = topic * cfg.clusters_per_topic;
      for (std::size_t t = cuts[s]; t < cuts[s + 1]; ++t) {
        std::size_t proto = base + variant;
        // Draw unconditionally so the stream does not depend on dominant_prob.
        const bool dominant = take_dominant(rng);
        const std::size_t other = base + uniform_index(0, cfg.clusters_per_topic - 1);
        if (!dominant) proto = other;
        for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
          const double noise = gauss(rng);
          fs.features(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) =
              corpus.truth.prototypes(static_cast<Eigen::Index>(proto), static_cast<Eigen::Index>(j)) +
              cfg.noise_sigma * noise;
        }
        protos.push_back(proto);
        topics.push_back(topic);
      }
      const TopicTemplate& tpl = templates[topic];
      video.events.push_back({static_cast<double>(cuts[s]) * cfg.clip_duration_s,
                              static_cast<double>(cuts[s + 1]) * cfg.clip_duration_s});
      video.sentences.push_back("a " + tpl.subject + " " + tpl.verb + " the " +
                                tpl.objects[variant] + " " + tpl.adverb);
    }
    corpus.videos.push_back(std::move(fs));
    corpus.annotations.emplace(id, std::move(video));
  }
  return corpus;
}

}  // namespace semdvc

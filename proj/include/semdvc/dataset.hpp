#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace semdvc {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// 64 frames at 25 fps.
inline constexpr double kDefaultClipDuration = 2.56;

// One video as an ordered list of clip feature vectors (rows).
struct FeatureSequence {
  std::string video_id;
  double clip_duration_s = kDefaultClipDuration;
  Matrix features;  // L x d_vis

  std::size_t length() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
  double duration_s() const { return static_cast<double>(length()) * clip_duration_s; }
};

struct Event {
  double start_s = 0.0;
  double end_s = 0.0;

  double length() const { return end_s - start_s; }
  double center() const { return 0.5 * (start_s + end_s); }
  bool operator==(const Event&) const = default;
};

struct VideoAnnotation {
  double duration_s = 0.0;
  std::vector<Event> events;
  std::vector<std::string> sentences;  // one per event

  bool operator==(const VideoAnnotation&) const = default;
};

// Keyed by video_id; std::map keeps serialization order stable.
using AnnotationSet = std::map<std::string, VideoAnnotation>;

// Throws Error(kValidation) on the first violated invariant.
void validate(const FeatureSequence& fs);
void validate(const AnnotationSet& ann);

// Feature file: "DVCF", u16 version, u32 rows, u32 cols, rows*cols LE float32.
void save_matrix(const std::filesystem::path& path, const Matrix& m);
Matrix load_matrix(const std::filesystem::path& path);

void save_features(const std::filesystem::path& path, const FeatureSequence& fs);
// video_id is taken from the file stem.
FeatureSequence load_features(const std::filesystem::path& path,
                              double clip_duration_s = kDefaultClipDuration);

// ActivityNet Captions layout:
//   {"<id>": {"duration": d, "timestamps": [[s, e], ...], "sentences": [...]}}
AnnotationSet parse_annotations(const std::string& text);
std::string dump_annotations(const AnnotationSet& ann);
AnnotationSet load_annotations(const std::filesystem::path& path);
void save_annotations(const std::filesystem::path& path, const AnnotationSet& ann);

// Lowercase, split on whitespace and punctuation.
std::vector<std::string> tokenize(const std::string& sentence);

struct SynthConfig {
  std::size_t num_videos = 200;
  std::pair<std::size_t, std::size_t> clips_per_video_range{24, 40};
  std::size_t num_topics = 3;
  std::size_t clusters_per_topic = 10;
  std::size_t feature_dim = 16;
  double noise_sigma = 0.1;
  std::pair<std::size_t, std::size_t> events_per_video_range{2, 4};
  // Word pool for sentence templates; a built-in pool is used when empty.
  std::vector<std::string> vocab;
  std::uint64_t seed = 1;
  double clip_duration_s = kDefaultClipDuration;
  // Probability that a clip shows its segment's dominant prototype.
  double dominant_prob = 0.5;

  void validate() const;
};

// Ground truth of how a synthetic corpus was generated.
struct SynthTruth {
  Matrix prototypes;                     // (num_topics * clusters_per_topic) x d
  std::map<std::string, std::vector<std::size_t>> clip_prototype;  // per video
  std::map<std::string, std::vector<std::size_t>> clip_topic;      // per video

  std::size_t topic_of_prototype(std::size_t p, std::size_t clusters_per_topic) const {
    return p / clusters_per_topic;
  }
};

struct SynthCorpus {
  std::vector<FeatureSequence> videos;
  AnnotationSet annotations;
  SynthTruth truth;
};

// Each video is a run of single-topic segments. A segment picks a dominant
// prototype among its topic's prototypes; clips draw that prototype with
// probability dominant_prob and otherwise a uniform prototype of the topic,
// plus isotropic Gaussian noise. Each segment is one annotated event whose
// sentence is the topic template with the object word chosen by the dominant
// prototype.
SynthCorpus synth_corpus(const SynthConfig& cfg);

}  // namespace semdvc

#pragma once
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "selva/rng.hpp"
#include "selva/tensor.hpp"

#include "json.hpp"

namespace selva {

struct WorldConfig {
    int classes = 12;     // K
    int categories = 4;   // C
    int frames = 64;      // F
    int patch = 8;        // P: frames are P x P patch grids
    int d_patch = 4;      // channels per patch
    int audio_len = 64;   // T_a
    int d_audio = 8;
    double video_noise = 0.05;
    double audio_noise = 0.02;
    double mix_alpha = 1.0;   // Beta(alpha, alpha) for the mix ratio
    double mix_clip = 0.2;    // lambda := max(lambda, clip)
    double mix_prob = 0.75;   // probability a training sample is mixed at all
    double max_cos = 0.3;     // separation bound for templates and textures
};

// One sound-source class: a fixed visual texture, a fixed unit-norm spectral
// template, and the parameters of its periodic activity envelope.
struct EventClass {
    int id = 0;
    int category = 0;
    Tensor texture;            // [P, P, d_patch], RMS 1
    Tensor spectral_template;  // [d_audio], unit norm
    double period = 12.0;      // frames per burst cycle
    double duty = 0.5;         // fraction of the cycle that is active
    double jitter = 0.1;       // per-burst start jitter, relative to period
    std::string token;         // caption token, e.g. "class_07"
};

// A single-source clip: video frames are texture * envelope + noise, audio
// latent rows are envelope (resampled) * spectral template + noise.
struct Scene {
    int class_id = 0;
    uint64_t seed = 0;
    Tensor video;     // [F, P, P, d_patch]
    Tensor envelope;  // [F], values in [0, 1]
    Tensor audio;     // [T_a, d_audio]
    std::vector<std::string> caption;  // token strings, no [eos]
};

// Two scenes concatenated along the width axis; annotations always follow
// the target. When `mixed` is false the sample is the untouched target.
struct MixedSample {
    Tensor video;  // [F, P, P, d_patch]
    double lambda = 1.0;
    bool target_left = true;
    bool mixed = false;
    Scene target;
    Scene pair;  // meaningful only when mixed
};

class World {
  public:
    static World build(const WorldConfig& cfg, uint64_t seed);

    const WorldConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }
    const std::vector<EventClass>& classes() const { return classes_; }
    const EventClass& event_class(int id) const;

    Scene make_scene(int class_id, uint64_t scene_seed) const;

  private:
    WorldConfig cfg_;
    uint64_t seed_ = 0;
    std::vector<EventClass> classes_;
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

// Beta(alpha, alpha) draw clipped from below; creates a point mass at clip_min.
double sample_mix_ratio(double alpha, double clip_min, Rng& rng);

// Nearest-neighbor column index map for resizing `from` columns to `to`.
std::vector<int> resize_columns(int from, int to);

// Deterministic mix of two scenes at a given ratio and placement.
MixedSample auto_mix(const Scene& target, const Scene& pair, double lambda, bool target_left);

// Training-time mix: with probability 1 - mix_prob returns the target
// unmixed; otherwise samples lambda and a side and concatenates.
MixedSample maybe_mix(const WorldConfig& cfg, const Scene& target, const Scene& pair, Rng& rng);

enum class PairMode { kInter, kIntra };

struct BenchmarkPair {
    int id = 0;
    int target_scene = 0;  // index into the scene pool
    int pair_scene = 0;
    double lambda = 0.5;
    bool target_left = true;
    uint64_t seed = 0;  // per-pair sampling seed
};

// Appendix-B style pairing: category-balanced with resampling, fixed
// lambda = 0.5, seeded random left/right placement.
std::vector<BenchmarkPair> plan_benchmark(const World& world, const std::vector<Scene>& pool,
                                          PairMode mode, int per_category_quota, uint64_t seed);

MixedSample materialize_pair(const std::vector<Scene>& pool, const BenchmarkPair& p);

std::vector<MixedSample> build_benchmark(const World& world, const std::vector<Scene>& pool,
                                         PairMode mode, int per_category_quota, uint64_t seed);

// ---- on-disk dataset ----

struct Dataset {
    WorldConfig config;
    uint64_t seed = 0;  // master seed the dataset was generated from
    World world;
    std::vector<Scene> train_scenes;
    std::vector<Scene> eval_scenes;
    std::vector<BenchmarkPair> inter;
    std::vector<BenchmarkPair> intra;
    uint64_t manifest_hash = 0;  // fingerprint of manifest.json, for chaining
};

struct DatasetSpec {
    int train_scenes = 96;
    int eval_scenes = 48;
    int per_category_quota = 16;
};

void write_dataset(const std::filesystem::path& dir, const WorldConfig& cfg,
                   const DatasetSpec& spec, uint64_t master_seed);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace selva

#pragma once
#include <string>
#include <vector>

#include "selva/trainer.hpp"
#include "selva/world.hpp"

namespace selva {

// Deterministic stand-in for a pretrained audio embedding network: a fixed
// seeded projection of the flattened latent plus per-class spectral-template
// correlators turned into pseudo-probabilities by a temperature softmax.
class ToyEmbedder {
  public:
    ToyEmbedder() = default;
    ToyEmbedder(const World& world, int d_emb, double temperature, uint64_t seed);

    int d_emb() const { return proj_.rank() == 2 ? proj_.dim(1) : 0; }
    int classes() const { return templates_.rank() == 2 ? templates_.dim(0) : 0; }

    Tensor embed(const Tensor& audio) const;        // [d_emb]
    Tensor class_probs(const Tensor& audio) const;  // [K], rows of softmax(E_k / temp)
    Tensor class_embed(int class_id) const;         // embedding of the flat-envelope class signal
    Tensor scene_embed(const Scene& scene) const;   // embedding of the ideal noiseless latent

    // Scalar projection of each timestep onto one class template: the
    // envelope of `audio` as heard through that class.
    Tensor project_envelope(const Tensor& audio, int class_id) const;  // [t_audio]

  private:
    Tensor proj_;       // [t_audio * d_audio, d_emb]
    Tensor templates_;  // [K, d_audio]
    double temp_ = 1.0;
    int t_audio_ = 0;
    int d_audio_ = 0;
};

// Distribution distances over embedding rows ([n, d] matrices).
double frechet_distance(const Tensor& ref, const Tensor& gen);
double kernel_distance(const Tensor& ref, const Tensor& gen);  // unbiased RBF MMD^2

double inception_score(const Tensor& probs);  // [n, K], rows on the simplex
double kl_to_reference(const Tensor& gen_probs, const Tensor& ref_probs);
double cosine_sim(const Tensor& a, const Tensor& b);  // 0 when either side is zero

struct DesyncResult {
    double offset = 0.0;  // |lag| of the cross-correlation peak, in frames
    bool degenerate = false;
};

// Circular cross-correlation lag between a generated envelope and the target
// envelope (resampled onto the generated grid); ties resolve toward zero.
DesyncResult desync_analog(const Tensor& gen_env, const Tensor& target_env);

// Strict energy comparison: 1 iff the generation carries more target-template
// energy than pair-template energy.
int selection_correct(const Tensor& gen_audio, const Tensor& tmpl_target,
                      const Tensor& tmpl_pair);

struct EvalConfig {
    SamplerConfig sampler;
    bool use_ground_truth = false;  // oracle mode: score the target latents themselves
    int d_emb = 32;
    double temperature = 5.0;
    uint64_t seed = 1;
    int jobs = 1;
};

struct PairOutcome {
    int id = 0;
    int target_class = 0;
    int pair_class = 0;
    double text_sim = 0.0;
    double video_sim = 0.0;
    double desync = 0.0;
    double kl = 0.0;
    int selected = 0;
    bool degenerate = false;
};

struct SubsetReport {
    std::string subset;
    int pairs = 0;
    double fad = 0.0;
    double kad = 0.0;
    double is_score = 0.0;
    double kl_mean = 0.0;
    double text_sim = 0.0;
    double video_sim = 0.0;
    double desync_median = 0.0;
    double desync_mean = 0.0;
    int desync_degenerate = 0;
    double selection = 0.0;
    std::vector<PairOutcome> per_pair;
};

nlohmann::json report_to_json(const SubsetReport& r);
// Empty string when the report satisfies the schema, else a diagnostic.
std::string validate_report(const nlohmann::json& j);

SubsetReport run_benchmark(Model& model, const Dataset& data,
                           const std::vector<BenchmarkPair>& pairs,
                           const std::vector<Scene>& pool, const std::string& subset_name,
                           const EvalConfig& cfg);

struct SweepPoint {
    int n_sup = 0;
    double text_sim = 0.0;
    double desync_median = 0.0;
    double selection = 0.0;
    double distill_final = 0.0;
    double cfm_final = 0.0;
    nlohmann::json report;  // full subset report for schema checks
};

// Retrains both stages per supplementary-token count and scores the inter
// benchmark; the workhorse behind the --sweep-sup protocol.
std::vector<SweepPoint> run_sup_sweep(const Dataset& data, ModelConfig base,
                                      TrainConfig stage1, TrainConfig stage2,
                                      const EvalConfig& eval_cfg, const std::vector<int>& counts);
nlohmann::json sweep_to_json(const std::vector<SweepPoint>& points);

}  // namespace selva

#pragma once
#include <filesystem>
#include <map>
#include <vector>

#include "selva/generator.hpp"
#include "selva/serialize.hpp"
#include "selva/video.hpp"
#include "selva/world.hpp"

namespace selva {

inline constexpr const char* kBuildId = "selva 0.1.0";

struct ModelConfig {
    VideoEncoderConfig video;
    GeneratorConfig gen;
    int d_text = 32;
    int n_sup = 5;
};
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// The full model: text encoder, teacher/student video encoders and the
// flow-matching generator, assembled against one world's geometry.
struct Model {
    ModelConfig cfg;
    uint64_t init_seed = 0;
    TextEncoder text;
    TeacherEncoder teacher;
    StudentEncoder student;
    Generator gen;

    static Model init(ModelConfig cfg, const World& world, uint64_t seed);

    std::vector<Parameter*> params();
    std::vector<Parameter*> trainable(unsigned mask);  // non-empty params in mask

    // Checkpoint directory: manifest + one tensor file per parameter, plus
    // optional extra tensors (EMA shadows) stored verbatim.
    void save(const std::filesystem::path& dir, nlohmann::json meta,
              const std::map<std::string, Tensor>& extra = {});
    static Model load(const std::filesystem::path& dir, const World& world,
                      nlohmann::json* meta_out = nullptr, bool use_ema = false);
};

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 1e-6;
    double clip_norm = 1.0;
    int warmup = 100;
};

double lr_schedule(int step, double base_lr, int warmup_steps);

// Decoupled weight decay Adam with global-norm gradient clipping across the
// whole trainable set.
class AdamW {
  public:
    AdamW(std::vector<Parameter*> params, OptimizerConfig cfg);
    double step(double lr);  // applies one update, returns the pre-clip norm
    void zero_grad();
    int steps_taken() const { return t_; }
    const std::vector<Parameter*>& params() const { return params_; }

  private:
    std::vector<Parameter*> params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int t_ = 0;
};

// Exponential moving average over a parameter set; shadows are stored under
// "ema.<name>" in checkpoints.
class Ema {
  public:
    Ema() = default;
    Ema(const std::vector<Parameter*>& params, double decay);
    static double decay_for(double sigma_rel, int total_steps);

    void update();
    double decay() const { return decay_; }
    std::map<std::string, Tensor> shadows() const;
    void copy_into_params();  // overwrite live values with the shadows

  private:
    std::vector<Parameter*> params_;
    std::vector<Tensor> shadow_;
    double decay_ = 0.0;
};

struct TrainConfig {
    int stage = 1;
    bool joint = false;  // optimize both objectives at once, from scratch
    int steps = 2000;
    int batch = 8;
    OptimizerConfig opt;
    double p_joint = 0.1;       // joint condition dropout
    double p_text_extra = 0.5;  // extra text-only dropout
    double sigma_rel = 0.05;    // EMA width relative to the run length
    uint64_t seed = 0;
    int log_every = 100;
};

struct TrainResult {
    std::vector<double> losses;
    double initial_loss = 0.0;  // mean of the first few steps
    double final_loss = 0.0;    // mean of the last few steps
    int64_t n_trainable = 0;
    int64_t n_total = 0;
    nlohmann::json manifest;
};

// Runs one training stage in place. Stage 1 distills the teacher into the
// student's selective feature; stage 2 fits the generator's adaptation
// parameters on frozen student features; joint mode optimizes both losses
// on a shared tape.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, Ema* ema_out = nullptr);

// Distillation loss on freshly mixed held-out scenes, evaluated with frozen
// weights; used to compare trained vs untrained students.
double eval_distill_loss(Model& model, const Dataset& data, int n_samples, uint64_t seed);

// Writes <dir>/checkpoint, <dir>/run_manifest.json and <dir>/losses.csv.
void save_run(const std::filesystem::path& dir, Model& model, const TrainResult& result,
              const Ema* ema = nullptr);

}  // namespace selva

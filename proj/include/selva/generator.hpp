#pragma once
#include <functional>
#include <vector>

#include "selva/params.hpp"
#include "selva/text.hpp"

namespace selva {

struct GeneratorConfig {
    int d_model = 32;
    int heads = 4;
    int d_ff = 64;
    int n_mm = 2;       // joint text+audio blocks
    int n_sm = 2;       // audio-only blocks
    int t_audio = 64;   // audio latent timesteps
    int d_audio = 8;    // audio latent channels
    int d_text = 32;    // text embedding width entering the generator
    int d_video = 32;   // video feature width entering W_v
    int time_freqs = 8; // sinusoidal timestep feature pairs
};

// Conditioning bundle for one generation. `video_feat` is the flattened
// selective video feature [n_rows, d_video]; `frame_rows` optionally maps
// each audio timestep to a feature row for frame-aligned conditioning
// (nearest-index resampling is used when empty). Null flags swap in the
// learned null embeddings (classifier-free guidance training).
struct ConditionSet {
    Tensor video_feat;
    std::vector<int> frame_rows;
    std::vector<int> text_ids;
    bool video_null = false;
    bool text_null = false;
};

// Joint/independent condition dropout: with p_joint both modalities are
// nulled; otherwise the text is additionally nulled with p_text_extra.
// Always consumes exactly two uniform draws.
ConditionSet drop_conditions(const ConditionSet& cond, double p_joint, double p_text_extra,
                             Rng& rng);

// Linear flow-matching interpolant a_t = t * a1 + (1 - t) * a0; t must lie
// in [0, 1].
Tensor interpolate(const Tensor& a0, const Tensor& a1, double t);

// Adaptive layer norm: scale/shift from a conditioning matrix (one row
// broadcasts over all of h's rows; otherwise rows pair up one-to-one).
Var adaln(Tape& t, Var h, Var cond, Var gamma_w, Var gamma_b, Var beta_w, Var beta_b);

struct SamplerConfig {
    int steps = 25;
    double gamma = 4.5;  // classifier-free guidance scale
};

// Fixed-step Euler integration of da/dt = v(a, t) from t=0 to t=1.
using VelocityFn = std::function<Tensor(const Tensor& a, double t)>;
Tensor euler_sample(const VelocityFn& velocity, Tensor a0, int steps);

struct FlowExample {
    Tensor a1;  // target audio latent [t_audio, d_audio]
    ConditionSet cond;
};

// Flow-matching generator: frozen random transformer trunk whose audio
// branch is modulated per block by trainable adaLN driven by the projected
// video feature (frame-aligned + global) and the timestep embedding.
class Generator {
  public:
    Generator() = default;
    Generator(const GeneratorConfig& cfg, uint64_t seed);

    Var forward_velocity(Bindings& bind, TextEncoder& text, const Tensor& a_t, double t,
                         const ConditionSet& cond);

    // Mean over the batch of per-example mean-squared velocity error.
    Var cfm_loss(Bindings& bind, TextEncoder& text, const std::vector<FlowExample>& batch,
                 Rng& rng);

    // Euler sampler with classifier-free guidance. gamma == 1 evaluates the
    // conditional branch only.
    Tensor sample(TextEncoder& text, const ConditionSet& cond, const SamplerConfig& sampler,
                  Rng& rng);

    const GeneratorConfig& config() const { return cfg_; }
    std::vector<Parameter*> params();

  private:
    struct Block {
        Parameter qkv_w, qkv_b, out_w, out_b, ffn1_w, ffn1_b, ffn2_w, ffn2_b;  // frozen
        Parameter ada_g_w, ada_g_b, ada_b_w, ada_b_b;      // stage 2, attention branch
        Parameter ada_f_g_w, ada_f_g_b, ada_f_b_w, ada_f_b_b;  // stage 2, FFN branch
    };
    Var run_block(Bindings& bind, Block& blk, Var h, Var cond, int text_rows);

    GeneratorConfig cfg_;
    Parameter video_proj_w_, video_proj_b_;  // W_v (stage 2)
    Parameter null_video_;                   // [1, d_video] (stage 2)
    Parameter null_text_;                    // [1, d_text] (stage 2)
    Parameter time_w_, time_b_;              // frozen timestep embedding
    Parameter text_w_, text_b_;              // frozen text in-projection
    Parameter audio_w_, audio_b_;            // frozen audio in-projection
    Parameter pos_audio_;                    // frozen audio positions
    Parameter out_w_, out_b_;                // frozen velocity head
    std::vector<Block> mm_;
    std::vector<Block> sm_;
};

}  // namespace selva

#pragma once
#include <filesystem>
#include <vector>

#include "selva/params.hpp"
#include "selva/text.hpp"
#include "selva/world.hpp"

namespace selva {

struct VideoEncoderConfig {
    int window = 16;        // frames per segment
    int hop = 8;            // frames between segment starts
    int t_per_segment = 4;  // temporal tokens per segment
    int d_model = 32;       // D
    int heads = 4;
    int d_ff = 64;          // transformer feed-forward width
    int n_spatial = 2;      // spatial attention blocks
    int n_temporal = 2;     // temporal attention blocks
    int d_class = 8;        // teacher class-embedding width
};

int segment_count(int frames, int window, int hop);  // floor((F - window)/hop) + 1

struct SegmentedVideo {
    Tensor data;  // [S, window, P, W, d_patch]
    int window = 0;
    int hop = 0;
    int segments() const { return data.dim(0); }
};

SegmentedVideo segment(const Tensor& video, int window, int hop);

// Maps each audio timestep to the feature row (segment * t + j) whose frame
// slice contains the corresponding video frame; used for frame-aligned
// conditioning in the generator.
std::vector<int> feature_frame_rows(const VideoEncoderConfig& cfg, int frames, int t_audio);

// Deterministic oracle teacher: a seeded class embedding concatenated with
// per-slice envelope statistics, pushed through a fixed projection. Pure
// function of the scene; its tensors never join a tape.
class TeacherEncoder {
  public:
    TeacherEncoder() = default;
    TeacherEncoder(const VideoEncoderConfig& cfg, int n_classes, uint64_t seed);

    Tensor encode(const Scene& scene) const;  // [S, t_per_segment, D]

    std::vector<Parameter*> params();

  private:
    VideoEncoderConfig cfg_;
    Parameter class_table_;  // [K, d_class], frozen
    Parameter proj_;         // [d_class + 2, D], frozen
};

struct AttentionRecord {
    Tensor cross;  // [heads, n_video_tokens, n_text_tokens]
    Tensor pool;   // [heads, n_spatial], averaged over (segment, timestep)
    int segments = 0;
    int t_per_segment = 0;
    int n_spatial = 0;
};

// Student encoder: a frozen random space-time stack standing in for the
// pretrained backbone, followed by the trainable text cross-attention block
// and spatial attention pooling. The frozen stack is evaluated value-level
// (it is constant under every training stage); only the trainable suffix
// builds tape nodes.
class StudentEncoder {
  public:
    StudentEncoder() = default;
    StudentEncoder(const VideoEncoderConfig& cfg, int d_patch, int patch_rows, int patch_cols,
                   int d_text, uint64_t seed);

    // Frozen prefix: token matrix [S * t * n_spatial, D] in (segment,
    // timestep, position) row order.
    Tensor frozen_tokens(const Tensor& video) const;

    // Full encode of one sample; feature shaped [S, t, D].
    Var encode(Bindings& bind, const Tensor& video, const TextSequence& text,
               AttentionRecord* record = nullptr);

    // Batched encode; returns [B * S * t, D]. All texts must share a length.
    Var encode_batch(Bindings& bind, const std::vector<const Tensor*>& videos,
                     const std::vector<TextSequence>& texts);

    const VideoEncoderConfig& config() const { return cfg_; }
    int n_spatial() const { return n_spatial_; }

    std::vector<Parameter*> params();
    std::vector<Parameter*> frozen_stack_params();  // the space-time stack only

  private:
    Var encode_tokens(Bindings& bind, Tensor tokens, const std::vector<TextSequence>& texts,
                      int batch, AttentionRecord* record);

    VideoEncoderConfig cfg_;
    int d_patch_ = 0;
    int rows_ = 0;
    int cols_ = 0;
    int n_spatial_ = 0;
    int d_text_ = 0;

    struct Block {  // pre-LN self-attention + feed-forward, value-level only
        Parameter qkv_w, qkv_b, out_w, out_b, ffn1_w, ffn1_b, ffn2_w, ffn2_b;
        Tensor forward(const Tensor& x, int batch, int seq, int heads) const;
        void collect(std::vector<Parameter*>& out);
    };

    // frozen stack (stage 0)
    Parameter patch_w_;       // [2 * d_patch, D]
    Parameter patch_b_;       // [D]
    Parameter pos_spatial_;   // [n_spatial, D]
    Parameter pos_temporal_;  // [t_per_segment, D]
    std::vector<Block> spatial_;
    std::vector<Block> temporal_;

    // trainable suffix (stage 1)
    Parameter cq_w_, cq_b_;    // [D, D], [D]
    Parameter ck_w_, ck_b_;    // [d_text, D], [D]
    Parameter cv_w_, cv_b_;    // [d_text, D], [D]
    Parameter co_w_, co_b_;    // [D, D] zero-init, [D] zero-init
    Parameter cf1_w_, cf1_b_;  // [D, d_ff], [d_ff]
    Parameter cf2_w_, cf2_b_;  // [d_ff, D] zero-init, [D] zero-init
    Parameter pool_q_;         // [1, D]
};

// Mean over all elements of the squared difference (Eq.-7 style objective).
Var distill_loss(Tape& t, Var student, const Tensor& teacher);

// Head-averaged [eos] cross-attention column, element-wise with the
// head-averaged pooling weights, reduced to spatial positions and normalized
// to [0, 1] by the maximum.
Tensor attention_map(const AttentionRecord& record, int eos_row);

// 8-bit binary PGM (P5) export of a [rows, cols] map with values in [0, 1].
void write_pgm(const std::filesystem::path& path, const Tensor& map01);

}  // namespace selva

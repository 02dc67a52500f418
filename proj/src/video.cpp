#include "selva/video.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "selva/errors.hpp"
#include "selva/rng.hpp"

namespace selva {

namespace {

void check_config(const VideoEncoderConfig& cfg) {
    if (cfg.window <= 0 || cfg.hop <= 0 || cfg.t_per_segment <= 0)
        throw ConfigError("video encoder: window/hop/t_per_segment must be positive");
    if (cfg.window % cfg.t_per_segment != 0)
        throw ConfigError("video encoder: t_per_segment must divide window");
    if (cfg.d_model % cfg.heads != 0)
        throw ConfigError("video encoder: heads must divide d_model");
}

Tensor add_rowvec_value(Tensor x, const Tensor& b) {
    int n = x.dim(0), d = int(x.size() / x.dim(0));
    if (b.size() != d) throw ShapeError("add_rowvec: width mismatch");
    double* xd = x.data();
    const double* bd = b.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) xd[size_t(i) * d + j] += bd[j];
    return x;
}

Tensor gelu_value(Tensor x) {
    double* d = x.data();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (int64_t i = 0; i < x.size(); ++i)
        d[size_t(i)] = d[size_t(i)] * 0.5 * (1.0 + std::erf(d[size_t(i)] * inv_sqrt2));
    return x;
}

Tensor reshape3(Tensor x, int b, int n, int d) { return x.reshaped({b, n, d}); }

// Slice timing shared by teacher and student: slice (s, j) covers frames
// [s*hop + j*sub, s*hop + (j+1)*sub), sub = window / t_per_segment.
struct SliceGrid {
    int frames = 0, segments = 0, t = 0, sub = 0, hop = 0;
    bool dedup = false;  // hop divisible by sub: slices reduce to unique offsets
    int hop_sub = 0;
    int unique = 0;

    SliceGrid(const VideoEncoderConfig& cfg, int F) {
        frames = F;
        segments = segment_count(F, cfg.window, cfg.hop);
        t = cfg.t_per_segment;
        sub = cfg.window / t;
        hop = cfg.hop;
        dedup = (cfg.hop % sub) == 0;
        hop_sub = dedup ? cfg.hop / sub : 0;
        unique = dedup ? (segments - 1) * hop_sub + t : segments * t;
    }
    int slice_of(int s, int j) const { return dedup ? s * hop_sub + j : s * t + j; }
    int start_of_slice(int m) const {
        return dedup ? m * sub : (m / t) * hop + (m % t) * sub;
    }
    int start_of(int s, int j) const { return s * hop + j * sub; }
};

}  // namespace

int segment_count(int frames, int window, int hop) {
    if (window <= 0 || hop <= 0) throw ConfigError("segment: window and hop must be positive");
    if (frames < window) throw ShapeError("segment: fewer frames than window");
    return (frames - window) / hop + 1;
}

SegmentedVideo segment(const Tensor& video, int window, int hop) {
    if (video.rank() != 4) throw ShapeError("segment: video must be [F, P, W, d_patch]");
    int F = video.dim(0), P = video.dim(1), W = video.dim(2), dp = video.dim(3);
    int S = segment_count(F, window, hop);
    SegmentedVideo out;
    out.window = window;
    out.hop = hop;
    out.data = Tensor({S, window, P, W, dp});
    int64_t frame = int64_t(P) * W * dp;
    for (int s = 0; s < S; ++s)
        std::copy_n(video.data() + int64_t(s) * hop * frame, int64_t(window) * frame,
                    out.data.data() + int64_t(s) * window * frame);
    return out;
}

std::vector<int> feature_frame_rows(const VideoEncoderConfig& cfg, int frames, int t_audio) {
    check_config(cfg);
    SliceGrid g(cfg, frames);
    std::vector<int> rows(t_audio, 0);
    for (int tau = 0; tau < t_audio; ++tau) {
        int f = int(int64_t(tau) * frames / t_audio);
        // latest segment whose slice window contains frame f
        int best_s = 0, best_j = 0;
        for (int s = g.segments - 1; s >= 0; --s) {
            int off = f - s * g.hop;
            if (off < 0) continue;
            int j = off / g.sub;
            if (j < g.t) {
                best_s = s;
                best_j = j;
                break;
            }
        }
        rows[size_t(tau)] = best_s * g.t + best_j;
    }
    return rows;
}

// ---- teacher ----

TeacherEncoder::TeacherEncoder(const VideoEncoderConfig& cfg, int n_classes, uint64_t seed)
    : cfg_(cfg) {
    check_config(cfg);
    Rng root(seed);
    Rng table_rng = root.stream("teacher.table");
    Rng proj_rng = root.stream("teacher.proj");
    class_table_ = Parameter("teacher.class_table",
                             init::normal(table_rng, {n_classes, cfg.d_class}, 1.0), kFrozen);
    proj_ = Parameter("teacher.proj", init::xavier(proj_rng, cfg.d_class + 2, cfg.d_model),
                      kFrozen);
}

Tensor TeacherEncoder::encode(const Scene& scene) const {
    const Tensor& env = scene.envelope;
    if (env.rank() != 1) throw ShapeError("teacher: envelope must be rank 1");
    if (scene.class_id < 0 || scene.class_id >= class_table_.value.dim(0))
        throw ConfigError("teacher: class id out of range");
    SliceGrid g(cfg_, env.dim(0));
    int D = cfg_.d_model, dc = cfg_.d_class;
    Tensor feat({g.segments, g.t, D});
    std::vector<double> in(size_t(dc) + 2);
    const double* cls = class_table_.value.data() + int64_t(scene.class_id) * dc;
    std::copy_n(cls, dc, in.begin());
    for (int s = 0; s < g.segments; ++s) {
        for (int j = 0; j < g.t; ++j) {
            int start = g.start_of(s, j);
            double mean = 0.0, mx = -1e300;
            for (int f = start; f < start + g.sub; ++f) {
                mean += env.data()[f];
                mx = std::max(mx, env.data()[f]);
            }
            in[size_t(dc)] = mean / g.sub;
            in[size_t(dc) + 1] = mx;
            double* row = feat.data() + (int64_t(s) * g.t + j) * D;
            for (int o = 0; o < D; ++o) {
                double acc = 0.0;
                for (int i = 0; i < dc + 2; ++i) acc += in[size_t(i)] * proj_.value.at(i, o);
                row[o] = acc;
            }
        }
    }
    return feat;
}

std::vector<Parameter*> TeacherEncoder::params() { return {&class_table_, &proj_}; }

// ---- student ----

Tensor StudentEncoder::Block::forward(const Tensor& x, int batch, int seq, int heads) const {
    int d = x.dim(int(x.rank()) - 1);
    Tensor a = kernels::layer_norm(x);
    Tensor qkv = add_rowvec_value(kernels::matmul(a, qkv_w.value), qkv_b.value);
    Tensor q({batch * seq, d}), k({batch * seq, d}), v({batch * seq, d});
    for (int r = 0; r < batch * seq; ++r) {
        const double* src = qkv.data() + int64_t(r) * 3 * d;
        std::copy_n(src, d, q.data() + int64_t(r) * d);
        std::copy_n(src + d, d, k.data() + int64_t(r) * d);
        std::copy_n(src + 2 * d, d, v.data() + int64_t(r) * d);
    }
    Tensor att = scaled_dot_attention(reshape3(q, batch, seq, d), reshape3(k, batch, seq, d),
                                      reshape3(v, batch, seq, d), heads);
    att = att.reshaped({batch * seq, d});
    Tensor o = add_rowvec_value(kernels::matmul(att, out_w.value), out_b.value);
    Tensor h = x;
    for (int64_t i = 0; i < h.size(); ++i) h.data()[size_t(i)] += o.data()[size_t(i)];
    Tensor f = kernels::layer_norm(h);
    f = gelu_value(add_rowvec_value(kernels::matmul(f, ffn1_w.value), ffn1_b.value));
    f = add_rowvec_value(kernels::matmul(f, ffn2_w.value), ffn2_b.value);
    for (int64_t i = 0; i < h.size(); ++i) h.data()[size_t(i)] += f.data()[size_t(i)];
    return h;
}

void StudentEncoder::Block::collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&qkv_w, &qkv_b, &out_w, &out_b, &ffn1_w, &ffn1_b, &ffn2_w, &ffn2_b})
        out.push_back(p);
}

StudentEncoder::StudentEncoder(const VideoEncoderConfig& cfg, int d_patch, int patch_rows,
                               int patch_cols, int d_text, uint64_t seed)
    : cfg_(cfg),
      d_patch_(d_patch),
      rows_(patch_rows),
      cols_(patch_cols),
      n_spatial_(patch_rows * patch_cols),
      d_text_(d_text) {
    check_config(cfg);
    Rng root(seed);
    int D = cfg.d_model;

    auto block_init = [&](const std::string& prefix, Block& b) {
        Rng r = root.stream(prefix);
        b.qkv_w = Parameter(prefix + ".qkv_w", init::xavier(r, D, 3 * D), kFrozen);
        b.qkv_b = Parameter(prefix + ".qkv_b", init::zeros({3 * D}), kFrozen);
        b.out_w = Parameter(prefix + ".out_w", init::xavier(r, D, D), kFrozen);
        b.out_b = Parameter(prefix + ".out_b", init::zeros({D}), kFrozen);
        b.ffn1_w = Parameter(prefix + ".ffn1_w", init::xavier(r, D, cfg_.d_ff), kFrozen);
        b.ffn1_b = Parameter(prefix + ".ffn1_b", init::zeros({cfg_.d_ff}), kFrozen);
        b.ffn2_w = Parameter(prefix + ".ffn2_w", init::xavier(r, cfg_.d_ff, D), kFrozen);
        b.ffn2_b = Parameter(prefix + ".ffn2_b", init::zeros({D}), kFrozen);
    };

    Rng emb = root.stream("video.embed");
    patch_w_ = Parameter("video.patch_w", init::xavier(emb, 2 * d_patch, D), kFrozen);
    patch_b_ = Parameter("video.patch_b", init::zeros({D}), kFrozen);
    pos_spatial_ = Parameter("video.pos_spatial", init::normal(emb, {n_spatial_, D}, 0.3), kFrozen);
    pos_temporal_ =
        Parameter("video.pos_temporal", init::normal(emb, {cfg.t_per_segment, D}, 0.3), kFrozen);
    spatial_.resize(size_t(cfg.n_spatial));
    temporal_.resize(size_t(cfg.n_temporal));
    for (int i = 0; i < cfg.n_spatial; ++i)
        block_init("video.spatial" + std::to_string(i), spatial_[size_t(i)]);
    for (int i = 0; i < cfg.n_temporal; ++i)
        block_init("video.temporal" + std::to_string(i), temporal_[size_t(i)]);

    Rng cr = root.stream("video.cross");
    cq_w_ = Parameter("video.cross.q_w", init::xavier(cr, D, D), kStage1);
    cq_b_ = Parameter("video.cross.q_b", init::zeros({D}), kStage1);
    ck_w_ = Parameter("video.cross.k_w", init::xavier(cr, d_text, D), kStage1);
    ck_b_ = Parameter("video.cross.k_b", init::zeros({D}), kStage1);
    cv_w_ = Parameter("video.cross.v_w", init::xavier(cr, d_text, D), kStage1);
    cv_b_ = Parameter("video.cross.v_b", init::zeros({D}), kStage1);
    // zero-init output paths: the suffix starts as an identity perturbation
    co_w_ = Parameter("video.cross.out_w", init::zeros({D, D}), kStage1);
    co_b_ = Parameter("video.cross.out_b", init::zeros({D}), kStage1);
    cf1_w_ = Parameter("video.cross.ffn1_w", init::xavier(cr, D, cfg.d_ff), kStage1);
    cf1_b_ = Parameter("video.cross.ffn1_b", init::zeros({cfg.d_ff}), kStage1);
    cf2_w_ = Parameter("video.cross.ffn2_w", init::zeros({cfg.d_ff, D}), kStage1);
    cf2_b_ = Parameter("video.cross.ffn2_b", init::zeros({D}), kStage1);
    pool_q_ = Parameter("video.pool_q", init::normal(cr, {1, D}, 1.0), kStage1);
}

Tensor StudentEncoder::frozen_tokens(const Tensor& video) const {
    if (video.rank() != 4) throw ShapeError("student: video must be [F, P, W, d_patch]");
    if (video.dim(1) != rows_ || video.dim(2) != cols_ || video.dim(3) != d_patch_)
        throw ShapeError("student: video spatial shape mismatch");
    int F = video.dim(0);
    SliceGrid g(cfg_, F);
    int D = cfg_.d_model, P2 = n_spatial_, dp = d_patch_;
    int M = g.unique;

    // stage A: per-slice mean and max over the slice's frames, per position
    // and channel, so burst peaks survive the temporal reduction
    Tensor pooled({M * P2, 2 * dp});
    int64_t frame = int64_t(P2) * dp;
    for (int m = 0; m < M; ++m) {
        int start = g.start_of_slice(m);
        for (int p = 0; p < P2; ++p) {
            double* dst = pooled.data() + (int64_t(m) * P2 + p) * 2 * dp;
            for (int c = 0; c < dp; ++c) {
                double mean = 0.0, mx = -1e300;
                for (int f = start; f < start + g.sub; ++f) {
                    double x = video.data()[int64_t(f) * frame + int64_t(p) * dp + c];
                    mean += x;
                    mx = std::max(mx, x);
                }
                dst[c] = mean / g.sub;
                dst[dp + c] = mx;
            }
        }
    }

    Tensor x = add_rowvec_value(kernels::matmul(pooled, patch_w_.value), patch_b_.value);
    for (int r = 0; r < M * P2; ++r) {
        const double* pe = pos_spatial_.value.data() + int64_t(r % P2) * D;
        double* row = x.data() + int64_t(r) * D;
        for (int o = 0; o < D; ++o) row[o] += pe[o];
    }
    for (const Block& b : spatial_) x = b.forward(x, M, P2, cfg_.heads);

    // regroup into per-position temporal sequences, order (segment, pos, j)
    int S = g.segments, t = g.t;
    Tensor seq({S * P2 * t, D});
    for (int s = 0; s < S; ++s)
        for (int p = 0; p < P2; ++p)
            for (int j = 0; j < t; ++j) {
                const double* src = x.data() + (int64_t(g.slice_of(s, j)) * P2 + p) * D;
                const double* pe = pos_temporal_.value.data() + int64_t(j) * D;
                double* dst = seq.data() + ((int64_t(s) * P2 + p) * t + j) * D;
                for (int o = 0; o < D; ++o) dst[o] = src[o] + pe[o];
            }
    for (const Block& b : temporal_) seq = b.forward(seq, S * P2, t, cfg_.heads);

    // final row order (segment, j, pos): pooling batches become contiguous
    Tensor out({S * t * P2, D});
    for (int s = 0; s < S; ++s)
        for (int j = 0; j < t; ++j)
            for (int p = 0; p < P2; ++p)
                std::copy_n(seq.data() + ((int64_t(s) * P2 + p) * t + j) * D, D,
                            out.data() + ((int64_t(s) * t + j) * P2 + p) * D);
    return out;
}

Var StudentEncoder::encode_tokens(Bindings& bind, Tensor tokens,
                                  const std::vector<TextSequence>& texts, int batch,
                                  AttentionRecord* record) {
    Tape& t = bind.tape();
    int D = cfg_.d_model, P2 = n_spatial_;
    int per = tokens.dim(0) / batch;  // S * t * P2 per sample
    if (tokens.dim(0) % batch != 0) throw ShapeError("student: token rows not divisible by batch");
    int st = per / P2;  // S * t
    if (record && batch != 1) throw UsageError("student: attention record requires batch of 1");

    int L = -1;
    for (const TextSequence& ts : texts) {
        if (!ts.has_sup)
            throw UsageError("student: text must pass through prepend_sup before encoding");
        if (ts.ids.empty()) throw UsageError("student: text sequence missing [eos]");
        if (L < 0)
            L = ts.length();
        else if (ts.length() != L)
            throw ShapeError("student: batched texts must share a length");
    }

    Var h = t.constant(std::move(tokens));  // [B*per, D]
    Var txt = texts.size() == 1 ? texts[0].emb : [&] {
        Var acc = texts[0].emb;
        for (size_t i = 1; i < texts.size(); ++i) acc = concat_rows(t, acc, texts[i].emb);
        return acc;
    }();  // [B*L, d_text]

    Var q = affine(t, layer_norm(t, h), bind(cq_w_),
                   bind(cq_b_));
    Var k = affine(t, txt, bind(ck_w_), bind(ck_b_));
    Var v = affine(t, txt, bind(cv_w_), bind(cv_b_));
    Tensor cross_probs;
    Var att = attention(t, reshape(t, q, {batch, per, D}), reshape(t, k, {batch, L, D}),
                        reshape(t, v, {batch, L, D}), cfg_.heads, record ? &cross_probs : nullptr);
    Var o = affine(t, reshape(t, att, {batch * per, D}), bind(co_w_),
                   bind(co_b_));
    Var h1 = add(t, h, o);
    Var f = affine(t, gelu(t, affine(t, layer_norm(t, h1), bind(cf1_w_),
                                     bind(cf1_b_))),
                   bind(cf2_w_), bind(cf2_b_));
    Var h2 = layer_norm(t, add(t, h1, f));

    // spatial attention pooling: one learned query, keys are the tokens of
    // each (segment, timestep) group
    Var keys = reshape(t, h2, {batch * st, P2, D});
    Var pq = reshape(t, broadcast_row(t, bind(pool_q_), batch * st),
                     {batch * st, 1, D});
    Tensor pool_probs;
    Var pooled = attention(t, pq, keys, keys, cfg_.heads, record ? &pool_probs : nullptr);
    Var out = reshape(t, pooled, {batch * st, D});

    if (record) {
        int H = cfg_.heads;
        record->segments = st / cfg_.t_per_segment;
        record->t_per_segment = cfg_.t_per_segment;
        record->n_spatial = P2;
        record->cross = cross_probs.reshaped({H, per, L});
        record->pool = Tensor({H, P2});
        // pool_probs: [st, H, 1, P2]; average the simplex rows over groups
        for (int hh = 0; hh < H; ++hh)
            for (int p = 0; p < P2; ++p) {
                double acc = 0.0;
                for (int g = 0; g < st; ++g)
                    acc += pool_probs.data()[(int64_t(g) * H + hh) * P2 + p];
                record->pool.data()[int64_t(hh) * P2 + p] = acc / st;
            }
    }
    return out;
}

Var StudentEncoder::encode(Bindings& bind, const Tensor& video, const TextSequence& text,
                           AttentionRecord* record) {
    Tensor tokens = frozen_tokens(video);
    int st = tokens.dim(0) / n_spatial_;
    Var flat = encode_tokens(bind, std::move(tokens), {text}, 1, record);
    return reshape(bind.tape(), flat, {st / cfg_.t_per_segment, cfg_.t_per_segment, cfg_.d_model});
}

Var StudentEncoder::encode_batch(Bindings& bind, const std::vector<const Tensor*>& videos,
                                 const std::vector<TextSequence>& texts) {
    if (videos.empty() || videos.size() != texts.size())
        throw UsageError("student: batch requires matching videos and texts");
    Tensor first = frozen_tokens(*videos[0]);
    int per = first.dim(0);
    int D = cfg_.d_model;
    Tensor tokens({int(videos.size()) * per, D});
    std::copy_n(first.data(), first.size(), tokens.data());
    for (size_t i = 1; i < videos.size(); ++i) {
        Tensor ti = frozen_tokens(*videos[i]);
        if (ti.dim(0) != per) throw ShapeError("student: batched videos must share frame count");
        std::copy_n(ti.data(), ti.size(), tokens.data() + int64_t(i) * per * D);
    }
    return encode_tokens(bind, std::move(tokens), texts, int(videos.size()), nullptr);
}

std::vector<Parameter*> StudentEncoder::params() {
    std::vector<Parameter*> out = frozen_stack_params();
    for (Parameter* p : {&cq_w_, &cq_b_, &ck_w_, &ck_b_, &cv_w_, &cv_b_, &co_w_, &co_b_,
                         &cf1_w_, &cf1_b_, &cf2_w_, &cf2_b_, &pool_q_})
        out.push_back(p);
    return out;
}

std::vector<Parameter*> StudentEncoder::frozen_stack_params() {
    std::vector<Parameter*> out{&patch_w_, &patch_b_, &pos_spatial_, &pos_temporal_};
    for (Block& b : spatial_) b.collect(out);
    for (Block& b : temporal_) b.collect(out);
    return out;
}

Var distill_loss(Tape& t, Var student, const Tensor& teacher) {
    const Tensor& sv = t.val(student);
    if (sv.size() != teacher.size())
        throw ShapeError("distill_loss: student/teacher element count mismatch: " +
                         shape_str(sv.shape()) + " vs " + shape_str(teacher.shape()));
    Var diff = sub(t, student, t.constant(teacher.reshaped(sv.shape())));
    return mean_all(t, mul(t, diff, diff));
}

Tensor attention_map(const AttentionRecord& record, int eos_row) {
    int H = record.cross.dim(0);
    int n_tok = record.cross.dim(1);
    int L = record.cross.dim(2);
    int P2 = record.n_spatial;
    int groups = record.segments * record.t_per_segment;
    if (eos_row < 0 || eos_row >= L) throw UsageError("attention_map: eos row out of range");
    if (groups * P2 != n_tok) throw ShapeError("attention_map: record layout mismatch");

    Tensor heat({P2});
    for (int p = 0; p < P2; ++p) {
        double cross = 0.0;
        for (int h = 0; h < H; ++h)
            for (int g = 0; g < groups; ++g)
                cross += record.cross.at(h, g * P2 + p, eos_row);
        cross /= double(H) * groups;
        double pool = 0.0;
        for (int h = 0; h < H; ++h) pool += record.pool.at(h, p);
        pool /= H;
        heat.data()[p] = cross * pool;
    }
    double mx = 0.0;
    for (int p = 0; p < P2; ++p) mx = std::max(mx, heat.data()[p]);
    if (mx > 0.0)
        for (int p = 0; p < P2; ++p) heat.data()[p] /= mx;
    return heat;
}

void write_pgm(const std::filesystem::path& path, const Tensor& map01) {
    if (map01.rank() != 2) throw ShapeError("write_pgm: expected a [rows, cols] map");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("write_pgm: cannot open " + path.string());
    out << "P5\n" << map01.dim(1) << " " << map01.dim(0) << "\n255\n";
    for (int64_t i = 0; i < map01.size(); ++i) {
        double v = std::clamp(map01.data()[size_t(i)], 0.0, 1.0);
        out.put(char(uint8_t(std::lround(v * 255.0))));
    }
    if (!out) throw IoError("write_pgm: write failure on " + path.string());
}

}  // namespace selva

#include "selva/generator.hpp"

#include <cmath>
#include <string>

#include "selva/errors.hpp"
#include "selva/world.hpp"

namespace selva {

ConditionSet drop_conditions(const ConditionSet& cond, double p_joint, double p_text_extra,
                             Rng& rng) {
    double u_joint = rng.uniform();
    double u_text = rng.uniform();
    ConditionSet out = cond;
    bool joint = u_joint < p_joint;
    out.video_null = out.video_null || joint;
    out.text_null = out.text_null || joint || (u_text < p_text_extra);
    return out;
}

Tensor interpolate(const Tensor& a0, const Tensor& a1, double t) {
    if (!a0.same_shape(a1)) throw ShapeError("interpolate: endpoint shapes differ");
    if (!(t >= 0.0 && t <= 1.0)) throw NumericError("interpolate: t outside [0, 1]");
    Tensor out = a0;
    for (int64_t i = 0; i < out.size(); ++i)
        out[i] = t * a1[i] + (1.0 - t) * a0[i];
    return out;
}

Var adaln(Tape& t, Var h, Var cond, Var gamma_w, Var gamma_b, Var beta_w, Var beta_b) {
    int rows = t.val(h).dim(0);
    int d = t.val(h).dim(1);
    Var n = layer_norm(t, h);
    Var g = affine(t, cond, gamma_w, gamma_b);
    Var b = affine(t, cond, beta_w, beta_b);
    if (t.val(g).dim(0) == 1 && rows > 1) {
        g = broadcast_row(t, g, rows);
        b = broadcast_row(t, b, rows);
    } else if (t.val(g).dim(0) != rows) {
        throw ShapeError("adaln: conditioning rows must be 1 or match h");
    }
    (void)d;
    return add(t, mul(t, n, g), b);
}

Tensor euler_sample(const VelocityFn& velocity, Tensor a0, int steps) {
    if (steps < 1) throw ConfigError("euler_sample: steps must be >= 1");
    double dt = 1.0 / steps;
    Tensor a = std::move(a0);
    for (int k = 0; k < steps; ++k) {
        double tk = double(k) / steps;
        Tensor v = velocity(a, tk);
        if (!v.same_shape(a)) throw ShapeError("euler_sample: velocity shape mismatch");
        for (int64_t i = 0; i < a.size(); ++i) a[i] += dt * v[i];
    }
    return a;
}

Generator::Generator(const GeneratorConfig& cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg.d_model % cfg.heads != 0)
        throw ConfigError("generator: heads must divide d_model");
    Rng root(seed);
    int d = cfg.d_model;

    Rng vp = root.stream("gen.video_proj");
    video_proj_w_ = Parameter("gen.video_proj_w", init::xavier(vp, cfg.d_video, d), kStage2);
    video_proj_b_ = Parameter("gen.video_proj_b", init::zeros({d}), kStage2);
    Rng nl = root.stream("gen.null");
    null_video_ = Parameter("gen.null_video", init::normal(nl, {1, cfg.d_video}, 1.0), kStage2);
    null_text_ = Parameter("gen.null_text", init::normal(nl, {1, cfg.d_text}, 1.0), kStage2);

    Rng tm = root.stream("gen.time");
    time_w_ = Parameter("gen.time_w", init::xavier(tm, 2 * cfg.time_freqs, d), kFrozen);
    time_b_ = Parameter("gen.time_b", init::zeros({d}), kFrozen);
    Rng tx = root.stream("gen.text_in");
    text_w_ = Parameter("gen.text_w", init::xavier(tx, cfg.d_text, d), kFrozen);
    text_b_ = Parameter("gen.text_b", init::zeros({d}), kFrozen);
    Rng au = root.stream("gen.audio_in");
    audio_w_ = Parameter("gen.audio_w", init::xavier(au, cfg.d_audio, d), kFrozen);
    audio_b_ = Parameter("gen.audio_b", init::zeros({d}), kFrozen);
    pos_audio_ = Parameter("gen.pos_audio", init::normal(au, {cfg.t_audio, d}, 0.3), kFrozen);
    Rng oh = root.stream("gen.out");
    out_w_ = Parameter("gen.out_w", init::xavier(oh, d, cfg.d_audio), kFrozen);
    out_b_ = Parameter("gen.out_b", init::zeros({cfg.d_audio}), kFrozen);

    auto block_init = [&](const std::string& prefix, Block& b) {
        Rng r = root.stream(prefix);
        b.qkv_w = Parameter(prefix + ".qkv_w", init::xavier(r, d, 3 * d), kFrozen);
        b.qkv_b = Parameter(prefix + ".qkv_b", init::zeros({3 * d}), kFrozen);
        b.out_w = Parameter(prefix + ".out_w", init::xavier(r, d, d), kFrozen);
        b.out_b = Parameter(prefix + ".out_b", init::zeros({d}), kFrozen);
        b.ffn1_w = Parameter(prefix + ".ffn1_w", init::xavier(r, d, cfg_.d_ff), kFrozen);
        b.ffn1_b = Parameter(prefix + ".ffn1_b", init::zeros({cfg_.d_ff}), kFrozen);
        b.ffn2_w = Parameter(prefix + ".ffn2_w", init::xavier(r, cfg_.d_ff, d), kFrozen);
        b.ffn2_b = Parameter(prefix + ".ffn2_b", init::zeros({d}), kFrozen);
        // identity modulation at init: scale 1, shift 0, no cond influence.
        // Both residual branches carry modulation; the FFN branch is the one
        // that keeps per-row (frame-aligned) conditioning unmixed, since
        // attention averages rows.
        b.ada_g_w = Parameter(prefix + ".ada_g_w", init::zeros({d, d}), kStage2);
        b.ada_g_b = Parameter(prefix + ".ada_g_b", Tensor::full({d}, 1.0), kStage2);
        b.ada_b_w = Parameter(prefix + ".ada_b_w", init::zeros({d, d}), kStage2);
        b.ada_b_b = Parameter(prefix + ".ada_b_b", init::zeros({d}), kStage2);
        b.ada_f_g_w = Parameter(prefix + ".ada_f_g_w", init::zeros({d, d}), kStage2);
        b.ada_f_g_b = Parameter(prefix + ".ada_f_g_b", Tensor::full({d}, 1.0), kStage2);
        b.ada_f_b_w = Parameter(prefix + ".ada_f_b_w", init::zeros({d, d}), kStage2);
        b.ada_f_b_b = Parameter(prefix + ".ada_f_b_b", init::zeros({d}), kStage2);
    };
    mm_.resize(size_t(cfg.n_mm));
    sm_.resize(size_t(cfg.n_sm));
    for (int i = 0; i < cfg.n_mm; ++i) block_init("gen.mm" + std::to_string(i), mm_[size_t(i)]);
    for (int i = 0; i < cfg.n_sm; ++i) block_init("gen.sm" + std::to_string(i), sm_[size_t(i)]);
}

Var Generator::run_block(Bindings& bind, Block& blk, Var h, Var cond, int text_rows) {
    Tape& t = bind.tape();
    int d = cfg_.d_model;
    int rows = t.val(h).dim(0);

    Var n = layer_norm(t, h);
    Var g = affine(t, cond, bind(blk.ada_g_w), bind(blk.ada_g_b));
    Var b = affine(t, cond, bind(blk.ada_b_w), bind(blk.ada_b_b));
    Var u;
    if (text_rows > 0) {
        Var nt = slice_rows(t, n, 0, text_rows);
        Var na = slice_rows(t, n, text_rows, rows);
        Var mod = add(t, mul(t, na, g), b);
        u = concat_rows(t, nt, mod);
    } else {
        u = add(t, mul(t, n, g), b);
    }
    Var qkv = affine(t, u, bind(blk.qkv_w), bind(blk.qkv_b));
    Var q = slice_cols(t, qkv, 0, d);
    Var k = slice_cols(t, qkv, d, 2 * d);
    Var v = slice_cols(t, qkv, 2 * d, 3 * d);
    Var att = attention(t, q, k, v, cfg_.heads);
    Var o = affine(t, att, bind(blk.out_w), bind(blk.out_b));
    Var h1 = add(t, h, o);

    Var nf = layer_norm(t, h1);
    Var gf = affine(t, cond, bind(blk.ada_f_g_w), bind(blk.ada_f_g_b));
    Var bf = affine(t, cond, bind(blk.ada_f_b_w), bind(blk.ada_f_b_b));
    Var uf;
    if (text_rows > 0) {
        Var nt = slice_rows(t, nf, 0, text_rows);
        Var na = slice_rows(t, nf, text_rows, rows);
        uf = concat_rows(t, nt, add(t, mul(t, na, gf), bf));
    } else {
        uf = add(t, mul(t, nf, gf), bf);
    }
    Var f = affine(t, gelu(t, affine(t, uf, bind(blk.ffn1_w), bind(blk.ffn1_b))),
                   bind(blk.ffn2_w), bind(blk.ffn2_b));
    return add(t, h1, f);
}

Var Generator::forward_velocity(Bindings& bind, TextEncoder& text, const Tensor& a_t, double t,
                                const ConditionSet& cond) {
    Tape& tape = bind.tape();
    if (a_t.rank() != 2 || a_t.dim(0) != cfg_.t_audio || a_t.dim(1) != cfg_.d_audio)
        throw ShapeError("generator: a_t must be [t_audio, d_audio]");
    if (!std::isfinite(t)) throw NumericError("generator: non-finite timestep");
    int Ta = cfg_.t_audio, d = cfg_.d_model;

    // projected video conditioning, frame-aligned + global
    Var vsrc = cond.video_null ? bind(null_video_) : tape.constant(cond.video_feat);
    if (!cond.video_null &&
        (cond.video_feat.rank() != 2 || cond.video_feat.dim(1) != cfg_.d_video))
        throw ShapeError("generator: video feature must be [rows, d_video]");
    Var vproj = affine(tape, vsrc, bind(video_proj_w_), bind(video_proj_b_));
    int vrows = tape.val(vproj).dim(0);
    std::vector<int> idx;
    if (!cond.video_null && !cond.frame_rows.empty()) {
        if (int(cond.frame_rows.size()) != Ta)
            throw ShapeError("generator: frame_rows must have t_audio entries");
        idx = cond.frame_rows;
        for (int r : idx)
            if (r < 0 || r >= vrows) throw ShapeError("generator: frame_rows out of range");
    } else {
        idx = resize_columns(vrows, Ta);
    }
    Var cf = gather_rows(tape, vproj, idx);
    Var cg = broadcast_row(tape, mean_rows(tape, vproj), Ta);

    Tensor tfeat({1, 2 * cfg_.time_freqs});
    for (int i = 0; i < cfg_.time_freqs; ++i) {
        double w = 3.14159265358979323846 * double(1 << i);
        tfeat.at(0, 2 * i) = std::sin(w * t);
        tfeat.at(0, 2 * i + 1) = std::cos(w * t);
    }
    Var temb = broadcast_row(
        tape, affine(tape, tape.constant(std::move(tfeat)), bind(time_w_), bind(time_b_)), Ta);
    Var cond_m = add(tape, add(tape, cf, cg), temb);

    Var txt_emb = cond.text_null ? bind(null_text_) : text.encode(bind, cond.text_ids).emb;
    Var ht = affine(tape, txt_emb, bind(text_w_), bind(text_b_));
    int L = tape.val(ht).dim(0);
    Var ha = add(tape, affine(tape, tape.constant(a_t), bind(audio_w_), bind(audio_b_)),
                 bind(pos_audio_));

    Var u = concat_rows(tape, ht, ha);
    for (Block& blk : mm_) u = run_block(bind, blk, u, cond_m, L);
    Var h = slice_rows(tape, u, L, L + Ta);
    for (Block& blk : sm_) h = run_block(bind, blk, h, cond_m, 0);
    (void)d;
    return affine(tape, layer_norm(tape, h), bind(out_w_), bind(out_b_));
}

Var Generator::cfm_loss(Bindings& bind, TextEncoder& text, const std::vector<FlowExample>& batch,
                        Rng& rng) {
    if (batch.empty()) throw UsageError("cfm_loss: empty batch");
    Tape& tape = bind.tape();
    Var acc;
    for (const FlowExample& ex : batch) {
        if (ex.a1.rank() != 2 || ex.a1.dim(0) != cfg_.t_audio || ex.a1.dim(1) != cfg_.d_audio)
            throw ShapeError("cfm_loss: a1 must be [t_audio, d_audio]");
        Tensor a0(ex.a1.shape());
        for (int64_t i = 0; i < a0.size(); ++i) a0[i] = rng.normal();
        double t = rng.uniform();
        Tensor a_t = interpolate(a0, ex.a1, t);
        Tensor target = ex.a1;
        for (int64_t i = 0; i < target.size(); ++i) target[i] -= a0[i];
        Var v = forward_velocity(bind, text, a_t, t, ex.cond);
        Var diff = sub(tape, v, tape.constant(std::move(target)));
        Var li = mean_all(tape, mul(tape, diff, diff));
        acc = acc.ok() ? add(tape, acc, li) : li;
    }
    return scale(tape, acc, 1.0 / double(batch.size()));
}

Tensor Generator::sample(TextEncoder& text, const ConditionSet& cond,
                         const SamplerConfig& sampler, Rng& rng) {
    Tensor a({cfg_.t_audio, cfg_.d_audio});
    for (int64_t i = 0; i < a.size(); ++i) a[i] = rng.normal();

    auto vel = [&](const Tensor& a_t, double t) {
        Tape tape;
        Bindings bind(tape, 0u);
        Tensor v_c = tape.val(forward_velocity(bind, text, a_t, t, cond));
        if (sampler.gamma == 1.0) return v_c;  // conditional branch only
        ConditionSet nulled = cond;
        nulled.video_null = true;
        nulled.text_null = true;
        Tape tape_n;
        Bindings bind_n(tape_n, 0u);
        Tensor v_n = tape_n.val(forward_velocity(bind_n, text, a_t, t, nulled));
        for (int64_t i = 0; i < v_n.size(); ++i)
            v_n[i] += sampler.gamma * (v_c[i] - v_n[i]);
        return v_n;
    };
    return euler_sample(vel, std::move(a), sampler.steps);
}

std::vector<Parameter*> Generator::params() {
    std::vector<Parameter*> out{&video_proj_w_, &video_proj_b_, &null_video_, &null_text_,
                                &time_w_,       &time_b_,       &text_w_,     &text_b_,
                                &audio_w_,      &audio_b_,      &pos_audio_,  &out_w_,
                                &out_b_};
    auto collect = [&](Block& b) {
        for (Parameter* p : {&b.qkv_w, &b.qkv_b, &b.out_w, &b.out_b, &b.ffn1_w, &b.ffn1_b,
                             &b.ffn2_w, &b.ffn2_b, &b.ada_g_w, &b.ada_g_b, &b.ada_b_w,
                             &b.ada_b_b, &b.ada_f_g_w, &b.ada_f_g_b, &b.ada_f_b_w,
                             &b.ada_f_b_b})
            out.push_back(p);
    };
    for (Block& b : mm_) collect(b);
    for (Block& b : sm_) collect(b);
    return out;
}

}  // namespace selva

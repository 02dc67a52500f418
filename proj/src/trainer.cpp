#include "selva/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "selva/errors.hpp"

namespace selva {

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"d_text", c.d_text},
                       {"n_sup", c.n_sup},
                       {"video",
                        {{"window", c.video.window},
                         {"hop", c.video.hop},
                         {"t_per_segment", c.video.t_per_segment},
                         {"d_model", c.video.d_model},
                         {"heads", c.video.heads},
                         {"d_ff", c.video.d_ff},
                         {"n_spatial", c.video.n_spatial},
                         {"n_temporal", c.video.n_temporal},
                         {"d_class", c.video.d_class}}},
                       {"gen",
                        {{"d_model", c.gen.d_model},
                         {"heads", c.gen.heads},
                         {"d_ff", c.gen.d_ff},
                         {"n_mm", c.gen.n_mm},
                         {"n_sm", c.gen.n_sm},
                         {"t_audio", c.gen.t_audio},
                         {"d_audio", c.gen.d_audio},
                         {"d_text", c.gen.d_text},
                         {"d_video", c.gen.d_video},
                         {"time_freqs", c.gen.time_freqs}}}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.d_text = j.at("d_text").get<int>();
    c.n_sup = j.at("n_sup").get<int>();
    const auto& v = j.at("video");
    c.video.window = v.at("window").get<int>();
    c.video.hop = v.at("hop").get<int>();
    c.video.t_per_segment = v.at("t_per_segment").get<int>();
    c.video.d_model = v.at("d_model").get<int>();
    c.video.heads = v.at("heads").get<int>();
    c.video.d_ff = v.at("d_ff").get<int>();
    c.video.n_spatial = v.at("n_spatial").get<int>();
    c.video.n_temporal = v.at("n_temporal").get<int>();
    c.video.d_class = v.at("d_class").get<int>();
    const auto& g = j.at("gen");
    c.gen.d_model = g.at("d_model").get<int>();
    c.gen.heads = g.at("heads").get<int>();
    c.gen.d_ff = g.at("d_ff").get<int>();
    c.gen.n_mm = g.at("n_mm").get<int>();
    c.gen.n_sm = g.at("n_sm").get<int>();
    c.gen.t_audio = g.at("t_audio").get<int>();
    c.gen.d_audio = g.at("d_audio").get<int>();
    c.gen.d_text = g.at("d_text").get<int>();
    c.gen.d_video = g.at("d_video").get<int>();
    c.gen.time_freqs = g.at("time_freqs").get<int>();
}

Model Model::init(ModelConfig cfg, const World& world, uint64_t seed) {
    const WorldConfig& wc = world.config();
    cfg.gen.d_text = cfg.d_text;
    cfg.gen.d_video = cfg.video.d_model;
    cfg.gen.t_audio = wc.audio_len;
    cfg.gen.d_audio = wc.d_audio;

    Model m;
    m.cfg = cfg;
    m.init_seed = seed;
    std::vector<std::string> tokens;
    tokens.reserve(size_t(wc.classes));
    for (int k = 0; k < wc.classes; ++k) tokens.push_back(world.event_class(k).token);
    m.text = TextEncoder(tokens, cfg.d_text, cfg.n_sup, Rng::derive(seed, "model.text"));
    m.teacher = TeacherEncoder(cfg.video, wc.classes, Rng::derive(seed, "model.teacher"));
    m.student = StudentEncoder(cfg.video, wc.d_patch, wc.patch, wc.patch, cfg.d_text,
                               Rng::derive(seed, "model.student"));
    m.gen = Generator(cfg.gen, Rng::derive(seed, "model.gen"));
    return m;
}

std::vector<Parameter*> Model::params() {
    std::vector<Parameter*> out;
    for (Parameter* p : text.params()) out.push_back(p);
    for (Parameter* p : teacher.params()) out.push_back(p);
    for (Parameter* p : student.params()) out.push_back(p);
    for (Parameter* p : gen.params()) out.push_back(p);
    return out;
}

std::vector<Parameter*> Model::trainable(unsigned mask) {
    std::vector<Parameter*> out;
    for (Parameter* p : params())
        if ((mask & stage_mask_for(p->stage)) != 0 && p->value.size() > 0) out.push_back(p);
    return out;
}

void Model::save(const std::filesystem::path& dir, nlohmann::json meta,
                 const std::map<std::string, Tensor>& extra) {
    Checkpoint ckpt;
    meta["model_config"] = cfg;
    meta["init_seed"] = init_seed;
    meta["build"] = kBuildId;
    ckpt.meta = std::move(meta);
    for (Parameter* p : params())
        if (p->value.size() > 0) ckpt.tensors[p->name] = p->value;
    for (const auto& [name, tensor] : extra)
        if (tensor.size() > 0) ckpt.tensors["ema." + name] = tensor;
    save_checkpoint(dir, ckpt);
}

Model Model::load(const std::filesystem::path& dir, const World& world,
                  nlohmann::json* meta_out, bool use_ema) {
    Checkpoint ckpt = load_checkpoint(dir);
    ModelConfig cfg = ckpt.meta.at("model_config").get<ModelConfig>();
    uint64_t seed = ckpt.meta.at("init_seed").get<uint64_t>();
    Model m = Model::init(cfg, world, seed);
    for (Parameter* p : m.params()) {
        if (p->value.size() == 0) continue;
        auto it = ckpt.tensors.find(p->name);
        if (it == ckpt.tensors.end())
            throw IoError("checkpoint missing tensor " + p->name);
        if (!it->second.same_shape(p->value))
            throw IoError("checkpoint tensor " + p->name + " has shape " +
                          shape_str(it->second.shape()) + ", expected " +
                          shape_str(p->value.shape()));
        p->value = it->second;
    }
    if (use_ema) {
        bool any = false;
        for (Parameter* p : m.params()) {
            auto it = ckpt.tensors.find("ema." + p->name);
            if (it == ckpt.tensors.end()) continue;
            if (!it->second.same_shape(p->value))
                throw IoError("checkpoint EMA tensor " + p->name + " has a stale shape");
            p->value = it->second;
            any = true;
        }
        if (!any) throw UsageError("checkpoint carries no EMA shadows");
    }
    if (meta_out) *meta_out = ckpt.meta;
    return m;
}

double lr_schedule(int step, double base_lr, int warmup_steps) {
    if (warmup_steps <= 0) return base_lr;
    double ramp = double(step + 1) / double(warmup_steps);
    return base_lr * std::min(1.0, ramp);
}

AdamW::AdamW(std::vector<Parameter*> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
        m_[i].assign(size_t(params_[i]->value.size()), 0.0);
        v_[i].assign(size_t(params_[i]->value.size()), 0.0);
    }
}

double AdamW::step(double lr) {
    double sq = 0.0;
    for (Parameter* p : params_) {
        if (!p->has_grad()) continue;
        for (double g : p->grad) {
            if (!std::isfinite(g))
                throw NumericError("adamw: non-finite gradient in " + p->name);
            sq += g * g;
        }
    }
    double norm = std::sqrt(sq);
    double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
        Parameter* p = params_[i];
        size_t n = size_t(p->value.size());
        const bool has = p->has_grad();
        if (has && p->grad.size() != n)
            throw ShapeError("adamw: gradient size mismatch for " + p->name);
        double* w = p->value.data();
        for (size_t k = 0; k < n; ++k) {
            double g = has ? p->grad[k] * scale : 0.0;
            m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
            v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
            double mhat = m_[i][k] / bc1;
            double vhat = v_[i][k] / bc2;
            w[k] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[k]);
        }
    }
    return norm;
}

void AdamW::zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
}

Ema::Ema(const std::vector<Parameter*>& params, double decay)
    : params_(params), decay_(decay) {
    shadow_.reserve(params_.size());
    for (Parameter* p : params_) shadow_.push_back(p->value);
}

double Ema::decay_for(double sigma_rel, int total_steps) {
    double window = std::max(1.0, sigma_rel * double(total_steps));
    return std::exp(-1.0 / window);
}

void Ema::update() {
    for (size_t i = 0; i < params_.size(); ++i) {
        double* s = shadow_[i].data();
        const double* w = params_[i]->value.data();
        for (int64_t k = 0; k < shadow_[i].size(); ++k)
            s[k] = decay_ * s[k] + (1.0 - decay_) * w[k];
    }
}

std::map<std::string, Tensor> Ema::shadows() const {
    std::map<std::string, Tensor> out;
    for (size_t i = 0; i < params_.size(); ++i) out[params_[i]->name] = shadow_[i];
    return out;
}

void Ema::copy_into_params() {
    for (size_t i = 0; i < params_.size(); ++i) params_[i]->value = shadow_[i];
}

namespace {

struct StepSample {
    MixedSample mix;
    Tensor teacher_feat;  // [S, t, D]
};

std::vector<StepSample> draw_batch(const Model& model, const Dataset& data, int batch, Rng& rng) {
    const std::vector<Scene>& pool = data.train_scenes;
    if (pool.size() < 2) throw ConfigError("train: need at least two training scenes");
    int n = int(pool.size());
    std::vector<StepSample> out;
    out.reserve(size_t(batch));
    for (int b = 0; b < batch; ++b) {
        int ti = rng.uniform_int(n);
        int pi = rng.uniform_int(n);
        if (pi == ti) pi = (pi + 1) % n;
        StepSample s;
        s.mix = maybe_mix(data.config, pool[size_t(ti)], pool[size_t(pi)], rng);
        s.teacher_feat = model.teacher.encode(s.mix.target);
        out.push_back(std::move(s));
    }
    return out;
}

Tensor stack_teacher(const std::vector<StepSample>& batch) {
    int64_t per = batch[0].teacher_feat.size();
    Tensor out({int(batch.size()) * batch[0].teacher_feat.dim(0) * batch[0].teacher_feat.dim(1),
                batch[0].teacher_feat.dim(2)});
    for (size_t i = 0; i < batch.size(); ++i)
        std::copy_n(batch[i].teacher_feat.data(), per, out.data() + int64_t(i) * per);
    return out;
}

Var student_batch_feature(Model& model, Bindings& bind, const std::vector<StepSample>& batch) {
    std::vector<const Tensor*> videos;
    std::vector<TextSequence> texts;
    videos.reserve(batch.size());
    texts.reserve(batch.size());
    for (const StepSample& s : batch) {
        videos.push_back(&s.mix.video);
        texts.push_back(model.text.prepend_sup(bind, model.text.encode(bind, s.mix.target.caption)));
    }
    return model.student.encode_batch(bind, videos, texts);
}

}  // namespace

TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, Ema* ema_out) {
    if (cfg.stage != 1 && cfg.stage != 2)
        throw UsageError("train: stage must be 1 or 2");
    unsigned mask = cfg.joint ? kMaskJoint : stage_mask_for(cfg.stage);
    std::vector<Parameter*> trainables = model.trainable(mask);
    if (trainables.empty()) throw ConfigError("train: no trainable parameters for this stage");
    AdamW opt(trainables, cfg.opt);
    bool with_gen = cfg.joint || cfg.stage == 2;
    Ema ema(trainables, Ema::decay_for(cfg.sigma_rel, std::max(cfg.steps, 1)));

    std::vector<int> frame_rows =
        feature_frame_rows(model.cfg.video, data.config.frames, data.config.audio_len);

    TrainResult res;
    res.losses.reserve(size_t(cfg.steps));
    int divergent_run = 0;
    for (int k = 0; k < cfg.steps; ++k) {
        Rng step_rng(Rng::derive(cfg.seed, "step." + std::to_string(k)));
        std::vector<StepSample> batch = draw_batch(model, data, cfg.batch, step_rng);

        Tape tape;
        Bindings bind(tape, mask);
        Var loss;
        if (cfg.joint || cfg.stage == 1) {
            Var feat = student_batch_feature(model, bind, batch);
            loss = distill_loss(tape, feat, stack_teacher(batch));
        }
        if (with_gen) {
            // stage 2 consumes the student feature as a constant; in joint
            // mode the encoder is recomputed on an inference tape so the
            // generator loss cannot back-propagate into stage-1 parameters
            // through a stale graph
            Tape feat_tape;
            Bindings feat_bind(feat_tape, 0u);
            Tensor feats = feat_tape.val(student_batch_feature(model, feat_bind, batch));
            int per = feats.dim(0) / int(batch.size());
            std::vector<FlowExample> flow;
            flow.reserve(batch.size());
            for (size_t i = 0; i < batch.size(); ++i) {
                Tensor fi({per, feats.dim(1)});
                std::copy_n(feats.data() + int64_t(i) * per * feats.dim(1), fi.size(), fi.data());
                ConditionSet c;
                c.video_feat = std::move(fi);
                c.frame_rows = frame_rows;
                c.text_ids = model.text.tokenize(batch[i].mix.target.caption);
                flow.push_back(FlowExample{batch[i].mix.target.audio,
                                           drop_conditions(c, cfg.p_joint, cfg.p_text_extra,
                                                           step_rng)});
            }
            Var cfm = model.gen.cfm_loss(bind, model.text, flow, step_rng);
            loss = loss.ok() ? add(tape, loss, cfm) : cfm;
        }

        double lv = tape.val(loss)[0];
        if (!std::isfinite(lv)) throw NumericError("train: non-finite loss at step " +
                                                   std::to_string(k));
        opt.zero_grad();
        tape.backward(loss);
        opt.step(lr_schedule(k, cfg.opt.lr, cfg.opt.warmup));
        ema.update();
        res.losses.push_back(lv);

        if (lv > 10.0 * res.losses.front()) {
            if (++divergent_run >= 100)
                throw NumericError("train: loss diverged (above 10x initial for 100 steps, step " +
                                   std::to_string(k) + ")");
        } else {
            divergent_run = 0;
        }
    }

    auto window_mean = [&](size_t begin, size_t end) {
        if (begin >= end) return 0.0;
        double s = std::accumulate(res.losses.begin() + int64_t(begin),
                                   res.losses.begin() + int64_t(end), 0.0);
        return s / double(end - begin);
    };
    size_t n = res.losses.size();
    size_t w = std::min<size_t>(10, n);
    res.initial_loss = window_mean(0, w);
    res.final_loss = window_mean(n - w, n);

    int64_t n_train = 0, n_total = 0;
    for (Parameter* p : trainables) n_train += p->value.size();
    for (Parameter* p : model.params()) n_total += p->value.size();
    res.n_trainable = n_train;
    res.n_total = n_total;

    nlohmann::json curve = nlohmann::json::array();
    for (size_t i = 0; i < n; i += size_t(std::max(cfg.log_every, 1)))
        curve.push_back({{"step", i}, {"loss", res.losses[i]}});
    if (n > 0) curve.push_back({{"step", n - 1}, {"loss", res.losses[n - 1]}});

    res.manifest = nlohmann::json{
        {"build", kBuildId},
        {"mode", cfg.joint ? "joint" : (cfg.stage == 1 ? "stage1" : "stage2")},
        {"seed", cfg.seed},
        {"steps", cfg.steps},
        {"batch", cfg.batch},
        {"optimizer",
         {{"lr", cfg.opt.lr},
          {"beta1", cfg.opt.beta1},
          {"beta2", cfg.opt.beta2},
          {"eps", cfg.opt.eps},
          {"weight_decay", cfg.opt.weight_decay},
          {"clip_norm", cfg.opt.clip_norm},
          {"warmup", cfg.opt.warmup}}},
        {"dropout", {{"p_joint", cfg.p_joint}, {"p_text_extra", cfg.p_text_extra}}},
        {"sigma_rel", cfg.sigma_rel},
        {"ema_decay", ema.decay()},
        {"model_config", model.cfg},
        {"data_manifest_hash", to_hex(data.manifest_hash)},
        {"loss_curve", curve},
        {"initial_loss", res.initial_loss},
        {"final_loss", res.final_loss},
        {"params", {{"trainable", n_train}, {"total", n_total},
                    {"trainable_fraction", n_total ? double(n_train) / double(n_total) : 0.0}}}};

    if (ema_out) *ema_out = ema;
    return res;
}

double eval_distill_loss(Model& model, const Dataset& data, int n_samples, uint64_t seed) {
    const std::vector<Scene>& pool = data.eval_scenes;
    if (pool.size() < 2) throw ConfigError("eval_distill_loss: need at least two eval scenes");
    Rng rng(Rng::derive(seed, "holdout"));
    int n = int(pool.size());
    double acc = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        int ti = rng.uniform_int(n);
        int pi = rng.uniform_int(n);
        if (pi == ti) pi = (pi + 1) % n;
        MixedSample mix = maybe_mix(data.config, pool[size_t(ti)], pool[size_t(pi)], rng);
        Tensor teacher = model.teacher.encode(mix.target);
        Tape tape;
        Bindings bind(tape, 0u);
        TextSequence txt =
            model.text.prepend_sup(bind, model.text.encode(bind, mix.target.caption));
        Var feat = model.student.encode(bind, mix.video, txt);
        acc += tape.val(distill_loss(tape, feat, teacher))[0];
    }
    return acc / double(n_samples);
}

void save_run(const std::filesystem::path& dir, Model& model, const TrainResult& result,
              const Ema* ema) {
    std::filesystem::create_directories(dir);
    nlohmann::json meta{{"run", result.manifest.value("mode", "untrained")}};
    model.save(dir / "checkpoint", meta, ema ? ema->shadows() : std::map<std::string, Tensor>{});
    model.text.write_vocab(dir / "vocab.txt");
    save_json(dir / "run_manifest.json", result.manifest);
    std::ofstream csv(dir / "losses.csv");
    if (!csv) throw IoError("save_run: cannot write losses.csv under " + dir.string());
    csv << "step,loss\n";
    for (size_t i = 0; i < result.losses.size(); ++i) csv << i << "," << result.losses[i] << "\n";
}

}  // namespace selva

#include "selva/evaluator.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <mutex>
#include <thread>

#include "selva/errors.hpp"

namespace selva {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;

void check_rows(const Tensor& x, const char* who) {
    if (x.rank() != 2 || x.dim(0) < 1) throw ConfigError(std::string(who) + ": expected [n, d]");
}

}  // namespace

ToyEmbedder::ToyEmbedder(const World& world, int d_emb, double temperature, uint64_t seed)
    : temp_(temperature) {
    const WorldConfig& wc = world.config();
    t_audio_ = wc.audio_len;
    d_audio_ = wc.d_audio;
    if (d_emb < 1) throw ConfigError("embedder: d_emb must be positive");
    if (temperature <= 0.0) throw ConfigError("embedder: temperature must be positive");
    Rng rng(Rng::derive(seed, "embed.proj"));
    int in = t_audio_ * d_audio_;
    proj_ = Tensor({in, d_emb});
    double sd = 1.0 / std::sqrt(double(in));
    for (int64_t i = 0; i < proj_.size(); ++i) proj_[i] = rng.normal() * sd;
    templates_ = Tensor({wc.classes, d_audio_});
    for (int k = 0; k < wc.classes; ++k)
        std::copy_n(world.event_class(k).spectral_template.data(), d_audio_,
                    templates_.data() + int64_t(k) * d_audio_);
}

Tensor ToyEmbedder::embed(const Tensor& audio) const {
    if (audio.size() != int64_t(t_audio_) * d_audio_)
        throw ShapeError("embedder: audio must have t_audio * d_audio elements");
    int d = proj_.dim(1);
    Tensor out({d});
    CMap p(proj_.data(), proj_.dim(0), d);
    Eigen::Map<const Eigen::VectorXd> a(audio.data(), audio.size());
    Eigen::Map<Eigen::VectorXd> o(out.data(), d);
    o = p.transpose() * a;
    return out;
}

Tensor ToyEmbedder::project_envelope(const Tensor& audio, int class_id) const {
    if (class_id < 0 || class_id >= templates_.dim(0))
        throw ConfigError("embedder: class id out of range");
    if (audio.size() != int64_t(t_audio_) * d_audio_)
        throw ShapeError("embedder: audio must have t_audio * d_audio elements");
    Tensor env({t_audio_});
    const double* tm = templates_.data() + int64_t(class_id) * d_audio_;
    for (int t = 0; t < t_audio_; ++t) {
        double acc = 0.0;
        for (int c = 0; c < d_audio_; ++c) acc += audio.data()[int64_t(t) * d_audio_ + c] * tm[c];
        env[t] = acc;
    }
    return env;
}

Tensor ToyEmbedder::class_probs(const Tensor& audio) const {
    int K = templates_.dim(0);
    Tensor probs({K});
    double mx = -1e300;
    for (int k = 0; k < K; ++k) {
        Tensor env = project_envelope(audio, k);
        double e = 0.0;
        for (int t = 0; t < t_audio_; ++t) e += env[t] * env[t];
        probs[k] = e / temp_;
        mx = std::max(mx, probs[k]);
    }
    double z = 0.0;
    for (int k = 0; k < K; ++k) {
        probs[k] = std::exp(probs[k] - mx);
        z += probs[k];
    }
    for (int k = 0; k < K; ++k) probs[k] /= z;
    return probs;
}

Tensor ToyEmbedder::class_embed(int class_id) const {
    if (class_id < 0 || class_id >= templates_.dim(0))
        throw ConfigError("embedder: class id out of range");
    Tensor ideal({t_audio_, d_audio_});
    const double* tm = templates_.data() + int64_t(class_id) * d_audio_;
    for (int t = 0; t < t_audio_; ++t)
        std::copy_n(tm, d_audio_, ideal.data() + int64_t(t) * d_audio_);
    return embed(ideal);
}

Tensor ToyEmbedder::scene_embed(const Scene& scene) const {
    if (scene.class_id < 0 || scene.class_id >= templates_.dim(0))
        throw ConfigError("embedder: class id out of range");
    int F = scene.envelope.dim(0);
    std::vector<int> idx = resize_columns(F, t_audio_);
    Tensor ideal({t_audio_, d_audio_});
    const double* tm = templates_.data() + int64_t(scene.class_id) * d_audio_;
    for (int t = 0; t < t_audio_; ++t) {
        double e = scene.envelope[idx[size_t(t)]];
        for (int c = 0; c < d_audio_; ++c) ideal.at(t, c) = e * tm[c];
    }
    return embed(ideal);
}

// ---- distribution metrics ----

double frechet_distance(const Tensor& ref, const Tensor& gen) {
    check_rows(ref, "frechet");
    check_rows(gen, "frechet");
    if (ref.dim(1) != gen.dim(1)) throw ConfigError("frechet: embedding widths differ");
    int d = ref.dim(1);
    if (ref.dim(0) < d + 1 || gen.dim(0) < d + 1)
        throw ConfigError("frechet: need at least d_emb + 1 rows per set");

    auto moments = [&](const Tensor& x, Eigen::VectorXd& mu, EMat& cov) {
        int n = x.dim(0);
        CMap m(x.data(), n, d);
        mu = m.colwise().mean();
        EMat centered = m.rowwise() - mu.transpose();
        cov = (centered.transpose() * centered) / double(n - 1);
        // shrinkage keeps the product matrix safely diagonalizable
        double tr = cov.trace();
        cov += (1e-6 * std::max(1.0, tr / d)) * EMat::Identity(d, d);
    };
    Eigen::VectorXd mu_r, mu_g;
    EMat cov_r, cov_g;
    moments(ref, mu_r, cov_r);
    moments(gen, mu_g, cov_g);

    Eigen::SelfAdjointEigenSolver<EMat> es_r(cov_r);
    if (es_r.info() != Eigen::Success)
        throw NumericError("frechet: covariance eigendecomposition failed");
    Eigen::VectorXd ev = es_r.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    EMat sqrt_r = es_r.eigenvectors() * ev.asDiagonal() * es_r.eigenvectors().transpose();

    EMat inner = sqrt_r * cov_g * sqrt_r;
    Eigen::SelfAdjointEigenSolver<EMat> es_i(inner);
    if (es_i.info() != Eigen::Success)
        throw NumericError("frechet: cross-covariance sqrt failed");
    double tr_sqrt = es_i.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

    double dist =
        (mu_r - mu_g).squaredNorm() + cov_r.trace() + cov_g.trace() - 2.0 * tr_sqrt;
    if (!std::isfinite(dist)) throw NumericError("frechet: non-finite distance");
    return std::max(0.0, dist);
}

double kernel_distance(const Tensor& ref, const Tensor& gen) {
    check_rows(ref, "kernel_distance");
    check_rows(gen, "kernel_distance");
    if (ref.dim(1) != gen.dim(1)) throw ConfigError("kernel_distance: embedding widths differ");
    int n = ref.dim(0), m = gen.dim(0), d = ref.dim(1);
    if (n < 2 || m < 2) throw ConfigError("kernel_distance: need at least two rows per set");

    auto sqdist = [&](const double* a, const double* b) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            double t = a[j] - b[j];
            s += t * t;
        }
        return s;
    };

    // median heuristic over all pooled pairwise distances
    std::vector<double> pooled;
    pooled.reserve(size_t(n + m) * size_t(n + m - 1) / 2);
    auto row = [&](int i) { return i < n ? ref.data() + int64_t(i) * d : gen.data() + int64_t(i - n) * d; };
    for (int i = 0; i < n + m; ++i)
        for (int j = i + 1; j < n + m; ++j) pooled.push_back(sqdist(row(i), row(j)));
    std::nth_element(pooled.begin(), pooled.begin() + int64_t(pooled.size() / 2), pooled.end());
    double med = pooled[pooled.size() / 2];
    double gamma = med > 0.0 ? 1.0 / med : 1.0;

    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) kxx += std::exp(-gamma * sqdist(ref.data() + int64_t(i) * d,
                                                        ref.data() + int64_t(j) * d));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            if (i != j) kyy += std::exp(-gamma * sqdist(gen.data() + int64_t(i) * d,
                                                        gen.data() + int64_t(j) * d));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            kxy += std::exp(-gamma * sqdist(ref.data() + int64_t(i) * d,
                                            gen.data() + int64_t(j) * d));
    double mmd2 = kxx / (double(n) * (n - 1)) + kyy / (double(m) * (m - 1)) -
                  2.0 * kxy / (double(n) * m);
    if (!std::isfinite(mmd2)) throw NumericError("kernel_distance: non-finite value");
    return mmd2;
}

double inception_score(const Tensor& probs) {
    check_rows(probs, "inception_score");
    int n = probs.dim(0), K = probs.dim(1);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int k = 0; k < K; ++k) {
            double p = probs.at(i, k);
            if (p < -1e-12) throw ConfigError("inception_score: negative probability");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw ConfigError("inception_score: row " + std::to_string(i) +
                              " is not on the simplex");
    }
    std::vector<double> marginal(size_t(K), 0.0);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < K; ++k) marginal[size_t(k)] += probs.at(i, k) / n;
    double mean_kl = 0.0;
    for (int i = 0; i < n; ++i) {
        double kl = 0.0;
        for (int k = 0; k < K; ++k) {
            double p = probs.at(i, k);
            if (p > 0.0) kl += p * std::log(p / marginal[size_t(k)]);
        }
        mean_kl += kl / n;
    }
    return std::exp(mean_kl);
}

double kl_to_reference(const Tensor& gen_probs, const Tensor& ref_probs) {
    if (gen_probs.size() != ref_probs.size())
        throw ConfigError("kl_to_reference: length mismatch");
    int K = int(gen_probs.size());
    constexpr double eps = 1e-8;
    double zg = 0.0, zr = 0.0;
    for (int k = 0; k < K; ++k) {
        zg += gen_probs[k] + eps;
        zr += ref_probs[k] + eps;
    }
    double kl = 0.0;
    for (int k = 0; k < K; ++k) {
        double r = (ref_probs[k] + eps) / zr;
        double g = (gen_probs[k] + eps) / zg;
        kl += r * std::log(r / g);
    }
    if (!std::isfinite(kl)) throw NumericError("kl_to_reference: non-finite value");
    return kl;
}

double cosine_sim(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw ShapeError("cosine_sim: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) return 0.0;  // zero-vector convention
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

DesyncResult desync_analog(const Tensor& gen_env, const Tensor& target_env) {
    if (gen_env.rank() != 1 || target_env.rank() != 1)
        throw ShapeError("desync: envelopes must be rank 1");
    int n = gen_env.dim(0);
    std::vector<int> idx = resize_columns(target_env.dim(0), n);
    std::vector<double> x(size_t(n), 0.0), y(size_t(n), 0.0);
    for (int i = 0; i < n; ++i) {
        x[size_t(i)] = gen_env[i];
        y[size_t(i)] = target_env[idx[size_t(i)]];
    }
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < n; ++i) {
        mx += x[size_t(i)] / n;
        my += y[size_t(i)] / n;
    }
    double vx = 0.0, vy = 0.0;
    for (int i = 0; i < n; ++i) {
        x[size_t(i)] -= mx;
        y[size_t(i)] -= my;
        vx += x[size_t(i)] * x[size_t(i)];
        vy += y[size_t(i)] * y[size_t(i)];
    }
    int max_off = n / 2;
    if (vx < 1e-12 || vy < 1e-12) return {double(max_off), true};

    // Zero-padded (linear) cross-correlation. Circular correlation would tie
    // at whole-period lags for the periodic envelopes this world produces,
    // letting noise flip the argmax to a harmonic; the shrinking overlap of
    // the linear form keeps an aligned signal's peak strictly at zero.
    auto corr = [&](int lag) {
        double s = 0.0;
        int lo = std::max(0, -lag), hi = std::min(n, n - lag);
        for (int i = lo; i < hi; ++i) s += x[size_t(i)] * y[size_t(i + lag)];
        return s / std::sqrt(vx * vy);
    };
    // scan by growing |lag| so exact ties resolve toward zero offset
    double best = corr(0);
    int best_lag = 0;
    for (int off = 1; off <= max_off; ++off) {
        for (int lag : {off, -off}) {
            double c = corr(lag);
            if (c > best) {
                best = c;
                best_lag = lag;
            }
        }
    }
    return {double(std::abs(best_lag)), false};
}

int selection_correct(const Tensor& gen_audio, const Tensor& tmpl_target,
                      const Tensor& tmpl_pair) {
    if (gen_audio.rank() != 2) throw ShapeError("selection: audio must be [t, d]");
    int T = gen_audio.dim(0), d = gen_audio.dim(1);
    if (tmpl_target.size() != d || tmpl_pair.size() != d)
        throw ShapeError("selection: template width mismatch");
    double et = 0.0, ep = 0.0;
    for (int t = 0; t < T; ++t) {
        double pt = 0.0, pp = 0.0;
        for (int c = 0; c < d; ++c) {
            pt += gen_audio.at(t, c) * tmpl_target[c];
            pp += gen_audio.at(t, c) * tmpl_pair[c];
        }
        et += pt * pt;
        ep += pp * pp;
    }
    return et > ep ? 1 : 0;
}

// ---- benchmark runner ----

nlohmann::json report_to_json(const SubsetReport& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const PairOutcome& p : r.per_pair)
        per.push_back({{"id", p.id},
                       {"target_class", p.target_class},
                       {"pair_class", p.pair_class},
                       {"text_sim", p.text_sim},
                       {"video_sim", p.video_sim},
                       {"desync", p.desync},
                       {"kl", p.kl},
                       {"selected", p.selected},
                       {"degenerate", p.degenerate}});
    return nlohmann::json{{"subset", r.subset},
                          {"pairs", r.pairs},
                          {"fad", r.fad},
                          {"kad", r.kad},
                          {"is", r.is_score},
                          {"kl", r.kl_mean},
                          {"text_sim", r.text_sim},
                          {"video_sim", r.video_sim},
                          {"desync_median", r.desync_median},
                          {"desync_mean", r.desync_mean},
                          {"desync_degenerate", r.desync_degenerate},
                          {"selection_accuracy", r.selection},
                          {"per_pair", per}};
}

std::string validate_report(const nlohmann::json& j) {
    auto need_num = [&](const char* key) -> std::string {
        if (!j.contains(key)) return std::string("missing key: ") + key;
        if (!j.at(key).is_number()) return std::string("not a number: ") + key;
        double v = j.at(key).get<double>();
        if (!std::isfinite(v)) return std::string("non-finite: ") + key;
        return "";
    };
    if (!j.contains("subset") || !j.at("subset").is_string()) return "missing subset tag";
    if (!j.contains("pairs") || !j.at("pairs").is_number_integer() ||
        j.at("pairs").get<int>() < 1)
        return "pairs must be a positive integer";
    for (const char* key : {"fad", "kad", "is", "kl", "text_sim", "video_sim", "desync_median",
                            "desync_mean", "selection_accuracy"}) {
        std::string err = need_num(key);
        if (!err.empty()) return err;
    }
    if (j.at("fad").get<double>() < 0.0) return "fad must be non-negative";
    if (j.at("is").get<double>() <= 0.0) return "is must be positive";
    if (j.at("kl").get<double>() < -1e-9) return "kl must be non-negative";
    for (const char* key : {"text_sim", "video_sim"}) {
        double v = j.at(key).get<double>();
        if (v < -1.0 - 1e-9 || v > 1.0 + 1e-9)
            return std::string(key) + " outside [-1, 1]";
    }
    double sel = j.at("selection_accuracy").get<double>();
    if (sel < 0.0 || sel > 1.0) return "selection_accuracy outside [0, 1]";
    if (!j.contains("desync_degenerate") || !j.at("desync_degenerate").is_number_integer())
        return "missing desync_degenerate count";
    if (!j.contains("per_pair") || !j.at("per_pair").is_array())
        return "missing per_pair array";
    if (int(j.at("per_pair").size()) != j.at("pairs").get<int>())
        return "per_pair length disagrees with pairs";
    for (const auto& p : j.at("per_pair"))
        for (const char* key : {"id", "target_class", "pair_class", "text_sim", "video_sim",
                                "desync", "kl", "selected"})
            if (!p.contains(key)) return std::string("per_pair entry missing ") + key;
    return "";
}

SubsetReport run_benchmark(Model& model, const Dataset& data,
                           const std::vector<BenchmarkPair>& pairs,
                           const std::vector<Scene>& pool, const std::string& subset_name,
                           const EvalConfig& cfg) {
    if (pairs.empty()) throw BenchmarkError("run_benchmark: empty pair list");
    ToyEmbedder embedder(data.world, cfg.d_emb, cfg.temperature, data.seed);
    std::vector<int> frame_rows =
        feature_frame_rows(model.cfg.video, data.config.frames, data.config.audio_len);

    int n = int(pairs.size());
    std::vector<PairOutcome> outcomes(size_t(n), PairOutcome{});
    Tensor e_ref({n, cfg.d_emb}), e_gen({n, cfg.d_emb});
    Tensor probs_gen({n, data.config.classes});

    auto score_pair = [&](int i) {
        const BenchmarkPair& bp = pairs[size_t(i)];
        try {
            MixedSample mix = materialize_pair(pool, bp);
            Tensor gen;
            if (cfg.use_ground_truth) {
                gen = mix.target.audio;
            } else {
                Tape tape;
                Bindings bind(tape, 0u);
                TextSequence txt =
                    model.text.prepend_sup(bind, model.text.encode(bind, mix.target.caption));
                Tensor feat = tape.val(model.student.encode(bind, mix.video, txt));
                ConditionSet cond;
                cond.video_feat = feat.reshaped({feat.dim(0) * feat.dim(1), feat.dim(2)});
                cond.frame_rows = frame_rows;
                cond.text_ids = model.text.tokenize(mix.target.caption);
                Rng rng(Rng::derive(bp.seed, "eval.sample." + std::to_string(cfg.seed)));
                gen = model.gen.sample(model.text, cond, cfg.sampler, rng);
            }

            PairOutcome& o = outcomes[size_t(i)];
            o.id = bp.id;
            o.target_class = mix.target.class_id;
            o.pair_class = mix.pair.class_id;

            Tensor eg = embedder.embed(gen);
            Tensor er = embedder.embed(mix.target.audio);
            std::copy_n(eg.data(), cfg.d_emb, e_gen.data() + int64_t(i) * cfg.d_emb);
            std::copy_n(er.data(), cfg.d_emb, e_ref.data() + int64_t(i) * cfg.d_emb);
            Tensor pg = embedder.class_probs(gen);
            std::copy_n(pg.data(), pg.size(), probs_gen.data() + int64_t(i) * pg.size());

            o.kl = kl_to_reference(pg, embedder.class_probs(mix.target.audio));
            o.text_sim = cosine_sim(eg, embedder.class_embed(mix.target.class_id));
            o.video_sim = cosine_sim(eg, embedder.scene_embed(mix.target));
            DesyncResult ds = desync_analog(embedder.project_envelope(gen, mix.target.class_id),
                                            mix.target.envelope);
            o.desync = ds.offset;
            o.degenerate = ds.degenerate;
            o.selected = selection_correct(
                gen, data.world.event_class(mix.target.class_id).spectral_template,
                data.world.event_class(mix.pair.class_id).spectral_template);
        } catch (const NumericError& e) {
            throw NumericError("benchmark pair " + std::to_string(bp.id) + ": " + e.what());
        }
    };

    int jobs = std::max(1, cfg.jobs);
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) score_pair(i);
    } else {
        std::vector<std::thread> workers;
        std::exception_ptr failure;
        std::mutex fail_mu;
        for (int w = 0; w < jobs; ++w)
            workers.emplace_back([&, w] {
                try {
                    for (int i = w; i < n; i += jobs) score_pair(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(fail_mu);
                    if (!failure) failure = std::current_exception();
                }
            });
        for (std::thread& t : workers) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    SubsetReport r;
    r.subset = subset_name;
    r.pairs = n;
    r.per_pair = outcomes;
    r.fad = frechet_distance(e_ref, e_gen);
    r.kad = kernel_distance(e_ref, e_gen);
    r.is_score = inception_score(probs_gen);
    // sum first and divide once: per-term division can push an all-correct
    // selection rate one ulp above 1 when n is not a power of two
    std::vector<double> desyncs;
    double kl = 0.0, ts = 0.0, vs = 0.0, dm = 0.0;
    int correct = 0;
    for (const PairOutcome& o : outcomes) {
        kl += o.kl;
        ts += o.text_sim;
        vs += o.video_sim;
        dm += o.desync;
        correct += o.selected;
        r.desync_degenerate += o.degenerate ? 1 : 0;
        desyncs.push_back(o.desync);
    }
    r.kl_mean = kl / n;
    r.text_sim = ts / n;
    r.video_sim = vs / n;
    r.desync_mean = dm / n;
    r.selection = double(correct) / n;
    std::sort(desyncs.begin(), desyncs.end());
    size_t mid = desyncs.size() / 2;
    r.desync_median = desyncs.size() % 2 == 1
                          ? desyncs[mid]
                          : 0.5 * (desyncs[mid - 1] + desyncs[mid]);
    return r;
}

std::vector<SweepPoint> run_sup_sweep(const Dataset& data, ModelConfig base, TrainConfig stage1,
                                      TrainConfig stage2, const EvalConfig& eval_cfg,
                                      const std::vector<int>& counts) {
    if (counts.empty()) throw UsageError("sweep: need at least one supplementary-token count");
    std::vector<SweepPoint> out;
    stage1.stage = 1;
    stage2.stage = 2;
    for (int n_sup : counts) {
        if (n_sup < 0) throw UsageError("sweep: negative supplementary-token count");
        ModelConfig cfg = base;
        cfg.n_sup = n_sup;
        Model model = Model::init(cfg, data.world,
                                  Rng::derive(data.seed, "sweep." + std::to_string(n_sup)));
        TrainResult r1 = train(model, data, stage1);
        TrainResult r2 = train(model, data, stage2);
        SubsetReport rep =
            run_benchmark(model, data, data.inter, data.eval_scenes, "inter", eval_cfg);
        SweepPoint p;
        p.n_sup = n_sup;
        p.text_sim = rep.text_sim;
        p.desync_median = rep.desync_median;
        p.selection = rep.selection;
        p.distill_final = r1.final_loss;
        p.cfm_final = r2.final_loss;
        p.report = report_to_json(rep);
        out.push_back(p);
    }
    return out;
}

nlohmann::json sweep_to_json(const std::vector<SweepPoint>& points) {
    nlohmann::json arr = nlohmann::json::array();
    for (const SweepPoint& p : points)
        arr.push_back({{"n_sup", p.n_sup},
                       {"text_sim", p.text_sim},
                       {"desync_median", p.desync_median},
                       {"selection_accuracy", p.selection},
                       {"distill_final", p.distill_final},
                       {"cfm_final", p.cfm_final},
                       {"report", p.report}});
    return arr;
}

}  // namespace selva

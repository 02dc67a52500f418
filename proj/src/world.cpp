#include "selva/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "selva/serialize.hpp"

namespace selva {

namespace {

double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

// Draws `count` tensors whose pairwise |cosine| stays below max_cos. The set
// is drawn jointly: accepting vectors one at a time walks into a corner once
// the kept ones nearly span the space (8 near-orthonormal unit vectors in R^8
// force any 9th to at least 1/sqrt(8) ~ 0.354 coherence), while pushing the
// whole set apart reaches the Welch-bound regime without trouble. A fresh
// i.i.d. draw that already satisfies the bound is returned untouched.
std::vector<Tensor> make_separated_set(Rng& rng, int count, const std::vector<int>& shape,
                                       double max_cos, bool unit_norm, const char* what) {
    int64_t n = 1;
    for (int s : shape) n *= s;
    // unit norm for templates, unit RMS for textures
    const double target_norm = unit_norm ? 1.0 : std::sqrt(double(n));
    constexpr int kRedraws = 50;
    constexpr int kIters = 4000;
    const double accept = max_cos * 0.98;   // keep clear of the strict bound
    const double push_to = max_cos * 0.90;  // relaxation target per pair

    std::vector<std::vector<double>> rows;
    rows.assign(size_t(count), std::vector<double>(size_t(n)));
    auto normalize = [&](std::vector<double>& r) {
        double sq = 0.0;
        for (double v : r) sq += v * v;
        if (sq == 0.0) return false;
        double k = 1.0 / std::sqrt(sq);
        for (double& v : r) v *= k;
        return true;
    };
    auto dot = [n](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (int64_t i = 0; i < n; ++i) s += a[size_t(i)] * b[size_t(i)];
        return s;
    };

    for (int attempt = 0; attempt < kRedraws; ++attempt) {
        for (auto& r : rows)
            do {
                for (double& v : r) v = rng.normal();
            } while (!normalize(r));

        for (int iter = 0; iter <= kIters; ++iter) {
            double worst = 0.0;
            for (int i = 0; i < count && worst < accept; ++i)
                for (int j = i + 1; j < count; ++j)
                    worst = std::max(worst, std::abs(dot(rows[size_t(i)], rows[size_t(j)])));
            if (worst < accept) {
                std::vector<Tensor> out;
                for (const auto& r : rows) {
                    Tensor t(shape);
                    for (int64_t i = 0; i < n; ++i) t[i] = r[size_t(i)] * target_norm;
                    out.push_back(std::move(t));
                }
                return out;
            }
            // move every crowded pair apart, symmetrically
            for (int i = 0; i < count; ++i)
                for (int j = i + 1; j < count; ++j) {
                    double g = dot(rows[size_t(i)], rows[size_t(j)]);
                    if (std::abs(g) <= push_to) continue;
                    double step = 0.5 * (std::abs(g) - push_to) * (g < 0.0 ? -1.0 : 1.0);
                    for (int64_t k = 0; k < n; ++k) {
                        double a = rows[size_t(i)][size_t(k)], b = rows[size_t(j)][size_t(k)];
                        rows[size_t(i)][size_t(k)] = a - step * b;
                        rows[size_t(j)][size_t(k)] = b - step * a;
                    }
                    normalize(rows[size_t(i)]);
                    normalize(rows[size_t(j)]);
                }
        }
    }
    throw WorldError(std::string("retry budget exhausted while separating ") + what);
}

Tensor make_envelope(const EventClass& ec, int frames, Rng& rng) {
    Tensor env({frames});
    const double period = ec.period;
    const int burst_len = std::max(1, int(std::lround(ec.duty * period)));
    const double phase = rng.uniform() * period;
    const int k_hi = int(std::ceil(double(frames) / period)) + 2;
    constexpr double kRamp = 2.0;
    for (int k = -2; k <= k_hi; ++k) {
        double jit = rng.normal() * ec.jitter * period;
        int start = int(std::lround(phase + k * period + jit));
        for (int i = 0; i < burst_len; ++i) {
            int f = start + i;
            if (f < 0 || f >= frames) continue;
            double a = std::min({(i + 1) / kRamp, (burst_len - i) / kRamp, 1.0});
            env[f] = std::max(env[f], a);
        }
    }
    return env;
}

std::string class_token(int id) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "class_%02d", id);
    return buf;
}

}  // namespace

World World::build(const WorldConfig& cfg, uint64_t seed) {
    if (cfg.classes < 2 || cfg.categories < 2)
        throw ConfigError("world needs at least 2 classes and 2 categories");
    if (cfg.classes % cfg.categories != 0)
        throw ConfigError("class count " + std::to_string(cfg.classes) +
                          " not divisible by category count " + std::to_string(cfg.categories));
    World w;
    w.cfg_ = cfg;
    w.seed_ = seed;
    Rng root(seed);
    const int per_cat = cfg.classes / cfg.categories;
    Rng trng = root.stream("textures");
    Rng srng = root.stream("templates");
    std::vector<Tensor> textures = make_separated_set(
        trng, cfg.classes, {cfg.patch, cfg.patch, cfg.d_patch}, cfg.max_cos, false, "textures");
    std::vector<Tensor> templates =
        make_separated_set(srng, cfg.classes, {cfg.d_audio}, cfg.max_cos, true, "templates");
    w.classes_.reserve(size_t(cfg.classes));
    for (int id = 0; id < cfg.classes; ++id) {
        Rng crng = root.stream("class." + std::to_string(id));
        EventClass ec;
        ec.id = id;
        ec.category = id / per_cat;
        ec.token = class_token(id);
        ec.period = double(8 + crng.uniform_int(13));  // [8, 20] frames
        ec.duty = crng.uniform(0.3, 0.6);
        ec.jitter = 0.1;
        ec.texture = std::move(textures[size_t(id)]);
        ec.spectral_template = std::move(templates[size_t(id)]);
        w.classes_.push_back(std::move(ec));
    }
    return w;
}

const EventClass& World::event_class(int id) const {
    if (id < 0 || id >= int(classes_.size()))
        throw WorldError("unknown class id " + std::to_string(id));
    return classes_[size_t(id)];
}

Scene World::make_scene(int class_id, uint64_t scene_seed) const {
    const EventClass& ec = event_class(class_id);
    Scene s;
    s.class_id = class_id;
    s.seed = scene_seed;
    s.caption = {ec.token};
    Rng root(scene_seed);

    Rng env_rng = root.stream("envelope");
    s.envelope = make_envelope(ec, cfg_.frames, env_rng);

    Rng vn = root.stream("video_noise");
    s.video = Tensor({cfg_.frames, cfg_.patch, cfg_.patch, cfg_.d_patch});
    const int64_t per_frame = int64_t(cfg_.patch) * cfg_.patch * cfg_.d_patch;
    for (int f = 0; f < cfg_.frames; ++f) {
        double a = s.envelope[f];
        double* dst = s.video.data() + f * per_frame;
        for (int64_t e = 0; e < per_frame; ++e)
            dst[e] = ec.texture[e] * a + cfg_.video_noise * vn.normal();
    }

    Rng an = root.stream("audio_noise");
    s.audio = Tensor({cfg_.audio_len, cfg_.d_audio});
    for (int tstep = 0; tstep < cfg_.audio_len; ++tstep) {
        int src = int(int64_t(tstep) * cfg_.frames / cfg_.audio_len);
        double a = s.envelope[src];
        for (int j = 0; j < cfg_.d_audio; ++j)
            s.audio.at(tstep, j) = a * ec.spectral_template[j] + cfg_.audio_noise * an.normal();
    }
    return s;
}

double sample_mix_ratio(double alpha, double clip_min, Rng& rng) {
    if (alpha <= 0.0) throw ConfigError("mix alpha must be positive");
    if (clip_min < 0.0 || clip_min >= 1.0) throw ConfigError("mix clip must be in [0, 1)");
    return std::max(rng.beta(alpha, alpha), clip_min);
}

std::vector<int> resize_columns(int from, int to) {
    std::vector<int> idx(size_t(std::max(0, to)));
    for (int j = 0; j < to; ++j) idx[size_t(j)] = int(int64_t(j) * from / to);
    return idx;
}

MixedSample auto_mix(const Scene& target, const Scene& pair, double lambda, bool target_left) {
    if (!target.video.same_shape(pair.video))
        throw ShapeError("auto_mix: scene video shapes differ");
    if (target.video.rank() != 4) throw ShapeError("auto_mix: expected [F, P, W, d] video");
    const int F = target.video.dim(0), P = target.video.dim(1), W = target.video.dim(2),
              dp = target.video.dim(3);
    int wt = int(std::lround(lambda * W));
    wt = std::clamp(wt, 0, W);
    const int wp = W - wt;

    MixedSample m;
    m.lambda = lambda;
    m.target_left = target_left;
    m.mixed = wp > 0;
    m.target = target;
    if (m.mixed) m.pair = pair;

    m.video = Tensor({F, P, W, dp});
    std::vector<int> ti = resize_columns(W, wt);
    std::vector<int> pi = resize_columns(W, wp);
    for (int f = 0; f < F; ++f)
        for (int r = 0; r < P; ++r)
            for (int c = 0; c < W; ++c) {
                bool from_target = target_left ? (c < wt) : (c >= wp);
                int local = target_left ? (from_target ? c : c - wt) : (from_target ? c - wp : c);
                int src_c = from_target ? ti[size_t(local)] : pi[size_t(local)];
                const Tensor& src = from_target ? target.video : pair.video;
                for (int ch = 0; ch < dp; ++ch) m.video.at(f, r, c, ch) = src.at(f, r, src_c, ch);
            }
    return m;
}

MixedSample maybe_mix(const WorldConfig& cfg, const Scene& target, const Scene& pair, Rng& rng) {
    double u = rng.uniform();
    if (u >= cfg.mix_prob) {
        MixedSample m;
        m.video = target.video;
        m.lambda = 1.0;
        m.mixed = false;
        m.target = target;
        return m;
    }
    double lam = sample_mix_ratio(cfg.mix_alpha, cfg.mix_clip, rng);
    bool left = rng.uniform() < 0.5;
    return auto_mix(target, pair, lam, left);
}

std::vector<BenchmarkPair> plan_benchmark(const World& world, const std::vector<Scene>& pool,
                                          PairMode mode, int per_category_quota, uint64_t seed) {
    if (pool.size() < 2) throw BenchmarkError("benchmark needs at least 2 scenes");
    if (per_category_quota <= 0) throw ConfigError("per-category quota must be positive");
    const int C = world.config().categories;
    auto cat_of = [&](int i) { return world.event_class(pool[size_t(i)].class_id).category; };

    std::vector<std::vector<int>> by_cat;
    by_cat.resize(size_t(C));
    for (int i = 0; i < int(pool.size()); ++i) by_cat[size_t(cat_of(i))].push_back(i);

    Rng rng(seed);
    std::vector<BenchmarkPair> out;
    for (int c = 0; c < C; ++c) {
        const auto& targets = by_cat[size_t(c)];
        if (targets.empty()) continue;  // balanced only up to availability
        for (int q = 0; q < per_category_quota; ++q) {
            int t = targets[size_t(rng.uniform_int(int(targets.size())))];
            std::vector<int> cands;
            if (mode == PairMode::kInter) {
                for (int i = 0; i < int(pool.size()); ++i)
                    if (cat_of(i) != c) cands.push_back(i);
            } else {
                for (int i : targets)
                    if (pool[size_t(i)].class_id != pool[size_t(t)].class_id) cands.push_back(i);
            }
            if (cands.empty()) break;  // this category cannot form pairs in this mode
            int p = cands[size_t(rng.uniform_int(int(cands.size())))];
            BenchmarkPair bp;
            bp.id = int(out.size());
            bp.target_scene = t;
            bp.pair_scene = p;
            bp.lambda = 0.5;
            bp.target_left = rng.uniform() < 0.5;
            bp.seed = Rng::derive(seed, "pair." + std::to_string(bp.id));
            out.push_back(bp);
        }
    }
    if (out.empty()) throw BenchmarkError("no valid benchmark pairs for requested mode");
    return out;
}

MixedSample materialize_pair(const std::vector<Scene>& pool, const BenchmarkPair& p) {
    return auto_mix(pool.at(size_t(p.target_scene)), pool.at(size_t(p.pair_scene)), p.lambda,
                    p.target_left);
}

std::vector<MixedSample> build_benchmark(const World& world, const std::vector<Scene>& pool,
                                         PairMode mode, int per_category_quota, uint64_t seed) {
    std::vector<MixedSample> out;
    for (const BenchmarkPair& p : plan_benchmark(world, pool, mode, per_category_quota, seed))
        out.push_back(materialize_pair(pool, p));
    return out;
}

// ---- dataset I/O ----

void to_json(nlohmann::json& j, const WorldConfig& c) {
    j = nlohmann::json{{"classes", c.classes},         {"categories", c.categories},
                       {"frames", c.frames},           {"patch", c.patch},
                       {"d_patch", c.d_patch},         {"audio_len", c.audio_len},
                       {"d_audio", c.d_audio},         {"video_noise", c.video_noise},
                       {"audio_noise", c.audio_noise}, {"mix_alpha", c.mix_alpha},
                       {"mix_clip", c.mix_clip},       {"mix_prob", c.mix_prob},
                       {"max_cos", c.max_cos}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
    j.at("classes").get_to(c.classes);
    j.at("categories").get_to(c.categories);
    j.at("frames").get_to(c.frames);
    j.at("patch").get_to(c.patch);
    j.at("d_patch").get_to(c.d_patch);
    j.at("audio_len").get_to(c.audio_len);
    j.at("d_audio").get_to(c.d_audio);
    j.at("video_noise").get_to(c.video_noise);
    j.at("audio_noise").get_to(c.audio_noise);
    j.at("mix_alpha").get_to(c.mix_alpha);
    j.at("mix_clip").get_to(c.mix_clip);
    j.at("mix_prob").get_to(c.mix_prob);
    j.at("max_cos").get_to(c.max_cos);
}

namespace {

nlohmann::json pair_to_json(const BenchmarkPair& p) {
    return nlohmann::json{{"id", p.id},           {"target_scene", p.target_scene},
                          {"pair_scene", p.pair_scene}, {"lambda", p.lambda},
                          {"target_left", p.target_left}, {"seed", p.seed}};
}

BenchmarkPair pair_from_json(const nlohmann::json& j) {
    BenchmarkPair p;
    j.at("id").get_to(p.id);
    j.at("target_scene").get_to(p.target_scene);
    j.at("pair_scene").get_to(p.pair_scene);
    j.at("lambda").get_to(p.lambda);
    j.at("target_left").get_to(p.target_left);
    j.at("seed").get_to(p.seed);
    return p;
}

void write_pairs(const std::filesystem::path& path, const char* mode,
                 const std::vector<BenchmarkPair>& pairs) {
    nlohmann::json j;
    j["mode"] = mode;
    j["pairs"] = nlohmann::json::array();
    for (const auto& p : pairs) j["pairs"].push_back(pair_to_json(p));
    save_json(path, j);
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const WorldConfig& cfg,
                   const DatasetSpec& spec, uint64_t master_seed) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "scenes", ec);
    fs::create_directories(dir / "benchmarks", ec);
    if (ec) throw IoError("cannot create dataset dir " + dir.string() + ": " + ec.message());

    uint64_t world_seed = Rng::derive(master_seed, "world");
    World world = World::build(cfg, world_seed);

    std::ofstream jl(dir / "scenes.jsonl");
    if (!jl) throw IoError("cannot open scenes.jsonl for writing");
    std::vector<Scene> eval_pool;
    int global_id = 0;
    auto emit = [&](const char* split, int count, std::vector<Scene>* keep) {
        for (int i = 0; i < count; ++i, ++global_id) {
            int cls = i % cfg.classes;
            uint64_t sseed =
                Rng::derive(master_seed, std::string("scene.") + split + "." + std::to_string(i));
            Scene s = world.make_scene(cls, sseed);
            char base[32];
            std::snprintf(base, sizeof(base), "%s_%04d", split, i);
            std::string stem = std::string("scenes/") + base;
            save_tensor(dir / (stem + ".video.slvt"), s.video);
            save_tensor(dir / (stem + ".audio.slvt"), s.audio);
            save_tensor(dir / (stem + ".env.slvt"), s.envelope);
            nlohmann::json rec{{"id", global_id},
                               {"split", split},
                               {"class", cls},
                               {"seed", sseed},
                               {"video", stem + ".video.slvt"},
                               {"audio", stem + ".audio.slvt"},
                               {"envelope", stem + ".env.slvt"}};
            jl << rec.dump() << "\n";
            if (keep) keep->push_back(std::move(s));
        }
    };
    emit("train", spec.train_scenes, nullptr);
    emit("eval", spec.eval_scenes, &eval_pool);
    jl.close();
    if (!jl) throw IoError("write failed for scenes.jsonl");

    std::vector<BenchmarkPair> inter =
        plan_benchmark(world, eval_pool, PairMode::kInter, spec.per_category_quota,
                       Rng::derive(master_seed, "bench.inter"));
    std::vector<BenchmarkPair> intra;
    try {
        intra = plan_benchmark(world, eval_pool, PairMode::kIntra, spec.per_category_quota,
                               Rng::derive(master_seed, "bench.intra"));
    } catch (const BenchmarkError&) {
        // Degenerate worlds (one class per category) have no intra pairs;
        // record an empty benchmark and let callers warn.
    }
    write_pairs(dir / "benchmarks/inter.json", "inter", inter);
    write_pairs(dir / "benchmarks/intra.json", "intra", intra);

    nlohmann::json manifest;
    manifest["format"] = "selva-dataset";
    manifest["version"] = 1;
    manifest["seed"] = master_seed;
    manifest["world_seed"] = world_seed;
    manifest["world"] = cfg;
    manifest["counts"] = {{"train", spec.train_scenes},
                          {"eval", spec.eval_scenes},
                          {"inter_pairs", int(inter.size())},
                          {"intra_pairs", int(intra.size())}};
    manifest["benchmarks"] = {{"inter", "benchmarks/inter.json"}, {"intra", "benchmarks/intra.json"}};
    manifest["scenes"] = "scenes.jsonl";
    save_json(dir / "manifest.json", manifest);
}

Dataset load_dataset(const std::filesystem::path& dir) {
    nlohmann::json manifest = load_json(dir / "manifest.json");
    if (manifest.value("format", "") != "selva-dataset")
        throw IoError("not a dataset directory: " + dir.string());
    Dataset ds;
    ds.config = manifest.at("world").get<WorldConfig>();
    ds.seed = manifest.at("seed").get<uint64_t>();
    ds.world = World::build(ds.config, manifest.at("world_seed").get<uint64_t>());

    std::ifstream jl(dir / manifest.at("scenes").get<std::string>());
    if (!jl) throw IoError("cannot open scenes.jsonl");
    std::string line;
    while (std::getline(jl, line)) {
        if (line.empty()) continue;
        nlohmann::json rec = nlohmann::json::parse(line);
        Scene s;
        s.class_id = rec.at("class").get<int>();
        s.seed = rec.at("seed").get<uint64_t>();
        s.video = load_tensor(dir / rec.at("video").get<std::string>());
        s.audio = load_tensor(dir / rec.at("audio").get<std::string>());
        s.envelope = load_tensor(dir / rec.at("envelope").get<std::string>());
        s.caption = {ds.world.event_class(s.class_id).token};
        std::string split = rec.at("split").get<std::string>();
        (split == "train" ? ds.train_scenes : ds.eval_scenes).push_back(std::move(s));
    }

    auto read_pairs = [&](const std::string& rel) {
        nlohmann::json j = load_json(dir / rel);
        std::vector<BenchmarkPair> out;
        for (const auto& p : j.at("pairs")) out.push_back(pair_from_json(p));
        return out;
    };
    ds.inter = read_pairs(manifest.at("benchmarks").at("inter").get<std::string>());
    ds.intra = read_pairs(manifest.at("benchmarks").at("intra").get<std::string>());
    ds.manifest_hash = file_fingerprint(dir / "manifest.json");
    return ds;
}

}  // namespace selva

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "selva/errors.hpp"
#include "selva/evaluator.hpp"
#include "selva/trainer.hpp"

namespace fs = std::filesystem;
using namespace selva;

namespace {

constexpr uint64_t kDefaultSeed = 42;

// --seed wins over SELVA_LAB_SEED, which wins over the built-in default.
uint64_t resolve_seed(const CLI::Option* opt, uint64_t cli_value) {
    if (opt != nullptr && opt->count() > 0) return cli_value;
    if (const char* env = std::getenv("SELVA_LAB_SEED")) {
        try {
            return uint64_t(std::stoull(env));
        } catch (const std::exception&) {
            throw UsageError("SELVA_LAB_SEED is not an unsigned integer: " + std::string(env));
        }
    }
    return cli_value;
}

std::vector<std::string> split_caption(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    std::string tok;
    while (in >> tok) out.push_back(tok);
    if (out.empty()) throw UsageError("--text must name at least one token");
    return out;
}

struct GenWorldArgs {
    std::string out;
    uint64_t seed = kDefaultSeed;
    WorldConfig world;
    DatasetSpec spec;
};

struct TrainArgs {
    std::string data, out, student_ckpt;
    int stage = 1;
    bool joint = false;
    int steps = -1;  // default depends on the stage
    int batch = 8;
    double lr = 1e-3;
    int warmup = 100;
    double sigma_rel = 0.05;
    double p_joint = 0.1;
    double p_text_extra = 0.5;
    int n_sup = 5;
    int d_ff = 64;
    uint64_t seed = kDefaultSeed;
};

struct SampleArgs {
    std::string ckpt, data, video, text;
    std::string out = "sample";
    double gamma = 4.5;
    int steps = 25;
    bool viz_attn = false;
    bool use_ema = false;
    uint64_t seed = kDefaultSeed;
};

struct EvalArgs {
    std::string ckpt, data;
    std::string out = "eval_report.json";
    std::string subset = "both";
    double gamma = 4.5;
    int steps = 25;
    bool use_ground_truth = false;
    bool use_ema = false;
    int jobs = 1;
    std::vector<int> sweep_sup;
    int sweep_steps1 = 2000;
    int sweep_steps2 = 3000;
    uint64_t seed = kDefaultSeed;
};

int cmd_gen_world(const GenWorldArgs& a) {
    write_dataset(a.out, a.world, a.spec, a.seed);
    Dataset ds = load_dataset(a.out);
    std::cout << "world: " << ds.config.classes << " classes / " << ds.config.categories
              << " categories, " << ds.train_scenes.size() << " train + "
              << ds.eval_scenes.size() << " eval scenes\n"
              << "benchmarks: " << ds.inter.size() << " inter, " << ds.intra.size()
              << " intra pairs\n"
              << "manifest hash: " << to_hex(ds.manifest_hash) << "\n";
    return 0;
}

int cmd_train(const TrainArgs& a) {
    Dataset ds = load_dataset(a.data);

    TrainConfig cfg;
    cfg.stage = a.stage;
    cfg.joint = a.joint;
    cfg.steps = a.steps >= 0 ? a.steps : (a.joint || a.stage == 2 ? 3000 : 2000);
    cfg.batch = a.batch;
    cfg.opt.lr = a.lr;
    cfg.opt.warmup = a.warmup;
    cfg.sigma_rel = a.sigma_rel;
    cfg.p_joint = a.p_joint;
    cfg.p_text_extra = a.p_text_extra;
    cfg.seed = a.seed;

    Model model;
    uint64_t student_run_hash = 0;
    if (!a.joint && a.stage == 2) {
        if (a.student_ckpt.empty())
            throw UsageError("--stage 2 requires --student-ckpt (a stage-1 run directory)");
        model = Model::load(fs::path(a.student_ckpt) / "checkpoint", ds.world);
        student_run_hash = file_fingerprint(fs::path(a.student_ckpt) / "run_manifest.json");
    } else {
        ModelConfig mc;
        mc.n_sup = a.n_sup;
        mc.video.d_ff = a.d_ff;
        mc.gen.d_ff = a.d_ff;
        model = Model::init(mc, ds.world, Rng::derive(a.seed, "model"));
    }

    Ema ema;
    bool with_ema = a.joint || a.stage == 2;
    TrainResult res = train(model, ds, cfg, with_ema ? &ema : nullptr);
    res.manifest["data_path"] = a.data;
    if (student_run_hash != 0)
        res.manifest["student_run_hash"] = to_hex(student_run_hash);
    save_run(a.out, model, res, with_ema ? &ema : nullptr);

    std::cout << "mode: " << res.manifest["mode"].get<std::string>() << "\n"
              << "steps: " << cfg.steps << "  batch: " << cfg.batch << "\n"
              << "loss: " << res.initial_loss << " -> " << res.final_loss << "\n"
              << "trainable params: " << res.n_trainable << " / " << res.n_total << "\n"
              << "run manifest hash: "
              << to_hex(file_fingerprint(fs::path(a.out) / "run_manifest.json")) << "\n";
    return 0;
}

int cmd_sample(const SampleArgs& a) {
    Dataset ds = load_dataset(a.data);
    Model model = Model::load(fs::path(a.ckpt) / "checkpoint", ds.world, nullptr, a.use_ema);
    Tensor video = load_tensor(a.video);
    std::vector<std::string> caption = split_caption(a.text);

    Tape tape;
    Bindings bind(tape, 0u);
    TextSequence txt = model.text.prepend_sup(bind, model.text.encode(bind, caption));
    AttentionRecord record;
    Tensor feat =
        tape.val(model.student.encode(bind, video, txt, a.viz_attn ? &record : nullptr));

    ConditionSet cond;
    cond.video_feat = feat.reshaped({feat.dim(0) * feat.dim(1), feat.dim(2)});
    cond.frame_rows = feature_frame_rows(model.cfg.video, video.dim(0), ds.config.audio_len);
    cond.text_ids = model.text.tokenize(caption);

    SamplerConfig sampler{a.steps, a.gamma};
    Rng rng(Rng::derive(a.seed, "cli.sample"));
    Tensor latent = model.gen.sample(model.text, cond, sampler, rng);

    fs::path prefix(a.out);
    if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
    save_tensor(prefix.string() + ".latent.slvt", latent);
    nlohmann::json side{{"build", kBuildId},
                        {"video", a.video},
                        {"text", a.text},
                        {"gamma", a.gamma},
                        {"steps", a.steps},
                        {"seed", a.seed},
                        {"use_ema", a.use_ema},
                        {"latent", prefix.string() + ".latent.slvt"},
                        {"data_manifest_hash", to_hex(ds.manifest_hash)},
                        {"train_run_hash",
                         to_hex(file_fingerprint(fs::path(a.ckpt) / "run_manifest.json"))}};
    if (a.viz_attn) {
        Tensor heat = attention_map(record, txt.eos_row());
        write_pgm(prefix.string() + ".attn.pgm",
                  heat.reshaped({ds.config.patch, ds.config.patch}));
        side["attention_map"] = prefix.string() + ".attn.pgm";
    }
    save_json(prefix.string() + ".json", side);
    std::cout << "latent: " << prefix.string() << ".latent.slvt\n";
    return 0;
}

int cmd_eval(const EvalArgs& a) {
    Dataset ds = load_dataset(a.data);

    EvalConfig cfg;
    cfg.sampler.steps = a.steps;
    cfg.sampler.gamma = a.gamma;
    cfg.use_ground_truth = a.use_ground_truth;
    cfg.seed = a.seed;
    cfg.jobs = a.jobs;

    fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());

    if (!a.sweep_sup.empty()) {
        TrainConfig s1, s2;
        s1.stage = 1;
        s1.steps = a.sweep_steps1;
        s1.seed = Rng::derive(a.seed, "sweep.stage1");
        s2.stage = 2;
        s2.steps = a.sweep_steps2;
        s2.seed = Rng::derive(a.seed, "sweep.stage2");
        std::vector<SweepPoint> points =
            run_sup_sweep(ds, ModelConfig{}, s1, s2, cfg, a.sweep_sup);
        for (const SweepPoint& p : points) {
            std::string err = validate_report(p.report);
            if (!err.empty())
                throw NumericError("sweep n_sup=" + std::to_string(p.n_sup) +
                                   ": report schema violation: " + err);
        }
        nlohmann::json doc{{"build", kBuildId},
                           {"data_manifest_hash", to_hex(ds.manifest_hash)},
                           {"seed", a.seed},
                           {"stage1_steps", a.sweep_steps1},
                           {"stage2_steps", a.sweep_steps2},
                           {"points", sweep_to_json(points)}};
        save_json(out, doc);
        std::cout << "n_sup  text_sim  desync_med  selection\n";
        for (const SweepPoint& p : points)
            std::cout << p.n_sup << "      " << p.text_sim << "   " << p.desync_median
                      << "   " << p.selection << "\n";
        std::cout << "sweep report: " << out.string() << "\n";
        return 0;
    }

    Model model;
    uint64_t train_run_hash = 0;
    if (!a.ckpt.empty()) {
        model = Model::load(fs::path(a.ckpt) / "checkpoint", ds.world, nullptr, a.use_ema);
        train_run_hash = file_fingerprint(fs::path(a.ckpt) / "run_manifest.json");
    } else if (a.use_ground_truth) {
        model = Model::init(ModelConfig{}, ds.world, Rng::derive(ds.seed, "model"));
    } else {
        throw UsageError("eval needs --ckpt unless --use-ground-truth is set");
    }

    nlohmann::json subsets = nlohmann::json::array();
    auto run_subset = [&](const std::vector<BenchmarkPair>& pairs, const std::string& name) {
        if (pairs.empty()) {
            std::cout << name << ": no pairs, skipped\n";
            return;
        }
        SubsetReport rep = run_benchmark(model, ds, pairs, ds.eval_scenes, name, cfg);
        nlohmann::json rj = report_to_json(rep);
        std::string err = validate_report(rj);
        if (!err.empty()) throw NumericError(name + ": report schema violation: " + err);
        subsets.push_back(rj);
        std::cout << name << ": selection " << rep.selection << ", desync median "
                  << rep.desync_median << ", FAD " << rep.fad << ", text_sim " << rep.text_sim
                  << "\n";
    };
    if (a.subset == "inter" || a.subset == "both") run_subset(ds.inter, "inter");
    if (a.subset == "intra" || a.subset == "both") run_subset(ds.intra, "intra");
    if (subsets.empty()) throw BenchmarkError("eval: no benchmark pairs in the selected subset");

    nlohmann::json doc{{"build", kBuildId},
                       {"gamma", a.gamma},
                       {"steps", a.steps},
                       {"seed", a.seed},
                       {"use_ground_truth", a.use_ground_truth},
                       {"use_ema", a.use_ema},
                       {"data_manifest_hash", to_hex(ds.manifest_hash)},
                       {"subsets", subsets}};
    if (train_run_hash != 0) doc["train_run_hash"] = to_hex(train_run_hash);
    save_json(out, doc);
    std::cout << "report: " << out.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"selective video-to-audio toy lab"};
    app.require_subcommand(1);
    app.set_config("--config", "", "key=value config file; command flags take precedence");

    GenWorldArgs gw;
    CLI::App* gen = app.add_subcommand("gen-world", "generate a world + dataset directory");
    gen->add_option("--out", gw.out, "output dataset directory")->required();
    CLI::Option* gw_seed = gen->add_option("--seed", gw.seed, "master seed");
    gen->add_option("--classes", gw.world.classes, "event classes");
    gen->add_option("--categories", gw.world.categories, "event categories");
    gen->add_option("--frames", gw.world.frames, "video frames per scene");
    gen->add_option("--patch", gw.world.patch, "patch grid side");
    gen->add_option("--d-patch", gw.world.d_patch, "channels per patch");
    gen->add_option("--audio-len", gw.world.audio_len, "audio latent timesteps");
    gen->add_option("--d-audio", gw.world.d_audio, "audio latent channels");
    gen->add_option("--video-noise", gw.world.video_noise, "video noise level");
    gen->add_option("--audio-noise", gw.world.audio_noise, "audio noise level");
    gen->add_option("--mix-alpha", gw.world.mix_alpha, "Beta(alpha, alpha) mix ratio");
    gen->add_option("--mix-clip", gw.world.mix_clip, "lower clip for the mix ratio");
    gen->add_option("--mix-prob", gw.world.mix_prob, "probability a sample is mixed");
    gen->add_option("--max-cos", gw.world.max_cos, "separation bound for class designs");
    gen->add_option("--train-scenes", gw.spec.train_scenes, "training scenes");
    gen->add_option("--eval-scenes", gw.spec.eval_scenes, "held-out scenes");
    gen->add_option("--quota", gw.spec.per_category_quota, "benchmark pairs per category");

    TrainArgs tr;
    CLI::App* train_cmd = app.add_subcommand("train", "run one training stage");
    train_cmd->add_option("--data", tr.data, "dataset directory")->required();
    train_cmd->add_option("--out", tr.out, "run output directory")->required();
    train_cmd->add_option("--stage", tr.stage, "training stage (1 or 2)")
        ->check(CLI::IsMember({1, 2}));
    train_cmd->add_flag("--joint-training", tr.joint,
                        "optimize both objectives at once, from scratch");
    train_cmd->add_option("--student-ckpt", tr.student_ckpt,
                          "stage-1 run directory (required for --stage 2)");
    train_cmd->add_option("--steps", tr.steps, "optimizer steps (0 saves the init)");
    train_cmd->add_option("--batch", tr.batch, "batch size");
    train_cmd->add_option("--lr", tr.lr, "base learning rate");
    train_cmd->add_option("--warmup", tr.warmup, "linear warmup steps");
    train_cmd->add_option("--sigma-rel", tr.sigma_rel, "EMA width relative to the run");
    train_cmd->add_option("--p-joint", tr.p_joint, "joint condition dropout");
    train_cmd->add_option("--p-text-extra", tr.p_text_extra, "extra text dropout");
    train_cmd->add_option("--n-sup", tr.n_sup, "supplementary text tokens");
    train_cmd->add_option("--d-ff", tr.d_ff, "transformer feed-forward width");
    CLI::Option* tr_seed = train_cmd->add_option("--seed", tr.seed, "training seed");

    SampleArgs sa;
    CLI::App* sample_cmd = app.add_subcommand("sample", "generate one audio latent");
    sample_cmd->add_option("--ckpt", sa.ckpt, "run directory with a checkpoint")->required();
    sample_cmd->add_option("--data", sa.data, "dataset directory (world geometry)")->required();
    sample_cmd->add_option("--video", sa.video, "video tensor (.slvt)")->required();
    sample_cmd->add_option("--text", sa.text, "caption tokens, e.g. \"class_07\"")->required();
    sample_cmd->add_option("--out", sa.out, "output prefix");
    sample_cmd->add_option("--gamma", sa.gamma, "guidance scale");
    sample_cmd->add_option("--steps", sa.steps, "Euler steps");
    sample_cmd->add_flag("--viz-attn", sa.viz_attn, "write the attention heatmap as PGM");
    sample_cmd->add_flag("--use-ema", sa.use_ema, "sample with EMA weights");
    CLI::Option* sa_seed = sample_cmd->add_option("--seed", sa.seed, "sampling seed");

    EvalArgs ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "score benchmarks or run the [SUP] sweep");
    eval_cmd->add_option("--ckpt", ev.ckpt, "run directory with a checkpoint");
    eval_cmd->add_option("--data", ev.data, "dataset directory")->required();
    eval_cmd->add_option("--out", ev.out, "report path");
    eval_cmd->add_option("--subset", ev.subset, "inter | intra | both")
        ->check(CLI::IsMember({"inter", "intra", "both"}));
    eval_cmd->add_option("--gamma", ev.gamma, "guidance scale");
    eval_cmd->add_option("--steps", ev.steps, "Euler steps");
    eval_cmd->add_flag("--use-ground-truth", ev.use_ground_truth,
                       "score the target latents themselves (oracle mode)");
    eval_cmd->add_flag("--use-ema", ev.use_ema, "evaluate EMA weights");
    eval_cmd->add_option("--jobs", ev.jobs, "benchmark scoring threads")
        ->check(CLI::PositiveNumber);
    eval_cmd->add_option("--sweep-sup", ev.sweep_sup,
                         "comma-separated supplementary-token counts to retrain and score")
        ->delimiter(',');
    eval_cmd->add_option("--sweep-steps1", ev.sweep_steps1, "stage-1 steps per sweep point");
    eval_cmd->add_option("--sweep-steps2", ev.sweep_steps2, "stage-2 steps per sweep point");
    CLI::Option* ev_seed = eval_cmd->add_option("--seed", ev.seed, "evaluation seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*gen) {
            gw.seed = resolve_seed(gw_seed, gw.seed);
            return cmd_gen_world(gw);
        }
        if (*train_cmd) {
            tr.seed = resolve_seed(tr_seed, tr.seed);
            return cmd_train(tr);
        }
        if (*sample_cmd) {
            sa.seed = resolve_seed(sa_seed, sa.seed);
            return cmd_sample(sa);
        }
        if (*eval_cmd) {
            ev.seed = resolve_seed(ev_seed, ev.seed);
            return cmd_eval(ev);
        }
    } catch (const UsageError& e) {
        std::cerr << "selva: " << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "selva: " << e.what() << "\n";
        return 2;
    } catch (const VocabError& e) {
        std::cerr << "selva: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "selva: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {  // numeric / shape / world / benchmark
        std::cerr << "selva: " << e.what() << "\n";
        return 4;
    }
    return 0;
}

#define DOCTEST_CONFIG_IMPLEMENT
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "selva/evaluator.hpp"

using namespace selva;
namespace fs = std::filesystem;

namespace {

std::string g_cli;  // path to the selva binary, from argv[1]

struct RunResult {
    int exit = -1;
    std::string output;
};

RunResult run(const std::string& args, const std::string& env = "") {
    static int counter = 0;
    fs::path cap = fs::temp_directory_path() / ("selva_cli_out_" + std::to_string(counter++));
    std::string cmd = env + (env.empty() ? "" : " ") + "\"" + g_cli + "\" " + args + " > " +
                      cap.string() + " 2>&1";
    int rc = std::system(cmd.c_str());
    RunResult r;
    r.exit = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    std::ifstream in(cap);
    std::stringstream ss;
    ss << in.rdbuf();
    r.output = ss.str();
    fs::remove(cap);
    return r;
}

// one world + two training runs, built once through the real binary
struct Fixture {
    fs::path root, data, data2, run1, run2, samples;
    RunResult gen, gen2, train1, train2, sample;

    Fixture() {
        root = fs::temp_directory_path() / "selva_cli_fixture";
        fs::remove_all(root);
        fs::create_directories(root);
        data = root / "data";
        data2 = root / "data_again";
        run1 = root / "run1";
        run2 = root / "run2";
        samples = root / "samples";

        std::string world_flags =
            " --seed 7 --classes 8 --categories 4 --frames 32 --audio-len 32"
            " --train-scenes 10 --eval-scenes 8 --quota 9";
        gen = run("gen-world --out " + data.string() + world_flags);
        gen2 = run("gen-world --out " + data2.string() + world_flags);

        train1 = run("train --data " + data.string() + " --out " + run1.string() +
                     " --stage 1 --steps 8 --batch 2 --warmup 2 --n-sup 2 --d-ff 32 --seed 11");
        train2 = run("train --data " + data.string() + " --out " + run2.string() +
                     " --stage 2 --student-ckpt " + run1.string() +
                     " --steps 8 --batch 2 --warmup 2 --seed 12");

        sample = run("sample --ckpt " + run2.string() + " --data " + data.string() +
                     " --video " + (data / "scenes" / "eval_0000.video.slvt").string() +
                     " --text class_00 --out " + (samples / "samp").string() +
                     " --viz-attn --steps 3 --seed 5");
    }
    ~Fixture() { fs::remove_all(root); }
};

const Fixture& fix() {
    static Fixture f;
    return f;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc > 1 && argv[1][0] != '-') g_cli = argv[1];
    std::vector<char*> args{argv[0]};
    for (int i = 2; i < argc; ++i) args.push_back(argv[i]);
    doctest::Context ctx(int(args.size()), args.data());
    return ctx.run();
}

TEST_CASE("bad invocations exit with the usage code") {
    REQUIRE_FALSE(g_cli.empty());
    CHECK(run("").exit == 2);                    // a subcommand is required
    CHECK(run("--help").exit == 0);
    CHECK(run("gen-world --help").exit == 0);
    CHECK(run("gen-world --bogus 1 --out /tmp/x").exit == 2);
    CHECK(run("train --data /tmp/nowhere").exit == 2);  // --out missing
    CHECK(run("train --data /tmp/a --out /tmp/b --stage 3").exit == 2);
    CHECK(run("eval --data /tmp/a --subset sideways").exit == 2);
    CHECK(run("eval --data /tmp/a --jobs 0").exit == 2);
}

TEST_CASE("gen-world builds a dataset and repeats itself byte for byte") {
    const Fixture& f = fix();
    REQUIRE_MESSAGE(f.gen.exit == 0, f.gen.output);
    REQUIRE_MESSAGE(f.gen2.exit == 0, f.gen2.output);
    CHECK(f.gen.output.find("manifest hash:") != std::string::npos);
    CHECK(f.gen.output.find("8 classes / 4 categories") != std::string::npos);

    CHECK(fs::exists(f.data / "manifest.json"));
    CHECK(fs::exists(f.data / "scenes.jsonl"));
    CHECK(fs::exists(f.data / "scenes" / "train_0000.video.slvt"));
    CHECK(dir_fingerprint(f.data) == dir_fingerprint(f.data2));

    Dataset ds = load_dataset(f.data);
    CHECK(ds.train_scenes.size() == 10);
    CHECK(ds.eval_scenes.size() == 8);
    CHECK(ds.inter.size() == 36);  // quota 9 x 4 categories
    CHECK(ds.intra.size() == 36);
}

TEST_CASE("a config file can hold world parameters") {
    const Fixture& f = fix();
    fs::path ini = f.root / "world.ini";
    {
        std::ofstream out(ini);
        out << "[gen-world]\n"
               "classes=8\ncategories=4\nframes=32\naudio-len=32\n"
               "train-scenes=4\neval-scenes=4\nquota=1\n";
    }
    fs::path dir = f.root / "data_from_config";
    RunResult r = run("--config " + ini.string() + " gen-world --seed 7 --out " + dir.string());
    REQUIRE_MESSAGE(r.exit == 0, r.output);
    Dataset ds = load_dataset(dir);
    CHECK(ds.config.classes == 8);
    CHECK(ds.config.frames == 32);
    CHECK(ds.train_scenes.size() == 4);
    // quota 1 per category, bounded by which categories the tiny pool drew
    CHECK(ds.inter.size() >= 1);
    CHECK(ds.inter.size() <= 4);
}

TEST_CASE("training runs chain their manifests by hash") {
    const Fixture& f = fix();
    REQUIRE_MESSAGE(f.train1.exit == 0, f.train1.output);
    REQUIRE_MESSAGE(f.train2.exit == 0, f.train2.output);
    CHECK(f.train1.output.find("mode: stage1") != std::string::npos);
    CHECK(f.train2.output.find("mode: stage2") != std::string::npos);

    for (const fs::path& run_dir : {f.run1, f.run2}) {
        CHECK(fs::exists(run_dir / "checkpoint" / "manifest.json"));
        CHECK(fs::exists(run_dir / "run_manifest.json"));
        CHECK(fs::exists(run_dir / "losses.csv"));
        CHECK(fs::exists(run_dir / "vocab.txt"));
    }

    nlohmann::json m1 = load_json(f.run1 / "run_manifest.json");
    nlohmann::json m2 = load_json(f.run2 / "run_manifest.json");
    std::string data_hash = to_hex(file_fingerprint(f.data / "manifest.json"));
    CHECK(m1.at("mode") == "stage1");
    CHECK(m1.at("data_manifest_hash") == data_hash);
    CHECK_FALSE(m1.contains("student_run_hash"));
    CHECK(m1.at("steps") == 8);
    CHECK(m1.at("model_config").at("n_sup") == 2);

    CHECK(m2.at("mode") == "stage2");
    CHECK(m2.at("data_manifest_hash") == data_hash);
    CHECK(m2.at("student_run_hash") == to_hex(file_fingerprint(f.run1 / "run_manifest.json")));

    // only the stage-2 run carries EMA shadows
    CHECK(fs::exists(f.run2 / "checkpoint" / "tensors" / "ema.gen.video_proj_w.slvt"));
    CHECK_FALSE(fs::exists(f.run1 / "checkpoint" / "tensors" / "ema.gen.video_proj_w.slvt"));
}

TEST_CASE("train failure modes map to distinct exit codes") {
    const Fixture& f = fix();
    fs::path out = f.root / "run_reject";
    RunResult no_student = run("train --data " + f.data.string() + " --out " + out.string() +
                               " --stage 2 --steps 1");
    CHECK(no_student.exit == 2);
    CHECK(no_student.output.find("student-ckpt") != std::string::npos);

    RunResult no_data = run("train --data " + (f.root / "missing").string() + " --out " +
                            out.string() + " --steps 1");
    CHECK(no_data.exit == 3);
}

TEST_CASE("sample writes a latent, a sidecar, and an attention heatmap") {
    const Fixture& f = fix();
    REQUIRE_MESSAGE(f.sample.exit == 0, f.sample.output);
    fs::path prefix = f.samples / "samp";

    Tensor latent = load_tensor(prefix.string() + ".latent.slvt");
    CHECK(latent.shape() == std::vector<int>{32, 8});
    CHECK(latent.finite());

    nlohmann::json side = load_json(prefix.string() + ".json");
    CHECK(side.at("text") == "class_00");
    CHECK(side.at("steps") == 3);
    CHECK(side.at("seed") == 5);
    CHECK(side.at("data_manifest_hash") == to_hex(file_fingerprint(f.data / "manifest.json")));
    CHECK(side.at("train_run_hash") ==
          to_hex(file_fingerprint(f.run2 / "run_manifest.json")));
    CHECK(side.at("attention_map") == prefix.string() + ".attn.pgm");

    std::ifstream pgm(prefix.string() + ".attn.pgm", std::ios::binary);
    std::string header(10, '\0');
    pgm.read(header.data(), 10);
    CHECK(header == "P5\n8 8\n255");  // then "\n" + 64 payload bytes

    // same seed, same bytes; different seed, different latent
    fs::path again = f.samples / "again";
    RunResult r2 = run("sample --ckpt " + f.run2.string() + " --data " + f.data.string() +
                       " --video " + (f.data / "scenes" / "eval_0000.video.slvt").string() +
                       " --text class_00 --out " + again.string() + " --steps 3 --seed 5");
    REQUIRE_MESSAGE(r2.exit == 0, r2.output);
    CHECK(file_fingerprint(again.string() + ".latent.slvt") ==
          file_fingerprint(prefix.string() + ".latent.slvt"));

    fs::path moved = f.samples / "moved";
    RunResult r3 = run("sample --ckpt " + f.run2.string() + " --data " + f.data.string() +
                       " --video " + (f.data / "scenes" / "eval_0000.video.slvt").string() +
                       " --text class_00 --out " + moved.string() + " --steps 3 --seed 6");
    REQUIRE_MESSAGE(r3.exit == 0, r3.output);
    CHECK(file_fingerprint(moved.string() + ".latent.slvt") !=
          file_fingerprint(prefix.string() + ".latent.slvt"));
}

TEST_CASE("sample guards its inputs") {
    const Fixture& f = fix();
    std::string base = "sample --data " + f.data.string() + " --video " +
                       (f.data / "scenes" / "eval_0000.video.slvt").string() +
                       " --out " + (f.root / "g").string();

    // the stage-1 run has no EMA shadows to sample from
    CHECK(run(base + " --ckpt " + f.run1.string() + " --text class_00 --use-ema").exit == 2);
    // a blank caption cannot be tokenized
    CHECK(run(base + " --ckpt " + f.run2.string() + " --text \"\"").exit == 2);
    // an unknown token is a vocabulary error
    CHECK(run(base + " --ckpt " + f.run2.string() + " --text class_99").exit == 2);
    // a missing video tensor is an io error
    CHECK(run("sample --ckpt " + f.run2.string() + " --data " + f.data.string() +
              " --video " + (f.root / "absent.slvt").string() + " --text class_00 --out " +
              (f.root / "g2").string())
              .exit == 3);
}

TEST_CASE("oracle eval is reproducible and carries the data hash") {
    const Fixture& f = fix();
    fs::path rep1 = f.root / "eval_oracle.json";
    fs::path rep2 = f.root / "eval_oracle_again.json";
    std::string base = "eval --data " + f.data.string() + " --use-ground-truth --subset both ";
    RunResult r1 = run(base + "--out " + rep1.string());
    REQUIRE_MESSAGE(r1.exit == 0, r1.output);
    CHECK(r1.output.find("inter: selection 1") != std::string::npos);

    nlohmann::json doc = load_json(rep1);
    CHECK(doc.at("use_ground_truth") == true);
    CHECK(doc.at("data_manifest_hash") == to_hex(file_fingerprint(f.data / "manifest.json")));
    CHECK_FALSE(doc.contains("train_run_hash"));
    REQUIRE(doc.at("subsets").size() == 2);
    for (const auto& sub : doc.at("subsets")) {
        CHECK(validate_report(sub) == "");
        CHECK(sub.at("selection_accuracy") == 1.0);
        CHECK(sub.at("desync_median") == 0.0);
    }

    RunResult r2 = run(base + "--out " + rep2.string());
    REQUIRE_MESSAGE(r2.exit == 0, r2.output);
    CHECK(file_fingerprint(rep1) == file_fingerprint(rep2));
}

TEST_CASE("model eval records the training run it scored") {
    const Fixture& f = fix();
    fs::path rep = f.root / "eval_model.json";
    RunResult r = run("eval --data " + f.data.string() + " --ckpt " + f.run2.string() +
                      " --subset inter --steps 2 --gamma 1 --jobs 2 --out " + rep.string());
    REQUIRE_MESSAGE(r.exit == 0, r.output);

    nlohmann::json doc = load_json(rep);
    CHECK(doc.at("train_run_hash") == to_hex(file_fingerprint(f.run2 / "run_manifest.json")));
    CHECK(doc.at("gamma") == 1.0);
    REQUIRE(doc.at("subsets").size() == 1);
    CHECK(doc.at("subsets")[0].at("subset") == "inter");
    CHECK(validate_report(doc.at("subsets")[0]) == "");

    // ema weights are present on the stage-2 run, so this path works too
    RunResult ema = run("eval --data " + f.data.string() + " --ckpt " + f.run2.string() +
                        " --use-ema --subset inter --steps 2 --gamma 1 --out " +
                        (f.root / "eval_ema.json").string());
    REQUIRE_MESSAGE(ema.exit == 0, ema.output);

    // no checkpoint and no oracle flag: nothing to evaluate
    CHECK(run("eval --data " + f.data.string() + " --out " +
              (f.root / "eval_none.json").string())
              .exit == 2);
}

TEST_CASE("the sup sweep handles training and scoring per count") {
    const Fixture& f = fix();
    fs::path rep = f.root / "sweep.json";
    RunResult r = run("eval --data " + f.data.string() + " --sweep-sup 0,2 --sweep-steps1 3" +
                      " --sweep-steps2 3 --steps 2 --gamma 1 --out " + rep.string());
    REQUIRE_MESSAGE(r.exit == 0, r.output);
    CHECK(r.output.find("sweep report:") != std::string::npos);

    nlohmann::json doc = load_json(rep);
    CHECK(doc.at("stage1_steps") == 3);
    REQUIRE(doc.at("points").size() == 2);
    CHECK(doc.at("points")[0].at("n_sup") == 0);
    CHECK(doc.at("points")[1].at("n_sup") == 2);
    for (const auto& p : doc.at("points")) CHECK(validate_report(p.at("report")) == "");
}

TEST_CASE("the environment can pin the seed") {
    const Fixture& f = fix();
    std::string base = "sample --ckpt " + f.run2.string() + " --data " + f.data.string() +
                       " --video " + (f.data / "scenes" / "eval_0000.video.slvt").string() +
                       " --text class_00 --steps 2";

    fs::path from_env = f.root / "seed_env";
    fs::path from_flag = f.root / "seed_flag";
    fs::path flag_wins = f.root / "seed_flag_wins";
    RunResult re = run(base + " --out " + from_env.string(), "SELVA_LAB_SEED=5");
    RunResult rf = run(base + " --out " + from_flag.string() + " --seed 5");
    RunResult rw = run(base + " --out " + flag_wins.string() + " --seed 5", "SELVA_LAB_SEED=99");
    REQUIRE_MESSAGE(re.exit == 0, re.output);
    REQUIRE_MESSAGE(rf.exit == 0, rf.output);
    REQUIRE_MESSAGE(rw.exit == 0, rw.output);
    CHECK(file_fingerprint(from_env.string() + ".latent.slvt") ==
          file_fingerprint(from_flag.string() + ".latent.slvt"));
    CHECK(file_fingerprint(flag_wins.string() + ".latent.slvt") ==
          file_fingerprint(from_flag.string() + ".latent.slvt"));

    CHECK(run(base + " --out " + (f.root / "seed_bad").string(), "SELVA_LAB_SEED=banana").exit ==
          2);
}

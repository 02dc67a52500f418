#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "selva/video.hpp"

using namespace selva;

namespace {

WorldConfig tiny_world_config() {
    WorldConfig cfg;
    cfg.classes = 8;
    cfg.categories = 4;
    cfg.frames = 32;
    return cfg;
}

VideoEncoderConfig default_video_config() { return VideoEncoderConfig{}; }

}  // namespace

TEST_CASE("segment count formula") {
    CHECK(segment_count(200, 16, 8) == 24);
    CHECK(segment_count(64, 16, 8) == 7);
    CHECK(segment_count(16, 16, 8) == 1);
    CHECK(segment_count(32, 16, 8) == 3);
    CHECK_THROWS_AS(segment_count(8, 16, 8), ShapeError);
    CHECK_THROWS_AS(segment_count(64, 0, 8), ConfigError);
}

TEST_CASE("segmentation copies overlapping windows") {
    WorldConfig wc = tiny_world_config();
    World w = World::build(wc, 3);
    Scene s = w.make_scene(0, 10);
    SegmentedVideo seg = segment(s.video, 16, 8);
    CHECK(seg.segments() == 3);
    CHECK(seg.data.shape() == std::vector<int>{3, 16, wc.patch, wc.patch, wc.d_patch});
    const int64_t frame = int64_t(wc.patch) * wc.patch * wc.d_patch;
    for (int k = 0; k < 3; ++k)
        for (int f = 0; f < 16; ++f)
            for (int64_t q = 0; q < frame; q += 13) {
                int64_t seg_idx = (int64_t(k) * 16 + f) * frame + q;
                int64_t vid_idx = int64_t(k * 8 + f) * frame + q;
                CHECK(seg.data[seg_idx] == s.video[vid_idx]);
            }
    CHECK_THROWS_AS(segment(s.audio, 16, 8), ShapeError);
}

TEST_CASE("frame row map points at the latest covering slice") {
    VideoEncoderConfig cfg = default_video_config();
    const int frames = 64, t_audio = 64;
    std::vector<int> rows = feature_frame_rows(cfg, frames, t_audio);
    REQUIRE(int(rows.size()) == t_audio);
    int segments = segment_count(frames, cfg.window, cfg.hop);
    int sub = cfg.window / cfg.t_per_segment;
    for (int tau = 0; tau < t_audio; ++tau) {
        int f = int(int64_t(tau) * frames / t_audio);
        int s = rows[size_t(tau)] / cfg.t_per_segment;
        int j = rows[size_t(tau)] % cfg.t_per_segment;
        int start = s * cfg.hop + j * sub;
        CHECK(f >= start);
        CHECK(f < start + sub);
        // no later segment covers the frame
        for (int s2 = s + 1; s2 < segments; ++s2) {
            int off = f - s2 * cfg.hop;
            CHECK((off < 0 || off / sub >= cfg.t_per_segment));
        }
    }
    // non-square grids: audio twice as dense as frames stays in range
    std::vector<int> dense = feature_frame_rows(cfg, 32, 64);
    int last = segment_count(32, cfg.window, cfg.hop) * cfg.t_per_segment;
    for (int r : dense) {
        CHECK(r >= 0);
        CHECK(r < last);
    }
}

TEST_CASE("config validation") {
    VideoEncoderConfig cfg = default_video_config();
    cfg.t_per_segment = 5;  // does not divide window=16
    CHECK_THROWS_AS(TeacherEncoder(cfg, 8, 1), ConfigError);
    VideoEncoderConfig cfg2 = default_video_config();
    cfg2.heads = 5;  // does not divide d_model=32
    CHECK_THROWS_AS(StudentEncoder(cfg2, 4, 8, 8, 32, 1), ConfigError);
}

TEST_CASE("teacher encodes class identity plus slice envelope stats") {
    WorldConfig wc = tiny_world_config();
    VideoEncoderConfig cfg = default_video_config();
    TeacherEncoder teacher(cfg, wc.classes, 77);

    // synthetic ramp envelope makes slice stats easy to compute
    Scene s;
    s.class_id = 3;
    s.envelope = Tensor({32});
    for (int f = 0; f < 32; ++f) s.envelope[f] = f / 31.0;
    Tensor feat = teacher.encode(s);
    REQUIRE(feat.shape() == std::vector<int>{3, cfg.t_per_segment, cfg.d_model});

    const Tensor& table = teacher.params()[0]->value;
    const Tensor& proj = teacher.params()[1]->value;
    int sub = cfg.window / cfg.t_per_segment;
    auto expect = [&](int seg, int j, int out) {
        int start = seg * cfg.hop + j * sub;
        double mean = 0.0, mx = -1e300;
        for (int f = start; f < start + sub; ++f) {
            mean += s.envelope[f] / sub;
            mx = std::max(mx, s.envelope[f]);
        }
        double acc = 0.0;
        for (int i = 0; i < cfg.d_class; ++i) acc += table.at(s.class_id, i) * proj.at(i, out);
        acc += mean * proj.at(cfg.d_class, out);
        acc += mx * proj.at(cfg.d_class + 1, out);
        return acc;
    };
    for (int seg = 0; seg < 3; ++seg)
        for (int j = 0; j < cfg.t_per_segment; ++j)
            for (int o = 0; o < cfg.d_model; o += 7)
                CHECK(feat.at(seg, j, o) == doctest::Approx(expect(seg, j, o)).epsilon(1e-12));

    // same seed reproduces; class identity separates features
    TeacherEncoder again(cfg, wc.classes, 77);
    Tensor feat2 = again.encode(s);
    for (int64_t i = 0; i < feat.size(); ++i) CHECK(feat[i] == feat2[i]);
    Scene other = s;
    other.class_id = 4;
    CHECK(teacher.encode(other)[0] != feat[0]);

    Scene bad = s;
    bad.class_id = 99;
    CHECK_THROWS_AS(teacher.encode(bad), ConfigError);
}

TEST_CASE("frozen stack is deterministic and slice-local") {
    WorldConfig wc = tiny_world_config();
    VideoEncoderConfig cfg = default_video_config();
    World w = World::build(wc, 5);
    Scene s = w.make_scene(2, 20);

    StudentEncoder enc(cfg, wc.d_patch, wc.patch, wc.patch, 32, 99);
    Tensor tok = enc.frozen_tokens(s.video);
    const int S = 3, t = cfg.t_per_segment, P2 = wc.patch * wc.patch;
    REQUIRE(tok.shape() == std::vector<int>{S * t * P2, cfg.d_model});

    StudentEncoder twin(cfg, wc.d_patch, wc.patch, wc.patch, 32, 99);
    Tensor tok2 = twin.frozen_tokens(s.video);
    for (int64_t i = 0; i < tok.size(); ++i) CHECK(tok[i] == tok2[i]);

    // perturbing a frame inside slice [8, 12) touches only the segments
    // whose windows contain it (segments 0 and 1, not 2)
    Tensor bumped = s.video;
    bumped.at(9, 0, 0, 0) += 1.0;
    Tensor tok3 = enc.frozen_tokens(bumped);
    bool seg0_changed = false, seg1_changed = false;
    for (int64_t i = 0; i < int64_t(t) * P2 * cfg.d_model; ++i) {
        seg0_changed |= (tok3[i] != tok[i]);
        seg1_changed |= (tok3[int64_t(t) * P2 * cfg.d_model + i] != tok[int64_t(t) * P2 * cfg.d_model + i]);
        CHECK(tok3[2 * int64_t(t) * P2 * cfg.d_model + i] ==
              tok[2 * int64_t(t) * P2 * cfg.d_model + i]);
    }
    CHECK(seg0_changed);
    CHECK(seg1_changed);

    Tensor short_video({4, wc.patch, wc.patch, wc.d_patch});
    CHECK_THROWS_AS(enc.frozen_tokens(short_video), ShapeError);
}

TEST_CASE("student encode shapes, masks, and usage contracts") {
    WorldConfig wc = tiny_world_config();
    VideoEncoderConfig cfg = default_video_config();
    World w = World::build(wc, 7);
    Scene s = w.make_scene(1, 30);

    StudentEncoder enc(cfg, wc.d_patch, wc.patch, wc.patch, 32, 101);
    TextEncoder text({"class_00", "class_01"}, 32, 2, 55);

    Tape tape;
    Bindings bind(tape, kMaskStage1);
    TextSequence seq = text.prepend_sup(bind, text.encode(bind, s.caption));
    Var feat = enc.encode(bind, s.video, seq);
    REQUIRE(tape.val(feat).shape() == std::vector<int>{3, cfg.t_per_segment, cfg.d_model});

    // gradients reach exactly the trainable suffix
    tape.backward(sum_all(tape, feat));
    for (Parameter* p : enc.frozen_stack_params()) CHECK_FALSE(p->has_grad());
    int suffix_with_grad = 0, suffix_total = 0;
    for (Parameter* p : enc.params())
        if (p->stage == kStage1) {
            suffix_total++;
            suffix_with_grad += p->has_grad() ? 1 : 0;
        }
    CHECK(suffix_total == 13);
    CHECK(suffix_with_grad == suffix_total);
    for (Parameter* p : enc.params()) p->zero_grad();
    for (Parameter* p : text.params()) p->zero_grad();

    // un-prepped text is rejected
    Tape t2;
    Bindings b2(t2, 0u);
    TextSequence plain = text.encode(b2, s.caption);
    CHECK_THROWS_AS(enc.encode(b2, s.video, plain), UsageError);
}

TEST_CASE("batched encode matches single encodes") {
    WorldConfig wc = tiny_world_config();
    VideoEncoderConfig cfg = default_video_config();
    World w = World::build(wc, 9);
    Scene s1 = w.make_scene(0, 40);
    Scene s2 = w.make_scene(5, 41);

    StudentEncoder enc(cfg, wc.d_patch, wc.patch, wc.patch, 32, 103);
    TextEncoder text({"class_00", "class_05"}, 32, 1, 56);

    Tape tb;
    Bindings bb(tb, 0u);
    std::vector<TextSequence> texts{
        text.prepend_sup(bb, text.encode(bb, s1.caption)),
        text.prepend_sup(bb, text.encode(bb, s2.caption)),
    };
    std::vector<const Tensor*> videos{&s1.video, &s2.video};
    const Tensor& both = tb.val(enc.encode_batch(bb, videos, texts));
    const int st = 3 * cfg.t_per_segment;
    REQUIRE(both.shape() == std::vector<int>{2 * st, cfg.d_model});

    Tape ta;
    Bindings ba(ta, 0u);
    const Tensor& one =
        ta.val(enc.encode(ba, s1.video, text.prepend_sup(ba, text.encode(ba, s1.caption))));
    Tape tc;
    Bindings bc(tc, 0u);
    const Tensor& two =
        tc.val(enc.encode(bc, s2.video, text.prepend_sup(bc, text.encode(bc, s2.caption))));
    for (int r = 0; r < st; ++r)
        for (int c = 0; c < cfg.d_model; ++c) {
            CHECK(both.at(r, c) == doctest::Approx(one.at(r / cfg.t_per_segment,
                                                          r % cfg.t_per_segment, c))
                                       .epsilon(1e-12));
            CHECK(both.at(st + r, c) == doctest::Approx(two.at(r / cfg.t_per_segment,
                                                               r % cfg.t_per_segment, c))
                                            .epsilon(1e-12));
        }

    // batched texts must share a length
    Tape td;
    Bindings bd(td, 0u);
    std::vector<TextSequence> uneven{
        text.prepend_sup(bd, text.encode(bd, std::vector<std::string>{"class_00"})),
        text.prepend_sup(bd, text.encode(bd, std::vector<std::string>{"class_00", "class_05"})),
    };
    CHECK_THROWS_AS(enc.encode_batch(bd, videos, uneven), ShapeError);
    std::vector<const Tensor*> none;
    CHECK_THROWS_AS(enc.encode_batch(bd, none, {}), UsageError);
}

TEST_CASE("attention records carry simplex rows") {
    WorldConfig wc = tiny_world_config();
    VideoEncoderConfig cfg = default_video_config();
    World w = World::build(wc, 13);
    Scene s = w.make_scene(4, 50);

    StudentEncoder enc(cfg, wc.d_patch, wc.patch, wc.patch, 32, 107);
    TextEncoder text({"class_04"}, 32, 2, 57);

    Tape tape;
    Bindings bind(tape, 0u);
    TextSequence seq = text.prepend_sup(bind, text.encode(bind, s.caption));
    AttentionRecord rec;
    enc.encode(bind, s.video, seq, &rec);

    const int P2 = wc.patch * wc.patch;
    REQUIRE(rec.cross.shape() == std::vector<int>{cfg.heads, 3 * cfg.t_per_segment * P2,
                                                  seq.length()});
    REQUIRE(rec.pool.shape() == std::vector<int>{cfg.heads, P2});
    CHECK(rec.segments == 3);
    CHECK(rec.n_spatial == P2);
    for (int h = 0; h < cfg.heads; ++h) {
        for (int r = 0; r < rec.cross.dim(1); r += 97) {
            double sum = 0.0;
            for (int c = 0; c < rec.cross.dim(2); ++c) sum += rec.cross.at(h, r, c);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
        double pool_sum = 0.0;
        for (int p = 0; p < P2; ++p) {
            CHECK(rec.pool.at(h, p) >= 0.0);
            pool_sum += rec.pool.at(h, p);
        }
        CHECK(pool_sum == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("attention heat map normalizes to the maximum") {
    AttentionRecord rec;
    rec.segments = 2;
    rec.t_per_segment = 2;
    rec.n_spatial = 4;
    rec.cross = Tensor::full({2, 16, 3}, 1.0 / 3.0);  // uniform over text rows
    rec.pool = Tensor::full({2, 4}, 0.25);            // uniform over positions
    Tensor heat = attention_map(rec, 2);
    REQUIRE(heat.shape() == std::vector<int>{4});
    for (int p = 0; p < 4; ++p) CHECK(heat[p] == doctest::Approx(1.0).epsilon(1e-12));

    // a dominant position wins after normalization
    rec.pool.at(0, 1) = 10.0;
    Tensor peaked = attention_map(rec, 2);
    CHECK(peaked[1] == doctest::Approx(1.0));
    CHECK(peaked[0] < 1.0);

    CHECK_THROWS_AS(attention_map(rec, 5), UsageError);
    rec.n_spatial = 3;
    CHECK_THROWS_AS(attention_map(rec, 2), ShapeError);
}

TEST_CASE("pgm export writes the binary header and payload") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "selva_test_map.pgm";
    Tensor map01({2, 3}, {0.0, 0.5, 1.0, 2.0, -1.0, 0.25});
    write_pgm(path, map01);

    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string bytes = buf.str();
    const std::string header = "P5\n3 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 6);
    CHECK(bytes.compare(0, header.size(), header) == 0);
    const unsigned char* px =
        reinterpret_cast<const unsigned char*>(bytes.data() + header.size());
    CHECK(px[0] == 0);
    CHECK(px[1] == 128);  // lround(0.5 * 255)
    CHECK(px[2] == 255);
    CHECK(px[3] == 255);  // clamped above
    CHECK(px[4] == 0);    // clamped below
    CHECK(px[5] == 64);
    CHECK_THROWS_AS(write_pgm(path, Tensor({4})), ShapeError);
    fs::remove(path);
}

TEST_CASE("distillation objective is the mean squared gap") {
    Tape tape;
    Tensor teacher({2, 2}, {1.0, 2.0, 3.0, 4.0});
    Var same = tape.constant(teacher);
    CHECK(tape.val(distill_loss(tape, same, teacher))[0] == 0.0);

    Var student = tape.constant(Tensor({2, 2}, {2.0, 2.0, 3.0, 1.0}));
    CHECK(tape.val(distill_loss(tape, student, teacher))[0] ==
          doctest::Approx((1.0 + 0.0 + 0.0 + 9.0) / 4.0));

    // shape-compatible reshapes are tolerated, count mismatches are not
    Var flat = tape.constant(teacher.reshaped({4}));
    CHECK(tape.val(distill_loss(tape, flat, teacher))[0] == 0.0);
    CHECK_THROWS_AS(distill_loss(tape, student, Tensor({2, 3})), ShapeError);
}

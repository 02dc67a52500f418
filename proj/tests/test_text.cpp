#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "selva/text.hpp"

using namespace selva;

namespace {

std::vector<std::string> tokens3() { return {"class_00", "class_01", "class_02"}; }

}  // namespace

TEST_CASE("vocabulary layout and lookups") {
    TextEncoder enc(tokens3(), 16, 2, 7);
    CHECK(enc.vocab_size() == 5);  // classes + [eos] + [pad]
    CHECK(enc.d_text() == 16);
    CHECK(enc.n_sup() == 2);
    CHECK(enc.id_of("class_01") == 1);
    CHECK(enc.token_of(enc.eos_id()) == "[eos]");
    CHECK(enc.token_of(enc.pad_id()) == "[pad]");
    CHECK(enc.eos_id() != enc.pad_id());
    CHECK_THROWS_AS(enc.id_of("class_99"), VocabError);
    CHECK_THROWS_AS(enc.token_of(99), VocabError);

    std::vector<int> ids = enc.tokenize({"class_02", "class_00"});
    REQUIRE(ids.size() == 3);
    CHECK(ids[0] == 2);
    CHECK(ids[1] == 0);
    CHECK(ids[2] == enc.eos_id());
    CHECK_THROWS_AS(enc.tokenize({"bogus"}), VocabError);
}

TEST_CASE("encode produces projected rows with eos appended") {
    TextEncoder enc(tokens3(), 16, 2, 7);
    Tape tape;
    Bindings bind(tape, 0u);

    TextSequence seq = enc.encode(bind, std::vector<std::string>{"class_01"});
    CHECK_FALSE(seq.has_sup);
    CHECK(seq.n_sup == 0);
    REQUIRE(seq.ids.size() == 2);  // token + [eos]
    CHECK(seq.ids.back() == enc.eos_id());
    CHECK(tape.val(seq.emb).shape() == std::vector<int>{2, 16});
    CHECK(seq.eos_row() == 1);

    // pre-tokenized path with explicit eos is not doubled
    TextSequence seq2 = enc.encode(bind, std::vector<int>{1, enc.eos_id()});
    CHECK(tape.val(seq2.emb).dim(0) == 2);
    const Tensor &a = tape.val(seq.emb), &b = tape.val(seq2.emb);
    for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    // an empty caption degrades to the bare [eos] row
    TextSequence bare = enc.encode(bind, std::vector<int>{});
    CHECK(bare.length() == 1);
    CHECK(bare.ids[0] == enc.eos_id());
    CHECK_THROWS_AS(enc.encode(bind, std::vector<int>{99}), VocabError);
}

TEST_CASE("sup rows are prepended verbatim from the bank") {
    TextEncoder enc(tokens3(), 16, 2, 7);
    Tape tape;
    Bindings bind(tape, 0u);

    TextSequence base = enc.encode(bind, std::vector<std::string>{"class_00"});
    TextSequence with = enc.prepend_sup(bind, base);
    CHECK(with.has_sup);
    CHECK(with.n_sup == 2);
    CHECK(with.length() == 4);
    CHECK(with.eos_row() == 3);
    const Tensor& emb = tape.val(with.emb);
    REQUIRE(emb.shape() == std::vector<int>{4, 16});
    // suffix rows unchanged
    const Tensor& plain = tape.val(base.emb);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 16; ++c) CHECK(emb.at(r + 2, c) == plain.at(r, c));

    // double application is rejected
    CHECK_THROWS_AS(enc.prepend_sup(bind, with), UsageError);

    // a zero-token bank marks the sequence but adds no rows
    TextEncoder none(tokens3(), 16, 0, 7);
    TextSequence same = none.prepend_sup(bind, none.encode(bind, std::vector<std::string>{"class_00"}));
    CHECK(same.has_sup);
    CHECK(same.n_sup == 0);
    CHECK(same.length() == 2);
}

TEST_CASE("seeding is reproducible and stage tags are set") {
    TextEncoder a(tokens3(), 16, 2, 7);
    TextEncoder b(tokens3(), 16, 2, 7);
    TextEncoder c(tokens3(), 16, 2, 8);

    Tape ta, tb, tc;
    Bindings ba(ta, 0u), bb(tb, 0u), bc(tc, 0u);
    const Tensor& ea = ta.val(a.encode(ba, std::vector<std::string>{"class_02"}).emb);
    const Tensor& eb = tb.val(b.encode(bb, std::vector<std::string>{"class_02"}).emb);
    const Tensor& ec = tc.val(c.encode(bc, std::vector<std::string>{"class_02"}).emb);
    for (int64_t i = 0; i < ea.size(); ++i) CHECK(ea[i] == eb[i]);
    bool differs = false;
    for (int64_t i = 0; i < ea.size(); ++i) differs |= (ea[i] != ec[i]);
    CHECK(differs);

    int frozen = 0, stage1 = 0;
    for (Parameter* p : a.params()) {
        if (p->stage == kFrozen) frozen++;
        if (p->stage == kStage1) stage1++;
        CHECK_FALSE(p->name.empty());
    }
    CHECK(frozen == 1);   // embedding table stands in for the language model
    CHECK(stage1 == 3);   // projection w/b and the sup bank
}

TEST_CASE("trainable mask controls gradient flow") {
    TextEncoder enc(tokens3(), 8, 1, 7);

    Tape t1;
    Bindings train(t1, kMaskStage1);
    TextSequence seq = enc.prepend_sup(train, enc.encode(train, std::vector<std::string>{"class_00"}));
    t1.backward(sum_all(t1, seq.emb));
    int with_grad = 0;
    for (Parameter* p : enc.params()) with_grad += p->has_grad() ? 1 : 0;
    CHECK(with_grad == 3);
    for (Parameter* p : enc.params()) p->zero_grad();

    Tape t2;
    Bindings frozen(t2, 0u);
    TextSequence seq2 = enc.prepend_sup(frozen, enc.encode(frozen, std::vector<std::string>{"class_00"}));
    t2.backward(sum_all(t2, seq2.emb));
    for (Parameter* p : enc.params()) CHECK_FALSE(p->has_grad());
}

TEST_CASE("vocab file lists one token per line") {
    namespace fs = std::filesystem;
    fs::path path = fs::temp_directory_path() / "selva_vocab_test.txt";
    TextEncoder enc(tokens3(), 8, 1, 7);
    enc.write_vocab(path);

    std::ifstream in(path);
    REQUIRE(bool(in));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    REQUIRE(int(lines.size()) == enc.vocab_size());
    for (int i = 0; i < enc.vocab_size(); ++i) CHECK(lines[size_t(i)] == enc.token_of(i));
    fs::remove(path);
}

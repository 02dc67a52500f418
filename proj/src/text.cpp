#include "selva/text.hpp"

#include <fstream>

namespace selva {

TextEncoder::TextEncoder(const std::vector<std::string>& class_tokens, int d_text, int n_sup,
                         uint64_t seed)
    : d_text_(d_text), n_sup_(n_sup) {
    if (d_text <= 0) throw ConfigError("d_text must be positive");
    if (n_sup < 0) throw ConfigError("[SUP] count must be non-negative");
    tokens_ = class_tokens;
    eos_id_ = int(tokens_.size());
    tokens_.push_back("[eos]");
    pad_id_ = int(tokens_.size());
    tokens_.push_back("[pad]");

    Rng rng = Rng(seed).stream("text");
    Rng emb_rng = rng.stream("embedding");
    embedding_ = Parameter("text.embedding",
                           init::normal(emb_rng, {int(tokens_.size()), d_text}, 1.0), kFrozen);
    Rng proj_rng = rng.stream("proj");
    proj_w_ = Parameter("text.proj_w", init::xavier(proj_rng, d_text, d_text), kStage1);
    proj_b_ = Parameter("text.proj_b", init::zeros({d_text}), kStage1);
    if (n_sup > 0) {
        Rng sup_rng = rng.stream("sup");
        sup_ = Parameter("text.sup", init::normal(sup_rng, {n_sup, d_text}, 1.0), kStage1);
    } else {
        sup_ = Parameter("text.sup", Tensor(), kStage1);
    }
}

int TextEncoder::id_of(const std::string& token) const {
    for (int i = 0; i < int(tokens_.size()); ++i)
        if (tokens_[size_t(i)] == token) return i;
    throw VocabError("unknown token '" + token + "'");
}

const std::string& TextEncoder::token_of(int id) const {
    if (id < 0 || id >= int(tokens_.size()))
        throw VocabError("token id " + std::to_string(id) + " out of range");
    return tokens_[size_t(id)];
}

std::vector<int> TextEncoder::tokenize(const std::vector<std::string>& caption) const {
    std::vector<int> ids;
    ids.reserve(caption.size() + 1);
    for (const auto& tok : caption) ids.push_back(id_of(tok));
    ids.push_back(eos_id_);
    return ids;
}

TextSequence TextEncoder::encode(Bindings& bind, const std::vector<int>& ids) {
    std::vector<int> full = ids;
    if (full.empty() || full.back() != eos_id_) full.push_back(eos_id_);
    for (int id : full)
        if (id < 0 || id >= vocab_size())
            throw VocabError("token id " + std::to_string(id) + " out of range");
    Tape& t = bind.tape();
    Var rows = gather_rows(t, bind(embedding_), full);
    Var proj = affine(t, rows, bind(proj_w_), bind(proj_b_));
    TextSequence seq;
    seq.ids = std::move(full);
    seq.emb = proj;
    return seq;
}

TextSequence TextEncoder::encode(Bindings& bind, const std::vector<std::string>& caption) {
    std::vector<int> ids;
    for (const auto& tok : caption) ids.push_back(id_of(tok));
    return encode(bind, ids);
}

TextSequence TextEncoder::prepend_sup(Bindings& bind, const TextSequence& seq) {
    if (seq.has_sup) throw UsageError("[SUP] tokens already prepended");
    TextSequence out = seq;
    out.has_sup = true;
    out.n_sup = n_sup_;
    if (n_sup_ > 0)
        out.emb = concat_rows(bind.tape(), bind(sup_), seq.emb);
    return out;
}

std::vector<Parameter*> TextEncoder::params() {
    std::vector<Parameter*> out{&embedding_, &proj_w_, &proj_b_};
    if (n_sup_ > 0) out.push_back(&sup_);
    return out;
}

void TextEncoder::write_vocab(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    for (const auto& tok : tokens_) os << tok << "\n";
    if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace selva

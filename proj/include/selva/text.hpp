#pragma once
#include <filesystem>
#include <string>
#include <vector>

#include "selva/params.hpp"

namespace selva {

// Token ids plus their embedded rows on a tape. `emb` covers the optional
// [SUP] prefix followed by one row per id; the last id is always [eos].
struct TextSequence {
    std::vector<int> ids;
    Var emb;  // [n_sup + ids.size(), d_text]
    bool has_sup = false;
    int n_sup = 0;

    int length() const { return n_sup + int(ids.size()); }
    int eos_row() const { return length() - 1; }
};

// Toy caption encoder: per-class tokens plus [eos]/[pad], a frozen embedding
// table standing in for a pretrained language model, a trainable linear
// projection, and the trainable [SUP] bank that gets prepended for the
// video-encoder path.
class TextEncoder {
  public:
    TextEncoder() = default;
    TextEncoder(const std::vector<std::string>& class_tokens, int d_text, int n_sup,
                uint64_t seed);

    int d_text() const { return d_text_; }
    int n_sup() const { return n_sup_; }
    int vocab_size() const { return int(tokens_.size()); }
    int eos_id() const { return eos_id_; }
    int pad_id() const { return pad_id_; }

    int id_of(const std::string& token) const;  // VocabError on unknown tokens
    const std::string& token_of(int id) const;

    // Token ids for a caption, with [eos] appended.
    std::vector<int> tokenize(const std::vector<std::string>& caption) const;

    // Embedding lookup + learned projection; appends [eos] if missing.
    TextSequence encode(Bindings& bind, const std::vector<int>& ids);
    TextSequence encode(Bindings& bind, const std::vector<std::string>& caption);

    // Eq.-3 prepend: rows [0, n_sup) come verbatim from the [SUP] bank.
    TextSequence prepend_sup(Bindings& bind, const TextSequence& seq);

    std::vector<Parameter*> params();
    void write_vocab(const std::filesystem::path& path) const;

  private:
    int d_text_ = 0;
    int n_sup_ = 0;
    int eos_id_ = 0;
    int pad_id_ = 0;
    std::vector<std::string> tokens_;
    Parameter embedding_;  // [vocab, d_text], frozen
    Parameter proj_w_;     // [d_text, d_text], stage 1
    Parameter proj_b_;     // [d_text], stage 1
    Parameter sup_;        // [n_sup, d_text], stage 1 (absent rows when n_sup == 0)
};

}  // namespace selva

#pragma once
#include <string>
#include <unordered_map>
#include <vector>

#include "selva/rng.hpp"
#include "selva/tensor.hpp"

namespace selva {

// Training stage attribution. Stage 1 trains the selective conditioning path
// (distillation); stage 2 trains the generator-side adaptation. Stage 0
// parameters are fixed at initialization and never receive gradients.
enum StageTag : int { kFrozen = 0, kStage1 = 1, kStage2 = 2 };

struct Parameter {
    std::string name;
    Tensor value;
    std::vector<double> grad;  // populated by the tape sink when trained
    int stage = kFrozen;

    Parameter() = default;
    Parameter(std::string n, Tensor v, int s)
        : name(std::move(n)), value(std::move(v)), stage(s) {}

    void zero_grad() { grad.clear(); }
    bool has_grad() const { return !grad.empty(); }
};

inline unsigned stage_mask_for(int stage) { return 1u << unsigned(stage); }
inline constexpr unsigned kMaskStage1 = 1u << 1;
inline constexpr unsigned kMaskStage2 = 1u << 2;
inline constexpr unsigned kMaskJoint = kMaskStage1 | kMaskStage2;

// Binds parameters onto a tape for one forward/backward pass. Parameters
// whose stage bit is in the mask become tracked leaves with their grad
// vector as sink; everything else enters as a constant, so excluded
// parameters stay exactly untouched rather than accumulating ~0 updates.
class Bindings {
  public:
    Bindings(Tape& tape, unsigned trainable_mask) : tape_(&tape), mask_(trainable_mask) {}

    Var operator()(Parameter& p) {
        auto it = cache_.find(&p);
        if (it != cache_.end()) return it->second;
        bool train = (mask_ & stage_mask_for(p.stage)) != 0;
        Var v = train ? tape_->leaf(p.value, &p.grad) : tape_->constant(p.value);
        cache_.emplace(&p, v);
        return v;
    }

    // Pre-seed the binding for one parameter; gradient checks use this to
    // route a probe leaf through an otherwise frozen slot.
    void substitute(const Parameter& p, Var v) { cache_[&p] = v; }

    Tape& tape() { return *tape_; }
    unsigned mask() const { return mask_; }

  private:
    Tape* tape_;
    unsigned mask_;
    std::unordered_map<const Parameter*, Var> cache_;
};

namespace init {

inline Tensor normal(Rng& rng, std::vector<int> shape, double sd) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = sd * rng.normal();
    return t;
}

// Xavier/Glorot normal for an [in, out] projection.
inline Tensor xavier(Rng& rng, int in, int out) {
    return normal(rng, {in, out}, std::sqrt(2.0 / double(in + out)));
}

inline Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

}  // namespace init

}  // namespace selva

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "focalcomm/tensor.hpp"

namespace focalcomm {

/// A named learnable tensor with an accumulated gradient of the same shape.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string name_, Tensor value_);

    void zero_grad();
};

/// Reverse-mode differentiation tape.
///
/// While a tape is active (see TapeScope), every primitive op whose inputs are
/// tracked records a backward closure. Running backward() visits the recorded
/// ops in reverse order — which is reverse topological order, since each op is
/// recorded after its inputs exist — exactly once, and accumulates d(loss)/d(p)
/// into every watched Parameter's grad.
///
/// A tape is confined to one execution context; concurrent scenes must each own
/// their own tape.
class Tape {
public:
    Tape();
    ~Tape();

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers a parameter as a differentiable leaf of this tape.
    void watch(Parameter& p);

    /// Seeds d(loss)/d(loss) = 1 and propagates. Rejects non-scalar losses.
    void backward(const Tensor& loss);

    /// Currently active tape for this thread, or nullptr.
    static Tape* active();

    // -- Interface used by the op implementations. --
    int node_of(const Tensor& t) const;
    int make_node(Tensor& out);
    void record(std::function<void(Tape&)> backward_fn);
    std::vector<double>& grad(int node);
    const std::vector<int>& node_shape(int node) const;

private:
    struct Slot {
        std::vector<int> shape;
        std::vector<double> grad;
    };

    std::uint64_t epoch_;
    std::vector<Slot> slots_;
    std::vector<std::function<void(Tape&)>> ops_;
    std::vector<Parameter*> watched_;
    std::vector<int> watched_nodes_;
};

/// RAII guard that makes a tape active on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();

    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Runs backward on the active tape. Requires the loss to have been produced
/// under that tape.
void backward(const Tensor& loss);

}  // namespace focalcomm

#include "focalcomm/tape.hpp"

#include <atomic>
#include <stdexcept>

namespace focalcomm {

namespace {
std::atomic<std::uint64_t> g_epoch_counter{1};
thread_local Tape* g_active_tape = nullptr;
}  // namespace

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(Tensor::zeros(value.shape())) {}

void Parameter::zero_grad() { grad.fill(0.0); }

Tape::Tape() : epoch_(g_epoch_counter.fetch_add(1)) {}

Tape::~Tape() = default;

Tape* Tape::active() { return g_active_tape; }

void Tape::watch(Parameter& p) {
    if (p.value.tape_epoch_ == epoch_ && p.value.tape_node_ >= 0) {
        return;  // already watched on this tape
    }
    const int node = make_node(p.value);
    watched_.push_back(&p);
    watched_nodes_.push_back(node);
}

int Tape::node_of(const Tensor& t) const {
    if (t.tape_epoch_ == epoch_ && t.tape_node_ >= 0) return t.tape_node_;
    return -1;
}

int Tape::make_node(Tensor& out) {
    const int node = static_cast<int>(slots_.size());
    slots_.push_back(Slot{out.shape(), std::vector<double>(static_cast<std::size_t>(out.size()), 0.0)});
    out.tape_epoch_ = epoch_;
    out.tape_node_ = node;
    return node;
}

void Tape::record(std::function<void(Tape&)> backward_fn) { ops_.push_back(std::move(backward_fn)); }

std::vector<double>& Tape::grad(int node) { return slots_[static_cast<std::size_t>(node)].grad; }

const std::vector<int>& Tape::node_shape(int node) const { return slots_[static_cast<std::size_t>(node)].shape; }

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + loss.shape_str());
    }
    const int loss_node = node_of(loss);
    if (loss_node < 0) {
        throw std::invalid_argument("backward: loss was not produced under this tape");
    }
    grad(loss_node)[0] = 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
        (*it)(*this);
    }
    for (std::size_t i = 0; i < watched_.size(); ++i) {
        Parameter& p = *watched_[i];
        const std::vector<double>& g = grad(watched_nodes_[i]);
        for (std::size_t j = 0; j < g.size(); ++j) {
            p.grad[static_cast<std::int64_t>(j)] += g[j];
        }
    }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) {
        throw std::invalid_argument("backward: no active tape");
    }
    tape->backward(loss);
}

}  // namespace focalcomm

#pragma once

// Reverse-mode autodiff over a per-thread computation record.
//
// Ops append one node per produced tensor while a RecordGuard is active and
// at least one input requires grad. Nodes are stored in execution order,
// which is already topological, so backward() walks them once in reverse.
// Gradients accumulate additively, so tensors used several times collect the
// sum of their contributions.

#include <functional>
#include <memory>
#include <unordered_map>

#include "tensor.hpp"

namespace maxglavit {

struct OpNode {
    const char* op;
    std::vector<std::shared_ptr<TensorData>> inputs;
    std::shared_ptr<TensorData> output;
    std::function<void()> backward;
};

class ComputationRecord {
public:
    void append(OpNode node) { nodes_.push_back(std::move(node)); }
    size_t size() const { return nodes_.size(); }
    const OpNode& node(size_t i) const { return nodes_.at(i); }

private:
    std::vector<OpNode> nodes_;
};

inline ComputationRecord*& active_record() {
    static thread_local ComputationRecord* active = nullptr;
    return active;
}

// Self-test hook: while set, backward contributions of the named op are
// scaled by 1.5 so gradient checking can demonstrate a detected fault.
inline const char*& debug_backward_fault_op() {
    static thread_local const char* fault = nullptr;
    return fault;
}

class RecordGuard {
public:
    RecordGuard() : prev_(active_record()) { active_record() = &record_; }
    ~RecordGuard() { active_record() = prev_; }
    RecordGuard(const RecordGuard&) = delete;
    RecordGuard& operator=(const RecordGuard&) = delete;
    ComputationRecord& record() { return record_; }

private:
    ComputationRecord record_;
    ComputationRecord* prev_;
};

inline bool recording(std::initializer_list<Tensor> inputs) {
    if (!active_record()) return false;
    for (const Tensor& t : inputs)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

inline void record_op(const char* op, std::initializer_list<Tensor> inputs, Tensor& out,
                      std::function<void()> backward) {
    if (!recording(inputs)) return;
    OpNode node;
    node.op = op;
    for (const Tensor& t : inputs)
        if (t.defined()) node.inputs.push_back(t.impl());
    node.output = out.impl();
    node.backward = std::move(backward);
    out.set_requires_grad(true);
    active_record()->append(std::move(node));
}

namespace detail {

template <class T>
void scale_grad(TensorData& d, double factor) {
    auto& g = grad_storage_of<T>(d);
    for (T& v : g) v = T(double(v) * factor);
}

inline void run_node_backward(const OpNode& node) {
    const char* fault = debug_backward_fault_op();
    bool inject = fault && std::string(fault) == node.op;
    std::vector<float> saved_f32;
    std::vector<double> saved_f64;
    if (inject) {
        saved_f32 = node.output->grad_f32;
        saved_f64 = node.output->grad_f64;
        dispatch_dtype(node.output->dtype,
                       [&](auto tag) { scale_grad<decltype(tag)>(*node.output, 1.5); });
    }
    node.backward();
    if (inject) {
        node.output->grad_f32 = std::move(saved_f32);
        node.output->grad_f64 = std::move(saved_f64);
    }
}

}  // namespace detail

// Seeds d(loss)/d(loss) = 1 and propagates through every recorded node that
// lies between the loss and the leaves.
inline void backward(const Tensor& loss) {
    check(loss.defined(), "backward: undefined tensor");
    check(loss.numel() == 1,
          "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    ComputationRecord* rec = active_record();
    check(rec != nullptr, "backward: no active ComputationRecord (use RecordGuard)");

    std::unordered_map<const TensorData*, size_t> producer;
    producer.reserve(rec->size());
    for (size_t i = 0; i < rec->size(); ++i) producer[rec->node(i).output.get()] = i;

    auto it = producer.find(loss.impl().get());
    check(it != producer.end(),
          "backward: loss is not reachable through the active ComputationRecord");
    size_t loss_idx = it->second;

    std::vector<bool> needed(rec->size(), false);
    std::unordered_map<const TensorData*, bool> wanted;
    wanted[loss.impl().get()] = true;
    for (size_t i = loss_idx + 1; i-- > 0;) {
        const OpNode& node = rec->node(i);
        if (!wanted.count(node.output.get())) continue;
        needed[i] = true;
        for (const auto& in : node.inputs) wanted[in.get()] = true;
    }

    Tensor l = Tensor::wrap(loss.impl());
    dispatch_dtype(l.dtype(), [&](auto tag) {
        using T = decltype(tag);
        l.grad_data<T>()[0] += T(1);
    });

    for (size_t i = loss_idx + 1; i-- > 0;) {
        if (!needed[i]) continue;
        const OpNode& node = rec->node(i);
        if (!node.output->grad_allocated) continue;
        detail::run_node_backward(node);
    }
}

}  // namespace maxglavit

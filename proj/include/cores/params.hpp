#pragma once

// Central parameter registry. Every model tensor lives here under a unique
// name with a frozen flag; modules hold ParamId handles. A ParamBinding
// exposes parameters to one Graph as leaves (trainable ones with gradients)
// and collects per-parameter gradients back out in registration order, which
// fixes the accumulation order across a batch.

#include "cores/errors.hpp"
#include "cores/graph.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace cores {

struct ParamId {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

class ParamStore {
  public:
    ParamId add(const std::string& name, Tensor init, bool frozen) {
        if (by_name_.count(name)) throw ConfigError("parameter '" + name + "' registered twice");
        Entry e;
        e.name = name;
        e.value = std::move(init);
        e.frozen = frozen;
        by_name_[name] = static_cast<int>(entries_.size());
        entries_.push_back(std::move(e));
        return ParamId{static_cast<int>(entries_.size()) - 1};
    }

    int count() const { return static_cast<int>(entries_.size()); }

    const std::string& name(int i) const { return entries_.at(static_cast<std::size_t>(i)).name; }
    bool frozen(int i) const { return entries_.at(static_cast<std::size_t>(i)).frozen; }
    bool frozen(ParamId id) const { return frozen(id.idx); }

    Tensor& value(int i) { return entries_.at(static_cast<std::size_t>(i)).value; }
    const Tensor& value(int i) const { return entries_.at(static_cast<std::size_t>(i)).value; }
    Tensor& value(ParamId id) { return value(id.idx); }
    const Tensor& value(ParamId id) const { return value(id.idx); }

    ParamId find(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ConfigError("unknown parameter '" + name + "'");
        return ParamId{it->second};
    }

    int trainable_count() const {
        int n = 0;
        for (const Entry& e : entries_)
            if (!e.frozen) ++n;
        return n;
    }

    std::int64_t trainable_scalars() const {
        std::int64_t n = 0;
        for (const Entry& e : entries_)
            if (!e.frozen) n += e.value.size();
        return n;
    }

  private:
    struct Entry {
        std::string name;
        Tensor value;
        bool frozen = false;
    };

    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> by_name_;
};

// One forward pass's view of the store. Leaves are created lazily and cached
// so a parameter used twice in a graph maps to a single node (gradients from
// all uses accumulate there).
class ParamBinding {
  public:
    ParamBinding(Graph& g, const ParamStore& store, bool train)
        : g_(g), store_(store), train_(train), bound_(static_cast<std::size_t>(store.count())) {}

    Var operator[](ParamId id) {
        Var& slot = bound_.at(static_cast<std::size_t>(id.idx));
        if (!slot.valid()) slot = g_.leaf(store_.value(id), train_ && !store_.frozen(id));
        return slot;
    }

    bool train_mode() const { return train_; }
    const ParamStore& store() const { return store_; }

    // acc[i] += scale * grad(param i) for every bound trainable parameter, in
    // registration order. acc must hold one tensor per store entry.
    void add_grads_into(std::vector<Tensor>& acc, Scalar scale) const {
        if (static_cast<int>(acc.size()) != store_.count()) throw std::invalid_argument("gradient accumulator size mismatch");
        for (int i = 0; i < store_.count(); ++i) {
            const Var v = bound_[static_cast<std::size_t>(i)];
            if (!v.valid() || store_.frozen(i) || !g_.requires_grad(v)) continue;
            const Tensor& gsrc = const_cast<Graph&>(g_).grad(v);
            Tensor& dst = acc[static_cast<std::size_t>(i)];
            if (dst.size() == 0) dst = Tensor(store_.value(i).shape);
            for (std::int64_t k = 0; k < gsrc.size(); ++k) dst.data[k] += scale * gsrc.data[k];
        }
    }

    // L2 norm of the gradient sitting on a single parameter in this graph;
    // exactly zero when the parameter is frozen or unused.
    Scalar grad_norm(ParamId id) const {
        const Var v = bound_.at(static_cast<std::size_t>(id.idx));
        if (!v.valid() || !const_cast<Graph&>(g_).requires_grad(v)) return 0.0;
        return const_cast<Graph&>(g_).grad(v).norm2();
    }

  private:
    Graph& g_;
    const ParamStore& store_;
    bool train_;
    std::vector<Var> bound_;
};

} // namespace cores

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace bat {

// Multiply-accumulate and elementwise-op tallies, grouped by the section
// stack active at the time of the call. Matmul-like work lands in `macs`,
// everything else (softmax, interpolation, pooling, pointwise) in `ops`.
// Reported "FLOPs" follow the 2-flops-per-MAC convention: 2*macs + ops.
struct CostEntry {
    uint64_t macs = 0;
    uint64_t ops = 0;
    uint64_t flops() const { return 2 * macs + ops; }
};

class CostAccumulator {
public:
    void push_section(const std::string& name) { stack_.push_back(name); }
    void pop_section() { stack_.pop_back(); }

    void add_macs(const std::string& kind, uint64_t macs) {
        by_kind_[kind].macs += macs;
        total_.macs += macs;
        for (const auto& s : stack_) by_section_[s].macs += macs;
    }
    void add_ops(const std::string& kind, uint64_t ops) {
        by_kind_[kind].ops += ops;
        total_.ops += ops;
        for (const auto& s : stack_) by_section_[s].ops += ops;
    }

    const CostEntry& total() const { return total_; }
    const std::map<std::string, CostEntry>& by_kind() const { return by_kind_; }
    const std::map<std::string, CostEntry>& by_section() const { return by_section_; }
    CostEntry section(const std::string& name) const {
        auto it = by_section_.find(name);
        return it == by_section_.end() ? CostEntry{} : it->second;
    }

private:
    CostEntry total_;
    std::map<std::string, CostEntry> by_kind_;
    std::map<std::string, CostEntry> by_section_;
    std::vector<std::string> stack_;
};

inline CostAccumulator*& cost_hook() {
    static CostAccumulator* hook = nullptr;
    return hook;
}

// Enables cost counting for the accumulator's lifetime.
class CostScope {
public:
    explicit CostScope(CostAccumulator& acc) : prev_(cost_hook()) { cost_hook() = &acc; }
    ~CostScope() { cost_hook() = prev_; }

private:
    CostAccumulator* prev_;
};

class CostSection {
public:
    CostSection(const std::string& name) {
        if (cost_hook()) {
            cost_hook()->push_section(name);
            active_ = true;
        }
    }
    ~CostSection() {
        if (active_) cost_hook()->pop_section();
    }

private:
    bool active_ = false;
};

}  // namespace bat

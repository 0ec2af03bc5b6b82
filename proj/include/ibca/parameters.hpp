#pragma once

#include "ibca/autograd.hpp"

#include <map>
#include <string>

namespace ibca {

/// Named trainable tensors. Ordered by name so iteration (checkpoints,
/// optimizer state, gradient checks) is deterministic.
using ParameterMap = std::map<std::string, Matrix>;

/// Parameters placed on a tape for one forward/backward pass.
class BoundParameters {
public:
    BoundParameters(Tape& tape, const ParameterMap& params, bool trainable);

    Var operator[](const std::string& name) const;
    bool contains(const std::string& name) const { return vars_.count(name) != 0; }
    const std::map<std::string, Var>& vars() const { return vars_; }

    /// Gradients of every bound tensor after Tape::backward; zeros where unused.
    ParameterMap gradients() const;

private:
    std::map<std::string, Var> vars_;
};

std::size_t parameter_count(const ParameterMap& params);

}  // namespace ibca

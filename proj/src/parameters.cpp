#include "ibca/parameters.hpp"

#include "ibca/errors.hpp"

namespace ibca {

BoundParameters::BoundParameters(Tape& tape, const ParameterMap& params, bool trainable) {
    for (const auto& [name, value] : params) {
        vars_.emplace(name, trainable ? tape.parameter(value) : tape.constant(value));
    }
}

Var BoundParameters::operator[](const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ConfigError("missing parameter tensor '" + name + "'");
    return it->second;
}

ParameterMap BoundParameters::gradients() const {
    ParameterMap out;
    for (const auto& [name, var] : vars_) {
        const Matrix& g = var.grad();
        out.emplace(name, g.size() != 0 ? g : Matrix::Zero(var.rows(), var.cols()));
    }
    return out;
}

std::size_t parameter_count(const ParameterMap& params) {
    std::size_t n = 0;
    for (const auto& [name, value] : params) n += static_cast<std::size_t>(value.size());
    return n;
}

}  // namespace ibca

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "distembed/error.hpp"
#include "distembed/tensor.hpp"

namespace distembed::detail {

// Builds an op result. History is recorded only when grad mode is on and at
// least one input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::function<void(Node&)> backward_fn);

void require(bool condition, ErrorKind kind, const std::string& message);

// For every element of `out`, the linear index of the element of `in` it
// reads under trailing-dimension broadcasting.
std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in);

}  // namespace distembed::detail

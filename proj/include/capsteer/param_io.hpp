#pragma once

// Helpers shared by the model checkpoint adapters: locate a tensor by name
// in a loaded container and rebuild a parameter leaf from it.

#include <string>
#include <utility>
#include <vector>

#include "capsteer/checkpoint.hpp"
#include "capsteer/errors.hpp"
#include "capsteer/tensor.hpp"

namespace capsteer::detail {

template <class S>
Tensor<S> param_from_named(const NamedTensor& nt, const std::string& path) {
  if (nt.dims.size() != 2) {
    throw FormatError(path + ": tensor '" + nt.name + "' must be rank 2");
  }
  Mat<S> m(static_cast<Eigen::Index>(nt.dims[0]),
           static_cast<Eigen::Index>(nt.dims[1]));
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      m(r, c) = static_cast<S>(nt.data[i++]);
    }
  }
  return Tensor<S>::param(std::move(m));
}

inline const NamedTensor& find_named(const std::vector<NamedTensor>& ts,
                                     const std::string& name,
                                     const std::string& path) {
  for (const auto& t : ts) {
    if (t.name == name) return t;
  }
  throw FormatError(path + ": missing tensor '" + name + "'");
}

}  // namespace capsteer::detail

#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "roadenkf/error.hpp"
#include "roadenkf/ops.hpp"

namespace roadenkf {

// Helpers over any parameter struct exposing visit(prefix, f(name, Var&)).
// The flat layout concatenates every tensor's doubles in visit order.

template <class P>
std::size_t param_count(P& p) {
  std::size_t n = 0;
  p.visit("", [&](const std::string&, ad::Var& v) { n += v.value().size(); });
  return n;
}

template <class P>
ad::Tensor flatten_params(P& p) {
  ad::Tensor flat({param_count(p)});
  std::size_t off = 0;
  p.visit("", [&](const std::string&, ad::Var& v) {
    std::copy(v.value().data().begin(), v.value().data().end(), flat.raw() + off);
    off += v.value().size();
  });
  return flat;
}

/// Rebinds every parameter as a differentiable slice of `flat`.
template <class P>
void bind_params(P& p, const ad::Var& flat) {
  if (flat.value().size() != param_count(p)) throw DimensionError("flat parameter vector has the wrong length");
  std::size_t off = 0;
  p.visit("", [&](const std::string&, ad::Var& v) {
    const std::size_t n = v.value().size();
    v = ad::segment(flat, off, v.shape(), v.kind());
    off += n;
  });
}

/// Replaces parameter values with constants read from `flat`.
template <class P>
void assign_params(P& p, const ad::Tensor& flat) {
  if (flat.size() != param_count(p)) throw DimensionError("flat parameter vector has the wrong length");
  std::size_t off = 0;
  p.visit("", [&](const std::string&, ad::Var& v) {
    const std::size_t n = v.value().size();
    ad::Tensor t(v.shape(), v.kind());
    std::copy(flat.raw() + off, flat.raw() + off + n, t.raw());
    v = ad::Var(std::move(t));
    off += n;
  });
}

template <class P>
std::vector<std::string> param_names(P& p) {
  std::vector<std::string> names;
  p.visit("", [&](const std::string& name, ad::Var&) { names.push_back(name); });
  return names;
}

}  // namespace roadenkf

#pragma once

// Reference computations written from the metric definitions, kept apart
// from the library so the two can disagree.

#include <array>
#include <cmath>
#include <set>
#include <utility>

#include "elnet/maskio.hpp"

namespace oracle {

using elnet::maskio::Mask;
using Cells = std::set<std::pair<std::size_t, std::size_t>>;

inline Cells cells(const Mask& m, int value = 1) {
  Cells s;
  for (std::size_t y = 0; y < m.height(); ++y)
    for (std::size_t x = 0; x < m.width(); ++x)
      if (m.at(y, x) == value) s.insert({y, x});
  return s;
}

inline std::size_t intersection(const Cells& a, const Cells& b) {
  std::size_t n = 0;
  for (const auto& c : a) n += b.count(c);
  return n;
}

inline std::size_t union_size(const Cells& a, const Cells& b) { return a.size() + b.size() - intersection(a, b); }

// Two empty sets agree perfectly.
inline double iou(const Mask& a, const Mask& b) {
  const auto A = cells(a), B = cells(b);
  const auto u = union_size(A, B);
  return u == 0 ? 1.0 : double(intersection(A, B)) / double(u);
}

inline double dice(const Mask& a, const Mask& b) {
  const auto A = cells(a), B = cells(b);
  const auto s = A.size() + B.size();
  return s == 0 ? 1.0 : 2.0 * double(intersection(A, B)) / double(s);
}

inline double accuracy(const Mask& p, const Mask& g) {
  std::size_t ok = 0;
  for (std::size_t y = 0; y < p.height(); ++y)
    for (std::size_t x = 0; x < p.width(); ++x) ok += p.at(y, x) == g.at(y, x);
  return double(ok) / double(p.height() * p.width());
}

// Mean over the two classes of |pred=c and gt=c| / |pred=c or gt=c|.
inline double miou(const Mask& p, const Mask& g) {
  double total = 0;
  for (int c : {0, 1}) {
    const auto P = cells(p, c), G = cells(g, c);
    const auto u = union_size(P, G);
    total += u == 0 ? 1.0 : double(intersection(P, G)) / double(u);
  }
  return total / 2;
}

// Closed form of the pixel RMSE for binary votes: a unanimous pixel
// contributes 0, a 2-1 split contributes sqrt(2)/3.
inline double pixel_rmse_closed_form(const std::array<Mask, 3>& m) {
  std::size_t split = 0;
  for (std::size_t i = 0; i < m[0].size(); ++i) {
    const int s = m[0][i] + m[1][i] + m[2][i];
    split += (s == 1 || s == 2);
  }
  return std::sqrt(2.0) / 3.0 * double(split) / double(m[0].size());
}

}  // namespace oracle

// IRNN recurrent translation along the four principal directions.
//
// For the right direction one round computes, for each row i,
//   h[i][0] = max(x[i][0], 0)
//   h[i][j] = max(alpha * h[i][j-1] + x[i][j], 0)
// where alpha mixes channels (C x C). The other directions mirror or
// transpose the recurrence. Pixels outside the image contribute zero.
#pragma once

#include <array>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string_view>
#include <vector>

#include "dsc/tape.hpp"
#include "dsc/tensor.hpp"

namespace dsc {

/// Canonical direction order, shared with the attention-map split.
enum class Direction { left = 0, down = 1, right = 2, up = 3 };

inline constexpr std::array<Direction, 4> kDirections = {Direction::left, Direction::down,
                                                         Direction::right, Direction::up};

constexpr std::string_view direction_name(Direction d) {
  switch (d) {
    case Direction::left: return "left";
    case Direction::down: return "down";
    case Direction::right: return "right";
    case Direction::up: return "up";
  }
  return "?";
}

/// Recurrent weights, one (C, C, 1, 1) matrix per direction in canonical order.
template <typename T>
struct ScanParams {
  std::array<Tensor<T>, 4> alpha;

  static ScanParams identity(std::size_t channels) {
    ScanParams p;
    for (auto& a : p.alpha) a = identity_matrix(channels);
    return p;
  }

  static Tensor<T> identity_matrix(std::size_t channels) {
    Tensor<T> m({channels, channels, 1, 1});
    for (std::size_t c = 0; c < channels; ++c) m.at(c, c, 0, 0) = T(1);
    return m;
  }
};

namespace kernels {

/// Pixels of one scan line are base + k * step within a channel plane.
struct ScanGeometry {
  std::size_t lines = 0;
  std::size_t length = 0;
  std::ptrdiff_t step = 0;
  std::size_t width = 0;
  std::size_t height = 0;
  Direction dir = Direction::right;

  [[nodiscard]] std::ptrdiff_t base(std::size_t line) const {
    const auto l = static_cast<std::ptrdiff_t>(line);
    const auto W = static_cast<std::ptrdiff_t>(width);
    const auto H = static_cast<std::ptrdiff_t>(height);
    switch (dir) {
      case Direction::right: return l * W;
      case Direction::left: return l * W + W - 1;
      case Direction::down: return l;
      case Direction::up: return (H - 1) * W + l;
    }
    return 0;
  }
};

inline ScanGeometry scan_geometry(Direction dir, std::size_t height, std::size_t width) {
  ScanGeometry g;
  g.dir = dir;
  g.width = width;
  g.height = height;
  const auto W = static_cast<std::ptrdiff_t>(width);
  switch (dir) {
    case Direction::right: g.lines = height; g.length = width; g.step = 1; break;
    case Direction::left: g.lines = height; g.length = width; g.step = -1; break;
    case Direction::down: g.lines = width; g.length = height; g.step = W; break;
    case Direction::up: g.lines = width; g.length = height; g.step = -W; break;
  }
  return g;
}

inline void check_scan_shapes(const Shape& x, const Shape& alpha) {
  if (alpha.n != x.c || alpha.c != x.c || alpha.h != 1 || alpha.w != 1) {
    throw ConfigError("irnn scan: alpha " + alpha.str() + " must be " + std::to_string(x.c) +
                      "x" + std::to_string(x.c) + " for input " + x.str());
  }
}

/// `margin`, when given, receives min |pre-activation| over the sweep.
template <typename T>
Tensor<T> scan_forward(const Tensor<T>& x, const Tensor<T>& alpha, Direction dir,
                       double* margin = nullptr) {
  const Shape& s = x.shape();
  check_scan_shapes(s, alpha.shape());
  const ScanGeometry geo = scan_geometry(dir, s.h, s.w);
  const std::size_t C = s.c;
  const std::size_t P = s.plane();
  const T* a = alpha.data().data();
  Tensor<T> h(s);
  std::vector<double> line_margin(margin != nullptr ? geo.lines : 0,
                                  std::numeric_limits<double>::infinity());
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* xn = x.plane(n, 0);
    T* hn = h.plane(n, 0);
    parallel_for(0, geo.lines, [&](std::size_t line) {
      std::ptrdiff_t pos = geo.base(line);
      auto note = [&](T z) {
        if (margin != nullptr) {
          line_margin[line] = std::min(line_margin[line], std::abs(static_cast<double>(z)));
        }
      };
      for (std::size_t c = 0; c < C; ++c) {
        const T v = xn[c * P + pos];
        note(v);
        hn[c * P + pos] = v > T(0) ? v : T(0);
      }
      for (std::size_t k = 1; k < geo.length; ++k) {
        const std::ptrdiff_t prev = pos;
        pos += geo.step;
        for (std::size_t c = 0; c < C; ++c) {
          T acc = 0;
          for (std::size_t d = 0; d < C; ++d) acc += a[c * C + d] * hn[d * P + prev];
          const T z = acc + xn[c * P + pos];
          note(z);
          hn[c * P + pos] = z > T(0) ? z : T(0);
        }
      }
    }, geo.length * C * C);
  }
  for (double m : line_margin) *margin = std::min(*margin, m);
  return h;
}

/// Reverse sweep. `h` is the forward output; accumulates into gx and galpha.
template <typename T>
void scan_backward(const Tensor<T>& h, const Tensor<T>& alpha, Direction dir, const Tensor<T>& gout,
                   Tensor<T>* gx, Tensor<T>* galpha) {
  const Shape& s = h.shape();
  const ScanGeometry geo = scan_geometry(dir, s.h, s.w);
  const std::size_t C = s.c;
  const std::size_t P = s.plane();
  const T* a = alpha.data().data();
  std::vector<T> carry(C), dz(C);
  for (std::size_t n = 0; n < s.n; ++n) {
    const T* hn = h.plane(n, 0);
    const T* gn = gout.plane(n, 0);
    for (std::size_t line = 0; line < geo.lines; ++line) {
      std::fill(carry.begin(), carry.end(), T(0));
      std::ptrdiff_t pos = geo.base(line) + static_cast<std::ptrdiff_t>(geo.length - 1) * geo.step;
      for (std::size_t k = geo.length; k-- > 0;) {
        for (std::size_t c = 0; c < C; ++c) {
          dz[c] = hn[c * P + pos] > T(0) ? gn[c * P + pos] + carry[c] : T(0);
        }
        if (gx != nullptr) {
          T* gxn = gx->plane(n, 0);
          for (std::size_t c = 0; c < C; ++c) gxn[c * P + pos] += dz[c];
        }
        if (k == 0) break;
        const std::ptrdiff_t prev = pos - geo.step;
        if (galpha != nullptr) {
          T* ga = galpha->data().data();
          for (std::size_t c = 0; c < C; ++c) {
            if (dz[c] == T(0)) continue;
            for (std::size_t d = 0; d < C; ++d) ga[c * C + d] += dz[c] * hn[d * P + prev];
          }
        }
        for (std::size_t d = 0; d < C; ++d) {
          T acc = 0;
          for (std::size_t c = 0; c < C; ++c) acc += a[c * C + d] * dz[c];
          carry[d] = acc;
        }
        pos = prev;
      }
    }
  }
}

}  // namespace kernels

template <typename T>
Tensor<T> scan(const Tensor<T>& x, const Tensor<T>& alpha, Direction dir) {
  return kernels::scan_forward(x, alpha, dir);
}

/// Outputs in canonical order (left, down, right, up).
template <typename T>
std::array<Tensor<T>, 4> scan_all_directions(const Tensor<T>& x, const ScanParams<T>& p) {
  std::array<Tensor<T>, 4> out;
  for (Direction d : kDirections) {
    out[static_cast<std::size_t>(d)] = kernels::scan_forward(x, p.alpha[static_cast<std::size_t>(d)], d);
  }
  return out;
}

template <typename T>
Var scan(Tape<T>& tape, Var x, Var alpha, Direction dir) {
  double margin = std::numeric_limits<double>::infinity();
  Tensor<T> h = kernels::scan_forward(tape.value(x), tape.value(alpha), dir,
                                      tape.tracks_margin() ? &margin : nullptr);
  if (tape.tracks_margin()) {
    tape.note_margin(margin);
    for (T v : h.data()) tape.note_branch(v > T(0));
  }
  auto saved = std::make_shared<Tensor<T>>(h);
  const bool tracks = tape.tracks_grad(x) || tape.tracks_grad(alpha);
  return tape.record("irnn_scan", std::move(h), tracks,
                     [&tape, x, alpha, dir, saved](const Tensor<T>& g) {
                       kernels::scan_backward(*saved, tape.value(alpha), dir, g,
                                              tape.tracks_grad(x) ? &tape.grad(x) : nullptr,
                                              tape.tracks_grad(alpha) ? &tape.grad(alpha) : nullptr);
                     });
}

template <typename T>
std::array<Var, 4> scan_all_directions(Tape<T>& tape, Var x, const std::array<Var, 4>& alphas) {
  std::array<Var, 4> out;
  for (Direction d : kDirections) {
    const auto i = static_cast<std::size_t>(d);
    out[i] = scan(tape, x, alphas[i], d);
  }
  return out;
}

}  // namespace dsc

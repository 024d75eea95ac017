#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mareid/autograd.hpp"
#include "mareid/rng.hpp"

namespace mareid::test {

using ag::Var;

inline std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng, 0.0, scale);
  return v;
}

inline Var random_param(Rng& rng, ag::Shape shape, double scale = 1.0) {
  return Var::parameter(shape, random_values(rng, ag::numel(shape), scale));
}

inline Var random_const(Rng& rng, ag::Shape shape, double scale = 1.0) {
  return Var::constant(shape, random_values(rng, ag::numel(shape), scale));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Largest relative error between backprop and central differences of a
// scalar function over every entry of `x`.
inline double fd_check(Var x, const std::function<Var()>& f, double h = 1e-6) {
  x.mutable_grad();
  for (double& g : x.mutable_grad()) g = 0.0;
  ag::backward(f());
  std::vector<double> analytic(x.grad().begin(), x.grad().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    double& xi = x.mutable_value()[i];
    const double keep = xi;
    xi = keep + h;
    double up = f().item();
    xi = keep - h;
    double down = f().item();
    xi = keep;
    double num = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic[i] - num) / std::max({std::abs(analytic[i]), std::abs(num), 1e-6}));
  }
  return worst;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("mareid_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace mareid::test

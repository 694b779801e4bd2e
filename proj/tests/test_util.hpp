#pragma once

#include <filesystem>
#include <string>

#include "textless/random.hpp"
#include "textless/tensor.hpp"

namespace textless::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  t.set_requires_grad(grad);
  return t;
}

/// Fresh scratch directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("textless_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace textless::testing

#pragma once

#include <cstdint>
#include <vector>

namespace ntq {

// A batch of token ids, row-major [rows x cols].
struct TokenMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<int> ids;

  TokenMatrix() = default;
  TokenMatrix(int r, int c) : rows(r), cols(c), ids(static_cast<size_t>(r) * c, 0) {}

  int& at(int r, int c) { return ids[static_cast<size_t>(r) * cols + c]; }
  int at(int r, int c) const { return ids[static_cast<size_t>(r) * cols + c]; }
};

}  // namespace ntq

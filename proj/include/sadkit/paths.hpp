#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace sadkit {

/// Distillation path P_ij: block `from` mimics the attention of block `to`.
/// Blocks are numbered 1..M.
struct DistillPath {
  int from = 0;
  int to = 0;

  friend bool operator==(const DistillPath&, const DistillPath&) = default;
};

using PathSet = std::vector<DistillPath>;

class PathError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Number of distinct forward paths (i < j) in a network of depth M.
int possible_forward_paths(int depth);

/// Checks a path set for a depth-M network. Rejects duplicates, self paths,
/// indices outside 1..M, and backward paths (i > j) unless allowed. Returns
/// the number of possible forward paths, M(M-1)/2.
int validate_paths(const PathSet& paths, int depth, bool allow_backward = false);

/// Adjacent chain {(1,2), (2,3), ..., (M-1,M)}.
PathSet adjacent_paths(int depth);

std::string to_string(const DistillPath& path);
std::string to_string(const PathSet& paths);
/// Parses "P23+P34" or "2-3,3-4".
PathSet parse_paths(const std::string& text);

}  // namespace sadkit

#include "sadkit/paths.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace sadkit {

int possible_forward_paths(int depth) { return depth * (depth - 1) / 2; }

int validate_paths(const PathSet& paths, int depth, bool allow_backward) {
  if (depth < 2) throw PathError("distillation needs at least 2 blocks, got " + std::to_string(depth));
  for (std::size_t k = 0; k < paths.size(); ++k) {
    const DistillPath& p = paths[k];
    if (p.from < 1 || p.from > depth || p.to < 1 || p.to > depth) {
      throw PathError("path " + to_string(p) + " references a block outside 1.." + std::to_string(depth));
    }
    if (p.from == p.to) throw PathError("path " + to_string(p) + " maps a block onto itself");
    if (p.from > p.to && !allow_backward) {
      throw PathError("backward path " + to_string(p) + " requires allow_backward_paths");
    }
    if (std::find(paths.begin(), paths.begin() + static_cast<std::ptrdiff_t>(k), p) !=
        paths.begin() + static_cast<std::ptrdiff_t>(k)) {
      throw PathError("duplicate path " + to_string(p));
    }
  }
  return possible_forward_paths(depth);
}

PathSet adjacent_paths(int depth) {
  PathSet out;
  for (int m = 1; m < depth; ++m) out.push_back({m, m + 1});
  return out;
}

std::string to_string(const DistillPath& path) {
  return "P" + std::to_string(path.from) + std::to_string(path.to);
}

std::string to_string(const PathSet& paths) {
  if (paths.empty()) return "none";
  std::string s;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (i) s += '+';
    s += to_string(paths[i]);
  }
  return s;
}

PathSet parse_paths(const std::string& text) {
  PathSet out;
  std::string token;
  std::istringstream is(text);
  auto flush = [&out](std::string t) {
    t.erase(std::remove_if(t.begin(), t.end(), [](unsigned char c) { return std::isspace(c); }), t.end());
    if (t.empty() || t == "none") return;
    if (t[0] == 'P' || t[0] == 'p') {
      if (t.size() != 3 || !std::isdigit(static_cast<unsigned char>(t[1])) ||
          !std::isdigit(static_cast<unsigned char>(t[2]))) {
        throw PathError("cannot parse path '" + t + "'");
      }
      out.push_back({t[1] - '0', t[2] - '0'});
      return;
    }
    const auto dash = t.find('-');
    if (dash == std::string::npos) throw PathError("cannot parse path '" + t + "'");
    try {
      out.push_back({std::stoi(t.substr(0, dash)), std::stoi(t.substr(dash + 1))});
    } catch (const std::exception&) {
      throw PathError("cannot parse path '" + t + "'");
    }
  };
  for (char c : text) {
    if (c == '+' || c == ',') {
      flush(token);
      token.clear();
    } else {
      token += c;
    }
  }
  flush(token);
  return out;
}

}  // namespace sadkit

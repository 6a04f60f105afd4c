#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace faultnav {

enum class Cell : std::uint8_t { free, source, goal, hell };

enum class Action : int { up = 0, down = 1, left = 2, right = 3 };
inline constexpr int kNumActions = 4;

const char* action_name(int action);

struct StepResult {
  int next_state = 0;
  int reward = 0;  // 1 goal, -1 hell, 0 otherwise
  bool terminal = false;
};

/// n x n navigation grid. State index = row * n + col; row 0 is the top.
/// The source sits at (0, 0) and the goal at (n-1, n-1).
class GridWorld {
 public:
  /// Places round(density * (n^2 - 2)) hell cells uniformly at random and
  /// retries (up to 1000 placements) until the goal is reachable.
  static GridWorld generate(int n, double density, std::uint64_t seed);

  /// Parses rows of S/G/H/. characters. Exactly one S and one G required.
  static GridWorld from_text(std::string_view text);
  std::string to_text() const;

  int side() const { return n_; }
  int num_states() const { return n_ * n_; }
  int source_state() const { return source_; }
  int goal_state() const { return goal_; }
  std::uint64_t seed() const { return seed_; }
  Cell cell(int state) const { return cells_.at(static_cast<std::size_t>(state)); }
  bool is_terminal(int state) const;
  int hell_count() const;

  /// Off-grid moves leave the agent in place with reward 0.
  /// Throws std::logic_error when called from a terminal state.
  StepResult step(int state, int action) const;

  /// Step budget for a single episode.
  int step_cap() const { return 4 * n_ * n_; }

  /// BFS from source to goal through non-hell cells.
  bool solvable() const;

  /// Length of the shortest source-to-goal path, or -1.
  int shortest_path_length() const;

 private:
  GridWorld(int n, std::vector<Cell> cells, std::uint64_t seed);

  int n_ = 0;
  std::vector<Cell> cells_;
  int source_ = 0;
  int goal_ = 0;
  std::uint64_t seed_ = 0;
};

/// Optimal action values from value iteration. Terminal states hold zeros.
struct OptimalQ {
  int num_states = 0;
  std::vector<double> q;  // [state * kNumActions + action]
  int iterations = 0;

  double at(int s, int a) const { return q[static_cast<std::size_t>(s * kNumActions + a)]; }
  double value(int s) const;
  /// Lowest-index argmax.
  int greedy(int s) const;
};

/// Value iteration to a sup-norm change below 1e-10.
OptimalQ solve_exact(const GridWorld& world, double gamma);

}  // namespace faultnav

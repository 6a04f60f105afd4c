#include "faultnav/gridworld.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>
#include <stdexcept>

#include "faultnav/rng.hpp"

namespace faultnav {

const char* action_name(int action) {
  static constexpr const char* kNames[] = {"up", "down", "left", "right"};
  return (action >= 0 && action < kNumActions) ? kNames[action] : "?";
}

GridWorld::GridWorld(int n, std::vector<Cell> cells, std::uint64_t seed)
    : n_(n), cells_(std::move(cells)), seed_(seed) {
  int sources = 0;
  int goals = 0;
  for (int s = 0; s < num_states(); ++s) {
    if (cells_[s] == Cell::source) {
      source_ = s;
      ++sources;
    } else if (cells_[s] == Cell::goal) {
      goal_ = s;
      ++goals;
    }
  }
  if (sources != 1 || goals != 1) {
    throw std::invalid_argument("grid needs exactly one source and one goal");
  }
}

GridWorld GridWorld::generate(int n, double density, std::uint64_t seed) {
  if (n < 3) throw std::invalid_argument("grid side must be >= 3");
  if (!(density >= 0.0 && density < 1.0)) {
    throw std::invalid_argument("obstacle density must lie in [0, 1)");
  }
  const int cells = n * n;
  const int hells = static_cast<int>(std::lround(density * (cells - 2)));
  Rng rng(derive_seed({tag("gridworld"), seed}));

  std::vector<int> interior;
  for (int s = 1; s < cells - 1; ++s) interior.push_back(s);

  for (int attempt = 0; attempt < 1000; ++attempt) {
    // Partial Fisher-Yates: the first `hells` entries become obstacles.
    for (int k = 0; k < hells; ++k) {
      auto j = k + static_cast<int>(uniform_index(rng, interior.size() - k));
      std::swap(interior[k], interior[j]);
    }
    std::vector<Cell> layout(cells, Cell::free);
    layout.front() = Cell::source;
    layout.back() = Cell::goal;
    for (int k = 0; k < hells; ++k) layout[interior[k]] = Cell::hell;
    GridWorld world(n, std::move(layout), seed);
    if (world.solvable()) return world;
  }
  throw std::runtime_error("no solvable layout after 1000 placements (n=" + std::to_string(n) +
                           ", density=" + std::to_string(density) + ")");
}

GridWorld GridWorld::from_text(std::string_view text) {
  std::vector<std::string> rows;
  std::istringstream in{std::string(text)};
  for (std::string line; std::getline(in, line);) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (!line.empty()) rows.push_back(line);
  }
  const int n = static_cast<int>(rows.size());
  if (n < 3) throw std::invalid_argument("grid map needs at least 3 rows");
  std::vector<Cell> cells;
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != n) throw std::invalid_argument("grid map must be square");
    for (char c : row) {
      switch (c) {
        case 'S': cells.push_back(Cell::source); break;
        case 'G': cells.push_back(Cell::goal); break;
        case 'H': cells.push_back(Cell::hell); break;
        case '.': cells.push_back(Cell::free); break;
        default: throw std::invalid_argument(std::string("unknown grid character '") + c + "'");
      }
    }
  }
  return GridWorld(n, std::move(cells), 0);
}

std::string GridWorld::to_text() const {
  std::string out;
  for (int r = 0; r < n_; ++r) {
    for (int c = 0; c < n_; ++c) {
      switch (cells_[r * n_ + c]) {
        case Cell::source: out += 'S'; break;
        case Cell::goal: out += 'G'; break;
        case Cell::hell: out += 'H'; break;
        case Cell::free: out += '.'; break;
      }
    }
    out += '\n';
  }
  return out;
}

bool GridWorld::is_terminal(int state) const {
  const Cell c = cells_[static_cast<std::size_t>(state)];
  return c == Cell::goal || c == Cell::hell;
}

int GridWorld::hell_count() const {
  return static_cast<int>(std::count(cells_.begin(), cells_.end(), Cell::hell));
}

StepResult GridWorld::step(int state, int action) const {
  if (state < 0 || state >= num_states()) throw std::out_of_range("state outside grid");
  if (is_terminal(state)) throw std::logic_error("step from a terminal state");
  int row = state / n_;
  int col = state % n_;
  switch (static_cast<Action>(action)) {
    case Action::up: row = std::max(row - 1, 0); break;
    case Action::down: row = std::min(row + 1, n_ - 1); break;
    case Action::left: col = std::max(col - 1, 0); break;
    case Action::right: col = std::min(col + 1, n_ - 1); break;
    default: throw std::out_of_range("action outside action space");
  }
  StepResult r;
  r.next_state = row * n_ + col;
  switch (cells_[r.next_state]) {
    case Cell::goal: r.reward = 1; r.terminal = true; break;
    case Cell::hell: r.reward = -1; r.terminal = true; break;
    default: break;
  }
  return r;
}

int GridWorld::shortest_path_length() const {
  std::vector<int> dist(num_states(), -1);
  std::deque<int> frontier{source_};
  dist[source_] = 0;
  while (!frontier.empty()) {
    const int s = frontier.front();
    frontier.pop_front();
    if (s == goal_) return dist[s];
    for (int a = 0; a < kNumActions; ++a) {
      const StepResult r = step(s, a);
      if (cells_[r.next_state] == Cell::hell || dist[r.next_state] >= 0) continue;
      dist[r.next_state] = dist[s] + 1;
      if (r.next_state != goal_) {
        frontier.push_back(r.next_state);
      } else {
        return dist[r.next_state];
      }
    }
  }
  return -1;
}

bool GridWorld::solvable() const { return shortest_path_length() >= 0; }

double OptimalQ::value(int s) const {
  double best = at(s, 0);
  for (int a = 1; a < kNumActions; ++a) best = std::max(best, at(s, a));
  return best;
}

int OptimalQ::greedy(int s) const {
  int best = 0;
  for (int a = 1; a < kNumActions; ++a) {
    if (at(s, a) > at(s, best)) best = a;
  }
  return best;
}

OptimalQ solve_exact(const GridWorld& world, double gamma) {
  OptimalQ out;
  out.num_states = world.num_states();
  out.q.assign(static_cast<std::size_t>(out.num_states * kNumActions), 0.0);
  std::vector<double> next(out.q.size(), 0.0);
  for (;;) {
    double change = 0.0;
    for (int s = 0; s < out.num_states; ++s) {
      if (world.is_terminal(s)) continue;
      for (int a = 0; a < kNumActions; ++a) {
        const StepResult r = world.step(s, a);
        const double boot = r.terminal ? 0.0 : out.value(r.next_state);
        const double v = r.reward + gamma * boot;
        const auto idx = static_cast<std::size_t>(s * kNumActions + a);
        change = std::max(change, std::abs(v - out.q[idx]));
        next[idx] = v;
      }
    }
    out.q.swap(next);
    ++out.iterations;
    if (change < 1e-10) break;
  }
  return out;
}

}  // namespace faultnav

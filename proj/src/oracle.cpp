#include "analogon/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <queue>

#include "analogon/binio.hpp"
#include "analogon/errors.hpp"

namespace analogon {

namespace {

constexpr char kTableMagic[9] = "ANLGDIST";
constexpr std::uint32_t kTableVersion = 1;

// Compressed predecessor lists.
struct ReverseGraph {
  std::vector<std::uint32_t> offsets;
  std::vector<StateIndex> preds;

  explicit ReverseGraph(const Environment& env) {
    const auto n = env.state_count();
    const int a_count = env.action_count();
    offsets.assign(n + 1, 0);
    for (std::size_t s = 0; s < n; ++s) {
      for (int a = 0; a < a_count; ++a) ++offsets[env.next(static_cast<StateIndex>(s), a) + 1];
    }
    for (std::size_t i = 0; i < n; ++i) offsets[i + 1] += offsets[i];
    preds.resize(offsets[n]);
    auto fill = offsets;
    for (std::size_t s = 0; s < n; ++s) {
      for (int a = 0; a < a_count; ++a) {
        const auto t = env.next(static_cast<StateIndex>(s), a);
        preds[fill[t]++] = static_cast<StateIndex>(s);
      }
    }
  }
};

void bfs(const ReverseGraph& rg, const std::vector<StateIndex>& sources, std::vector<int>& dist) {
  std::fill(dist.begin(), dist.end(), -1);
  std::queue<StateIndex> q;
  for (auto s : sources) {
    if (dist[s] != 0) {
      dist[s] = 0;
      q.push(s);
    }
  }
  while (!q.empty()) {
    const auto t = q.front();
    q.pop();
    for (auto i = rg.offsets[t]; i < rg.offsets[t + 1]; ++i) {
      const auto p = rg.preds[i];
      if (dist[p] < 0) {
        dist[p] = dist[t] + 1;
        q.push(p);
      }
    }
  }
}

std::uint32_t mask_bits(const std::vector<bool>& mask) {
  std::uint32_t bits = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) bits |= (1u << i);
  }
  return bits;
}

bool agrees_on(const Environment& env, StateIndex x, StateIndex g, std::uint32_t bits) {
  for (int f = 0; f < env.factor_count(); ++f) {
    if ((bits >> f) & 1u) {
      if (env.factor_value(x, f) != env.factor_value(g, f)) return false;
    }
  }
  return true;
}

// Group key: mask bits plus endogenous values of s and g.
struct GroupKey {
  std::uint32_t bits;
  std::vector<int> s_en;
  std::vector<int> g_en;
  auto operator<=>(const GroupKey&) const = default;
};

GroupKey group_key(const Environment& env, StateIndex s, StateIndex g) {
  GroupKey key{mask_bits(env.endogenous_mask(s, g)), {}, {}};
  for (int f = 0; f < env.factor_count(); ++f) {
    if ((key.bits >> f) & 1u) {
      key.s_en.push_back(env.factor_value(s, f));
      key.g_en.push_back(env.factor_value(g, f));
    }
  }
  return key;
}

void check_table_size(std::size_t n) {
  if (n > DistanceTable::kMaxStates) {
    throw UsageError("dense distance table limited to " + std::to_string(DistanceTable::kMaxStates) +
                     " states (got " + std::to_string(n) + ")");
  }
}

}  // namespace

std::string to_string(RewardMode m) {
  return m == RewardMode::FullMatch ? "full_match" : "endogenous_match";
}

RewardMode reward_mode_from_string(const std::string& s) {
  if (s == "full_match") return RewardMode::FullMatch;
  if (s == "endogenous_match") return RewardMode::EndogenousMatch;
  throw UsageError("unknown reward mode '" + s + "'");
}

DistanceTable::DistanceTable(std::string env_id, RewardMode mode, std::size_t states)
    : env_id_(std::move(env_id)), mode_(mode), n_(states) {
  check_table_size(states);
  d_.assign(states * states, kInfinity);
}

std::size_t DistanceTable::infinite_count() const {
  return static_cast<std::size_t>(std::count(d_.begin(), d_.end(), kInfinity));
}

int DistanceTable::max_finite() const {
  int m = 0;
  for (auto v : d_) {
    if (v != kInfinity) m = std::max<int>(m, v);
  }
  return m;
}

void DistanceTable::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  binio::put_magic(os, kTableMagic);
  binio::put<std::uint32_t>(os, kTableVersion);
  binio::put_string(os, env_id_);
  binio::put<std::uint8_t>(os, mode_ == RewardMode::FullMatch ? 0 : 1);
  binio::put<std::uint64_t>(os, n_);
  for (auto v : d_) binio::put<std::uint16_t>(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

DistanceTable DistanceTable::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  binio::expect_magic(is, kTableMagic, "distance table");
  if (binio::get<std::uint32_t>(is) != kTableVersion) throw IoError("unsupported distance table version");
  auto env_id = binio::get_string(is);
  const auto mode = binio::get<std::uint8_t>(is) == 0 ? RewardMode::FullMatch : RewardMode::EndogenousMatch;
  const auto n = binio::get<std::uint64_t>(is);
  DistanceTable t(std::move(env_id), mode, n);
  for (auto& v : t.d_) v = binio::get<std::uint16_t>(is);
  return t;
}

std::vector<int> distances_to_factor_value(const Environment& env, int factor, int value) {
  const ReverseGraph rg(env);
  std::vector<StateIndex> sources;
  for (std::size_t x = 0; x < env.state_count(); ++x) {
    if (env.factor_value(static_cast<StateIndex>(x), factor) == value) sources.push_back(static_cast<StateIndex>(x));
  }
  std::vector<int> dist(env.state_count());
  bfs(rg, sources, dist);
  return dist;
}

DistanceTable solve_distances(const Environment& env, RewardMode mode) {
  const auto n = env.state_count();
  DistanceTable table(env.id(), mode, n);
  const ReverseGraph rg(env);
  std::vector<int> dist(n);
  auto store = [&](StateIndex s, StateIndex g) {
    const int d = dist[s];
    table.at(s, g) = (d < 0 || d >= DistanceTable::kInfinity) ? DistanceTable::kInfinity
                                                               : static_cast<DistanceTable::Entry>(d);
  };

  for (std::size_t gi = 0; gi < n; ++gi) {
    const auto g = static_cast<StateIndex>(gi);
    if (mode == RewardMode::FullMatch) {
      bfs(rg, {g}, dist);
      for (std::size_t s = 0; s < n; ++s) store(static_cast<StateIndex>(s), g);
      continue;
    }
    // Group start states by their endogenous mask relative to g.
    std::map<std::uint32_t, std::vector<StateIndex>> by_mask;
    for (std::size_t s = 0; s < n; ++s) {
      by_mask[mask_bits(env.endogenous_mask(static_cast<StateIndex>(s), g))].push_back(static_cast<StateIndex>(s));
    }
    for (const auto& [bits, starts] : by_mask) {
      std::vector<StateIndex> sources;
      for (std::size_t x = 0; x < n; ++x) {
        if (agrees_on(env, static_cast<StateIndex>(x), g, bits)) sources.push_back(static_cast<StateIndex>(x));
      }
      bfs(rg, sources, dist);
      for (auto s : starts) store(s, g);
    }
  }
  return table;
}

OptimalValue value_of(double distance, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw UsageError("value_of: gamma must lie in (0, 1)");
  OptimalValue v;
  if (!std::isfinite(distance)) {
    v.infinite = true;
    v.value = 0.0;
    v.modified_return = -1.0 / (1.0 - gamma);
    return v;
  }
  v.value = std::pow(gamma, distance);
  v.modified_return = -(1.0 - v.value) / (1.0 - gamma);
  return v;
}

OptimalValue value_of(const DistanceTable& table, StateIndex s, StateIndex g, double gamma) {
  const double d = table.finite(s, g) ? static_cast<double>(table.at(s, g))
                                      : std::numeric_limits<double>::infinity();
  return value_of(d, gamma);
}

std::vector<double> value_iteration(const Environment& env, double gamma, double tol, int max_sweeps) {
  const auto n = env.state_count();
  check_table_size(n);
  const int a_count = env.action_count();
  std::vector<double> v(n * n, 0.0);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double delta = 0.0;
    for (std::size_t g = 0; g < n; ++g) {
      for (std::size_t s = 0; s < n; ++s) {
        if (s == g) continue;
        double best = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < a_count; ++a) {
          const auto t = env.next(static_cast<StateIndex>(s), a);
          best = std::max(best, -1.0 + gamma * v[t * n + g]);
        }
        delta = std::max(delta, std::abs(best - v[s * n + g]));
        v[s * n + g] = best;
      }
    }
    if (delta <= tol) return v;
  }
  return v;
}

std::vector<int> distance_field(const DistanceTable& table, StateIndex s, StateIndex g) {
  const auto n = table.state_count();
  std::vector<int> field(n);
  for (std::size_t x = 0; x < n; ++x) {
    const auto xi = static_cast<StateIndex>(x);
    if (!table.finite(xi, g) || !table.finite(xi, s)) {
      throw UsageError("distance_field: probe " + std::to_string(x) + " has an infinite distance");
    }
    field[x] = static_cast<int>(table.at(xi, g)) - static_cast<int>(table.at(xi, s));
  }
  return field;
}

FieldInvarianceReport verify_field_invariance(const Environment& env, const DistanceTable& table) {
  const auto n = env.state_count();
  std::map<GroupKey, std::vector<std::pair<StateIndex, StateIndex>>> groups;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t g = 0; g < n; ++g) {
      const auto si = static_cast<StateIndex>(s);
      const auto gi = static_cast<StateIndex>(g);
      groups[group_key(env, si, gi)].emplace_back(si, gi);
    }
  }
  FieldInvarianceReport rep;
  rep.groups = groups.size();
  constexpr int kSkip = std::numeric_limits<int>::min();
  for (const auto& [key, members] : groups) {
    if (members.size() < 2) {
      ++rep.singleton_groups;
      continue;
    }
    const auto exo_bits = ~key.bits;
    // Probes of a member: its task block, i.e. states sharing its exogenous
    // context, listed in index order (aligned across members by endogenous values).
    std::vector<std::vector<int>> fields;
    fields.reserve(members.size());
    for (const auto& [s, g] : members) {
      std::vector<int> f;
      for (std::size_t x = 0; x < n; ++x) {
        const auto xi = static_cast<StateIndex>(x);
        if (!agrees_on(env, xi, s, exo_bits)) continue;
        f.push_back(table.finite(xi, g) && table.finite(xi, s)
                        ? static_cast<int>(table.at(xi, g)) - static_cast<int>(table.at(xi, s))
                        : kSkip);
      }
      fields.push_back(std::move(f));
    }
    double group_max = 0.0;
    for (std::size_t a = 0; a < fields.size(); ++a) {
      for (std::size_t b = a + 1; b < fields.size(); ++b) {
        ++rep.compared_member_pairs;
        for (std::size_t y = 0; y < fields[a].size(); ++y) {
          if (fields[a][y] == kSkip || fields[b][y] == kSkip) {
            ++rep.skipped_infinite_probes;
            continue;
          }
          ++rep.compared_probes;
          group_max = std::max(group_max, std::abs(static_cast<double>(fields[a][y] - fields[b][y])));
        }
      }
    }
    rep.group_max_deviation.push_back(group_max);
    rep.max_deviation = std::max(rep.max_deviation, group_max);
  }
  return rep;
}

ClosureReport verify_endogenous_closure(const Environment& env, const DistanceTable& table) {
  const auto n = env.state_count();
  struct Range {
    int lo = std::numeric_limits<int>::max();
    int hi = std::numeric_limits<int>::min();
    std::size_t members = 0;
  };
  std::map<GroupKey, Range> groups;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t g = 0; g < n; ++g) {
      const auto si = static_cast<StateIndex>(s);
      const auto gi = static_cast<StateIndex>(g);
      auto& r = groups[group_key(env, si, gi)];
      const int d = table.at(si, gi);  // infinity compares as a large distance
      r.lo = std::min(r.lo, d);
      r.hi = std::max(r.hi, d);
      ++r.members;
    }
  }
  ClosureReport rep;
  rep.groups = groups.size();
  for (const auto& [key, r] : groups) {
    if (r.lo != r.hi) {
      ++rep.violating_groups;
      rep.violating_pairs += r.members;
      rep.max_spread = std::max(rep.max_spread, r.hi - r.lo);
    }
  }
  return rep;
}

QuasimetricReport verify_quasimetric(const DistanceTable& table) {
  const auto n = table.state_count();
  QuasimetricReport rep;
  for (std::size_t s = 0; s < n; ++s) {
    if (table.at(static_cast<StateIndex>(s), static_cast<StateIndex>(s)) != 0) ++rep.nonzero_diagonal;
  }
  const auto* d = table.raw().data();
  for (std::size_t x = 0; x < n; ++x) {
    for (std::size_t y = 0; y < n; ++y) {
      const std::uint32_t dxy = d[x * n + y];
      if (x < y && d[x * n + y] != d[y * n + x]) {
        ++rep.asymmetric_pairs;
        if (rep.asymmetry_witnesses.size() < 10) {
          rep.asymmetry_witnesses.emplace_back(static_cast<StateIndex>(x), static_cast<StateIndex>(y));
        }
      }
      const auto* row_y = d + y * n;
      const auto* row_x = d + x * n;
      for (std::size_t z = 0; z < n; ++z) {
        // Entries are 16-bit, so the sum cannot overflow 32 bits; infinity
        // on the right-hand side makes the inequality hold trivially.
        if (row_x[z] > dxy + row_y[z]) ++rep.triangle_violations;
      }
      rep.triples_checked += n;
    }
  }
  return rep;
}

GreedyFieldReport verify_greedy_field_policy(const Environment& env, const DistanceTable& table, double gamma) {
  const auto n = env.state_count();
  GreedyFieldReport rep;
  for (std::size_t si = 0; si < n; ++si) {
    for (std::size_t gi = 0; gi < n; ++gi) {
      const auto s = static_cast<StateIndex>(si);
      const auto g = static_cast<StateIndex>(gi);
      if (!table.finite(s, g)) continue;
      ++rep.pairs;
      StateIndex x = s;
      int steps = 0;
      const int limit = table.at(s, g) + static_cast<int>(n);
      while (x != g && steps <= limit) {
        int best_a = 0;
        double best = -1.0;
        for (int a = 0; a < env.action_count(); ++a) {
          const auto y = env.next(x, a);
          if (!table.finite(y, g) || !table.finite(y, s)) continue;
          const double field = static_cast<double>(table.at(y, g)) - static_cast<double>(table.at(y, s));
          const double score = std::pow(gamma, field) * std::pow(gamma, static_cast<double>(table.at(y, s)));
          if (score > best * (1.0 + 1e-12)) {
            best = score;
            best_a = a;
          }
        }
        x = env.next(x, best_a);
        ++steps;
      }
      if (x == g && steps == table.at(s, g)) {
        ++rep.optimal;
      } else {
        ++rep.suboptimal;
      }
    }
  }
  return rep;
}

nlohmann::json FieldInvarianceReport::to_json() const {
  return {{"groups", groups},
          {"singleton_groups", singleton_groups},
          {"compared_member_pairs", compared_member_pairs},
          {"compared_probes", compared_probes},
          {"skipped_infinite_probes", skipped_infinite_probes},
          {"max_deviation", max_deviation}};
}

nlohmann::json ClosureReport::to_json() const {
  return {{"groups", groups},
          {"violating_groups", violating_groups},
          {"violating_pairs", violating_pairs},
          {"max_spread", max_spread}};
}

nlohmann::json QuasimetricReport::to_json() const {
  nlohmann::json w = nlohmann::json::array();
  for (const auto& [a, b] : asymmetry_witnesses) w.push_back({a, b});
  return {{"nonzero_diagonal", nonzero_diagonal},
          {"triples_checked", triples_checked},
          {"triangle_violations", triangle_violations},
          {"asymmetric_pairs", asymmetric_pairs},
          {"asymmetry_witnesses", w},
          {"ok", ok()}};
}

nlohmann::json GreedyFieldReport::to_json() const {
  return {{"pairs", pairs}, {"optimal", optimal}, {"suboptimal", suboptimal}};
}

}  // namespace analogon

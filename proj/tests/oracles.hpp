#pragma once

// Independent reference implementations used as test oracles. Everything
// here is written from the defining formulas with plain loops and shares no
// code with the library beyond its data types.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "tba/config.hpp"
#include "tba/eval.hpp"
#include "tba/conv.hpp"
#include "tba/rat.hpp"

namespace oracle {

using tba::ModelConfig;
using tba::Tensor;
using tba::TrackerOutput;

// ---------------------------------------------------------------------------
// Finite differences

inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double eps = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double up = f(x);
    x[i] = keep - eps;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(std::max(na, nb));
  return den < 1e-300 ? 0.0 : std::sqrt(d) / den;
}


// Gradient of build(tape, x) with respect to x, analytic and by central
// differences, as flat vectors.
template <typename Build>
std::pair<std::vector<double>, std::vector<double>> gradients(const Tensor<double>& x, Build build,
                                                              double eps = 1e-6) {
  tba::Tape<double> tape;
  auto xv = tape.variable(x);
  auto y = build(tape, xv);
  tape.backward(y);
  const auto analytic = tape.gradient(xv).values();
  const auto numeric = central_difference(
      [&](const std::vector<double>& v) {
        tba::Tape<double> t;
        return build(t, t.variable(Tensor<double>(x.shape(), v))).item();
      },
      x.values(), eps);
  return {analytic, numeric};
}

template <typename Build>
double gradient_error(const Tensor<double>& x, Build build, double eps = 1e-6) {
  const auto [a, n] = gradients(x, build, eps);
  return relative_error(a, n);
}

inline Tensor<double> random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = d(rng);
  return t;
}

// sum(w * v) with fixed random weights: turns any tensor op into a scalar.
inline tba::Var<double> project(tba::Tape<double>& tape, const tba::Var<double>& v, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  auto w = tape.constant(random_tensor(v.value().shape(), rng));
  return tba::ad::sum(tba::ad::mul(v, w));
}

// Small configuration with the full structure of the Sprites model, for
// finite-difference checks.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.height = c.width = 16;
  c.channels = 3;
  c.mem_h = c.mem_w = 4;
  c.mem_s = 5;
  c.patch_h = c.patch_w = 5;
  c.state_size = 6;
  c.trackers = 3;
  c.layers = 3;
  c.conv = {{3, 3, 4, 8, 8, true}, {3, 3, 6, 4, 4, true}, {1, 1, 5, 0, 0, false}};
  c.head_hidden = {8, 10};
  return c;
}

// ---------------------------------------------------------------------------
// Painter's-algorithm renderer, one pixel and one object at a time.

inline double patch_value(const double* patch, int u, int v, double row, double col) {
  // Bilinear interpolation of a u x v grid at fractional (row, col), with
  // zeros outside the grid.
  const int r0 = static_cast<int>(std::floor(row)), c0 = static_cast<int>(std::floor(col));
  double acc = 0;
  for (int dr = 0; dr <= 1; ++dr) {
    for (int dc = 0; dc <= 1; ++dc) {
      const int r = r0 + dr, c = c0 + dc;
      if (r < 0 || r >= u || c < 0 || c >= v) continue;
      const double wr = dr ? row - r0 : 1 - (row - r0);
      const double wc = dc ? col - c0 : 1 - (col - c0);
      acc += wr * wc * patch[r * v + c];
    }
  }
  return acc;
}

inline Tensor<double> reference_render(const std::vector<TrackerOutput<double>>& outputs,
                                       const Tensor<double>& background, const ModelConfig& cfg) {
  const int h = cfg.height, w = cfg.width, d = cfg.channels, u = cfg.patch_h, v = cfg.patch_w;
  Tensor<double> frame = background;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      std::vector<double> pixel(d);
      for (int c = 0; c < d; ++c) pixel[c] = background.at(c, y, x);
      for (int k = 0; k < cfg.layers; ++k) {
        double mask = 0;
        std::vector<double> fg(d, 0.0);
        for (const auto& o : outputs) {
          if (o.layer[k] == 0.0) continue;
          double sx = 1, sy = 1, tx, ty;
          if (o.pose.size() == 4) {
            sx = 1 + cfg.eta_x * o.pose[0];
            sy = 1 + cfg.eta_y * o.pose[1];
            tx = o.pose[2] * w / 2.0;
            ty = o.pose[3] * h / 2.0;
          } else {
            tx = o.pose[0] * w / 2.0;
            ty = o.pose[1] * h / 2.0;
          }
          // Top-left corner of the placed patch and the pixel's position in
          // patch units, measured between pixel centres.
          const double top = h / 2.0 + ty - sy * u / 2.0;
          const double left = w / 2.0 + tx - sx * v / 2.0;
          const double row = (y + 0.5 - top) / sy - 0.5;
          const double col = (x + 0.5 - left) / sx - 0.5;
          const double s = patch_value(o.shape.data(), u, v, row, col);
          const double g = o.confidence * o.layer[k] * s;
          mask += g;
          for (int c = 0; c < d; ++c) fg[c] += g * patch_value(o.appearance.data() + c * u * v, u, v, row, col);
        }
        mask = std::min(1.0, mask);
        for (int c = 0; c < d; ++c) pixel[c] = (1 - mask) * pixel[c] + fg[c];
      }
      for (int c = 0; c < d; ++c) {
        frame.at(c, y, x) = cfg.clamp_reconstruction ? std::clamp(pixel[c], 0.0, 1.0) : pixel[c];
      }
    }
  }
  return frame;
}

// ---------------------------------------------------------------------------
// Exhaustive CLEAR MOT and identity metrics.

using tba::Box;
using tba::TrackBox;

struct BruteCounts {
  long fp = 0, fn = 0, ids = 0, frag = 0, mt = 0, ml = 0, matches = 0, idtp = 0;
  double iou_sum = 0;
};

// All partial one-to-one matchings between n rows and m columns restricted
// to allowed pairs, as lists of (row, col).
inline void enumerate_matchings(int row, int n, int m, const std::vector<std::vector<char>>& allowed,
                                std::vector<char>& used, std::vector<std::pair<int, int>>& cur,
                                std::vector<std::vector<std::pair<int, int>>>& out) {
  if (row == n) {
    out.push_back(cur);
    return;
  }
  enumerate_matchings(row + 1, n, m, allowed, used, cur, out);
  for (int c = 0; c < m; ++c) {
    if (used[c] || !allowed[row][c]) continue;
    used[c] = 1;
    cur.push_back({row, c});
    enumerate_matchings(row + 1, n, m, allowed, used, cur, out);
    cur.pop_back();
    used[c] = 0;
  }
}

inline BruteCounts brute_force_metrics(const std::vector<TrackBox>& gt, const std::vector<TrackBox>& pred,
                                       double gate = 0.5) {
  std::set<int> frames;
  for (const auto& b : gt) frames.insert(b.frame);
  for (const auto& b : pred) frames.insert(b.frame);
  BruteCounts c;
  std::map<int, int> last;                    // gt id -> last matched pred id
  std::map<int, int> last_of_pred;            // pred id -> last matched gt id
  std::map<int, std::vector<char>> tracked;   // gt id -> per presence frame
  for (int f : frames) {
    std::vector<const TrackBox*> gs, ps;
    for (const auto& b : gt) {
      if (b.frame == f) gs.push_back(&b);
    }
    for (const auto& b : pred) {
      if (b.frame == f) ps.push_back(&b);
    }
    // Correspondences carried over from earlier frames.
    std::vector<char> gfix(gs.size(), 0), pfix(ps.size(), 0);
    std::vector<std::pair<int, int>> kept;
    for (std::size_t i = 0; i < gs.size(); ++i) {
      auto it = last.find(gs[i]->id);
      if (it == last.end() || last_of_pred[it->second] != gs[i]->id) continue;
      for (std::size_t j = 0; j < ps.size(); ++j) {
        if (!pfix[j] && ps[j]->id == it->second && tba::iou(gs[i]->box, ps[j]->box) >= gate) {
          gfix[i] = pfix[j] = 1;
          kept.push_back({static_cast<int>(i), static_cast<int>(j)});
        }
      }
    }
    std::vector<int> gi, pj;
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (!gfix[i]) gi.push_back(static_cast<int>(i));
    }
    for (std::size_t j = 0; j < ps.size(); ++j) {
      if (!pfix[j]) pj.push_back(static_cast<int>(j));
    }
    std::vector<std::vector<char>> allowed(gi.size(), std::vector<char>(pj.size()));
    for (std::size_t a = 0; a < gi.size(); ++a) {
      for (std::size_t b = 0; b < pj.size(); ++b) allowed[a][b] = tba::iou(gs[gi[a]]->box, ps[pj[b]]->box) >= gate;
    }
    std::vector<std::vector<std::pair<int, int>>> all;
    std::vector<char> used(pj.size(), 0);
    std::vector<std::pair<int, int>> cur;
    enumerate_matchings(0, static_cast<int>(gi.size()), static_cast<int>(pj.size()), allowed, used, cur, all);
    // Most matches first, then the smallest total 1 - IoU.
    const std::vector<std::pair<int, int>>* best = nullptr;
    double best_cost = 0;
    for (const auto& mt : all) {
      double cost = 0;
      for (auto [a, b] : mt) cost += 1 - tba::iou(gs[gi[a]]->box, ps[pj[b]]->box);
      if (best == nullptr || mt.size() > best->size() || (mt.size() == best->size() && cost < best_cost - 1e-12)) {
        best = &mt;
        best_cost = cost;
      }
    }
    std::vector<std::pair<int, int>> matches = kept;
    for (auto [a, b] : *best) matches.push_back({gi[a], pj[b]});
    std::set<int> matched_g;
    for (auto [i, j] : matches) {
      const int gid = gs[i]->id, pid = ps[j]->id;
      ++c.matches;
      c.iou_sum += tba::iou(gs[i]->box, ps[j]->box);
      if (last.count(gid) && last[gid] != pid) ++c.ids;
      last[gid] = pid;
      last_of_pred[pid] = gid;
      matched_g.insert(gid);
    }
    c.fn += static_cast<long>(gs.size() - matches.size());
    c.fp += static_cast<long>(ps.size() - matches.size());
    for (const auto* g : gs) tracked[g->id].push_back(matched_g.count(g->id) ? 1 : 0);
  }
  for (const auto& [id, tr] : tracked) {
    long hits = 0;
    for (char t : tr) hits += t;
    const double ratio = static_cast<double>(hits) / tr.size();
    if (ratio >= 0.8) ++c.mt;
    if (ratio <= 0.2) ++c.ml;
    // Interruptions of tracking between the first and last tracked frame.
    bool seen = false;
    long pending = 0;
    for (std::size_t k = 0; k < tr.size(); ++k) {
      if (tr[k]) {
        if (seen && pending > 0) c.frag += 1;
        seen = true;
        pending = 0;
      } else if (seen && (k == 0 || tr[k - 1])) {
        pending = 1;
      }
    }
  }

  // Identity: try every injective map from gt trajectories to predicted
  // trajectories (or to nothing) and keep the best co-occurrence count.
  std::vector<int> gids, pids;
  for (const auto& b : gt) {
    if (std::find(gids.begin(), gids.end(), b.id) == gids.end()) gids.push_back(b.id);
  }
  for (const auto& b : pred) {
    if (std::find(pids.begin(), pids.end(), b.id) == pids.end()) pids.push_back(b.id);
  }
  auto overlap = [&](int gid, int pid) {
    long n = 0;
    for (const auto& g : gt) {
      if (g.id != gid) continue;
      for (const auto& p : pred) {
        if (p.id == pid && p.frame == g.frame && tba::iou(g.box, p.box) >= gate) ++n;
      }
    }
    return n;
  };
  std::function<long(std::size_t, std::vector<char>&)> best_id = [&](std::size_t i, std::vector<char>& taken) {
    if (i == gids.size()) return 0L;
    long best = best_id(i + 1, taken);
    for (std::size_t j = 0; j < pids.size(); ++j) {
      if (taken[j]) continue;
      taken[j] = 1;
      best = std::max(best, overlap(gids[i], pids[j]) + best_id(i + 1, taken));
      taken[j] = 0;
    }
    return best;
  };
  std::vector<char> taken(pids.size(), 0);
  c.idtp = best_id(0, taken);
  return c;
}

}  // namespace oracle

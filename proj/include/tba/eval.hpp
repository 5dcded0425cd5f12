#pragma once

// Box extraction from tracker outputs and CLEAR MOT / identity metrics.
//
// Per frame, ground truth and predictions are matched under an IoU gate.
// A ground-truth object keeps its last matched prediction if that prediction
// is present, still passes the gate and has not matched another object since; everything else is assigned by the
// Hungarian algorithm on 1 - IoU. Identity metrics use one global
// one-to-one assignment between ground-truth and predicted trajectories that
// maximises the number of co-occurring matched frames.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tba/config.hpp"
#include "tba/errors.hpp"
#include "tba/hungarian.hpp"
#include "tba/rat.hpp"

namespace tba {

struct Box {
  double left = 0, top = 0, width = 0, height = 0;
  double right() const { return left + width; }
  double bottom() const { return top + height; }
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.left, b.left);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.top, b.top);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.width * a.height + b.width * b.height - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct TrackBox {
  int frame = 0;  // 1-based
  int id = 0;
  Box box;
  double confidence = 1.0;
};

// One frame per entry; trackers not reached in a frame are simply absent.
template <typename T>
std::vector<TrackBox> outputs_to_boxes(const std::vector<std::vector<TrackerOutput<T>>>& frames,
                                       const ModelConfig& cfg, double threshold = 0.5) {
  std::vector<TrackBox> out;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    for (const auto& o : frames[t]) {
      if (!(static_cast<double>(o.confidence) > threshold)) continue;
      const Geometry g = pose_to_geometry(o.pose, cfg);
      const double cx = 0.5 * cfg.width + g.shift_x, cy = 0.5 * cfg.height + g.shift_y;
      const double bw = g.scale_x * cfg.patch_w, bh = g.scale_y * cfg.patch_h;
      const double l = std::max(0.0, cx - 0.5 * bw), r = std::min<double>(cfg.width, cx + 0.5 * bw);
      const double tp = std::max(0.0, cy - 0.5 * bh), b = std::min<double>(cfg.height, cy + 0.5 * bh);
      if (r <= l || b <= tp) continue;
      out.push_back({static_cast<int>(t) + 1, o.tracker, {l, tp, r - l, b - tp}, static_cast<double>(o.confidence)});
    }
  }
  return out;
}

// Event counts; sums over sequences before ratios are derived.
struct MotCounts {
  long frames = 0;
  long gt = 0, pred = 0;
  long matches = 0;
  double iou_sum = 0.0;
  long fp = 0, fn = 0, ids = 0, frag = 0;
  long tracks = 0, mt = 0, ml = 0;
  long idtp = 0, idfp = 0, idfn = 0;

  MotCounts& operator+=(const MotCounts& o) {
    frames += o.frames;
    gt += o.gt;
    pred += o.pred;
    matches += o.matches;
    iou_sum += o.iou_sum;
    fp += o.fp;
    fn += o.fn;
    ids += o.ids;
    frag += o.frag;
    tracks += o.tracks;
    mt += o.mt;
    ml += o.ml;
    idtp += o.idtp;
    idfp += o.idfp;
    idfn += o.idfn;
    return *this;
  }
};

struct MetricsReport {
  double idf1 = 0, idp = 0, idr = 0, mota = 0, motp = 0, faf = 0;  // percent except FAF
  long mt = 0, ml = 0, fp = 0, fn = 0, ids = 0, frag = 0;
  MotCounts counts;
};

namespace detail {

inline void check_unique(const std::vector<TrackBox>& boxes, const char* what) {
  std::set<std::pair<int, int>> seen;
  for (const auto& b : boxes) {
    if (!seen.insert({b.frame, b.id}).second) {
      throw ValidationError(std::string(what) + ": duplicate (frame " + std::to_string(b.frame) + ", id " +
                            std::to_string(b.id) + ")");
    }
  }
}

inline std::map<int, std::vector<const TrackBox*>> by_frame(const std::vector<TrackBox>& boxes) {
  std::map<int, std::vector<const TrackBox*>> m;
  for (const auto& b : boxes) m[b.frame].push_back(&b);
  return m;
}

}  // namespace detail

// Per-frame matching: for every frame, the list of (gt id, pred id, iou).
struct FrameMatch {
  int gt_id, pred_id;
  double iou;
};

inline std::map<int, std::vector<FrameMatch>> match_frames(const std::vector<TrackBox>& gt,
                                                           const std::vector<TrackBox>& pred, double gate) {
  detail::check_unique(gt, "ground truth");
  detail::check_unique(pred, "predictions");
  const auto gf = detail::by_frame(gt), pf = detail::by_frame(pred);
  std::set<int> frames;
  for (const auto& [f, _] : gf) frames.insert(f);
  for (const auto& [f, _] : pf) frames.insert(f);

  std::map<int, int> last;       // gt id -> last matched pred id
  std::map<int, int> last_of_pred;  // pred id -> gt id it last matched
  std::map<int, std::vector<FrameMatch>> out;
  static const std::vector<const TrackBox*> none;
  for (int f : frames) {
    const auto& gs = gf.count(f) ? gf.at(f) : none;
    const auto& ps = pf.count(f) ? pf.at(f) : none;
    std::vector<char> g_used(gs.size(), 0), p_used(ps.size(), 0);
    auto& matches = out[f];
    for (std::size_t i = 0; i < gs.size(); ++i) {
      auto it = last.find(gs[i]->id);
      // Carried only while the prediction has not since matched another object.
      if (it == last.end() || last_of_pred[it->second] != gs[i]->id) continue;
      for (std::size_t j = 0; j < ps.size(); ++j) {
        if (p_used[j] || ps[j]->id != it->second) continue;
        const double v = iou(gs[i]->box, ps[j]->box);
        if (v >= gate) {
          g_used[i] = p_used[j] = 1;
          matches.push_back({gs[i]->id, ps[j]->id, v});
        }
      }
    }
    std::vector<int> gi, pj;
    for (std::size_t i = 0; i < gs.size(); ++i) {
      if (!g_used[i]) gi.push_back(static_cast<int>(i));
    }
    for (std::size_t j = 0; j < ps.size(); ++j) {
      if (!p_used[j]) pj.push_back(static_cast<int>(j));
    }
    if (!gi.empty() && !pj.empty()) {
      constexpr double kGated = 1e6;
      std::vector<std::vector<double>> cost(gi.size(), std::vector<double>(pj.size()));
      for (std::size_t a = 0; a < gi.size(); ++a) {
        for (std::size_t b = 0; b < pj.size(); ++b) {
          const double v = iou(gs[gi[a]]->box, ps[pj[b]]->box);
          cost[a][b] = v >= gate ? 1.0 - v : kGated;
        }
      }
      const auto assign = solve_assignment(cost);
      for (std::size_t a = 0; a < gi.size(); ++a) {
        if (assign[a] < 0 || cost[a][assign[a]] >= kGated) continue;
        const TrackBox* g = gs[gi[a]];
        const TrackBox* p = ps[pj[assign[a]]];
        matches.push_back({g->id, p->id, iou(g->box, p->box)});
      }
    }
    for (const auto& m : matches) {
      last[m.gt_id] = m.pred_id;
      last_of_pred[m.pred_id] = m.gt_id;
    }
  }
  return out;
}

// Counts all CLEAR MOT events and the identity scores of one sequence.
// num_frames < 0 counts only frames that carry any box.
inline MotCounts evaluate_sequence(const std::vector<TrackBox>& gt, const std::vector<TrackBox>& pred,
                                   double gate = 0.5, long num_frames = -1) {
  const auto frame_matches = match_frames(gt, pred, gate);
  MotCounts c;
  c.frames = num_frames >= 0 ? num_frames : static_cast<long>(frame_matches.size());
  c.gt = static_cast<long>(gt.size());
  c.pred = static_cast<long>(pred.size());

  std::map<std::pair<int, int>, int> matched_pred;  // (frame, gt id) -> pred id
  std::map<int, int> last;
  for (const auto& [f, ms] : frame_matches) {
    for (const auto& m : ms) {
      ++c.matches;
      c.iou_sum += m.iou;
      auto it = last.find(m.gt_id);
      if (it != last.end() && it->second != m.pred_id) ++c.ids;
      last[m.gt_id] = m.pred_id;
      matched_pred[{f, m.gt_id}] = m.pred_id;
    }
  }
  c.fn = c.gt - c.matches;
  c.fp = c.pred - c.matches;

  std::map<int, std::vector<int>> frames_of;  // gt id -> sorted frames present
  for (const auto& g : gt) frames_of[g.id].push_back(g.frame);
  for (auto& [id, fs] : frames_of) {
    std::sort(fs.begin(), fs.end());
    ++c.tracks;
    std::vector<char> tracked(fs.size());
    long hits = 0;
    for (std::size_t k = 0; k < fs.size(); ++k) {
      tracked[k] = matched_pred.count({fs[k], id}) ? 1 : 0;
      hits += tracked[k];
    }
    const double ratio = static_cast<double>(hits) / static_cast<double>(fs.size());
    if (ratio >= 0.8) ++c.mt;
    if (ratio <= 0.2) ++c.ml;
    int first = -1, lastk = -1;
    for (std::size_t k = 0; k < fs.size(); ++k) {
      if (tracked[k]) {
        if (first < 0) first = static_cast<int>(k);
        lastk = static_cast<int>(k);
      }
    }
    for (int k = first + 1; first >= 0 && k <= lastk; ++k) {
      if (tracked[k - 1] && !tracked[k]) ++c.frag;
    }
  }

  // Identity: co-occurrence counts between trajectories, then max-weight matching.
  std::vector<int> gids, pids;
  {
    std::set<int> gs, ps;
    for (const auto& g : gt) gs.insert(g.id);
    for (const auto& p : pred) ps.insert(p.id);
    gids.assign(gs.begin(), gs.end());
    pids.assign(ps.begin(), ps.end());
  }
  long idtp = 0;
  if (!gids.empty() && !pids.empty()) {
    std::map<int, int> gindex, pindex;
    for (std::size_t i = 0; i < gids.size(); ++i) gindex[gids[i]] = static_cast<int>(i);
    for (std::size_t j = 0; j < pids.size(); ++j) pindex[pids[j]] = static_cast<int>(j);
    std::vector<std::vector<double>> overlap(gids.size(), std::vector<double>(pids.size(), 0.0));
    const auto gf = detail::by_frame(gt), pf = detail::by_frame(pred);
    for (const auto& [f, gs] : gf) {
      auto it = pf.find(f);
      if (it == pf.end()) continue;
      for (const TrackBox* g : gs) {
        for (const TrackBox* p : it->second) {
          if (iou(g->box, p->box) >= gate) overlap[gindex[g->id]][pindex[p->id]] += 1.0;
        }
      }
    }
    std::vector<std::vector<double>> cost = overlap;
    for (auto& row : cost) {
      for (double& v : row) v = -v;
    }
    const auto assign = solve_assignment(cost);
    for (std::size_t i = 0; i < gids.size(); ++i) {
      if (assign[i] >= 0) idtp += static_cast<long>(overlap[i][assign[i]]);
    }
  }
  c.idtp = idtp;
  c.idfn = c.gt - idtp;
  c.idfp = c.pred - idtp;
  return c;
}

inline MetricsReport make_report(const MotCounts& c) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto pct = [nan](double num, double den) { return den > 0 ? 100.0 * num / den : nan; };
  MetricsReport r;
  r.counts = c;
  r.fp = c.fp;
  r.fn = c.fn;
  r.ids = c.ids;
  r.frag = c.frag;
  r.mt = c.mt;
  r.ml = c.ml;
  r.mota = c.gt > 0 ? 100.0 * (1.0 - static_cast<double>(c.fp + c.fn + c.ids) / static_cast<double>(c.gt)) : nan;
  r.motp = pct(c.iou_sum, static_cast<double>(c.matches));
  r.faf = c.frames > 0 ? static_cast<double>(c.fp) / static_cast<double>(c.frames) : nan;
  r.idp = pct(static_cast<double>(c.idtp), static_cast<double>(c.idtp + c.idfp));
  r.idr = pct(static_cast<double>(c.idtp), static_cast<double>(c.idtp + c.idfn));
  r.idf1 = pct(2.0 * c.idtp, static_cast<double>(2 * c.idtp + c.idfp + c.idfn));
  return r;
}

inline MetricsReport clear_mot(const std::vector<TrackBox>& gt, const std::vector<TrackBox>& pred,
                               double iou_gate = 0.5) {
  return make_report(evaluate_sequence(gt, pred, iou_gate));
}

struct IdScores {
  double idf1, idp, idr;
};

inline IdScores id_metrics(const std::vector<TrackBox>& gt, const std::vector<TrackBox>& pred,
                           double iou_gate = 0.5) {
  const MetricsReport r = clear_mot(gt, pred, iou_gate);
  return {r.idf1, r.idp, r.idr};
}

inline const char* report_csv_header() { return "IDF1,IDP,IDR,MOTA,MOTP,FAF,MT,ML,FP,FN,IDS,Frag"; }

inline std::string report_csv_row(const MetricsReport& r) {
  auto f = [](double v, const char* fmt) {
    if (!std::isfinite(v)) return std::string("--");
    char buf[64];
    std::snprintf(buf, sizeof(buf), fmt, v);
    return std::string(buf);
  };
  std::ostringstream s;
  s << f(r.idf1, "%.1f") << ',' << f(r.idp, "%.1f") << ',' << f(r.idr, "%.1f") << ',' << f(r.mota, "%.1f") << ','
    << f(r.motp, "%.1f") << ',' << f(r.faf, "%.2f") << ',' << r.mt << ',' << r.ml << ',' << r.fp << ',' << r.fn
    << ',' << r.ids << ',' << r.frag;
  return s.str();
}

inline nlohmann::json report_json(const MetricsReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  const MotCounts& c = r.counts;
  return {{"IDF1", num(r.idf1)}, {"IDP", num(r.idp)}, {"IDR", num(r.idr)},   {"MOTA", num(r.mota)},
          {"MOTP", num(r.motp)}, {"FAF", num(r.faf)}, {"MT", r.mt},          {"ML", r.ml},
          {"FP", r.fp},          {"FN", r.fn},        {"IDS", r.ids},        {"Frag", r.frag},
          {"counts",
           {{"frames", c.frames}, {"gt", c.gt}, {"pred", c.pred}, {"matches", c.matches},
            {"tracks", c.tracks}, {"idtp", c.idtp}, {"idfp", c.idfp}, {"idfn", c.idfn}}}};
}

inline std::vector<TrackBox> read_mot_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<TrackBox> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::vector<std::string> cells;
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 6) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected at least 6 fields");
    }
    try {
      TrackBox b;
      b.frame = std::stoi(cells[0]);
      b.id = std::stoi(cells[1]);
      b.box = {std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4]), std::stod(cells[5])};
      if (cells.size() > 6) b.confidence = std::stod(cells[6]);
      out.push_back(b);
    } catch (const std::logic_error&) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

inline void write_mot_csv(const std::filesystem::path& path, const std::vector<TrackBox>& boxes) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  char line[256];
  for (const auto& b : boxes) {
    std::snprintf(line, sizeof(line), "%d,%d,%.3f,%.3f,%.3f,%.3f,%.4f,-1,-1,-1\n", b.frame, b.id, b.box.left,
                  b.box.top, b.box.width, b.box.height, b.confidence);
    out << line;
  }
}

}  // namespace tba

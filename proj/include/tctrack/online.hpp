#pragma once

// Latency-aware online evaluation.
//
// Frame k (0-based) arrives at a_k = k / fps. The tracker handles one frame at a
// time; when it becomes free it takes the newest frame that has arrived and
// silently drops older unprocessed ones. Ground-truth frame k is scored against
// the most recent prediction finished by its evaluation instant:
//   FrameEnd     e_k = a_{k+1}  (the frame interval has elapsed)
//   FrameArrival e_k = a_k
// and against the initialization box when nothing has finished yet.

#include <chrono>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tctrack/tracker.hpp"

namespace tctrack {

/// Raised for invalid latency specifications.
class LatencyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct LatencyProfile {
  enum class Mode { Constant, Trace, Measured };
  Mode mode = Mode::Constant;
  double constant_ms = 0.0;
  std::vector<double> trace_ms;  // one entry per processed frame, reused cyclically

  static LatencyProfile constant(double ms) {
    LatencyProfile p;
    p.constant_ms = ms;
    p.validate();
    return p;
  }
  static LatencyProfile trace(std::vector<double> ms) {
    LatencyProfile p;
    p.mode = Mode::Trace;
    p.trace_ms = std::move(ms);
    p.validate();
    return p;
  }
  static LatencyProfile measured() {
    LatencyProfile p;
    p.mode = Mode::Measured;
    return p;
  }

  static std::vector<double> read_trace(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LatencyError("cannot open latency trace '" + path + "'");
    std::vector<double> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      std::istringstream ls(line);
      double v;
      if (!(ls >> v)) throw LatencyError(path + ":" + std::to_string(lineno) + ": not a number: '" + line + "'");
      out.push_back(v);
    }
    return out;
  }

  /// "constant:<ms>", "trace:<file>" or "measured".
  static LatencyProfile parse(const std::string& spec) {
    if (spec == "measured") return measured();
    const auto colon = spec.find(':');
    if (colon == std::string::npos) throw LatencyError("latency must be constant:<ms>, trace:<file> or measured");
    const std::string kind = spec.substr(0, colon), arg = spec.substr(colon + 1);
    if (kind == "constant") {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(arg, &used);
      } catch (const std::exception&) {
        throw LatencyError("bad constant latency '" + arg + "'");
      }
      if (used != arg.size()) throw LatencyError("bad constant latency '" + arg + "'");
      return constant(v);
    }
    if (kind == "trace") return trace(read_trace(arg));
    throw LatencyError("unknown latency mode '" + kind + "'");
  }

  void validate() const {
    if (mode == Mode::Constant && !(constant_ms >= 0.0)) throw LatencyError("latency must be >= 0 ms");
    if (mode == Mode::Trace) {
      if (trace_ms.empty()) throw LatencyError("latency trace is empty");
      for (double v : trace_ms)
        if (!(v >= 0.0)) throw LatencyError("latency trace contains a negative or invalid entry");
    }
  }

  /// Latency of the n-th processed frame; nullopt means "measure it".
  std::optional<double> latency(std::size_t processed_index) const {
    switch (mode) {
      case Mode::Constant:
        return constant_ms;
      case Mode::Trace:
        return trace_ms[processed_index % trace_ms.size()];
      case Mode::Measured:
        return std::nullopt;
    }
    return std::nullopt;
  }

  std::string describe() const {
    switch (mode) {
      case Mode::Constant: {
        std::ostringstream os;
        os << "constant:" << constant_ms;
        return os.str();
      }
      case Mode::Trace:
        return "trace:" + std::to_string(trace_ms.size()) + " entries";
      case Mode::Measured:
        return "measured";
    }
    return "";
  }
};

enum class Scheduling {
  LatestWithSkip,  // take the newest arrived frame, drop stale ones
  Fifo,            // process every frame in order, queueing behind the tracker
};

enum class PairingInstant { FrameEnd, FrameArrival };

struct OnlineOptions {
  Scheduling scheduling = Scheduling::LatestWithSkip;
  PairingInstant instant = PairingInstant::FrameEnd;
};

struct ProcessedFrame {
  std::size_t frame = 0;
  double start_ms = 0.0;
  double finish_ms = 0.0;
  BoundingBox prediction;
};

/// For each ground-truth frame, the frame whose prediction it is scored against
/// (nullopt: the initialization box).
struct OnlinePairing {
  std::vector<std::optional<std::size_t>> paired;
};

namespace detail {
inline constexpr double kTimeEps = 1e-9;
}

/// Runs the scheduler. process(frame, processed_index, prediction&) performs the work and
/// returns the latency to charge in milliseconds.
template <class Process>
std::vector<ProcessedFrame> schedule_frames(std::size_t n, double fps, Scheduling scheduling, Process&& process) {
  if (!(fps > 0.0)) throw LatencyError("fps must be positive");
  const double period = 1000.0 / fps;
  std::vector<ProcessedFrame> done;
  double t = 0.0;
  std::size_t next_unseen = 0;  // lowest frame index not yet processed or dropped
  while (next_unseen < n) {
    std::size_t f;
    if (scheduling == Scheduling::Fifo) {
      f = next_unseen;
    } else {
      const auto arrived = static_cast<std::size_t>(std::floor(t / period + detail::kTimeEps));
      f = std::min(n - 1, std::max(arrived, next_unseen));
    }
    const double arrival = static_cast<double>(f) * period;
    const double start = std::max(t, arrival);
    ProcessedFrame pf;
    pf.frame = f;
    pf.start_ms = start;
    const double lat = process(f, done.size(), pf.prediction);
    if (!(lat >= 0.0)) throw LatencyError("negative latency for frame " + std::to_string(f + 1));
    pf.finish_ms = start + lat;
    t = pf.finish_ms;
    done.push_back(pf);
    next_unseen = f + 1;
  }
  return done;
}

inline OnlinePairing pair_with_ground_truth(const std::vector<ProcessedFrame>& processed, std::size_t n, double fps,
                                            PairingInstant instant) {
  const double period = 1000.0 / fps;
  OnlinePairing p;
  p.paired.resize(n);
  std::size_t j = 0;
  std::optional<std::size_t> latest;
  for (std::size_t k = 0; k < n; ++k) {
    const double e = (static_cast<double>(k) + (instant == PairingInstant::FrameEnd ? 1.0 : 0.0)) * period;
    // A result finishing exactly at the instant counts, but never one for a later frame.
    while (j < processed.size() && processed[j].frame <= k && processed[j].finish_ms <= e + detail::kTimeEps * period)
      latest = processed[j++].frame;
    p.paired[k] = latest;
  }
  return p;
}

struct OnlineResult {
  std::vector<ProcessedFrame> processed;
  OnlinePairing pairing;
  std::vector<BoundingBox> predictions;  // per ground-truth frame, after pairing
};

/// Streams the sequence through the tracker under the latency profile.
inline OnlineResult run_online(FrameTracker& tracker, const Sequence& seq, const LatencyProfile& profile,
                               const OnlineOptions& opt = {}) {
  seq.validate();
  profile.validate();
  using clock = std::chrono::steady_clock;
  OnlineResult r;
  r.processed = schedule_frames(seq.size(), seq.fps, opt.scheduling,
                                [&](std::size_t f, std::size_t order, BoundingBox& pred) {
                                  const Tensor frame = seq.frame(f);
                                  const auto t0 = clock::now();
                                  if (f == 0) {
                                    tracker.init(frame, seq.groundtruth[0]);
                                    pred = seq.groundtruth[0];
                                  } else {
                                    pred = tracker.update(frame, f);
                                  }
                                  const double measured =
                                      std::chrono::duration<double, std::milli>(clock::now() - t0).count();
                                  return profile.latency(order).value_or(measured);
                                });
  r.pairing = pair_with_ground_truth(r.processed, seq.size(), seq.fps, opt.instant);
  std::vector<std::optional<BoundingBox>> by_frame(seq.size());
  for (const auto& pf : r.processed) by_frame[pf.frame] = pf.prediction;
  for (std::size_t k = 0; k < seq.size(); ++k) {
    const auto& p = r.pairing.paired[k];
    r.predictions.push_back(p ? *by_frame[*p] : seq.groundtruth[0]);
  }
  return r;
}

}  // namespace tctrack

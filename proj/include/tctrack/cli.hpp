#pragma once

// Command-line front end shared by tools/tctrack.cpp and the tests.

#include <algorithm>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tctrack/checkpoint.hpp"
#include "tctrack/config.hpp"
#include "tctrack/gradcheck.hpp"
#include "tctrack/io.hpp"
#include "tctrack/report.hpp"
#include "tctrack/selftest.hpp"
#include "tctrack/synthetic.hpp"

namespace tctrack {

struct CliArgs {
  std::string config;
  std::string seq_dir;
  std::optional<std::uint64_t> synthetic;  // generate a moving-square sequence instead of reading one
  std::string latency = "measured";
  std::string report;
  std::string checkpoint;
  std::string output;
  std::optional<std::uint64_t> seed;
  double fps = 30.0;
  int frames = 30;
  int clips = 10;
};

namespace detail {

inline RunConfig effective_config(const CliArgs& a) {
  RunConfig c = a.config.empty() ? parse_config(json::object()) : load_config(a.config);
  if (a.seed) {
    c.seed = *a.seed;
    c.train.seed = *a.seed;
  }
  return c;
}

inline Sequence input_sequence(const CliArgs& a) {
  if (a.synthetic) {
    SyntheticConfig sc;
    sc.frames = a.frames;
    return Sequence::from_clip(make_moving_square(*a.synthetic, sc), "synthetic-" + std::to_string(*a.synthetic), a.fps);
  }
  if (a.seq_dir.empty()) throw IngestionError("--seq-dir or --synthetic is required");
  return load_sequence(a.seq_dir, a.fps);
}

inline std::unique_ptr<TCTrackModel> make_model(const RunConfig& c, const CliArgs& a) {
  auto m = std::make_unique<TCTrackModel>(c.model());
  if (!a.checkpoint.empty()) load_checkpoint(*m, a.checkpoint);
  return m;
}

inline void emit(const json& report, const CliArgs& a, std::ostream& out) {
  if (a.report.empty())
    out << report.dump(2) << '\n';
  else
    write_report(report, a.report);
}

inline int cmd_track(const CliArgs& a, std::ostream& out) {
  const RunConfig c = effective_config(a);
  const Sequence seq = input_sequence(a);
  auto model = make_model(c, a);
  TCTracker tracker(*model, c.tracker);
  const OfflineResult r = track_offline(tracker, seq);
  std::ofstream file;
  if (!a.output.empty()) {
    file.open(a.output);
    if (!file) throw std::runtime_error("cannot write '" + a.output + "'");
  }
  std::ostream& os = a.output.empty() ? out : file;
  os.precision(10);
  for (const auto& b : r.predictions) os << b.x1() << ',' << b.y1() << ',' << b.w << ',' << b.h << '\n';
  return 0;
}

inline int cmd_eval_offline(const CliArgs& a, std::ostream& out) {
  const RunConfig c = effective_config(a);
  const Sequence seq = input_sequence(a);
  auto model = make_model(c, a);
  TCTracker tracker(*model, c.tracker);
  const OfflineResult r = track_offline(tracker, seq);
  const MetricsReport m = compute_metrics(r.predictions, seq.groundtruth, EvalMode::Offline);
  ReportTiming t{"offline", mean_fps(r.latency_ms), seq.size()};
  emit(make_report(seq.name, seq.fps, m, identity_pairing(r.predictions), t, to_json(c)), a, out);
  return 0;
}

inline int cmd_eval_online(const CliArgs& a, std::ostream& out) {
  const RunConfig c = effective_config(a);
  const LatencyProfile profile = LatencyProfile::parse(a.latency);
  const Sequence seq = input_sequence(a);
  auto model = make_model(c, a);
  TCTracker tracker(*model, c.tracker);
  const OnlineResult r = run_online(tracker, seq, profile, c.online);
  const MetricsReport m = compute_metrics(r.predictions, seq.groundtruth, EvalMode::Online);
  std::vector<double> lat;
  for (const auto& p : r.processed) lat.push_back(p.finish_ms - p.start_ms);
  ReportTiming t{profile.describe(), mean_fps(lat), r.processed.size()};
  emit(make_report(seq.name, seq.fps, m, online_pairing_rows(r), t, to_json(c)), a, out);
  return 0;
}

inline int cmd_gradcheck(const CliArgs& a, std::ostream& out) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suites(a.seed.value_or(0))) {
    char line[200];
    std::snprintf(line, sizeof line, "%-16s checked %-6zu max_rel_err %-10.3g %s (%s)\n", r.name.c_str(), r.checked,
                  r.max_rel_error, r.passed ? "PASS" : "FAIL", r.worst.c_str());
    out << line;
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

inline int cmd_selftest(const CliArgs& a, std::ostream& out) {
  return print_selftest(run_selftest(a.seed.value_or(0)), out) ? 0 : 1;
}

/// Trains on synthetic moving-square clips; one step per batch, random sub-clip per clip.
inline int cmd_train(const CliArgs& a, std::ostream& out) {
  const RunConfig c = effective_config(a);
  auto model = make_model(c, a);
  const auto& cur = c.train.curriculum;
  int longest = cur.enabled ? cur.lengths.back() : cur.fixed_length;
  const auto data = make_synthetic_dataset(static_cast<std::size_t>(a.clips), std::max(longest, a.frames), c.seed);
  Trainer trainer(*model, c.train);
  Rng rng(c.seed);
  const auto batch = static_cast<std::size_t>(c.train.lr.batch_size);
  for (int epoch = 1; epoch <= c.train.lr.epochs; ++epoch) {
    const int len = video_length(epoch, cur);
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    int steps = 0;
    for (std::size_t s = 0; s < order.size(); s += batch) {
      std::vector<Clip> b;
      for (std::size_t i = s; i < std::min(order.size(), s + batch); ++i) {
        const Clip& full = data[order[i]];
        std::uniform_int_distribution<std::size_t> start(0, full.frames.size() - static_cast<std::size_t>(len));
        b.push_back(subclip(full, start(rng), static_cast<std::size_t>(len)));
      }
      sum += trainer.train_step(b, epoch).loss;
      ++steps;
    }
    out << "epoch " << epoch << " len " << len << " lr " << learning_rate(epoch, c.train.lr) << " loss "
        << sum / steps << '\n';
  }
  if (!a.output.empty()) save_checkpoint(*model, a.output);
  return 0;
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"TCTrack toy tracker: tracking, evaluation and checks", "tctrack"};
  app.require_subcommand(1);
  CliArgs a;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", a.config, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("--seed", a.seed, "override the config seed");
    s->add_option("--checkpoint", a.checkpoint, "parameter checkpoint to load")->check(CLI::ExistingFile);
  };
  auto sequence = [&](CLI::App* s) {
    s->add_option("--seq-dir", a.seq_dir, "OTB-style sequence directory");
    s->add_option("--synthetic", a.synthetic, "use a generated moving-square sequence with this seed");
    s->add_option("--frames", a.frames, "frames of the generated sequence")->check(CLI::Range(2, 100000));
    s->add_option("--fps", a.fps, "nominal frame rate")->check(CLI::PositiveNumber);
  };

  auto* track = app.add_subcommand("track", "track a sequence and print x,y,w,h per frame");
  common(track);
  sequence(track);
  track->add_option("--output", a.output, "write boxes here instead of stdout");

  auto* off = app.add_subcommand("eval-offline", "evaluate without latency");
  common(off);
  sequence(off);
  off->add_option("--report", a.report, "write the JSON report here instead of stdout");

  auto* on = app.add_subcommand("eval-online", "latency-aware evaluation");
  common(on);
  sequence(on);
  on->add_option("--report", a.report, "write the JSON report here instead of stdout");
  on->add_option("--latency", a.latency, "constant:<ms> | trace:<file> | measured");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  gc->add_option("--seed", a.seed, "seed for the random fixtures");

  auto* st = app.add_subcommand("selftest", "oracle fixtures");
  st->add_option("--seed", a.seed, "seed for the random fixtures");

  auto* tr = app.add_subcommand("train", "train on synthetic clips");
  common(tr);
  tr->add_option("--clips", a.clips, "number of synthetic clips")->check(CLI::PositiveNumber);
  tr->add_option("--frames", a.frames, "frames per synthetic clip")->check(CLI::Range(2, 100000));
  tr->add_option("--output", a.output, "checkpoint to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*track) return detail::cmd_track(a, out);
    if (*off) return detail::cmd_eval_offline(a, out);
    if (*on) return detail::cmd_eval_online(a, out);
    if (*gc) return detail::cmd_gradcheck(a, out);
    if (*st) return detail::cmd_selftest(a, out);
    if (*tr) return detail::cmd_train(a, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace tctrack

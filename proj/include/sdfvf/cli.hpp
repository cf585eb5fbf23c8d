#pragma once

// Command-line front end. Exit codes: 0 ok, 1 validation, 2 I/O, 3 numerical.

#include "sdfvf/session.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>
#include <set>

namespace sdfvf::cli {

enum ExitCode : int { ok = 0, validation = 1, io = 2, numerical = 3 };

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::filesystem::path out = ".";
  unsigned threads = 0;
};

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_file_bytes(path);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  write_file_bytes(path, j.dump(2) + "\n");
}

inline std::vector<Vec3> points_from_json(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) throw ValidationError(what + " must be an array of [x,y,z]");
  std::vector<Vec3> out;
  for (const auto& p : j) {
    const auto v = p.get<std::vector<double>>();
    if (v.size() != 3) throw ValidationError(what + " entries need 3 coordinates");
    out.emplace_back(v[0], v[1], v[2]);
  }
  return out;
}

inline nlohmann::ordered_json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

/// Volume input: NRRD, or a phantom spec when the file ends in .json.
inline LabeledVolume load_volume_input(const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    Phantom ph = make_phantom(phantom_spec_from_json(read_json_file(path)));
    return {std::move(ph.volume), std::move(ph.segments)};
  }
  return load_label_volume(path);
}

inline std::uint64_t seed_or(const GlobalOptions& g, std::uint64_t fallback) { return g.seed ? *g.seed : fallback; }

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

inline int cmd_sdf_build(const GlobalOptions& g, const std::filesystem::path& input, std::vector<unsigned> labels,
                         std::ostream& out) {
  const LabeledVolume lv = detail::load_volume_input(input);
  if (labels.empty()) {
    std::set<Label> present(lv.volume.labels.begin(), lv.volume.labels.end());
    present.erase(0);
    labels.assign(present.begin(), present.end());
  }
  for (unsigned l : labels) {
    if (l == 0 || l > 65535) throw ValidationError("label " + std::to_string(l) + " is out of range");
    if (lv.volume.count(static_cast<Label>(l)) == 0)
      throw ValidationError("label " + std::to_string(l) + " is absent from the volume");
  }
  for (unsigned l : labels) {
    const auto t0 = std::chrono::steady_clock::now();
    const SdfVolume sdf = signed_distance(lv.volume, static_cast<Label>(l), resolve_workers(g.threads));
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto path = sdf_cache_path(g.out, static_cast<Label>(l));
    write_sdf_cache(sdf, path);
    const auto [lo, hi] = std::minmax_element(sdf.values.begin(), sdf.values.end());
    out << "label " << l << ": min " << format_number(*lo) << " mm, max " << format_number(*hi) << " mm, built in "
        << format_number(secs) << " s -> " << path.string() << '\n';
  }
  return ok;
}

inline int cmd_phantom(const GlobalOptions& g, const std::filesystem::path& spec_path, const std::string& name,
                       std::ostream& out, std::ostream& err) {
  const Phantom ph = make_phantom(phantom_spec_from_json(detail::read_json_file(spec_path)));
  for (const auto& w : ph.warnings) err << "warning: " << w << '\n';
  const auto path = g.out / name;
  write_nrrd(ph.volume, ph.segments, path);
  const auto& d = ph.volume.geometry.dims;
  out << "wrote " << path.string() << " (" << d[0] << "x" << d[1] << "x" << d[2] << ", " << ph.segments.entries.size()
      << " segments)\n";
  return ok;
}

struct CalibOptions {
  std::optional<std::filesystem::path> input;
  bool synthetic = false;
  std::size_t count = 0;  // 0 = per-kind default
  double noise = -1.0;    // <0 = per-kind default
  int degree = 3;
};

inline int cmd_calib(const GlobalOptions& g, const std::string& kind, const CalibOptions& o, std::ostream& out) {
  if (!o.input && !o.synthetic) throw ValidationError("calib " + kind + " needs --input FILE or --synthetic");
  std::mt19937_64 rng(detail::seed_or(g, 0));
  auto count_or = [&o](std::size_t d) { return o.count ? o.count : d; };
  auto noise_or = [&o](double d) { return o.noise >= 0 ? o.noise : d; };
  nlohmann::ordered_json result;
  result["kind"] = kind;

  if (kind == "pivot") {
    std::vector<RigidTransform> poses;
    Vec3 true_tip, true_pivot;
    if (o.synthetic) {
      true_tip = Vec3(3.0, -5.0, 120.0);
      true_pivot = Vec3(50.0, 20.0, -400.0);
      poses = synthetic_pivot_poses(true_tip, true_pivot, count_or(40), noise_or(0.0), rng);
    } else {
      const auto j = detail::read_json_file(*o.input);
      for (const auto& p : j.at("poses")) poses.push_back(pose_from_json(p));
    }
    const PivotResult r = pivot_calibrate(poses);
    result["tip_offset_mm"] = detail::vec_json(r.tip_offset);
    result["pivot_mm"] = detail::vec_json(r.pivot_point);
    result["rmse_mm"] = r.rmse;
    result["samples"] = r.sample_count;
    if (o.synthetic) result["tip_error_mm"] = (r.tip_offset - true_tip).norm();
    out << "pivot: tip [" << format_number(r.tip_offset.x()) << ", " << format_number(r.tip_offset.y()) << ", "
        << format_number(r.tip_offset.z()) << "] mm, rmse " << format_number(r.rmse) << " mm\n";
  } else if (kind == "hand-eye") {
    std::vector<MotionPair> pairs;
    RigidTransform truth;
    if (o.synthetic) {
      truth = random_transform(rng, 50.0);
      pairs = synthetic_hand_eye_pairs(truth, count_or(20), noise_or(0.02), rng);
    } else {
      const auto j = detail::read_json_file(*o.input);
      for (const auto& p : j.at("pairs")) pairs.push_back({pose_from_json(p.at("a")), pose_from_json(p.at("b"))});
    }
    const HandEyeResult r = hand_eye_calibrate(pairs);
    result["x"] = pose_to_json(r.x);
    result["rotation_rmse_deg"] = r.rot_rmse_deg;
    result["translation_rmse_mm"] = r.trans_rmse_mm;
    result["samples"] = r.sample_count;
    if (o.synthetic) {
      result["rotation_error_deg"] = rotation_angle_between(r.x.rotation, truth.rotation) * 180.0 / std::numbers::pi;
      result["translation_error_mm"] = (r.x.translation - truth.translation).norm();
    }
    out << "hand-eye: translation rmse " << format_number(r.trans_rmse_mm) << " mm, rotation rmse "
        << format_number(r.rot_rmse_deg) << " deg\n";
  } else if (kind == "register") {
    std::vector<Vec3> model, measured;
    if (o.synthetic) {
      model = {Vec3(0, 0, 0), Vec3(60, 0, 0), Vec3(0, 45, 0), Vec3(0, 0, 30), Vec3(40, 35, 20), Vec3(-20, 30, 10)};
      const RigidTransform truth = random_transform(rng);
      std::normal_distribution<double> noise(0.0, noise_or(0.1));
      for (const auto& p : model) measured.push_back(truth * p + Vec3(noise(rng), noise(rng), noise(rng)));
    } else {
      const auto j = detail::read_json_file(*o.input);
      model = detail::points_from_json(j.at("model_mm"), "model_mm");
      measured = detail::points_from_json(j.at("measured_mm"), "measured_mm");
    }
    const RegistrationResult r = register_points(model, measured);
    result["transform"] = pose_to_json(r.transform);
    result["rmse_mm"] = r.rmse;
    out << "register: rmse " << format_number(r.rmse) << " mm over " << model.size() << " fiducials\n";
  } else if (kind == "gravity") {
    std::vector<GravitySample> samples;
    int degree = o.degree;
    if (o.synthetic) {
      const GravityModel truth = synthetic_bias_model(degree, 1.5, rng);
      samples = synthetic_gravity_samples(truth, count_or(400), noise_or(0.05), rng);
    } else {
      const auto j = detail::read_json_file(*o.input);
      degree = j.value("degree", degree);
      for (const auto& s : j.at("samples")) {
        GravitySample gs;
        if (s.contains("tool_quat_wxyz")) {
          const auto q = s["tool_quat_wxyz"].get<std::vector<double>>();
          if (q.size() != 4) throw ValidationError("tool_quat_wxyz needs 4 numbers");
          const auto uv = orientation_params(Eigen::Quaterniond(q[0], q[1], q[2], q[3]).normalized().toRotationMatrix());
          gs.u = uv[0];
          gs.v = uv[1];
        } else {
          gs.u = s.at("u").get<double>();
          gs.v = s.at("v").get<double>();
        }
        const auto f = s.at("f").get<std::vector<double>>();
        if (f.size() != 3) throw ValidationError("gravity sample f needs 3 components");
        gs.force = Vec3(f[0], f[1], f[2]);
        samples.push_back(gs);
      }
    }
    const GravityModel m = fit_gravity_model(samples, degree);
    result["model"] = gravity_to_json(m);
    out << "gravity: degree " << m.degree << ", fit rmse " << format_number(m.fit_rmse) << " N over "
        << samples.size() << " samples\n";
  } else {
    throw ValidationError("unknown calibration '" + kind + "' (expected pivot, hand-eye, register or gravity)");
  }
  const auto path = g.out / ("calib_" + kind + ".json");
  detail::write_json(path, result);
  out << "wrote " << path.string() << '\n';
  return ok;
}

inline void print_metrics(const Metrics& m, std::ostream& out) {
  out << "  ticks " << m.ticks << " (" << format_number(m.duration) << " s)\n";
  out << "  drilled volume " << format_number(m.drilled_volume) << " mm^3\n";
  for (const auto& [l, v] : m.damage_volume) {
    out << "  label " << l << ": damage " << format_number(v) << " mm^3, min clearance ";
    if (auto it = m.min_clearance.find(l); it != m.min_clearance.end()) out << format_number(it->second) << " mm\n";
    else out << "n/a\n";
  }
  out << "  breach ticks " << m.breach_ticks << (m.breach_ticks > 0 ? "  [BREACH]" : "") << '\n';
  out << "  mean |F_C| " << format_number(m.mean_compliance_force) << " N\n";
}

struct ExperimentOptions {
  bool vf = false;
  bool no_vf = false;
  bool csv = false;
  std::optional<std::filesystem::path> sdf_cache;
};

inline int cmd_experiment(const GlobalOptions& g, const std::filesystem::path& scenario_path,
                          const ExperimentOptions& o, std::ostream& out) {
  Scenario sc = load_scenario(scenario_path);
  if (g.seed) sc.seed = *g.seed;
  BuildOptions bo;
  bo.workers = resolve_workers(g.threads);
  bo.sdf_cache_dir = o.sdf_cache;

  std::vector<bool> runs;
  if (o.vf) runs.push_back(true);
  if (o.no_vf) runs.push_back(false);
  if (runs.empty()) runs.push_back(sc.vf_enabled);

  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  for (bool vf : runs) {
    const std::string tag = vf ? "vf" : "novf";
    const RunResult r = run_trajectory(sc, bo, vf);
    write_file_bytes(g.out / ("trace_" + tag + ".jsonl"), trace_to_jsonl(r.trace));
    if (o.csv) {
      std::ostringstream csv;
      write_trace_csv(r.trace, csv);
      write_file_bytes(g.out / ("trace_" + tag + ".csv"), csv.str());
    }
    auto mj = metrics_to_json(r.metrics);
    mj["vf_enabled"] = vf;
    mj["seed"] = sc.seed;
    detail::write_json(g.out / ("metrics_" + tag + ".json"), mj);
    summary[tag] = mj;
    out << (vf ? "VF on" : "VF off") << ":\n";
    print_metrics(r.metrics, out);
  }
  if (runs.size() == 2) detail::write_json(g.out / "metrics_paired.json", summary);
  return ok;
}

inline int cmd_report(const std::filesystem::path& trace_path, const std::optional<std::filesystem::path>& csv,
                      std::ostream& out) {
  std::ifstream in(trace_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + trace_path.string());
  const SessionTrace trace = read_trace_jsonl(in);
  const Metrics m = compute_metrics(trace);
  out << "report " << trace_path.string() << ":\n";
  print_metrics(m, out);
  if (csv) {
    std::ostringstream os;
    write_trace_csv(trace, os);
    write_file_bytes(*csv, os.str());
    out << "wrote " << csv->string() << '\n';
  }
  return ok;
}

inline std::atomic<bool>& stop_requested() {
  static std::atomic<bool> flag{false};
  return flag;
}

struct ServeOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 8765;
  bool lockstep = false;
  std::optional<std::filesystem::path> trace_out;
  std::optional<std::filesystem::path> sdf_cache;
  double max_force = 20.0;
};

inline int cmd_serve(const GlobalOptions& g, const std::filesystem::path& scenario_path, const ServeOptions& o,
                     std::ostream& out) {
  Scenario sc = load_scenario(scenario_path);
  if (g.seed) sc.seed = *g.seed;
  SessionOptions so;
  so.clock = o.lockstep ? SessionOptions::Clock::lockstep : SessionOptions::Clock::realtime;
  so.max_force = o.max_force;
  so.build.workers = resolve_workers(g.threads);
  so.build.sdf_cache_dir = o.sdf_cache;
  SessionHost host(sc, so);
  host.start(o.port, o.host);
  out << "serving ws://" << o.host << ":" << host.port() << "/ (" << (o.lockstep ? "lockstep" : "realtime")
      << "), Ctrl-C to stop" << std::endl;
  stop_requested() = false;
  auto handler = [](int) { stop_requested() = true; };
  std::signal(SIGINT, handler);
  std::signal(SIGTERM, handler);
  while (!stop_requested()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  host.stop();
  if (o.trace_out) {
    write_file_bytes(*o.trace_out, trace_to_jsonl(host.simulation().trace()));
    out << "wrote " << o.trace_out->string() << '\n';
  }
  return ok;
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Signed-distance virtual fixtures: SDF builds, calibration, scripted experiments and a steering service"};
  app.require_subcommand(1);
  GlobalOptions g;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  auto* seed_opt = app.add_option("--seed", seed, "RNG seed (overrides scenario seeds)");
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads for distance-field builds (0 = all cores)");

  std::string input, name = "phantom.nrrd", calib_kind, trace_in, scenario_path;
  std::vector<unsigned> labels;
  std::string csv_path, sdf_cache, trace_out;
  CalibOptions co;
  std::string calib_input;
  ExperimentOptions eo;
  ServeOptions so;

  auto* sdf = app.add_subcommand("sdf-build", "Build signed distance caches for labels of a volume");
  sdf->add_option("volume", input, "Label volume (.nrrd) or phantom spec (.json)")->required();
  sdf->add_option("--labels", labels, "Labels to build (default: all present)")->delimiter(',');

  auto* phantom = app.add_subcommand("phantom", "Rasterize a phantom spec into a labeled NRRD");
  phantom->add_option("spec", input, "Phantom spec JSON")->required();
  phantom->add_option("--name", name, "Output file name inside --out")->capture_default_str();

  auto* calib = app.add_subcommand("calib", "Calibration routines");
  calib->add_option("kind", calib_kind, "pivot | hand-eye | register | gravity")
      ->required()
      ->check(CLI::IsMember({"pivot", "hand-eye", "register", "gravity"}));
  calib->add_option("--input", calib_input, "Measurement JSON");
  calib->add_flag("--synthetic", co.synthetic, "Generate synthetic measurements from --seed");
  calib->add_option("--count", co.count, "Synthetic sample count");
  calib->add_option("--noise", co.noise, "Synthetic noise sigma (mm or N)");
  calib->add_option("--degree", co.degree, "Bernstein degree for gravity")->capture_default_str();

  auto* exp = app.add_subcommand("experiment", "Run a scripted scenario with and/or without the fixture");
  exp->add_option("scenario", scenario_path, "Scenario JSON")->required();
  exp->add_flag("--vf", eo.vf, "Run with the virtual fixture");
  exp->add_flag("--no-vf", eo.no_vf, "Run without the virtual fixture");
  exp->add_flag("--csv", eo.csv, "Also write per-tick CSV");
  exp->add_option("--sdf-cache", sdf_cache, "Directory for SDF caches");

  auto* rep = app.add_subcommand("report", "Summarize a trace");
  rep->add_option("trace", trace_in, "Trace JSONL")->required();
  rep->add_option("--csv", csv_path, "Write per-tick CSV here");

  auto* serve = app.add_subcommand("serve", "Host an interactive steering session over WebSocket");
  serve->add_option("scenario", scenario_path, "Scenario JSON")->required();
  serve->add_option("--host", so.host, "Bind address")->capture_default_str();
  serve->add_option("--port", so.port, "Port (0 = ephemeral)")->capture_default_str();
  serve->add_flag("--lockstep", so.lockstep, "Advance only on client hand_force ticks (deterministic replay)");
  serve->add_option("--trace-out", trace_out, "Write the session trace here on shutdown");
  serve->add_option("--sdf-cache", sdf_cache, "Directory for SDF caches");
  serve->add_option("--max-force", so.max_force, "Hand force bound in N")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : validation;
  }
  if (*seed_opt) g.seed = seed;
  g.out = out_dir;

  try {
    if (*sdf) return cmd_sdf_build(g, input, labels, out);
    if (*phantom) return cmd_phantom(g, input, name, out, err);
    if (*calib) {
      if (!calib_input.empty()) co.input = calib_input;
      return cmd_calib(g, calib_kind, co, out);
    }
    if (*exp) {
      if (!sdf_cache.empty()) eo.sdf_cache = sdf_cache;
      return cmd_experiment(g, scenario_path, eo, out);
    }
    if (*rep) return cmd_report(trace_in, csv_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(csv_path), out);
    if (*serve) {
      if (!trace_out.empty()) so.trace_out = trace_out;
      if (!sdf_cache.empty()) so.sdf_cache = sdf_cache;
      return cmd_serve(g, scenario_path, so, out);
    }
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return validation;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return io;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return numerical;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return validation;
  }
  return validation;
}

}  // namespace sdfvf::cli

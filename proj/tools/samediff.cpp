// Command-line entry point: training, evaluation, replay, analysis, demo
// tooling and the demo service.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "samediff/curriculum.hpp"
#include "samediff/demo_service.hpp"
#include "samediff/harness.hpp"
#include "samediff/imitation.hpp"
#include "samediff/png_io.hpp"

using namespace samediff;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty())
    fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

const ObjectSet& objects(std::uint64_t seed, ObjectSet& storage) {
  if (seed == kDefaultObjectSeed) return default_object_set();
  storage = generate_object_set(seed);
  return storage;
}

std::string frame_name(const std::string& dir, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu.png", i);
  return (fs::path(dir) / buf).string();
}

// Replays one trace; returns true when rewards and hashes match.
bool replay_one(const EpisodeTrace& trace, const std::string& out_dir, const std::string& label) {
  const auto r = replay_trace(trace);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    for (std::size_t i = 0; i < r.observations.size(); ++i)
      write_png(frame_name(out_dir, i), r.observations[i].frame);
  }
  std::cout << label << ": " << trace.steps.size() << " steps, outcome " << to_string(trace.outcome)
            << ", rewards " << (r.rewards_match ? "match" : "MISMATCH") << ", hashes "
            << (r.hashes_match ? "match" : "MISMATCH") << "\n";
  return r.rewards_match && r.hashes_match;
}

volatile std::sig_atomic_t g_stop = 0;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D same-different task: environments, training and demonstrations"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train every configured seed and evaluate it");
  std::string config_path;
  std::vector<std::string> overrides;
  train->add_option("-c,--config", config_path, "Flat key = value config file");
  train->add_option("-s,--set", overrides, "Override, e.g. --set env=d12 (repeatable)");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on balanced trials");
  std::string ck_path, report_out, traces_dir;
  int n_trials = 1000;
  std::uint64_t eval_seed = 0;
  bool stochastic = false;
  eval->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
  eval->add_option("-n,--trials", n_trials, "Number of trials")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed, "Trial sampling seed");
  eval->add_flag("--stochastic", stochastic, "Sample actions instead of taking the argmax");
  eval->add_option("-o,--out", report_out, "Write the report JSON here");
  eval->add_option("--traces", traces_dir, "Write one JSON-lines trace per episode here");

  // replay
  auto* replay = app.add_subcommand("replay", "Re-run recorded traces or demos and dump frames");
  std::string replay_in, replay_out, replay_env = "d6";
  replay->add_option("input", replay_in, "Trace file, directory of traces, or demo file")->required();
  replay->add_option("-o,--out-dir", replay_out, "Write PNG frames here");
  replay->add_option("--env", replay_env, "Environment for continuous demo records");

  // heatmap
  auto* heat = app.add_subcommand("heatmap", "Viewpoint frequencies from an eval report");
  std::string heat_report, heat_csv, heat_png;
  int heat_size = 256;
  heat->add_option("report", heat_report, "Report JSON")->required();
  heat->add_option("--csv", heat_csv, "CSV output");
  heat->add_option("--png", heat_png, "PNG output");
  heat->add_option("--size", heat_size, "PNG side in pixels");

  // plans export
  auto* plans = app.add_subcommand("plans", "Lesson plans");
  plans->require_subcommand(1);
  auto* plans_export = plans->add_subcommand("export", "Write the built-in plans as JSON");
  std::string plans_out;
  plans_export->add_option("-o,--out", plans_out, "Output file (default stdout)");

  // demos
  auto* demos = app.add_subcommand("demos", "Demonstration files");
  demos->require_subcommand(1);
  auto* synth = demos->add_subcommand("synth", "Generate scripted demonstrations");
  std::string synth_env = "d6", synth_out;
  int synth_n = 791;
  std::uint64_t synth_seed = 0;
  double synth_error = 0.062;
  bool synth_discrete = false;
  synth->add_option("--env", synth_env, "Grid the viewer walks between");
  synth->add_option("-n", synth_n, "Number of trials")->check(CLI::PositiveNumber);
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--error-rate", synth_error, "Share of wrong answers")->check(CLI::Range(0.0, 1.0));
  synth->add_flag("--discrete", synth_discrete, "Write grid-snapped records instead of gaze samples");
  synth->add_option("-o,--out", synth_out, "Output demo file")->required();
  auto* disc = demos->add_subcommand("discretize", "Snap continuous demos to a grid");
  std::string disc_in, disc_out, disc_env = "d6";
  disc->add_option("input", disc_in, "Input demo file")->required();
  disc->add_option("--env", disc_env, "Target grid");
  disc->add_option("-o,--out", disc_out, "Output demo file")->required();

  // serve
  auto* serve = app.add_subcommand("serve", "Run the demonstration service");
  ServiceConfig svc;
  serve->add_option("--address", svc.address, "Bind address");
  serve->add_option("--port", svc.port, "Port (0 picks one)");
  serve->add_option("--static-dir", svc.static_dir, "Directory of the built UI bundle");
  serve->add_option("--record-path", svc.record_path, "Demo file to append to");
  serve->add_option("--seed", svc.seed, "Root seed for trial sampling");

  // render-dump
  auto* dump = app.add_subcommand("render-dump", "Render one observation to PNG");
  std::string dump_env = "d6", dump_out, dump_diff = "easy", dump_label = "same", dump_target = "A";
  int dump_loc = 0, dump_ro = 0, dump_res = 64;
  std::uint64_t dump_seed = 0;
  dump->add_option("--env", dump_env, "Environment");
  dump->add_option("--location", dump_loc, "Grid location (discrete rooms)");
  dump->add_option("--target", dump_target, "Gaze target A or B");
  dump->add_option("--difficulty", dump_diff, "easy, medium or hard");
  dump->add_option("--ro", dump_ro, "Relative orientation 0, 90 or 180");
  dump->add_option("--label", dump_label, "same or different");
  dump->add_option("--resolution", dump_res, "Image side in pixels");
  dump->add_option("--seed", dump_seed, "Trial seed");
  dump->add_option("-o,--out", dump_out, "PNG path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const RunConfig cfg = load_run_config(config_path, overrides);
      const auto summary = train_all(cfg, [](const std::string& line) { std::cout << line << std::endl; });
      std::cout << summary_to_json(summary).dump(2) << "\n";
      return summary.failed ? 3 : 0;
    }

    if (*eval) {
      const auto ck = nn::load_checkpoint(ck_path);
      const auto policy = load_policy(ck);
      ObjectSet storage;
      const auto meta = json::parse(ck.metadata);
      const ObjectSet& set = objects(meta.value("object_seed", kDefaultObjectSeed), storage);
      EvalOptions eo;
      eo.n_trials = n_trials;
      eo.seed = eval_seed;
      eo.record_traces = !traces_dir.empty();
      const auto rep =
          evaluate(policy.env, set, network_policy(policy.net, policy.channels, stochastic, eval_seed), eo);
      const json j = report_to_json(rep);
      validate_report_json(j);
      if (!report_out.empty()) write_text(report_out, j.dump(2) + "\n");
      if (eo.record_traces) {
        fs::create_directories(traces_dir);
        for (std::size_t i = 0; i < rep.traces.size(); ++i) {
          char buf[32];
          std::snprintf(buf, sizeof buf, "trace_%05zu.jsonl", i);
          write_text((fs::path(traces_dir) / buf).string(), trace_to_jsonl(rep.traces[i]));
        }
      }
      std::cout << j.dump(2) << "\n";
      return 0;
    }

    if (*replay) {
      bool ok = true;
      if (fs::is_directory(replay_in)) {
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(replay_in))
          if (e.path().extension() == ".jsonl") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
          const auto trace = trace_from_jsonl(read_text(f.string()), default_object_set());
          const std::string sub = replay_out.empty() ? "" : (fs::path(replay_out) / f.stem()).string();
          ok = replay_one(trace, sub, f.filename().string()) && ok;
        }
        return ok ? 0 : 4;
      }
      const std::string text = read_text(replay_in);
      const json first = json::parse(text.substr(0, text.find('\n')));
      if (first.value("format", "") != "samediff-demos") {
        const auto trace = trace_from_jsonl(text, default_object_set());
        return replay_one(trace, replay_out, replay_in) ? 0 : 4;
      }
      // Demo file: discrete records replay through the environment;
      // continuous records render each gaze sample.
      ObjectSet storage;
      const ObjectSet& set = objects(first.value("object_seed", kDefaultObjectSeed), storage);
      const auto records = read_demo_file(replay_in, set);
      for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string sub =
            replay_out.empty() ? "" : (fs::path(replay_out) / ("demo_" + std::to_string(i))).string();
        if (records[i].discrete) {
          const auto& d = *records[i].discrete;
          const Environment env = Environment::from_name(d.env);
          const auto trace = demo_to_trace(d, env);
          ok = replay_one(trace, sub, "demo " + std::to_string(i)) && ok;
        } else {
          const auto& d = *records[i].continuous;
          d.validate();
          const Environment env = Environment::from_name("continuous");
          const Scene scene = env.make_scene(d.trial);
          if (!sub.empty()) fs::create_directories(sub);
          for (std::size_t k = 0; k < d.samples.size() && !sub.empty(); ++k) {
            const auto& s = d.samples[k];
            const auto [pitch, yaw] = look_at(s.head_position, s.gaze_target);
            write_png(frame_name(sub, k), render(scene, env.camera_for({s.head_position, pitch, yaw})));
          }
          std::cout << "demo " << i << ": " << d.samples.size() << " gaze samples, answer "
                    << to_string(d.final_answer) << "\n";
        }
      }
      return ok ? 0 : 4;
    }

    if (*heat) {
      const auto rep = report_from_json(json::parse(read_text(heat_report)));
      const Environment env = Environment::from_name(rep.env);
      if (!env.discrete()) throw std::runtime_error("heatmaps need a discrete environment report");
      const std::string csv = heatmap_csv(rep, env.grid());
      if (!heat_csv.empty()) write_text(heat_csv, csv);
      if (!heat_png.empty()) write_png(heat_png, heatmap_image(rep, env.grid(), env.config(), heat_size));
      if (heat_csv.empty()) std::cout << csv;
      std::cout << "dominant share " << rep.dominant_share << "\n";
      return 0;
    }

    if (*plans_export) {
      json all = json::array();
      for (const auto& p : builtin_plans()) all.push_back(plan_to_json(p));
      if (plans_out.empty()) {
        std::cout << all.dump(2) << "\n";
      } else {
        write_text(plans_out, all.dump(2) + "\n");
      }
      return 0;
    }

    if (*synth) {
      const Environment env = Environment::from_name(synth_env);
      if (!env.discrete()) throw std::runtime_error("the scripted viewer walks between grid locations");
      Rng rng(synth_seed);
      SynthConfig sc;
      sc.error_rate = synth_error;
      std::vector<DemoRecord> out;
      for (auto& d : synthesize_demos(default_object_set(), env, synth_n, rng, sc)) {
        DemoRecord r;
        if (synth_discrete) {
          r.discrete = discretize_demo(d, env);
        } else {
          r.continuous = std::move(d);
        }
        out.push_back(std::move(r));
      }
      write_demo_file(synth_out, out);
      std::cout << "wrote " << out.size() << " demonstrations to " << synth_out << "\n";
      return 0;
    }

    if (*disc) {
      const Environment env = Environment::from_name(disc_env);
      if (!env.discrete()) throw std::runtime_error("discretize needs a grid environment");
      std::vector<DemoRecord> out;
      for (auto& r : read_demo_file(disc_in, default_object_set())) {
        DemoRecord d;
        d.discrete = r.discrete ? *r.discrete : discretize_demo(*r.continuous, env);
        d.discrete->validate(Environment::from_name(d.discrete->env).grid());
        out.push_back(std::move(d));
      }
      write_demo_file(disc_out, out);
      std::cout << "wrote " << out.size() << " discrete demonstrations to " << disc_out << "\n";
      return 0;
    }

    if (*serve) {
      svc.log = [](const std::string& m) { std::cerr << m << std::endl; };
      DemoService service(svc);
      const unsigned short port = service.start();
      std::cout << "serving ws://" << svc.address << ":" << port << "/session" << std::endl;
      std::signal(SIGINT, [](int) { g_stop = 1; });
      std::signal(SIGTERM, [](int) { g_stop = 1; });
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      service.stop();
      return 0;
    }

    if (*dump) {
      RoomConfig room;
      room.image_width = dump_res;
      room.image_height = dump_res;
      const Environment env = Environment::from_name(dump_env, room);
      Rng rng(dump_seed);
      const Trial trial = make_trial(default_object_set(), difficulty_from_string(dump_diff), dump_ro,
                                     label_from_string(dump_label), rng);
      EnvState state = env.reset(trial);
      if (env.discrete()) {
        if (dump_target != "A" && dump_target != "B") throw std::runtime_error("target must be A or B");
        state = env.step(state, ViewAction{dump_loc, dump_target == "A" ? Target::ObjectA : Target::ObjectB})
                    .state;
      }
      write_png(dump_out, env.observe(state).frame);
      std::cout << "wrote " << dump_out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#pragma once

// Human play over WebSocket: each session owns one environment, streams PNG
// frames, withholds the label until the answer, and appends finished trials
// to a shared demonstration file.
//
// Requests (JSON text frames):
//   {"type":"start_trial","env":"d6","difficulty":"easy"|"any","ro":90,
//    "resolution":128,"label_hidden":true}
//   {"type":"view","location":3,"target":"A"}          discrete rooms
//   {"type":"move","dx":0,"dy":0,"dz":0.05,"dpitch":0,"dyaw":5}   continuous
//   {"type":"answer","answer":"same"|"different"}
//   {"type":"get_frame"}
// Responses:
//   {"type":"frame","trial_id":..,"step":..,"width":..,"height":..,
//    "format":"png","data":<base64>,"env":..,"pose":{..},"grid":[..]}
//   {"type":"trial_result","trial_id":..,"correct":..,"outcome":..,
//    "label":..,"n_viewpoints":..,"elapsed":..,"recorded":..}
//   {"type":"error","message":..}

#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "samediff/env.hpp"
#include "samediff/imitation.hpp"

namespace samediff {

// Appends one JSON line per record; the header line is written when the file
// is empty. Safe across threads (mutex) and processes (flock).
class DemoRecorder {
 public:
  explicit DemoRecorder(std::string path, std::uint64_t object_seed = kDefaultObjectSeed);
  void append(const nlohmann::json& record);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::uint64_t object_seed_;
  std::mutex mu_;
};

struct SessionOptions {
  int default_resolution = 128;
  int max_resolution = 256;
  int max_steps_per_episode = 256;
  std::uint64_t seed = 0;
  // Seconds since an arbitrary origin; defaults to a steady clock.
  std::function<double()> clock;
};

// Protocol state machine for one client, independent of the transport.
class Session {
 public:
  Session(const ObjectSet& set, DemoRecorder* recorder, SessionOptions opt = {});

  // One response per request. Malformed input yields an error response and
  // leaves the session usable.
  std::string handle(const std::string& message);
  nlohmann::json handle_json(const nlohmann::json& request);

  bool trial_active() const { return state_.has_value() && !state_->done; }
  // Called when the client goes away; returns true if a trial was abandoned.
  bool abandon();

 private:
  nlohmann::json start_trial(const nlohmann::json& req);
  nlohmann::json act(const Action& a);
  nlohmann::json frame_message(bool with_grid) const;
  nlohmann::json finish();
  double now() const;

  const ObjectSet& set_;
  DemoRecorder* recorder_;
  SessionOptions opt_;
  Rng rng_;
  std::optional<Environment> env_;
  std::optional<EnvState> state_;
  long long trial_id_ = 0;
  int frames_sent_ = 0;
  double started_at_ = 0.0;
  // What gets recorded.
  std::vector<Action> actions_;
  std::vector<GazeSample> samples_;
};

struct ServiceConfig {
  std::string address = "127.0.0.1";
  unsigned short port = 8080;  // 0 picks a free port
  std::string static_dir;      // empty: no static files
  std::string record_path = "demos.jsonl";
  std::uint64_t object_seed = kDefaultObjectSeed;
  std::uint64_t seed = 0;
  SessionOptions session;
  std::function<void(const std::string&)> log;
};

// WebSocket endpoint /session plus static file serving on one port.
class DemoService {
 public:
  explicit DemoService(ServiceConfig cfg);
  ~DemoService();
  DemoService(const DemoService&) = delete;
  DemoService& operator=(const DemoService&) = delete;

  // Binds and starts serving in the background; returns the bound port.
  unsigned short start();
  // Blocks until stop() is called from another thread or a signal handler.
  void wait();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);  // throws std::invalid_argument

}  // namespace samediff

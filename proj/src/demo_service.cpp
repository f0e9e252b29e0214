#include "samediff/demo_service.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <fstream>
#include <list>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/core/detail/base64.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "samediff/png_io.hpp"

namespace samediff {

using nlohmann::json;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

std::string base64_encode(const std::string& bytes) {
  std::string out(beast::detail::base64::encoded_size(bytes.size()), '\0');
  out.resize(beast::detail::base64::encode(out.data(), bytes.data(), bytes.size()));
  return out;
}

std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw std::invalid_argument("invalid base64 length");
  // Beast stops at padding without counting it.
  std::size_t body = text.size();
  for (int i = 0; i < 2 && body > 0 && text[body - 1] == '='; ++i) --body;
  std::string out(beast::detail::base64::decoded_size(text.size()), '\0');
  const auto [written, read] = beast::detail::base64::decode(out.data(), text.data(), body);
  if (read != body) throw std::invalid_argument("invalid base64");
  out.resize(written);
  return out;
}

// --- Recorder ---

DemoRecorder::DemoRecorder(std::string path, std::uint64_t object_seed)
    : path_(std::move(path)), object_seed_(object_seed) {}

void DemoRecorder::append(const json& record) {
  std::lock_guard lock(mu_);
  const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) throw std::runtime_error("cannot open demo file " + path_);
  if (::flock(fd, LOCK_EX) != 0) {
    ::close(fd);
    throw std::runtime_error("cannot lock demo file " + path_);
  }
  std::string text;
  if (::lseek(fd, 0, SEEK_END) == 0) text = demo_file_header(object_seed_) + "\n";
  text += record.dump() + "\n";
  std::size_t done = 0;
  bool ok = true;
  while (done < text.size()) {
    const auto n = ::write(fd, text.data() + done, text.size() - done);
    if (n <= 0) {
      ok = false;
      break;
    }
    done += static_cast<std::size_t>(n);
  }
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (!ok) throw std::runtime_error("write failed on demo file " + path_);
}

// --- Session ---

namespace {

json error_message(const std::string& m) { return {{"type", "error"}, {"message", m}}; }

json vec_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }

// Point the viewer is looking at: the closest approach of the view ray to
// whichever object lies nearer that ray.
Vec3 gaze_point(const Environment& env, const Pose& pose) {
  const Vec3 f = env.camera_for(pose).forward();
  const RoomConfig& c = env.config();
  double best = 1e300;
  Vec3 out = pose.position + f;
  for (const Vec3& a : {c.anchor_a(), c.anchor_b()}) {
    const double along = dot(a - pose.position, f);
    if (along <= 0) continue;
    const Vec3 p = pose.position + f * along;
    const double miss = distance(p, a);
    if (miss < best) {
      best = miss;
      out = p;
    }
  }
  return out;
}

}  // namespace

Session::Session(const ObjectSet& set, DemoRecorder* recorder, SessionOptions opt)
    : set_(set), recorder_(recorder), opt_(std::move(opt)), rng_(opt_.seed) {}

double Session::now() const {
  if (opt_.clock) return opt_.clock();
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::string Session::handle(const std::string& message) {
  json req;
  try {
    req = json::parse(message);
  } catch (const json::exception&) {
    return error_message("malformed message: not JSON").dump();
  }
  return handle_json(req).dump();
}

json Session::handle_json(const json& req) {
  try {
    if (!req.is_object() || !req.contains("type") || !req["type"].is_string())
      return error_message("malformed message: missing type");
    const std::string type = req["type"];
    if (type == "start_trial") return start_trial(req);
    if (type == "get_frame") {
      if (!state_) return error_message("no trial started");
      ++frames_sent_;
      return frame_message(false);
    }
    if (type == "view") {
      if (!trial_active()) return error_message("no active trial");
      if (!env_->discrete()) return error_message("view actions need a discrete environment");
      const int loc = req.at("location").get<int>();
      const std::string target = req.value("target", "A");
      if (target != "A" && target != "B") return error_message("target must be A or B");
      return act(ViewAction{loc, target == "A" ? Target::ObjectA : Target::ObjectB});
    }
    if (type == "move") {
      if (!trial_active()) return error_message("no active trial");
      if (env_->discrete()) return error_message("move actions need the continuous environment");
      MoveAction m;
      m.dx = req.value("dx", 0.0);
      m.dy = req.value("dy", 0.0);
      m.dz = req.value("dz", 0.0);
      m.dpitch = req.value("dpitch", 0.0);
      m.dyaw = req.value("dyaw", 0.0);
      return act(m);
    }
    if (type == "answer") {
      if (!trial_active() || frames_sent_ == 0) return error_message("answer before first frame");
      const Label l = label_from_string(req.at("answer").get<std::string>());
      if (env_->discrete()) return act(AnswerAction{l});
      MoveAction m;
      m.answer = l;
      return act(m);
    }
    return error_message("unknown message type: " + type);
  } catch (const std::exception& e) {
    return error_message(std::string("bad request: ") + e.what());
  }
}

json Session::start_trial(const json& req) {
  if (trial_active()) return error_message("a trial is already active; answer it first");
  if (!req.value("label_hidden", true))
    return error_message("label_hidden=false is not supported; labels are revealed after the answer");
  const int res = req.value("resolution", opt_.default_resolution);
  if (res < 16 || res > opt_.max_resolution)
    return error_message("resolution must lie in [16, " + std::to_string(opt_.max_resolution) + "]");
  RoomConfig room;
  room.image_width = res;
  room.image_height = res;
  room.max_steps_per_episode = opt_.max_steps_per_episode;
  Environment env = Environment::from_name(req.value("env", std::string("d6")), room);

  const std::string diff = req.value("difficulty", std::string("any"));
  const Difficulty d = diff == "any" ? kAllDifficulties[rng_.uniform_int(3)] : difficulty_from_string(diff);
  int ro = kTestedOrientations[rng_.uniform_int(3)];
  if (req.contains("ro") && !req["ro"].is_null()) ro = req["ro"].get<int>();
  const Label label = rng_.bernoulli(0.5) ? Label::Same : Label::Different;
  const Trial trial = make_trial(set_, d, ro, label, rng_);

  env_.emplace(std::move(env));
  state_ = env_->reset(trial);
  ++trial_id_;
  frames_sent_ = 1;
  started_at_ = now();
  actions_.clear();
  samples_.clear();
  if (!env_->discrete())
    samples_.push_back({0.0, state_->pose.position, gaze_point(*env_, state_->pose)});
  return frame_message(true);
}

json Session::act(const Action& a) {
  auto r = env_->step(*state_, a);
  state_ = std::move(r.state);
  actions_.push_back(a);
  if (!env_->discrete()) {
    double t = now() - started_at_;
    const double prev = samples_.empty() ? -1.0 : samples_.back().t;
    if (!(t > prev)) t = prev + 1.0 / kDemoSampleRate;
    samples_.push_back({t, state_->pose.position, gaze_point(*env_, state_->pose)});
  }
  if (r.done) return finish();
  ++frames_sent_;
  return frame_message(false);
}

json Session::frame_message(bool with_grid) const {
  const Observation obs = env_->observe(*state_);
  const auto png = encode_png(obs.frame);
  json j = {{"type", "frame"},
            {"trial_id", trial_id_},
            {"step", state_->step_count},
            {"env", env_->name()},
            {"width", obs.frame.width},
            {"height", obs.frame.height},
            {"format", "png"},
            {"data", base64_encode(std::string(png.begin(), png.end()))},
            {"pose",
             {{"position", vec_json(state_->pose.position)},
              {"pitch", state_->pose.pitch},
              {"yaw", state_->pose.yaw}}}};
  if (with_grid) {
    const RoomConfig& c = env_->config();
    json locs = json::array();
    for (std::size_t i = 0; i < env_->grid().locations.size(); ++i) {
      const auto& l = env_->grid().locations[i];
      locs.push_back({{"index", i}, {"position", vec_json(l.position)}, {"ring", l.ring}, {"tier", l.tier}});
    }
    j["grid"] = locs;
    j["room"] = {{"width", c.width}, {"depth", c.depth}, {"height", c.height}};
    j["anchors"] = {{"A", vec_json(c.anchor_a())}, {"B", vec_json(c.anchor_b())}};
    j["max_steps"] = c.max_steps_per_episode;
  }
  return j;
}

json Session::finish() {
  const EnvState& s = *state_;
  int views = 0;
  for (const auto& a : actions_) views += std::holds_alternative<ViewAction>(a);
  json res = {{"type", "trial_result"},
              {"trial_id", trial_id_},
              {"correct", s.outcome == Outcome::Correct},
              {"outcome", to_string(s.outcome)},
              {"label", to_string(s.trial.label)},
              {"n_viewpoints", views},
              {"steps", s.step_count},
              {"elapsed", now() - started_at_},
              {"recorded", false}};
  // Timeouts carry no answer and are not demonstrations.
  if (recorder_ && s.outcome != Outcome::Timeout) {
    if (env_->discrete()) {
      DiscreteDemo d{s.trial, env_->name(), actions_, std::vector<int>(actions_.size(), 1)};
      d.validate(env_->grid());
      recorder_->append(demo_to_json(d));
    } else {
      DemonstrationTrial d{s.trial, samples_, std::get<MoveAction>(actions_.back()).answer.value()};
      d.validate();
      recorder_->append(demo_to_json(d));
    }
    res["recorded"] = true;
  }
  return res;
}

bool Session::abandon() {
  const bool active = trial_active();
  state_.reset();
  actions_.clear();
  samples_.clear();
  frames_sent_ = 0;
  return active;
}

// --- Server ---

namespace {

std::string mime_type(const std::string& path) {
  const auto dot = path.rfind('.');
  const std::string ext = dot == std::string::npos ? "" : path.substr(dot + 1);
  if (ext == "html" || ext == "htm") return "text/html; charset=utf-8";
  if (ext == "js" || ext == "mjs") return "text/javascript; charset=utf-8";
  if (ext == "css") return "text/css; charset=utf-8";
  if (ext == "json" || ext == "map") return "application/json";
  if (ext == "png") return "image/png";
  if (ext == "svg") return "image/svg+xml";
  if (ext == "ico") return "image/x-icon";
  if (ext == "wasm") return "application/wasm";
  if (ext == "txt") return "text/plain; charset=utf-8";
  return "application/octet-stream";
}

http::response<http::string_body> simple_response(const http::request<http::string_body>& req,
                                                  http::status status, const std::string& body) {
  http::response<http::string_body> res{status, req.version()};
  res.set(http::field::content_type, "text/plain; charset=utf-8");
  res.keep_alive(req.keep_alive());
  res.body() = body;
  res.prepare_payload();
  return res;
}

http::response<http::string_body> static_response(const http::request<http::string_body>& req,
                                                  const std::string& root) {
  if (req.method() != http::verb::get && req.method() != http::verb::head)
    return simple_response(req, http::status::method_not_allowed, "method not allowed\n");
  std::string path(req.target());
  if (const auto q = path.find('?'); q != std::string::npos) path.resize(q);
  if (path.empty() || path[0] != '/' || path.find("..") != std::string::npos)
    return simple_response(req, http::status::bad_request, "bad path\n");
  if (root.empty()) return simple_response(req, http::status::not_found, "not found\n");
  if (path.back() == '/') path += "index.html";
  std::ifstream in(root + path, std::ios::binary);
  if (!in) return simple_response(req, http::status::not_found, "not found\n");
  std::stringstream ss;
  ss << in.rdbuf();
  http::response<http::string_body> res{http::status::ok, req.version()};
  res.set(http::field::content_type, mime_type(path));
  res.keep_alive(req.keep_alive());
  const std::string body = ss.str();
  if (req.method() == http::verb::head) {
    res.content_length(body.size());
  } else {
    res.body() = body;
    res.prepare_payload();
  }
  return res;
}

}  // namespace

struct DemoService::Impl {
  ServiceConfig cfg;
  ObjectSet storage;
  const ObjectSet* set = nullptr;
  DemoRecorder recorder;
  net::io_context ioc;
  tcp::acceptor acceptor{ioc};
  std::thread io_thread;

  std::mutex mu;
  std::condition_variable cv;
  bool running = false;
  std::set<int> live_fds;
  struct Conn {
    std::thread thread;
    std::shared_ptr<std::atomic<bool>> finished;
  };
  std::list<Conn> conns;
  long long next_session = 0;

  explicit Impl(ServiceConfig c) : cfg(std::move(c)), recorder(cfg.record_path, cfg.object_seed) {
    if (cfg.object_seed == kDefaultObjectSeed) {
      set = &default_object_set();
    } else {
      storage = generate_object_set(cfg.object_seed);
      set = &storage;
    }
  }

  void log(const std::string& m) {
    if (cfg.log) cfg.log(m);
  }

  void accept_next() {
    acceptor.async_accept([this](beast::error_code ec, tcp::socket sock) {
      if (ec) return;  // acceptor closed
      std::lock_guard lock(mu);
      if (!running) return;
      // Reap finished connection threads.
      for (auto it = conns.begin(); it != conns.end();) {
        if (it->finished->load()) {
          it->thread.join();
          it = conns.erase(it);
        } else {
          ++it;
        }
      }
      const long long id = next_session++;
      const int fd = sock.native_handle();
      live_fds.insert(fd);
      auto finished = std::make_shared<std::atomic<bool>>(false);
      conns.push_back({std::thread([this, s = std::move(sock), id, fd, finished]() mutable {
                         serve_connection(std::move(s), id, fd);
                         finished->store(true);
                       }),
                       finished});
      accept_next();
    });
  }

  void release(int fd) {
    std::lock_guard lock(mu);
    live_fds.erase(fd);
  }

  void serve_connection(tcp::socket sock, long long id, int fd) {
    beast::flat_buffer buffer;
    beast::error_code ec;
    while (true) {
      http::request<http::string_body> req;
      http::read(sock, buffer, req, ec);
      if (ec) break;
      if (websocket::is_upgrade(req)) {
        std::string target(req.target());
        if (const auto q = target.find('?'); q != std::string::npos) target.resize(q);
        if (target != "/session") {
          http::write(sock, simple_response(req, http::status::not_found, "no such endpoint\n"), ec);
          break;
        }
        serve_websocket(std::move(sock), req, id, fd);
        return;
      }
      auto res = static_response(req, cfg.static_dir);
      http::write(sock, res, ec);
      if (ec || !req.keep_alive()) break;
    }
    release(fd);
    sock.shutdown(tcp::socket::shutdown_both, ec);
  }

  void serve_websocket(tcp::socket sock, const http::request<http::string_body>& req, long long id,
                       int fd) {
    websocket::stream<tcp::socket> ws(std::move(sock));
    beast::error_code ec;
    ws.accept(req, ec);
    if (ec) {
      release(fd);
      return;
    }
    SessionOptions opt = cfg.session;
    opt.seed = Rng::derive_seed(cfg.seed, "session/" + std::to_string(id));
    Session session(*set, cfg.record_path.empty() ? nullptr : &recorder, opt);
    log("session " + std::to_string(id) + " opened");
    beast::flat_buffer buffer;
    while (true) {
      buffer.clear();
      ws.read(buffer, ec);
      if (ec) break;
      std::string reply;
      try {
        reply = session.handle(beast::buffers_to_string(buffer.data()));
      } catch (const std::exception& e) {
        // Recording failures surface to the client; the session goes on.
        reply = error_message(std::string("server error: ") + e.what()).dump();
      }
      ws.text(true);
      ws.write(net::buffer(reply), ec);
      if (ec) break;
    }
    if (session.abandon()) log("session " + std::to_string(id) + ": trial abandoned on disconnect");
    log("session " + std::to_string(id) + " closed");
    release(fd);
    ws.next_layer().shutdown(tcp::socket::shutdown_both, ec);
  }
};

DemoService::DemoService(ServiceConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}

DemoService::~DemoService() { stop(); }

unsigned short DemoService::start() {
  auto& m = *impl_;
  const tcp::endpoint ep(net::ip::make_address(m.cfg.address), m.cfg.port);
  m.acceptor.open(ep.protocol());
  m.acceptor.set_option(net::socket_base::reuse_address(true));
  m.acceptor.bind(ep);
  m.acceptor.listen();
  {
    std::lock_guard lock(m.mu);
    m.running = true;
  }
  m.accept_next();
  m.io_thread = std::thread([&m] { m.ioc.run(); });
  const unsigned short port = m.acceptor.local_endpoint().port();
  m.log("listening on " + m.cfg.address + ":" + std::to_string(port));
  return port;
}

void DemoService::wait() {
  auto& m = *impl_;
  std::unique_lock lock(m.mu);
  m.cv.wait(lock, [&] { return !m.running; });
}

void DemoService::stop() {
  auto& m = *impl_;
  std::list<Impl::Conn> conns;
  {
    std::lock_guard lock(m.mu);
    if (!m.running && !m.io_thread.joinable()) return;
    m.running = false;
    // Unblock connection threads stuck in reads.
    for (int fd : m.live_fds) ::shutdown(fd, SHUT_RDWR);
    conns.swap(m.conns);
  }
  m.cv.notify_all();
  net::post(m.ioc, [&m] {
    beast::error_code ec;
    m.acceptor.close(ec);
  });
  if (m.io_thread.joinable()) m.io_thread.join();
  for (auto& c : conns) c.thread.join();
}

}  // namespace samediff

#pragma once

// Interactive session host: one simulation thread owns all mutable state;
// per-client reader/writer threads talk to it through bounded queues.
//
// Client -> server (JSON text frames):
//   {"type":"hand_force","f":[x,y,z]}            zero-order hold until the next one
//   {"type":"hand_force","f":[..],"ticks":k}     lockstep only: hold and advance k ticks
//   {"type":"toggle_vf","on":bool}   {"type":"set_drill_power","on":bool}
//   {"type":"reset"}   {"type":"load_scenario","path":"..."} | {"type":"load_scenario","scenario":{...}}
//   {"type":"scene"}   {"type":"sync"}
// Server -> client:
//   {"type":"scene",...}  {"type":"snapshot",...}  {"type":"sync","tick":n,"time":t}
//   {"type":"error","msg":"..."}

#include "sdfvf/scenario.hpp"
#include "sdfvf/websocket.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <list>
#include <thread>

namespace sdfvf {

// ---------------------------------------------------------------------------
// Messages

struct ClientCommand {
  enum class Type { hand_force, toggle_vf, set_drill_power, reset, load_scenario, scene, sync };
  Type type = Type::hand_force;
  Vec3 force = Vec3::Zero();
  bool on = false;
  std::size_t ticks = 0;
  std::optional<std::string> path;
  std::optional<nlohmann::json> scenario;

  bool mutates() const { return type != Type::scene && type != Type::sync; }
};

/// Throws ValidationError describing what is wrong with the message.
inline ClientCommand parse_client_command(std::string_view text, double max_force = 20.0) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    throw ValidationError("message is not valid JSON");
  }
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
    throw ValidationError("message needs a string 'type'");
  const std::string type = j["type"].get<std::string>();
  ClientCommand c;
  auto need_bool = [&j](const char* key) {
    if (!j.contains(key) || !j[key].is_boolean()) throw ValidationError(std::string("'") + key + "' must be a boolean");
    return j[key].get<bool>();
  };
  if (type == "hand_force") {
    c.type = ClientCommand::Type::hand_force;
    if (!j.contains("f") || !j["f"].is_array() || j["f"].size() != 3)
      throw ValidationError("'f' must be an array of 3 numbers");
    for (int i = 0; i < 3; ++i) {
      if (!j["f"][i].is_number()) throw ValidationError("'f' must be an array of 3 numbers");
      c.force[i] = j["f"][i].get<double>();
    }
    if (!c.force.allFinite()) throw ValidationError("force components must be finite");
    if (c.force.norm() > max_force)
      throw ValidationError("force magnitude exceeds " + format_number(max_force) + " N");
    if (j.contains("ticks")) {
      if (!j["ticks"].is_number_unsigned()) throw ValidationError("'ticks' must be a non-negative integer");
      c.ticks = j["ticks"].get<std::size_t>();
    }
  } else if (type == "toggle_vf") {
    c.type = ClientCommand::Type::toggle_vf;
    c.on = need_bool("on");
  } else if (type == "set_drill_power") {
    c.type = ClientCommand::Type::set_drill_power;
    c.on = need_bool("on");
  } else if (type == "reset") {
    c.type = ClientCommand::Type::reset;
  } else if (type == "load_scenario") {
    c.type = ClientCommand::Type::load_scenario;
    if (j.contains("path") && j["path"].is_string()) c.path = j["path"].get<std::string>();
    else if (j.contains("scenario") && j["scenario"].is_object()) c.scenario = j["scenario"];
    else throw ValidationError("load_scenario needs 'path' or an inline 'scenario' object");
  } else if (type == "scene") {
    c.type = ClientCommand::Type::scene;
  } else if (type == "sync") {
    c.type = ClientCommand::Type::sync;
  } else {
    throw ValidationError("unknown message type '" + type + "'");
  }
  return c;
}

inline std::string error_message(const std::string& msg) {
  nlohmann::ordered_json j;
  j["type"] = "error";
  j["msg"] = msg;
  return j.dump();
}

struct Snapshot {
  double time = 0.0;
  std::size_t tick = 0;
  Vec3 tip = Vec3::Zero();
  std::vector<std::pair<Label, double>> clearance;
  Vec3 hand_force = Vec3::Zero();
  Vec3 sdf_force = Vec3::Zero();
  Vec3 compliance_force = Vec3::Zero();
  bool vf_enabled = false;
  bool drill_on = false;
  double drilled_volume = 0.0;
  std::vector<std::pair<Label, double>> damage;
  bool breach = false;
};

inline Snapshot make_snapshot(const Simulation& sim) {
  Snapshot s;
  const auto& setup = sim.setup();
  const auto& records = sim.trace().records;
  s.time = sim.time();
  s.tick = sim.tick_count();
  s.vf_enabled = sim.vf_enabled();
  s.drill_on = sim.drill_on();
  std::vector<double> d;
  if (records.empty()) {
    s.tip = sim.current_tip();
    d = sim.clearances(s.tip);
  } else {
    const TickRecord& r = records.back();
    s.tip = r.tip;
    d = r.clearance;
    s.hand_force = r.hand_force;
    s.sdf_force = r.sdf_force;
    s.compliance_force = r.compliance_force;
  }
  const double vv = setup.volume.geometry.voxel_volume();
  const auto& removed = sim.removed_total();
  auto removed_of = [&removed](Label l) {
    auto it = removed.find(l);
    return it == removed.end() ? std::size_t{0} : it->second;
  };
  if (setup.matrix_label != 0) s.drilled_volume = static_cast<double>(removed_of(setup.matrix_label)) * vv;
  for (std::size_t a = 0; a < setup.constraints.size(); ++a) {
    const Label l = setup.constraints[a].label;
    s.clearance.emplace_back(l, d[a]);
    s.damage.emplace_back(l, static_cast<double>(removed_of(l)) * vv);
    if (d[a] < setup.constraints[a].params.tau0) s.breach = true;
  }
  return s;
}

inline std::string snapshot_to_json(const Snapshot& s) {
  auto v3 = [](const Vec3& v) { return nlohmann::ordered_json{v.x(), v.y(), v.z()}; };
  nlohmann::ordered_json j;
  j["type"] = "snapshot";
  j["time"] = s.time;
  j["tick"] = s.tick;
  j["tip"] = v3(s.tip);
  nlohmann::ordered_json clr = nlohmann::ordered_json::object(), dmg = nlohmann::ordered_json::object();
  for (const auto& [l, d] : s.clearance) clr[std::to_string(l)] = d;
  for (const auto& [l, v] : s.damage) dmg[std::to_string(l)] = v;
  j["clearance"] = clr;
  j["f_h"] = v3(s.hand_force);
  j["f_sdf"] = v3(s.sdf_force);
  j["f_c"] = v3(s.compliance_force);
  j["vf_enabled"] = s.vf_enabled;
  j["drill_on"] = s.drill_on;
  j["drilled_volume_mm3"] = s.drilled_volume;
  j["damage_mm3"] = dmg;
  j["breach"] = s.breach;
  return j.dump();
}

/// Static scene metadata for a client. `role` is "steering" or "observer".
inline nlohmann::ordered_json scene_json(const Simulation& sim, const SegmentTable& segments) {
  const auto& setup = sim.setup();
  const auto& g = setup.volume.geometry;
  nlohmann::ordered_json j;
  j["type"] = "scene";
  j["dims"] = {g.dims[0], g.dims[1], g.dims[2]};
  j["spacing_mm"] = {g.spacing.x(), g.spacing.y(), g.spacing.z()};
  j["origin_mm"] = {g.origin.x(), g.origin.y(), g.origin.z()};
  nlohmann::ordered_json segs = nlohmann::ordered_json::array();
  for (const auto& s : segments.entries) {
    nlohmann::ordered_json e;
    e["label"] = s.label;
    e["name"] = s.name;
    if (s.color) e["color"] = {s.color->x(), s.color->y(), s.color->z()};
    else e["color"] = nullptr;
    segs.push_back(e);
  }
  j["segments"] = segs;
  nlohmann::ordered_json cons = nlohmann::ordered_json::array();
  for (const auto& c : setup.constraints) {
    nlohmann::ordered_json e;
    e["label"] = c.label;
    e["tau0_mm"] = c.params.tau0;
    e["tauf_mm"] = c.params.tauf;
    e["lambda_per_mm"] = c.params.lambda;
    cons.push_back(e);
  }
  j["constraints"] = cons;
  j["matrix_label"] = setup.matrix_label;
  j["burr_radius_mm"] = setup.tool.burr_radius;
  j["dt_s"] = setup.dt;
  return j;
}

// ---------------------------------------------------------------------------
// Host

struct SessionOptions {
  enum class Clock { realtime, lockstep };
  Clock clock = Clock::realtime;
  double snapshot_hz = 30.0;
  double max_force = 20.0;  // N
  std::size_t command_queue_capacity = 1024;
  std::size_t outbox_capacity = 4096;
  BuildOptions build;
};

class SessionHost {
 public:
  SessionHost(const Scenario& scenario, SessionOptions opt = {}) : opt_(std::move(opt)), scenario_(scenario) {
    if (!(opt_.snapshot_hz > 0)) throw ValidationError("snapshot rate must be positive");
    install(scenario);
  }
  SessionHost(const SessionHost&) = delete;
  SessionHost& operator=(const SessionHost&) = delete;
  ~SessionHost() { stop(); }

  /// Binds and starts the network and simulation threads.
  void start(std::uint16_t port = 0, const std::string& host = "127.0.0.1") {
    server_ = std::make_unique<ws::Server>(port, host);
    running_ = true;
    sim_thread_ = std::thread([this] { opt_.clock == SessionOptions::Clock::lockstep ? run_lockstep() : run_realtime(); });
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  std::uint16_t port() const { return server_ ? server_->port() : 0; }

  /// Stops all threads. The simulation state stays readable afterwards.
  void stop() {
    if (!running_.exchange(false)) return;
    inbox_cv_.notify_all();
    inbox_space_cv_.notify_all();
    if (server_) server_->stop();
    if (accept_thread_.joinable()) accept_thread_.join();
    if (sim_thread_.joinable()) sim_thread_.join();
    std::list<std::shared_ptr<Client>> clients;
    {
      std::lock_guard lock(clients_mutex_);
      clients.swap(clients_);
    }
    for (auto& c : clients) shutdown_client(*c);
  }

  /// Trace, metrics and snapshot of the current simulation; call after stop()
  /// or before start().
  const Simulation& simulation() const { return *sim_; }

 private:
  struct Client {
    std::uint64_t id = 0;
    bool steering = false;
    std::unique_ptr<ws::Connection> conn;
    std::thread reader, writer;
    std::mutex m;
    std::condition_variable cv;
    std::deque<std::string> outbox;
    std::optional<std::string> snapshot;  // latest wins
    bool done = false;
  };

  struct Inbound {
    enum class Kind { command, disconnect } kind = Kind::command;
    std::shared_ptr<Client> client;
    ClientCommand command;
  };

  void install(const Scenario& sc) {
    BuiltScenario built = build_scenario(sc, opt_.build);
    segments_ = built.segments;
    sim_ = std::make_unique<Simulation>(std::move(built.setup));
    scenario_ = sc;
    hold_ = Vec3::Zero();
    std::lock_guard lock(scene_mutex_);
    scene_ = scene_json(*sim_, segments_);
  }

  // --- client plumbing ----------------------------------------------------

  static void post(Client& c, std::string msg, std::size_t capacity) {
    {
      std::lock_guard lock(c.m);
      if (c.done) return;
      if (c.outbox.size() >= capacity) c.outbox.pop_front();
      c.outbox.push_back(std::move(msg));
    }
    c.cv.notify_one();
  }

  static void post_snapshot(Client& c, std::string msg) {
    {
      std::lock_guard lock(c.m);
      if (c.done) return;
      c.snapshot = std::move(msg);
    }
    c.cv.notify_one();
  }

  std::string scene_for(const Client& c) {
    std::lock_guard lock(scene_mutex_);
    nlohmann::ordered_json j = scene_;
    j["role"] = c.steering ? "steering" : "observer";
    j["clock"] = opt_.clock == SessionOptions::Clock::lockstep ? "lockstep" : "realtime";
    return j.dump();
  }

  void accept_loop() {
    std::uint64_t next_id = 1;
    while (running_) {
      auto conn = server_->accept();
      if (!conn) break;
      auto c = std::make_shared<Client>();
      c->id = next_id++;
      c->conn = std::move(conn);
      {
        std::lock_guard lock(clients_mutex_);
        reap_finished();
        c->steering = steering_id_ == 0;
        if (c->steering) steering_id_ = c->id;
        clients_.push_back(c);
      }
      post(*c, scene_for(*c), opt_.outbox_capacity);
      {
        std::lock_guard lock(snapshot_mutex_);
        if (last_snapshot_) post_snapshot(*c, *last_snapshot_);
      }
      c->writer = std::thread([c] { writer_loop(*c); });
      c->reader = std::thread([this, c] { reader_loop(c); });
    }
  }

  static void writer_loop(Client& c) {
    while (true) {
      std::string msg;
      {
        std::unique_lock lock(c.m);
        c.cv.wait(lock, [&c] { return c.done || !c.outbox.empty() || c.snapshot; });
        if (c.done) return;
        if (!c.outbox.empty()) {
          msg = std::move(c.outbox.front());
          c.outbox.pop_front();
        } else {
          msg = std::move(*c.snapshot);
          c.snapshot.reset();
        }
      }
      if (!c.conn->send_text(msg)) return;
    }
  }

  void reader_loop(const std::shared_ptr<Client>& c) {
    while (running_) {
      auto m = c->conn->receive();
      if (!m) break;
      if (m->opcode != ws::Opcode::text) {
        post(*c, error_message("binary frames are not supported"), opt_.outbox_capacity);
        continue;
      }
      ClientCommand cmd;
      try {
        cmd = parse_client_command(m->payload, opt_.max_force);
      } catch (const ValidationError& e) {
        post(*c, error_message(e.what()), opt_.outbox_capacity);
        continue;
      }
      if (cmd.mutates() && !c->steering) {
        post(*c, error_message("read-only client: only the steering client may send commands"), opt_.outbox_capacity);
        continue;
      }
      if (cmd.type == ClientCommand::Type::scene) {
        post(*c, scene_for(*c), opt_.outbox_capacity);
        continue;
      }
      if (cmd.ticks > 0 && opt_.clock != SessionOptions::Clock::lockstep) {
        post(*c, error_message("'ticks' is only accepted in lockstep mode"), opt_.outbox_capacity);
        continue;
      }
      if (!enqueue({Inbound::Kind::command, c, std::move(cmd)})) break;
    }
    {
      std::lock_guard lock(clients_mutex_);
      if (steering_id_ == c->id) steering_id_ = 0;
    }
    if (c->steering) enqueue({Inbound::Kind::disconnect, c, {}});
    {
      std::lock_guard lock(c->m);
      c->done = true;
    }
    c->cv.notify_all();
  }

  /// Blocks the reader (not the simulation) while the queue is full.
  bool enqueue(Inbound in) {
    std::unique_lock lock(inbox_mutex_);
    inbox_space_cv_.wait(lock, [this] { return !running_ || inbox_.size() < opt_.command_queue_capacity; });
    if (!running_) return false;
    inbox_.push_back(std::move(in));
    lock.unlock();
    inbox_cv_.notify_one();
    return true;
  }

  void shutdown_client(Client& c) {
    {
      std::lock_guard lock(c.m);
      c.done = true;
    }
    c.cv.notify_all();
    if (c.writer.joinable()) c.writer.join();
    c.conn->close(1001);
    c.conn->shutdown();
    if (c.reader.joinable()) c.reader.join();
  }

  /// Joins clients whose reader has exited. Caller holds clients_mutex_.
  void reap_finished() {
    for (auto it = clients_.begin(); it != clients_.end();) {
      bool done;
      {
        std::lock_guard lock((*it)->m);
        done = (*it)->done;
      }
      if (done && (*it)->reader.joinable() && (*it)->id != steering_id_) {
        if ((*it)->writer.joinable()) (*it)->writer.join();
        (*it)->reader.join();
        it = clients_.erase(it);
      } else {
        ++it;
      }
    }
  }

  // --- simulation thread --------------------------------------------------

  std::deque<Inbound> take_inbox() {
    std::deque<Inbound> out;
    {
      std::lock_guard lock(inbox_mutex_);
      out.swap(inbox_);
    }
    inbox_space_cv_.notify_all();
    return out;
  }

  void publish() {
    std::string snap = snapshot_to_json(make_snapshot(*sim_));
    {
      std::lock_guard lock(snapshot_mutex_);
      last_snapshot_ = snap;
    }
    std::lock_guard lock(clients_mutex_);
    for (auto& c : clients_) post_snapshot(*c, snap);
  }

  void broadcast_scene() {
    std::lock_guard lock(clients_mutex_);
    for (auto& c : clients_) post(*c, scene_for(*c), opt_.outbox_capacity);
  }

  /// Applies one inbound event; returns ticks requested (lockstep).
  std::size_t apply(Inbound& in) {
    if (in.kind == Inbound::Kind::disconnect) {
      hold_ = Vec3::Zero();
      return 0;
    }
    const ClientCommand& c = in.command;
    switch (c.type) {
      case ClientCommand::Type::hand_force: hold_ = c.force; return c.ticks;
      case ClientCommand::Type::toggle_vf: sim_->set_vf_enabled(c.on); break;
      case ClientCommand::Type::set_drill_power: sim_->set_drill_on(c.on); break;
      case ClientCommand::Type::reset:
        sim_->reset();
        hold_ = Vec3::Zero();
        publish();
        break;
      case ClientCommand::Type::load_scenario:
        try {
          if (c.path) install(load_scenario(*c.path));
          else install(parse_scenario(c.scenario->dump(2), "load_scenario", scenario_.base_dir));
          broadcast_scene();
          publish();
        } catch (const Error& e) {
          post(*in.client, error_message(std::string("load_scenario failed: ") + e.what()), opt_.outbox_capacity);
        }
        break;
      case ClientCommand::Type::sync: {
        nlohmann::ordered_json j;
        j["type"] = "sync";
        j["tick"] = sim_->tick_count();
        j["time"] = sim_->time();
        post(*in.client, j.dump(), opt_.outbox_capacity);
        break;
      }
      case ClientCommand::Type::scene: break;
    }
    return 0;
  }

  void run_realtime() {
    using clock = std::chrono::steady_clock;
    const auto period = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(sim_->setup().dt));
    const double snapshot_period = 1.0 / opt_.snapshot_hz;
    double next_snapshot = 0.0;
    publish();
    auto next = clock::now();
    while (running_) {
      for (auto& in : take_inbox()) apply(in);
      sim_->step(hold_);
      if (sim_->time() + 1e-12 >= next_snapshot) {
        publish();
        next_snapshot = sim_->time() + snapshot_period;
      }
      next += period;
      const auto now = clock::now();
      // Far behind (e.g. a stalled process): resynchronize instead of bursting.
      if (now - next > std::chrono::milliseconds(100)) next = now;
      std::this_thread::sleep_until(next);
    }
  }

  void run_lockstep() {
    publish();
    while (running_) {
      std::deque<Inbound> batch;
      {
        std::unique_lock lock(inbox_mutex_);
        inbox_cv_.wait(lock, [this] { return !running_ || !inbox_.empty(); });
        if (!running_) return;
        batch.swap(inbox_);
      }
      inbox_space_cv_.notify_all();
      for (auto& in : batch) {
        const std::size_t k = apply(in);
        for (std::size_t i = 0; i < k; ++i) sim_->step(hold_);
        if (k > 0) publish();
      }
    }
  }

  SessionOptions opt_;
  Scenario scenario_;
  SegmentTable segments_;
  std::unique_ptr<Simulation> sim_;
  Vec3 hold_ = Vec3::Zero();

  std::unique_ptr<ws::Server> server_;
  std::atomic<bool> running_{false};
  std::thread sim_thread_, accept_thread_;

  std::mutex clients_mutex_;
  std::list<std::shared_ptr<Client>> clients_;
  std::uint64_t steering_id_ = 0;

  std::mutex inbox_mutex_;
  std::condition_variable inbox_cv_, inbox_space_cv_;
  std::deque<Inbound> inbox_;

  std::mutex scene_mutex_;
  nlohmann::ordered_json scene_;
  std::mutex snapshot_mutex_;
  std::optional<std::string> last_snapshot_;
};

}  // namespace sdfvf

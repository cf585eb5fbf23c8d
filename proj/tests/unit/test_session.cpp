#include "sdfvf/session.hpp"

#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

using namespace sdfvf;
using nlohmann::json;

namespace {

const char* kScenario = R"({
  "volume": {"phantom": {
    "dims": [32, 32, 32], "spacing_mm": [0.5, 0.5, 0.5],
    "matrix": {"label": 1, "name": "stone", "color": [0.9, 0.9, 0.8], "min_mm": [0, 0, 0], "max_mm": [16, 16, 10]},
    "primitives": [{"kind": "sphere", "label": 2, "name": "ball", "center_mm": [8, 8, 5], "radius_mm": 2.5}]
  }},
  "matrix_label": 1,
  "constraints": [{"label": 2}],
  "robot": {"preset": "gantry", "q0": [8, 8, 13]},
  "duration_s": 1.5,
  "seed": 21,
  "force_script": {"kind": "operator", "target_mm": [8.3, 7.8, 5], "push_N": 4, "jitter_N": 0.4}
})";

std::unique_ptr<ws::Connection> open_client(const SessionHost& host) {
  auto c = ws::connect("127.0.0.1", host.port());
  c->set_receive_timeout(10000);
  return c;
}

json next_json(ws::Connection& c) {
  auto m = c.receive();
  if (!m) throw std::runtime_error("connection closed or timed out");
  return json::parse(m->payload);
}

/// Reads until a message of `type` satisfying `pred` arrives.
json wait_for(ws::Connection& c, const std::string& type, const std::function<bool(const json&)>& pred = nullptr) {
  for (int n = 0; n < 100000; ++n) {
    json j = next_json(c);
    if (j.value("type", "") == type && (!pred || pred(j))) return j;
  }
  throw std::runtime_error("no '" + type + "' message");
}

void send(ws::Connection& c, const json& j) { ASSERT_TRUE(c.send_text(j.dump())); }

json force_msg(const Vec3& f, std::size_t ticks = 0) {
  json j{{"type", "hand_force"}, {"f", {f.x(), f.y(), f.z()}}};
  if (ticks > 0) j["ticks"] = ticks;
  return j;
}

SessionOptions lockstep() {
  SessionOptions o;
  o.clock = SessionOptions::Clock::lockstep;
  return o;
}

}  // namespace

TEST(Protocol, AcceptKeyMatchesRfcExample) {
  EXPECT_EQ(ws::accept_key("dGhlIHNhbXBsZSBub25jZQ=="), "s3pPLMBiTxaQ9kYGzzhZRbK+xOo=");
}

TEST(Protocol, FrameEncodingLengths) {
  EXPECT_EQ(ws::encode_frame(ws::Opcode::text, std::string(5, 'a'), std::nullopt).size(), 7u);
  EXPECT_EQ(ws::encode_frame(ws::Opcode::text, std::string(300, 'a'), std::nullopt).size(), 304u);
  EXPECT_EQ(ws::encode_frame(ws::Opcode::text, std::string(70000, 'a'), std::nullopt).size(), 70010u);
  const auto masked = ws::encode_frame(ws::Opcode::text, "hi", std::array<unsigned char, 4>{1, 2, 3, 4});
  EXPECT_EQ(masked.size(), 8u);
  EXPECT_EQ(static_cast<unsigned char>(masked[1]), 0x82);
}

TEST(Protocol, ParseClientCommand) {
  const ClientCommand c = parse_client_command(R"({"type":"hand_force","f":[1,2,-3]})");
  EXPECT_EQ(c.type, ClientCommand::Type::hand_force);
  EXPECT_EQ(c.force, Vec3(1, 2, -3));
  EXPECT_TRUE(c.mutates());
  EXPECT_EQ(parse_client_command(R"({"type":"toggle_vf","on":false})").on, false);
  EXPECT_EQ(parse_client_command(R"({"type":"hand_force","f":[0,0,1],"ticks":5})").ticks, 5u);
  EXPECT_FALSE(parse_client_command(R"({"type":"sync"})").mutates());
  EXPECT_FALSE(parse_client_command(R"({"type":"scene"})").mutates());
  EXPECT_TRUE(parse_client_command(R"({"type":"load_scenario","path":"x.json"})").path.has_value());

  for (const char* bad : {"not json", R"({"f":[0,0,0]})", R"({"type":"hand_force","f":[0,0]})",
                          R"({"type":"hand_force","f":[0,0,"x"]})", R"({"type":"hand_force","f":[0,0,25]})",
                          R"({"type":"hand_force","f":[0,0,1],"ticks":-1})", R"({"type":"toggle_vf"})",
                          R"({"type":"load_scenario"})", R"({"type":"teleport"})"})
    EXPECT_THROW(parse_client_command(bad), ValidationError) << bad;
  EXPECT_NO_THROW(parse_client_command(R"({"type":"hand_force","f":[0,0,25]})", 30.0));
}

TEST(Protocol, SnapshotAndSceneFields) {
  SessionHost host(parse_scenario(kScenario));
  const json snap = json::parse(snapshot_to_json(make_snapshot(host.simulation())));
  for (const char* k : {"time", "tick", "tip", "clearance", "f_h", "f_sdf", "f_c", "vf_enabled", "drill_on",
                        "drilled_volume_mm3", "damage_mm3", "breach"})
    EXPECT_TRUE(snap.contains(k)) << k;
  EXPECT_EQ(snap["tick"], 0);
  EXPECT_TRUE(snap["clearance"].contains("2"));

  BuiltScenario built = build_scenario(parse_scenario(kScenario));
  const SegmentTable segs = built.segments;
  Simulation sim(std::move(built.setup));
  const json scene = scene_json(sim, segs);
  EXPECT_EQ(scene["dims"], json({32, 32, 32}));
  EXPECT_EQ(scene["constraints"][0]["tau0_mm"], 1.0);
  EXPECT_EQ(scene["segments"].size(), 2u);
  EXPECT_EQ(scene["matrix_label"], 1);
}

TEST(Host, NonWebSocketRequestGets400) {
  SessionHost host(parse_scenario(kScenario), lockstep());
  host.start();
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in a{};
  a.sin_family = AF_INET;
  a.sin_port = htons(host.port());
  ::inet_pton(AF_INET, "127.0.0.1", &a.sin_addr);
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&a), sizeof a), 0);
  const std::string req = "GET / HTTP/1.1\r\nHost: x\r\n\r\n";
  ::send(fd, req.data(), req.size(), 0);
  char buf[256] = {};
  const ssize_t n = ::recv(fd, buf, sizeof buf - 1, 0);
  ASSERT_GT(n, 0);
  EXPECT_EQ(std::string(buf).rfind("HTTP/1.1 400", 0), 0u);
  ::close(fd);
  host.stop();
}

TEST(Host, SceneRolesAndReadOnlyObserver) {
  SessionHost host(parse_scenario(kScenario), lockstep());
  host.start();
  auto steer = open_client(host);
  const json s1 = wait_for(*steer, "scene");
  EXPECT_EQ(s1["role"], "steering");
  EXPECT_EQ(s1["clock"], "lockstep");
  auto obs = open_client(host);
  EXPECT_EQ(wait_for(*obs, "scene")["role"], "observer");

  send(*obs, force_msg(Vec3(0, 0, -1), 10));
  EXPECT_NE(wait_for(*obs, "error")["msg"].get<std::string>().find("read-only"), std::string::npos);
  send(*obs, {{"type", "sync"}});
  EXPECT_EQ(wait_for(*obs, "sync")["tick"], 0);

  send(*steer, {{"type", "hand_force"}, {"f", {0, 0, 100}}});
  EXPECT_NE(wait_for(*steer, "error")["msg"].get<std::string>().find("exceeds"), std::string::npos);
  ASSERT_TRUE(steer->send_text("{oops"));
  wait_for(*steer, "error");
  send(*steer, {{"type", "scene"}});
  EXPECT_EQ(wait_for(*steer, "scene")["dims"], json({32, 32, 32}));

  send(*steer, force_msg(Vec3(0, 0, -1), 10));
  send(*steer, {{"type", "sync"}});
  EXPECT_EQ(wait_for(*steer, "sync")["tick"], 10);
  // The observer sees the published state.
  EXPECT_EQ(wait_for(*obs, "snapshot", [](const json& j) { return j["tick"] == 10; })["f_h"][2], -1.0);
  host.stop();
}

TEST(Host, RealtimeTicksRejected) {
  SessionHost host(parse_scenario(kScenario));
  host.start();
  auto c = open_client(host);
  EXPECT_EQ(wait_for(*c, "scene")["clock"], "realtime");
  send(*c, force_msg(Vec3(0, 0, 1), 5));
  EXPECT_NE(wait_for(*c, "error")["msg"].get<std::string>().find("lockstep"), std::string::npos);
  host.stop();
}

TEST(Host, RealtimeZeroForceIsStatic) {
  SessionHost host(parse_scenario(kScenario));
  host.start();
  auto c = open_client(host);
  wait_for(*c, "scene");
  const json first = wait_for(*c, "snapshot", [](const json& j) { return j["tick"].get<int>() > 0; });
  const json later = wait_for(*c, "snapshot", [&](const json& j) { return j["tick"].get<int>() > first["tick"].get<int>() + 50; });
  EXPECT_EQ(first["tip"], later["tip"]);
  EXPECT_EQ(later["drilled_volume_mm3"], 0.0);
  host.stop();
  EXPECT_GT(host.simulation().tick_count(), 50u);
}

TEST(Host, SteeringDisconnectZeroesForce) {
  SessionHost host(parse_scenario(kScenario));
  host.start();
  {
    auto c = open_client(host);
    wait_for(*c, "scene");
    send(*c, force_msg(Vec3(0, 0, 2)));  // lift away from the anatomy
    wait_for(*c, "snapshot", [](const json& j) { return j["f_h"][2] == 2.0; });
  }
  auto next = open_client(host);
  EXPECT_EQ(wait_for(*next, "scene")["role"], "steering");  // steering passes to the next connection
  const json zero = wait_for(*next, "snapshot", [](const json& j) { return j["f_h"][2] == 0.0; });
  const json after = wait_for(*next, "snapshot", [&](const json& j) { return j["tick"].get<int>() > zero["tick"].get<int>() + 50; });
  EXPECT_EQ(after["tip"], zero["tip"]);
  EXPECT_EQ(after["f_h"], json({0.0, 0.0, 0.0}));
  host.stop();
}

TEST(Host, LockstepMatchesScriptedRun) {
  const Scenario sc = parse_scenario(kScenario);
  const RunResult ref = run_trajectory(sc);

  SessionHost host(sc, lockstep());
  host.start();
  auto c = open_client(host);
  wait_for(*c, "scene");
  BuiltScenario built = build_scenario(sc);
  ForceScript script = make_force_script(sc);
  script.bind(Simulation(std::move(built.setup)).current_tip());
  for (std::size_t k = 0; k < sc.tick_count(); ++k) ASSERT_TRUE(c->send_text(force_msg(script.force_at(k, sc.dt), 1).dump()));
  send(*c, {{"type", "sync"}});
  EXPECT_EQ(wait_for(*c, "sync")["tick"], sc.tick_count());
  host.stop();
  EXPECT_EQ(trace_to_jsonl(host.simulation().trace()), trace_to_jsonl(ref.trace));
}

TEST(Host, ResetToggleAndLoadScenario) {
  SessionHost host(parse_scenario(kScenario), lockstep());
  host.start();
  auto c = open_client(host);
  wait_for(*c, "scene");
  send(*c, {{"type", "toggle_vf"}, {"on", false}});
  send(*c, {{"type", "set_drill_power"}, {"on", false}});
  send(*c, force_msg(Vec3(0, 0, -3), 200));
  const json s = wait_for(*c, "snapshot", [](const json& j) { return j["tick"] == 200; });
  EXPECT_EQ(s["vf_enabled"], false);
  EXPECT_EQ(s["drill_on"], false);
  EXPECT_EQ(s["drilled_volume_mm3"], 0.0);

  send(*c, {{"type", "reset"}});
  send(*c, {{"type", "sync"}});
  EXPECT_EQ(wait_for(*c, "sync")["tick"], 0);

  json other = json::parse(kScenario);
  other["volume"]["phantom"]["dims"] = {24, 24, 24};
  other["robot"]["q0"] = {6, 6, 11};
  send(*c, {{"type", "load_scenario"}, {"scenario", other}});
  EXPECT_EQ(wait_for(*c, "scene")["dims"], json({24, 24, 24}));

  other["constraints"][0]["label"] = 9;
  send(*c, {{"type", "load_scenario"}, {"scenario", other}});
  EXPECT_NE(wait_for(*c, "error")["msg"].get<std::string>().find("label 9"), std::string::npos);
  host.stop();
  EXPECT_EQ(host.simulation().setup().volume.geometry.dims[0], 24);
}

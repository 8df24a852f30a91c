#include <gtest/gtest.h>
#include <sys/wait.h>

#include <future>

#include "engram/daemon.hpp"
#include "support.hpp"

using namespace engram;
using nlohmann::json;

namespace {

Config small_config() {
  Config c;
  c.dim = 64;
  c.daemon_idle_timeout_s = 60;
  return c;
}

// A daemon on an ephemeral port, served from a background thread.
class RunningServer {
 public:
  RunningServer(const std::filesystem::path& dir, const Config& cfg, std::optional<double> idle = std::nullopt) {
    ServerOptions o;
    o.dir = dir;
    o.cfg = cfg;
    o.port = 0;
    o.idle_timeout_s = idle;
    server_ = std::make_unique<Server>(o);
    std::promise<int> ready;
    auto f = ready.get_future();
    server_->on_ready = [&](int p) { ready.set_value(p); };
    thread_ = std::thread([this] { exit_code_ = server_->run(); });
    if (f.wait_for(std::chrono::seconds(30)) != std::future_status::ready) throw std::runtime_error("no daemon");
    port_ = f.get();
    server_->on_ready = nullptr;
  }
  ~RunningServer() { stop(); }
  int stop() {
    if (thread_.joinable()) {
      server_->request_stop();
      thread_.join();
    }
    return exit_code_;
  }
  void join() { thread_.join(); }
  int port() const { return port_; }
  json call(const std::string& op, const json& args = json::object()) {
    return *daemon_request(port_, {{"op", op}, {"args", args}, {"request_id", "t"}}, 1000);
  }

 private:
  std::unique_ptr<Server> server_;
  std::thread thread_;
  int port_ = 0;
  int exit_code_ = -1;
};

std::size_t count_text(const std::filesystem::path& dir, const Config& cfg, const std::string& text) {
  Engine e(dir, cfg);
  std::size_t n = 0;
  for (const auto& m : e.store().scan())
    if (m.text == text) ++n;
  return n;
}

}  // namespace

class DaemonTest : public ::testing::Test {
 protected:
  engram::test::TempDir dir_{"daemon"};
  Config cfg_ = small_config();
};

TEST_F(DaemonTest, PingAndPortFile) {
  RunningServer s(dir_.path(), cfg_);
  EXPECT_TRUE(s.call("ping")["payload"]["pong"].get<bool>());
  const auto pf = PortFile::read_live(dir_.path());
  ASSERT_TRUE(pf);
  EXPECT_EQ(pf->port, s.port());
  EXPECT_EQ(s.stop(), exit_clean);
  EXPECT_FALSE(std::filesystem::exists(PortFile::path(dir_.path())));
}

TEST_F(DaemonTest, IdleTimeoutExitsCleanly) {
  const auto t0 = std::chrono::steady_clock::now();
  RunningServer s(dir_.path(), cfg_, 2.0);
  s.join();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(s.stop(), exit_clean);
  EXPECT_GE(secs, 2.0);
  EXPECT_LT(secs, 10.0);  // generous under parallel ctest load
}

TEST_F(DaemonTest, PortBusyExitCode) {
  RunningServer a(dir_.path(), cfg_);
  engram::test::TempDir other("daemon-other");
  ServerOptions o;
  o.dir = other.path();
  o.cfg = cfg_;
  o.port = a.port();
  EXPECT_EQ(Server(o).run(), exit_port_busy);
}

TEST_F(DaemonTest, CorruptStoreExitCode) {
  {
    std::ofstream(dir_ / "memory.db") << "this is not a database, just text padding out a page or so";
  }
  ServerOptions o;
  o.dir = dir_.path();
  o.cfg = cfg_;
  o.port = 0;
  EXPECT_EQ(Server(o).run(), exit_store_corrupt);
}

TEST_F(DaemonTest, ConcurrentRemembersAllApplied) {
  RunningServer s(dir_.path(), cfg_);
  std::vector<std::future<CallResult>> fs;
  for (int i = 0; i < 50; ++i)
    fs.push_back(std::async(std::launch::async, [&, i] {
      return client_call(dir_.path(), cfg_, "remember", {{"text", "fact number " + std::to_string(i)}});
    }));
  std::map<std::uint64_t, std::pair<MemoryId, int>> by_seq;
  std::set<MemoryId> ids;
  for (int i = 0; i < 50; ++i) {
    auto r = fs[static_cast<std::size_t>(i)].get();
    ASSERT_TRUE(r.via_daemon);
    ASSERT_TRUE(r.response["ok"].get<bool>()) << r.response.dump();
    const auto id = r.response["payload"]["id"].get<MemoryId>();
    ids.insert(id);
    by_seq[r.response["payload"]["seq"].get<std::uint64_t>()] = {id, i};
  }
  EXPECT_EQ(ids.size(), 50u);
  ASSERT_TRUE(s.call("drain")["ok"].get<bool>());
  s.stop();
  Engine e(dir_.path(), cfg_);
  EXPECT_EQ(e.store().count(), 50u);
  MemoryId prev = 0;
  for (const auto& [seq, v] : by_seq) {
    EXPECT_GT(v.first, prev);  // applied in sequence order with ids reserved in that order
    prev = v.first;
    EXPECT_EQ(e.store().get_memory(v.first).text, "fact number " + std::to_string(v.second));
  }
}

TEST_F(DaemonTest, RecallMatchesDirectPath) {
  for (int i = 0; i < 30; ++i)
    direct_call(dir_.path(), cfg_, "remember",
                {{"text", "note " + std::to_string(i) + " about topic " + std::to_string(i % 5)},
                 {"entities", {"topic" + std::to_string(i % 5)}}});
  const json q{{"text", "note about topic 3"}, {"entities", {"topic3"}}, {"consume", false}, {"k", 10}};
  const auto direct = direct_call(dir_.path(), cfg_, "recall", q);
  RunningServer s(dir_.path(), cfg_);
  const auto cold = s.call("recall", q);
  const auto warm = s.call("recall", q);
  EXPECT_FALSE(cold["warm"].get<bool>());
  EXPECT_TRUE(warm["warm"].get<bool>());
  EXPECT_EQ(cold["served_by"], "daemon");
  for (const auto& r : {cold, warm}) {
    ASSERT_EQ(r["payload"]["rows"].size(), direct["payload"]["rows"].size());
    for (std::size_t i = 0; i < r["payload"]["rows"].size(); ++i) {
      EXPECT_EQ(r["payload"]["rows"][i]["id"], direct["payload"]["rows"][i]["id"]);
      EXPECT_EQ(r["payload"]["rows"][i]["ranks"], direct["payload"]["rows"][i]["ranks"]);
    }
  }
}

TEST_F(DaemonTest, WriteWhileLockedIsRetryableBusy) {
  const auto a = direct_call(dir_.path(), cfg_, "remember", {{"text", "a"}})["payload"]["id"].get<MemoryId>();
  const auto b = direct_call(dir_.path(), cfg_, "remember", {{"text", "b"}})["payload"]["id"].get<MemoryId>();
  RunningServer s(dir_.path(), cfg_);
  {
    auto lock = WriterLock::try_acquire(dir_.path());
    ASSERT_TRUE(lock);
    const auto r = s.call("link", {{"src", a}, {"dst", b}});
    EXPECT_FALSE(r["ok"].get<bool>());
    EXPECT_EQ(r["error"]["code"], "busy");
    EXPECT_TRUE(r["error"]["retryable"].get<bool>());
    // remembers are still accepted into the queue
    const auto q = s.call("remember", {{"text", "queued while locked"}});
    EXPECT_TRUE(q["ok"].get<bool>());
  }
  EXPECT_TRUE(s.call("link", {{"src", a}, {"dst", b}})["ok"].get<bool>());
  EXPECT_TRUE(s.call("drain")["ok"].get<bool>());
  s.stop();
  EXPECT_EQ(count_text(dir_.path(), cfg_, "queued while locked"), 1u);
}

TEST_F(DaemonTest, FallsBackWhenDaemonAbsent) {
  // a live pid whose port has no listener
  PortFile{1, static_cast<int>(::getpid())}.write(dir_.path());
  const auto r = client_call(dir_.path(), cfg_, "remember", {{"text", "direct fact"}});
  EXPECT_FALSE(r.via_daemon);
  EXPECT_TRUE(r.response["ok"].get<bool>());
  EXPECT_EQ(r.response["served_by"], "direct");
  EXPECT_EQ(count_text(dir_.path(), cfg_, "direct fact"), 1u);
}

TEST_F(DaemonTest, InvalidRememberIsNotQueued) {
  RunningServer s(dir_.path(), cfg_);
  auto r = s.call("remember", {{"text", "x"}, {"importance", 1.5}});
  EXPECT_FALSE(r["ok"].get<bool>());
  EXPECT_EQ(r["error"]["code"], "invalid-argument");
  r = s.call("remember", {{"text", "x"}, {"embedding", std::vector<float>(3, 0.5f)}});
  EXPECT_FALSE(r["ok"].get<bool>());
  EXPECT_EQ(s.call("stats")["payload"]["pending"], 0);
}

TEST_F(DaemonTest, UnwritableQueueGivesNegativeAck) {
  RunningServer s(dir_.path(), cfg_);
  sql::Db blocker(PendingQueue::path(dir_.path()));
  blocker.exec("BEGIN EXCLUSIVE");
  const auto r = s.call("remember", {{"text", "never acked"}});
  blocker.exec("ROLLBACK");
  EXPECT_FALSE(r["ok"].get<bool>());
  EXPECT_EQ(s.call("stats")["payload"]["pending"], 0);
  EXPECT_TRUE(s.call("drain")["ok"].get<bool>());
  s.stop();
  EXPECT_EQ(count_text(dir_.path(), cfg_, "never acked"), 0u);
}

TEST_F(DaemonTest, DirectAndDaemonIdsNeverCollide) {
  RunningServer s(dir_.path(), cfg_);
  std::set<MemoryId> ids;
  for (int i = 0; i < 10; ++i) {
    ids.insert(s.call("remember", {{"text", "d" + std::to_string(i)}})["payload"]["id"].get<MemoryId>());
    ids.insert(
        direct_call(dir_.path(), cfg_, "remember", {{"text", "x" + std::to_string(i)}})["payload"]["id"].get<MemoryId>());
  }
  EXPECT_EQ(ids.size(), 20u);
  EXPECT_TRUE(s.call("drain")["ok"].get<bool>());
  s.stop();
  Engine e(dir_.path(), cfg_);
  EXPECT_EQ(e.store().count(), 20u);
  for (auto id : ids) EXPECT_TRUE(e.store().exists(id));
}

// Kills a forked daemon at the named stage during one remember, then checks
// that an acknowledged write survives exactly once and an unacknowledged one
// at most once.
class CrashTest : public ::testing::TestWithParam<std::string> {};

TEST_P(CrashTest, AckedWritesSurviveExactlyOnce) {
  engram::test::TempDir dir("crash");
  const Config cfg = small_config();
  direct_call(dir.path(), cfg, "ping", json::object());
  Engine(dir.path(), cfg);  // create the quantizer files before forking
  int fds[2];
  ASSERT_EQ(::pipe(fds), 0);
  const std::string stage = GetParam();
  const pid_t pid = ::fork();
  ASSERT_GE(pid, 0);
  if (pid == 0) {
    ::close(fds[0]);
    ServerOptions o;
    o.dir = dir.path();
    o.cfg = cfg;
    o.port = 0;
    o.idle_timeout_s = 10;
    o.stage_hook = [&](std::string_view s) {
      if (s == stage) ::_exit(77);
    };
    Server server(o);
    server.on_ready = [&](int p) {
      [[maybe_unused]] auto n = ::write(fds[1], &p, sizeof p);
    };
    ::_exit(server.run());
  }
  ::close(fds[1]);
  int port = 0;
  ASSERT_EQ(::read(fds[0], &port, sizeof port), static_cast<ssize_t>(sizeof port));
  ::close(fds[0]);
  bool acked = false;
  try {
    auto r = daemon_request(port, {{"op", "remember"}, {"args", {{"text", "crash " + stage}}}}, 2000, 20000);
    acked = r && (*r)["ok"].get<bool>();
  } catch (const std::exception&) {
  }
  int status = 0;
  for (int i = 0; i < 200 && ::waitpid(pid, &status, WNOHANG) == 0; ++i)
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  if (::waitpid(pid, &status, WNOHANG) == 0) {
    ::kill(pid, SIGKILL);
    ::waitpid(pid, &status, 0);
  }
  EXPECT_TRUE(WIFEXITED(status) && WEXITSTATUS(status) == 77) << "stage " << stage << " never reached";
  // recovery: the next writer replays the queue
  direct_call(dir.path(), cfg, "remember", {{"text", "after restart"}});
  const auto n = count_text(dir.path(), cfg, "crash " + stage);
  if (acked) EXPECT_EQ(n, 1u);
  else EXPECT_LE(n, 1u);
  EXPECT_TRUE(Engine(dir.path(), cfg).verify().empty());
}

INSTANTIATE_TEST_SUITE_P(Stages, CrashTest,
                         ::testing::Values("enqueued", "acked", "apply:before", "put:before-commit",
                                           "apply:committed"),
                         [](const auto& info) {
                           std::string n = info.param;
                           std::replace_if(n.begin(), n.end(), [](char c) { return !std::isalnum(c); }, '_');
                           return n;
                         });

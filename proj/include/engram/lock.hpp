#pragma once

#include <fcntl.h>
#include <signal.h>
#include <sys/file.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "engram/common.hpp"

namespace engram {

/// Exclusive writer role over a store directory, held through flock(2) on
/// writer.lock. The kernel drops the lock when the holder dies, so a stale
/// file never blocks; the recorded pid is only diagnostic.
class WriterLock {
 public:
  WriterLock() = default;
  WriterLock(const WriterLock&) = delete;
  WriterLock& operator=(const WriterLock&) = delete;
  WriterLock(WriterLock&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  WriterLock& operator=(WriterLock&& o) noexcept {
    release();
    fd_ = std::exchange(o.fd_, -1);
    return *this;
  }
  ~WriterLock() { release(); }

  static std::filesystem::path path(const std::filesystem::path& dir) { return dir / "writer.lock"; }

  /// Non-blocking attempt; nullopt when another holder is alive.
  static std::optional<WriterLock> try_acquire(const std::filesystem::path& dir) {
    const int fd = ::open(path(dir).c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd < 0) throw Error(Errc::io, "cannot open lock file " + path(dir).string());
    if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd);
      return std::nullopt;
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::ftruncate(fd, 0) == 0) {
      [[maybe_unused]] auto n = ::pwrite(fd, pid.data(), pid.size(), 0);
    }
    WriterLock l;
    l.fd_ = fd;
    return l;
  }

  /// Retries for up to wait_ms, then fails with Errc::busy.
  static WriterLock acquire(const std::filesystem::path& dir, int wait_ms) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(wait_ms);
    for (;;) {
      if (auto l = try_acquire(dir)) return std::move(*l);
      if (std::chrono::steady_clock::now() >= deadline) {
        auto holder = holder_pid(dir);
        throw Error(Errc::busy, "store is locked by another writer" +
                                    (holder ? " (pid " + std::to_string(*holder) + ")" : std::string()));
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }

  /// Pid recorded by the current holder, if that process is alive.
  static std::optional<int> holder_pid(const std::filesystem::path& dir) {
    std::ifstream in(path(dir));
    int pid = 0;
    if (!(in >> pid) || pid <= 0) return std::nullopt;
    if (::kill(pid, 0) != 0 && errno == ESRCH) return std::nullopt;
    return pid;
  }

  bool held() const { return fd_ >= 0; }

  void release() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
};

}  // namespace engram

#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "noisesearch/errors.hpp"
#include "noisesearch/verifiers.hpp"

namespace noisesearch {

/// How to launch an out-of-process verifier.
struct ProcessEndpoint {
  std::vector<std::string> argv;
  std::chrono::milliseconds timeout{60000};

  /// Runs `command` through /bin/sh -c.
  static ProcessEndpoint shell(const std::string& command) { return ProcessEndpoint{{"/bin/sh", "-c", command}}; }
};

/// Client side of the newline-delimited JSON verifier protocol (version 1)
/// spoken over a child process's stdin/stdout. One instance is one serial
/// connection; open several for parallel scoring.
class ExternalVerifier {
 public:
  static constexpr int kProtocolVersion = 1;

  ExternalVerifier(ProcessEndpoint endpoint, std::size_t dim) : endpoint_(std::move(endpoint)), dim_(dim) {
    if (endpoint_.argv.empty()) throw ArgumentError("external verifier: empty command");
    spawn();
    try {
      handshake();
    } catch (...) {
      shutdown();
      throw;
    }
  }

  ExternalVerifier(const ExternalVerifier&) = delete;
  ExternalVerifier& operator=(const ExternalVerifier&) = delete;

  ~ExternalVerifier() { shutdown(); }

  const std::string& name() const noexcept { return name_; }
  bool parallel() const noexcept { return parallel_; }
  pid_t pid() const noexcept { return pid_; }

  VerifierScore score(const ScoreRequest& req) {
    if (req.sample.size() != dim_) throw ArgumentError("external verifier: sample dimension mismatch");
    nlohmann::json msg = {{"id", req.request_id}, {"context", req.context}, {"sample", req.sample}};
    write_line(msg.dump());
    const std::string line = read_line();
    nlohmann::json resp;
    try {
      resp = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw TransportError("external verifier: malformed response", line);
    }
    if (!resp.is_object() || !resp.contains("id") || !resp["id"].is_number_integer()) {
      throw TransportError("external verifier: response without integer id", line);
    }
    if (resp["id"].get<std::uint64_t>() != req.request_id) {
      throw TransportError("external verifier: response id does not match request " + std::to_string(req.request_id),
                           line);
    }
    if (resp.contains("error")) {
      throw TransportError("external verifier reported an error", line);
    }
    if (!resp.contains("score") || !resp["score"].is_number()) {
      throw TransportError("external verifier: response without numeric score", line);
    }
    return VerifierScore{resp["score"].get<double>(), name_};
  }

  /// Sends the bye message and reaps the child (SIGKILL after 5 s).
  void shutdown() noexcept {
    if (pid_ <= 0) return;
    // A child that already missed a deadline gets no grace period.
    if (timed_out_) ::kill(pid_, SIGKILL);
    if (to_child_ >= 0) {
      try {
        write_line(R"({"bye":true})");
      } catch (...) {
      }
      ::close(to_child_);
      to_child_ = -1;
    }
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    int status = 0;
    while (::waitpid(pid_, &status, WNOHANG) == 0) {
      if (std::chrono::steady_clock::now() > deadline) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &status, 0);
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    if (from_child_ >= 0) ::close(from_child_);
    from_child_ = -1;
    pid_ = -1;
  }

 private:
  void spawn() {
    // A dead child must surface as a write error, not kill the parent.
    ::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2];
    int out_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0 || ::pipe2(out_pipe, O_CLOEXEC) != 0) {
      throw TransportError(std::string("external verifier: pipe failed: ") + std::strerror(errno));
    }
    std::vector<char*> args;
    for (auto& a : endpoint_.argv) args.push_back(a.data());
    args.push_back(nullptr);
    pid_ = ::fork();
    if (pid_ < 0) throw TransportError(std::string("external verifier: fork failed: ") + std::strerror(errno));
    if (pid_ == 0) {
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::execvp(args[0], args.data());
      ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
  }

  void handshake() {
    nlohmann::json hello = {{"hello", {{"version", kProtocolVersion}, {"dim", dim_}}}};
    write_line(hello.dump());
    const std::string line = read_line();
    try {
      const auto resp = nlohmann::json::parse(line);
      const auto& h = resp.at("hello");
      if (h.at("version").get<int>() != kProtocolVersion) {
        throw TransportError("external verifier: protocol version mismatch", line);
      }
      name_ = h.at("name").get<std::string>();
      parallel_ = h.value("parallel", false);
    } catch (const nlohmann::json::exception&) {
      throw TransportError("external verifier: malformed handshake", line);
    }
  }

  void write_line(const std::string& text) {
    std::string buf = text + "\n";
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t n = ::write(to_child_, buf.data() + off, buf.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("external verifier: write failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() + endpoint_.timeout;
    for (;;) {
      if (auto pos = pending_.find('\n'); pos != std::string::npos) {
        std::string line = pending_.substr(0, pos);
        pending_.erase(0, pos + 1);
        return line;
      }
      const auto left =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) {
        timed_out_ = true;
        throw TransportError("external verifier: timed out", pending_);
      }
      pollfd pfd{from_child_, POLLIN, 0};
      const int ready = ::poll(&pfd, 1, static_cast<int>(left.count()));
      if (ready < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("external verifier: poll failed: ") + std::strerror(errno));
      }
      if (ready == 0) continue;
      char chunk[4096];
      const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError(std::string("external verifier: read failed: ") + std::strerror(errno), pending_);
      }
      if (n == 0) throw TransportError("external verifier: process exited", pending_);
      pending_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  ProcessEndpoint endpoint_;
  std::size_t dim_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string pending_;
  std::string name_;
  bool parallel_ = false;
  bool timed_out_ = false;
};

/// Free-function form of ExternalVerifier::score.
inline VerifierScore score_external(ExternalVerifier& endpoint, const ScoreRequest& req) { return endpoint.score(req); }

}  // namespace noisesearch

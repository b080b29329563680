#pragma once

// Minimal POSIX TCP plumbing and the batch framing shared by client and server:
// frame = 4-byte big-endian payload length + payload; reply = 0x06 (ACK) or 0x15 (NAK).

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>
#include <utility>

#include <fmt/format.h>

#include "wxpipe/error.hpp"
#include "wxpipe/text.hpp"

namespace wxpipe::net {

inline constexpr std::uint8_t kAck = 0x06;
inline constexpr std::uint8_t kNak = 0x15;
inline constexpr std::uint32_t kMaxFrameBytes = 16u << 20;

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  std::string to_string() const { return fmt::format("{}:{}", host, port); }
};

inline Endpoint parse_endpoint(std::string_view s) {
  const auto colon = s.rfind(':');
  if (colon == std::string_view::npos || colon == 0) {
    throw Error(ErrorCode::InvalidArgument, "expected HOST:PORT, got '" + std::string(s) + "'");
  }
  const auto port = text::to_u64(s.substr(colon + 1));
  if (!port || *port > 65535) throw Error(ErrorCode::InvalidArgument, "bad port in '" + std::string(s) + "'");
  return {std::string(s.substr(0, colon)), static_cast<std::uint16_t>(*port)};
}

/// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { reset(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  void shutdown_both() const {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  int fd_ = -1;
};

enum class IoStatus { Ok, Timeout, Closed, Error };

using Millis = std::chrono::milliseconds;

inline IoStatus wait_fd(int fd, short events, Millis timeout) {
  pollfd p{fd, events, 0};
  while (true) {
    const int rc = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (rc > 0) return IoStatus::Ok;
    if (rc == 0) return IoStatus::Timeout;
    if (errno != EINTR) return IoStatus::Error;
  }
}

inline IoStatus read_exact(const Socket& s, void* buf, std::size_t len, Millis timeout) {
  auto* p = static_cast<char*>(buf);
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (len > 0) {
    const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return IoStatus::Timeout;
    if (auto st = wait_fd(s.fd(), POLLIN, left); st != IoStatus::Ok) return st;
    const ssize_t n = ::recv(s.fd(), p, len, 0);
    if (n == 0) return IoStatus::Closed;
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      return IoStatus::Error;
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return IoStatus::Ok;
}

inline IoStatus write_all(const Socket& s, const void* buf, std::size_t len, Millis timeout) {
  const auto* p = static_cast<const char*>(buf);
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  while (len > 0) {
    const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) return IoStatus::Timeout;
    if (auto st = wait_fd(s.fd(), POLLOUT, left); st != IoStatus::Ok) return st;
    const ssize_t n = ::send(s.fd(), p, len, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      return errno == EPIPE || errno == ECONNRESET ? IoStatus::Closed : IoStatus::Error;
    }
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return IoStatus::Ok;
}

inline std::optional<sockaddr_in> resolve_ipv4(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  const std::string host = ep.host == "localhost" ? "127.0.0.1" : ep.host;
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) return std::nullopt;
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

/// Non-blocking connect bounded by `timeout`; an invalid socket means the connect failed.
inline Socket connect_to(const Endpoint& ep, Millis timeout) {
  const auto addr = resolve_ipv4(ep);
  if (!addr) return {};
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) return {};
  const int flags = ::fcntl(s.fd(), F_GETFL, 0);
  ::fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
  int rc = ::connect(s.fd(), reinterpret_cast<const sockaddr*>(&*addr), sizeof(*addr));
  if (rc < 0 && errno != EINPROGRESS) return {};
  if (rc < 0) {
    if (wait_fd(s.fd(), POLLOUT, timeout) != IoStatus::Ok) return {};
    int err = 0;
    socklen_t len = sizeof(err);
    if (::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len) != 0 || err != 0) return {};
  }
  const int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return s;
}

/// Listening socket; port 0 picks an ephemeral port.
inline Socket listen_on(const Endpoint& ep, int backlog = 64) {
  const auto addr = resolve_ipv4(ep);
  if (!addr) throw Error(ErrorCode::InvalidArgument, "cannot resolve " + ep.to_string());
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw Error(ErrorCode::Io, "socket(): " + std::string(std::strerror(errno)));
  const int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (::bind(s.fd(), reinterpret_cast<const sockaddr*>(&*addr), sizeof(*addr)) != 0) {
    throw Error(ErrorCode::Io, fmt::format("bind {}: {}", ep.to_string(), std::strerror(errno)));
  }
  if (::listen(s.fd(), backlog) != 0) throw Error(ErrorCode::Io, "listen(): " + std::string(std::strerror(errno)));
  return s;
}

inline std::uint16_t local_port(const Socket& s) {
  sockaddr_in addr{};
  socklen_t len = sizeof(addr);
  ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
  return ntohs(addr.sin_port);
}

inline std::string encode_frame(std::string_view payload) {
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.reserve(payload.size() + 4);
  out.push_back(static_cast<char>((n >> 24) & 0xFF));
  out.push_back(static_cast<char>((n >> 16) & 0xFF));
  out.push_back(static_cast<char>((n >> 8) & 0xFF));
  out.push_back(static_cast<char>(n & 0xFF));
  out.append(payload);
  return out;
}

inline std::uint32_t decode_length(const unsigned char (&hdr)[4]) {
  return (std::uint32_t{hdr[0]} << 24) | (std::uint32_t{hdr[1]} << 16) | (std::uint32_t{hdr[2]} << 8) |
         std::uint32_t{hdr[3]};
}

}  // namespace wxpipe::net

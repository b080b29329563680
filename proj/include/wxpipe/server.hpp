#pragma once

// TCP ingestion: one frame per batch, ACK after the batch is durable (or already stored),
// NAK when the payload does not parse.

#include <atomic>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <stop_token>
#include <string>
#include <thread>

#include "wxpipe/batch.hpp"
#include "wxpipe/net.hpp"
#include "wxpipe/store.hpp"

namespace wxpipe {

struct ServerStats {
  std::atomic<std::uint64_t> stored{0};
  std::atomic<std::uint64_t> duplicates{0};
  std::atomic<std::uint64_t> rejected{0};
  std::atomic<std::uint64_t> connections{0};
};

class IngestionServer {
 public:
  struct Options {
    net::Millis frame_timeout{10000};  // once a frame has started
    net::Millis idle_timeout{120000};  // between frames
  };

  IngestionServer(RawStore& store, const net::Endpoint& bind) : IngestionServer(store, bind, Options{}) {}
  IngestionServer(RawStore& store, const net::Endpoint& bind, Options opts)
      : store_(store), opts_(opts), listener_(net::listen_on(bind)), port_(net::local_port(listener_)) {}

  IngestionServer(const IngestionServer&) = delete;
  IngestionServer& operator=(const IngestionServer&) = delete;
  ~IngestionServer() { stop(); }

  std::uint16_t port() const { return port_; }
  const ServerStats& stats() const { return stats_; }

  void start() {
    acceptor_ = std::jthread([this](std::stop_token st) { accept_loop(st); });
  }

  /// Stops accepting, drops open connections and joins every handler.
  void stop() {
    if (stopped_.exchange(true)) return;
    acceptor_.request_stop();
    if (acceptor_.joinable()) acceptor_.join();
    std::list<Connection> conns;
    {
      std::lock_guard lock(conn_mutex_);
      conns.swap(connections_);
    }
    for (auto& c : conns) {
      c.thread.request_stop();
      c.socket->shutdown_both();
    }
    conns.clear();  // joins
    listener_.reset();
  }

 private:
  struct Connection {
    std::shared_ptr<net::Socket> socket;
    std::shared_ptr<std::atomic<bool>> done;
    std::jthread thread;
  };

  void accept_loop(std::stop_token st) {
    while (!st.stop_requested()) {
      reap();
      if (net::wait_fd(listener_.fd(), POLLIN, net::Millis{50}) != net::IoStatus::Ok) continue;
      const int fd = ::accept4(listener_.fd(), nullptr, nullptr, SOCK_CLOEXEC);
      if (fd < 0) continue;
      ++stats_.connections;
      auto sock = std::make_shared<net::Socket>(fd);
      auto done = std::make_shared<std::atomic<bool>>(false);
      std::lock_guard lock(conn_mutex_);
      connections_.push_back({sock, done, std::jthread([this, sock, done](std::stop_token cst) {
                                handle(*sock, cst);
                                done->store(true);
                              })});
    }
  }

  void reap() {
    std::list<Connection> finished;
    {
      std::lock_guard lock(conn_mutex_);
      for (auto it = connections_.begin(); it != connections_.end();) {
        if (it->done->load()) {
          finished.splice(finished.end(), connections_, it++);
        } else {
          ++it;
        }
      }
    }
  }

  void handle(const net::Socket& sock, std::stop_token st) {
    auto idle = net::Millis{0};
    while (!st.stop_requested()) {
      const auto ready = net::wait_fd(sock.fd(), POLLIN, net::Millis{50});
      if (ready == net::IoStatus::Timeout) {
        idle += net::Millis{50};
        if (idle >= opts_.idle_timeout) return;
        continue;
      }
      if (ready != net::IoStatus::Ok) return;
      idle = net::Millis{0};

      unsigned char hdr[4];
      if (net::read_exact(sock, hdr, 4, opts_.frame_timeout) != net::IoStatus::Ok) return;
      const auto len = net::decode_length(hdr);
      if (len == 0 || len > net::kMaxFrameBytes) {
        reply(sock, net::kNak);
        ++stats_.rejected;
        return;  // cannot resynchronize after a bogus length
      }
      std::string payload(len, '\0');
      if (net::read_exact(sock, payload.data(), len, opts_.frame_timeout) != net::IoStatus::Ok) return;

      std::uint8_t answer = net::kNak;
      try {
        const auto batch = parse_batch(payload);
        if (store_.append(batch) == AppendOutcome::Stored) {
          ++stats_.stored;
        } else {
          ++stats_.duplicates;
        }
        answer = net::kAck;
      } catch (const Error&) {
        ++stats_.rejected;
      }
      if (!reply(sock, answer)) return;
    }
  }

  bool reply(const net::Socket& sock, std::uint8_t b) {
    return net::write_all(sock, &b, 1, opts_.frame_timeout) == net::IoStatus::Ok;
  }

  RawStore& store_;
  Options opts_;
  net::Socket listener_;
  std::uint16_t port_;
  ServerStats stats_;
  std::atomic<bool> stopped_{false};
  std::jthread acceptor_;
  std::mutex conn_mutex_;
  std::list<Connection> connections_;
};

/// Blocking server loop for the CLI.
inline void serve(const net::Endpoint& bind, RawStore& store, const std::function<bool()>& stop,
                  const std::function<void(std::uint16_t)>& on_listening = {}) {
  IngestionServer server(store, bind);
  server.start();
  if (on_listening) on_listening(server.port());
  while (!stop()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
}

}  // namespace wxpipe

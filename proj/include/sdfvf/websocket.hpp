#pragma once

// Minimal RFC 6455 WebSocket endpoints over blocking POSIX sockets: a
// listening server, server-side connections and a client for tests and
// tooling. Text and binary messages, fragmentation, ping/pong and close.

#include "sdfvf/geometry.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>

namespace sdfvf::ws {

inline constexpr std::size_t max_message_bytes = 16u << 20;

inline std::string base64(const unsigned char* data, std::size_t n) {
  std::string out(4 * ((n + 2) / 3), '\0');
  const int len = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data, static_cast<int>(n));
  out.resize(static_cast<std::size_t>(len));
  return out;
}

/// Sec-WebSocket-Accept value for a client key.
inline std::string accept_key(const std::string& client_key) {
  const std::string s = client_key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
  std::array<unsigned char, SHA_DIGEST_LENGTH> digest{};
  SHA1(reinterpret_cast<const unsigned char*>(s.data()), s.size(), digest.data());
  return base64(digest.data(), digest.size());
}

enum class Opcode : std::uint8_t { continuation = 0, text = 1, binary = 2, close = 8, ping = 9, pong = 10 };

struct Message {
  Opcode opcode = Opcode::text;
  std::string payload;
};

/// Serializes one unfragmented frame. `mask` is required for client frames.
inline std::string encode_frame(Opcode op, std::string_view payload, std::optional<std::array<unsigned char, 4>> mask) {
  std::string f;
  f.push_back(static_cast<char>(0x80 | static_cast<std::uint8_t>(op)));
  const std::uint8_t mbit = mask ? 0x80 : 0;
  const std::size_t n = payload.size();
  if (n < 126) {
    f.push_back(static_cast<char>(mbit | n));
  } else if (n <= 0xFFFF) {
    f.push_back(static_cast<char>(mbit | 126));
    f.push_back(static_cast<char>(n >> 8));
    f.push_back(static_cast<char>(n & 0xFF));
  } else {
    f.push_back(static_cast<char>(mbit | 127));
    for (int s = 56; s >= 0; s -= 8) f.push_back(static_cast<char>((static_cast<std::uint64_t>(n) >> s) & 0xFF));
  }
  if (mask) {
    f.append(reinterpret_cast<const char*>(mask->data()), 4);
    for (std::size_t i = 0; i < n; ++i) f.push_back(static_cast<char>(payload[i] ^ (*mask)[i % 4]));
  } else {
    f.append(payload);
  }
  return f;
}

/// One established WebSocket. Sends are serialized internally and may come
/// from any thread; receive() is for a single reader thread.
class Connection {
 public:
  Connection(int fd, bool client_side, std::string leftover)
      : fd_(fd), client_side_(client_side), rx_(std::move(leftover)), rng_(std::random_device{}()) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  Connection(const Connection&) = delete;
  Connection& operator=(const Connection&) = delete;
  ~Connection() {
    shutdown();
    ::close(fd_);
  }

  bool send_text(std::string_view text) { return send_frame(Opcode::text, text); }

  bool send_frame(Opcode op, std::string_view payload) {
    std::optional<std::array<unsigned char, 4>> mask;
    std::lock_guard lock(send_mutex_);
    if (client_side_) {
      const std::uint32_t m = static_cast<std::uint32_t>(rng_());
      mask = std::array<unsigned char, 4>{static_cast<unsigned char>(m), static_cast<unsigned char>(m >> 8),
                                          static_cast<unsigned char>(m >> 16), static_cast<unsigned char>(m >> 24)};
    }
    const std::string frame = encode_frame(op, payload, mask);
    return write_all(frame);
  }

  /// Next complete data message; nullopt once the peer closed or the socket
  /// failed. Control frames are answered here.
  std::optional<Message> receive() {
    std::optional<Message> partial;
    while (true) {
      unsigned char h[2];
      if (!read_exact(h, 2)) return std::nullopt;
      const bool fin = h[0] & 0x80;
      const auto op = static_cast<Opcode>(h[0] & 0x0F);
      const bool masked = h[1] & 0x80;
      std::uint64_t len = h[1] & 0x7F;
      if (len == 126) {
        unsigned char e[2];
        if (!read_exact(e, 2)) return std::nullopt;
        len = (std::uint64_t{e[0]} << 8) | e[1];
      } else if (len == 127) {
        unsigned char e[8];
        if (!read_exact(e, 8)) return std::nullopt;
        len = 0;
        for (unsigned char b : e) len = (len << 8) | b;
      }
      if (len > max_message_bytes) {
        close(1009);
        return std::nullopt;
      }
      unsigned char mask[4] = {0, 0, 0, 0};
      if (masked && !read_exact(mask, 4)) return std::nullopt;
      std::string payload(static_cast<std::size_t>(len), '\0');
      if (len > 0 && !read_exact(reinterpret_cast<unsigned char*>(payload.data()), payload.size())) return std::nullopt;
      if (masked)
        for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<char>(payload[i] ^ mask[i % 4]);

      switch (op) {
        case Opcode::ping: send_frame(Opcode::pong, payload); continue;
        case Opcode::pong: continue;
        case Opcode::close:
          close(1000);
          return std::nullopt;
        case Opcode::continuation:
          if (!partial) {
            close(1002);
            return std::nullopt;
          }
          partial->payload += payload;
          break;
        case Opcode::text:
        case Opcode::binary:
          partial = Message{op, std::move(payload)};
          break;
        default:
          close(1002);
          return std::nullopt;
      }
      if (partial && partial->payload.size() > max_message_bytes) {
        close(1009);
        return std::nullopt;
      }
      if (fin && partial) return partial;
    }
  }

  /// Sends a close frame once; the reader sees end-of-stream afterwards.
  void close(std::uint16_t code = 1000) {
    if (closed_.exchange(true)) return;
    const char body[2] = {static_cast<char>(code >> 8), static_cast<char>(code & 0xFF)};
    send_frame(Opcode::close, std::string_view(body, 2));
    ::shutdown(fd_, SHUT_WR);
  }

  /// Unblocks a pending receive() from another thread.
  void shutdown() { ::shutdown(fd_, SHUT_RDWR); }

  /// After this, receive() gives up (nullopt) when no byte arrives within `ms`.
  void set_receive_timeout(int ms) {
    timeval tv{ms / 1000, (ms % 1000) * 1000};
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  }

 private:
  bool write_all(std::string_view data) {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n <= 0) {
        if (n < 0 && errno == EINTR) continue;
        return false;
      }
      off += static_cast<std::size_t>(n);
    }
    return true;
  }

  bool read_exact(unsigned char* out, std::size_t n) {
    while (rx_.size() < n) {
      char buf[65536];
      const ssize_t got = ::recv(fd_, buf, sizeof buf, 0);
      if (got < 0 && errno == EINTR) continue;
      if (got <= 0) return false;
      rx_.append(buf, static_cast<std::size_t>(got));
    }
    std::memcpy(out, rx_.data(), n);
    rx_.erase(0, n);
    return true;
  }

  int fd_;
  bool client_side_;
  std::string rx_;
  std::mutex send_mutex_;
  std::mt19937 rng_;
  std::atomic<bool> closed_{false};
};

namespace detail {

/// Reads an HTTP head (through the blank line). Returns head and any bytes
/// that followed it.
inline std::optional<std::pair<std::string, std::string>> read_http_head(int fd) {
  std::string buf;
  while (buf.size() < 16384) {
    char tmp[4096];
    const ssize_t n = ::recv(fd, tmp, sizeof tmp, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return std::nullopt;
    buf.append(tmp, static_cast<std::size_t>(n));
    if (auto p = buf.find("\r\n\r\n"); p != std::string::npos) return std::pair{buf.substr(0, p + 4), buf.substr(p + 4)};
  }
  return std::nullopt;
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline std::optional<std::string> header_value(const std::string& head, const std::string& name) {
  std::size_t pos = head.find("\r\n");
  while (pos != std::string::npos && pos + 2 < head.size()) {
    const std::size_t start = pos + 2;
    const std::size_t end = head.find("\r\n", start);
    if (end == std::string::npos || end == start) break;
    const std::string line = head.substr(start, end - start);
    const auto colon = line.find(':');
    if (colon != std::string::npos && lower(line.substr(0, colon)) == name) {
      std::string v = line.substr(colon + 1);
      v.erase(0, v.find_first_not_of(" \t"));
      v.erase(v.find_last_not_of(" \t") + 1);
      return v;
    }
    pos = end;
  }
  return std::nullopt;
}

inline void send_raw(int fd, const std::string& s) { ::send(fd, s.data(), s.size(), MSG_NOSIGNAL); }

}  // namespace detail

class Server {
 public:
  /// Binds `host:port`; port 0 picks an ephemeral port (see port()).
  explicit Server(std::uint16_t port, const std::string& host = "127.0.0.1") {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError("socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw ValidationError("invalid listen address: " + host);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 16) != 0) {
      ::close(fd_);
      throw IoError("cannot listen on " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;
  ~Server() {
    stop();
    ::close(fd_);
  }

  std::uint16_t port() const { return port_; }

  /// Blocks for the next successful handshake; nullptr after stop().
  std::unique_ptr<Connection> accept() {
    while (!stopped_) {
      const int cfd = ::accept(fd_, nullptr, nullptr);
      if (cfd < 0) {
        if (errno == EINTR) continue;
        return nullptr;
      }
      if (stopped_) {
        ::close(cfd);
        return nullptr;
      }
      auto head = detail::read_http_head(cfd);
      std::optional<std::string> key;
      if (head) {
        const auto upgrade = detail::header_value(head->first, "upgrade");
        if (upgrade && detail::lower(*upgrade) == "websocket") key = detail::header_value(head->first, "sec-websocket-key");
      }
      if (!key) {
        detail::send_raw(cfd, "HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
        ::close(cfd);
        continue;
      }
      detail::send_raw(cfd, "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                            "Sec-WebSocket-Accept: " + accept_key(*key) + "\r\n\r\n");
      return std::make_unique<Connection>(cfd, false, std::move(head->second));
    }
    return nullptr;
  }

  void stop() {
    if (stopped_.exchange(true)) return;
    ::shutdown(fd_, SHUT_RDWR);
  }

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopped_{false};
};

/// Opens a client connection to ws://host:port/path.
inline std::unique_ptr<Connection> connect(const std::string& host, std::uint16_t port, const std::string& path = "/") {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
    throw IoError("cannot resolve " + host);
  const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  const int rc = fd < 0 ? -1 : ::connect(fd, res->ai_addr, res->ai_addrlen);
  ::freeaddrinfo(res);
  if (rc != 0) {
    if (fd >= 0) ::close(fd);
    throw IoError("cannot connect to " + host + ":" + std::to_string(port));
  }
  std::array<unsigned char, 16> nonce{};
  std::random_device rd;
  for (auto& b : nonce) b = static_cast<unsigned char>(rd());
  const std::string key = base64(nonce.data(), nonce.size());
  detail::send_raw(fd, "GET " + path + " HTTP/1.1\r\nHost: " + host + ":" + std::to_string(port) +
                           "\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: " + key +
                           "\r\nSec-WebSocket-Version: 13\r\n\r\n");
  auto head = detail::read_http_head(fd);
  if (!head || head->first.rfind("HTTP/1.1 101", 0) != 0 ||
      detail::header_value(head->first, "sec-websocket-accept") != accept_key(key)) {
    ::close(fd);
    throw IoError("WebSocket handshake failed");
  }
  return std::make_unique<Connection>(fd, true, std::move(head->second));
}

}  // namespace sdfvf::ws

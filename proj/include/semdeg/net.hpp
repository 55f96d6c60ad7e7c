#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "semdeg/errors.hpp"

namespace semdeg::net {

class NetError : public Error {
public:
    using Error::Error;
};
class Timeout : public NetError {
public:
    using NetError::NetError;
};
class ConnectFailed : public NetError {
public:
    using NetError::NetError;
};

/// Blocking loopback TCP stream with RAII ownership of the descriptor.
class TcpStream {
public:
    TcpStream() = default;
    explicit TcpStream(int fd) : fd_(fd) {}
    TcpStream(TcpStream&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    TcpStream& operator=(TcpStream&& o) noexcept {
        if (this != &o) {
            close();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    TcpStream(const TcpStream&) = delete;
    TcpStream& operator=(const TcpStream&) = delete;
    ~TcpStream() { close(); }

    static TcpStream connect(std::uint16_t port, std::chrono::milliseconds timeout) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw NetError("socket(): " + errno_text());
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = htons(port);
        if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
            int err = errno;
            ::close(fd);
            throw ConnectFailed("connect to 127.0.0.1:" + std::to_string(port) + ": " +
                                std::strerror(err));
        }
        TcpStream s(fd);
        s.set_timeout(timeout);
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        return s;
    }

    bool valid() const { return fd_ >= 0; }

    void set_timeout(std::chrono::milliseconds timeout) {
        timeval tv{};
        tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
        tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
        ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
        ::setsockopt(fd_, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    }

    void write_all(std::span<const std::uint8_t> data) {
        std::size_t sent = 0;
        while (sent < data.size()) {
            ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw NetError("send(): " + errno_text());
            }
            sent += static_cast<std::size_t>(n);
        }
    }

    void write_all(std::string_view s) {
        write_all(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
    }

    /// Reads exactly n bytes; returns false on a clean EOF at a record
    /// boundary (nothing read yet), throws on EOF mid-record.
    bool read_exact(std::span<std::uint8_t> out) {
        std::size_t got = 0;
        while (got < out.size()) {
            ssize_t n = ::recv(fd_, out.data() + got, out.size() - got, 0);
            if (n == 0) {
                if (got == 0) return false;
                throw NetError("connection closed mid-record");
            }
            if (n < 0) {
                if (errno == EINTR) continue;
                if (errno == EAGAIN || errno == EWOULDBLOCK) throw Timeout("read timed out");
                throw NetError("recv(): " + errno_text());
            }
            got += static_cast<std::size_t>(n);
        }
        return true;
    }

    /// Reads one '\n'-terminated line (terminator stripped). Returns false on
    /// clean EOF before any byte of a new line.
    bool read_line(std::string& out) {
        out.clear();
        char c;
        while (true) {
            ssize_t n = ::recv(fd_, &c, 1, 0);
            if (n == 0) {
                if (out.empty()) return false;
                throw NetError("connection closed mid-line");
            }
            if (n < 0) {
                if (errno == EINTR) continue;
                if (errno == EAGAIN || errno == EWOULDBLOCK) throw Timeout("read timed out");
                throw NetError("recv(): " + errno_text());
            }
            if (c == '\n') return true;
            out.push_back(c);
        }
    }

    void close() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

private:
    static std::string errno_text() { return std::strerror(errno); }

    int fd_ = -1;
};

/// Loopback listener; port 0 binds an ephemeral port (the effective port is
/// available afterwards), which keeps parallel test runs from colliding.
class TcpListener {
public:
    TcpListener() = default;
    TcpListener(TcpListener&& o) noexcept : fd_(std::exchange(o.fd_, -1)), port_(o.port_) {}
    TcpListener& operator=(TcpListener&& o) noexcept {
        if (this != &o) {
            close();
            fd_ = std::exchange(o.fd_, -1);
            port_ = o.port_;
        }
        return *this;
    }
    TcpListener(const TcpListener&) = delete;
    TcpListener& operator=(const TcpListener&) = delete;
    ~TcpListener() { close(); }

    static TcpListener bind_loopback(std::uint16_t port) {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw NetError("socket(): " + std::string(std::strerror(errno)));
        int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = htons(port);
        if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 16) != 0) {
            int err = errno;
            ::close(fd);
            throw NetError("bind/listen on 127.0.0.1:" + std::to_string(port) + ": " +
                           std::strerror(err));
        }
        socklen_t len = sizeof addr;
        ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
        TcpListener l;
        l.fd_ = fd;
        l.port_ = ntohs(addr.sin_port);
        return l;
    }

    std::uint16_t port() const { return port_; }

    /// Blocks until a client connects; an invalid stream means the listener
    /// was shut down.
    TcpStream accept() {
        while (true) {
            int fd = ::accept(fd_, nullptr, nullptr);
            if (fd >= 0) return TcpStream(fd);
            if (errno == EINTR) continue;
            return TcpStream();  // closed during shutdown
        }
    }

    /// Unblocks a pending accept() from another thread.
    void shutdown() {
        if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
    }

    void close() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

private:
    int fd_ = -1;
    std::uint16_t port_ = 0;
};

}  // namespace semdeg::net

#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "sa/error.hpp"
#include "sa/serialize.hpp"
#include "sa/tensor.hpp"

namespace sa {

// ----------------------------- message frames ------------------------------

enum class Tag : uint8_t {
  Hello = 1,
  FrontendPackage = 2,
  RepUpload = 3,
  Logits = 4,
  LossGrad = 5,
  EvalRequest = 6,
  EvalResult = 7,
  Done = 8,
  Error = 9,
};

inline const char* tag_name(Tag t) {
  switch (t) {
    case Tag::Hello: return "HELLO";
    case Tag::FrontendPackage: return "FRONTEND_PACKAGE";
    case Tag::RepUpload: return "REP_UPLOAD";
    case Tag::Logits: return "LOGITS";
    case Tag::LossGrad: return "LOSS_GRAD";
    case Tag::EvalRequest: return "EVAL_REQUEST";
    case Tag::EvalResult: return "EVAL_RESULT";
    case Tag::Done: return "DONE";
    case Tag::Error: return "ERROR";
  }
  return "?";
}

inline bool known_tag(uint8_t raw) { return raw >= 1 && raw <= 9; }

struct Message {
  Tag tag = Tag::Error;
  uint64_t session = 0;
  uint64_t seq = 0;
  std::vector<uint8_t> payload;

  bool operator==(const Message&) const = default;
};

inline constexpr uint16_t kProtocolVersion = 1;
// magic(4) + version(2) + tag(1) + session(8) + seq(8) + payload len(8)
inline constexpr size_t kFrameHeaderSize = 31;
inline constexpr uint64_t kMaxPayload = 64ull << 20;

inline std::vector<uint8_t> encode_message(const Message& m) {
  ByteWriter w;
  w.magic("SAPM");
  w.u16(kProtocolVersion);
  w.u8(static_cast<uint8_t>(m.tag));
  w.u64(m.session);
  w.u64(m.seq);
  w.u64(m.payload.size());
  w.bytes(m.payload);
  w.u32(crc32(m.payload));
  return w.take();
}

// Header fields plus the total frame length they imply.
struct FrameHeader {
  Tag tag;
  uint64_t session;
  uint64_t seq;
  uint64_t payload_len;
};

inline FrameHeader decode_frame_header(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("SAPM", "frame");
  const uint16_t version = r.u16();
  if (version != kProtocolVersion)
    throw DecodeError("frame: unsupported version " + std::to_string(version),
                      r.offset() - 2);
  const size_t tag_at = r.offset();
  const uint8_t raw_tag = r.u8();
  if (!known_tag(raw_tag))
    throw DecodeError("frame: unknown tag " + std::to_string(raw_tag), tag_at);
  FrameHeader h;
  h.tag = static_cast<Tag>(raw_tag);
  h.session = r.u64();
  h.seq = r.u64();
  const size_t len_at = r.offset();
  h.payload_len = r.u64();
  if (h.payload_len > kMaxPayload)
    throw DecodeError("frame: payload length " + std::to_string(h.payload_len) +
                          " exceeds the limit",
                      len_at);
  return h;
}

inline Message decode_message(std::span<const uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize)
    throw DecodeError("frame: shorter than a header", bytes.size());
  FrameHeader h = decode_frame_header(bytes.first(kFrameHeaderSize));
  if (bytes.size() < kFrameHeaderSize + h.payload_len + 4)
    throw DecodeError("frame: payload length exceeds the buffer",
                      kFrameHeaderSize - 8);
  Message m;
  m.tag = h.tag;
  m.session = h.session;
  m.seq = h.seq;
  m.payload.assign(bytes.begin() + kFrameHeaderSize,
                   bytes.begin() + kFrameHeaderSize + h.payload_len);
  ByteReader tail(bytes.subspan(kFrameHeaderSize + h.payload_len, 4));
  const uint32_t want = tail.u32();
  const uint32_t got = crc32(m.payload);
  if (want != got)
    throw DecodeError("frame: CRC mismatch", kFrameHeaderSize + h.payload_len);
  return m;
}

// --------------------------------- payloads --------------------------------

struct HelloPayload {
  uint64_t spec_hash = 0;
  uint64_t seed = 0;
  uint16_t classes = 0;   // client class count; class labels never travel
  uint32_t uploads = 0;   // REP_UPLOAD messages the client will send

  bool operator==(const HelloPayload&) const = default;
};

inline std::vector<uint8_t> encode_hello(const HelloPayload& h) {
  ByteWriter w;
  w.u64(h.spec_hash);
  w.u64(h.seed);
  w.u16(h.classes);
  w.u32(h.uploads);
  return w.take();
}

inline HelloPayload decode_hello(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  HelloPayload h;
  h.spec_hash = r.u64();
  h.seed = r.u64();
  h.classes = r.u16();
  h.uploads = r.u32();
  if (!r.done()) throw FormatError("hello: trailing bytes", r.offset());
  return h;
}

// 8-bit representation codes: the only payload shape REP_UPLOAD and
// EVAL_REQUEST are allowed to carry.
struct CodeBatch {
  uint16_t tokens = 0;
  uint16_t dim = 0;
  double delta = 0.0;
  std::vector<std::vector<int8_t>> codes;

  bool operator==(const CodeBatch&) const = default;
};

inline std::vector<uint8_t> encode_code_batch(const CodeBatch& b) {
  ByteWriter w;
  w.u16(b.tokens);
  w.u16(b.dim);
  w.f64(b.delta);
  w.u32(static_cast<uint32_t>(b.codes.size()));
  const size_t per = static_cast<size_t>(b.tokens) * b.dim;
  for (const std::vector<int8_t>& c : b.codes) {
    if (c.size() != per)
      throw ArgumentError("code batch: sample size does not match tokens*dim");
    for (int8_t v : c) w.u8(static_cast<uint8_t>(v));
  }
  return w.take();
}

inline CodeBatch decode_code_batch(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  CodeBatch b;
  b.tokens = r.u16();
  b.dim = r.u16();
  b.delta = r.f64();
  const uint32_t count = r.u32();
  const size_t per = static_cast<size_t>(b.tokens) * b.dim;
  if (per == 0) throw FormatError("code batch: zero geometry", 0);
  if (!(b.delta > 0.0)) throw FormatError("code batch: nonpositive scale", 4);
  if (static_cast<uint64_t>(count) * per > r.remaining())
    throw DecodeError("code batch: sample count exceeds the payload",
                      r.offset() - 4);
  for (uint32_t i = 0; i < count; ++i) {
    std::vector<int8_t> c(per);
    for (size_t j = 0; j < per; ++j) c[j] = static_cast<int8_t>(r.u8());
    b.codes.push_back(std::move(c));
  }
  if (!r.done()) throw FormatError("code batch: trailing bytes", r.offset());
  return b;
}

enum class TensorKind : uint8_t {
  Output = 1,       // server forward results
  Gradient = 2,     // loss gradients, either direction
  Activations = 3,  // split-learning float uploads
};

// Float tensor exchange for LOGITS and LOSS_GRAD. `indices` names the
// uploaded samples a batch covers; `item_rows` lets one message carry a
// stack of per-sample matrices.
struct TensorMessage {
  TensorKind kind = TensorKind::Output;
  double scalar = 0.0;  // loss value on LOSS_GRAD replies
  uint16_t item_rows = 1;
  std::vector<uint32_t> indices;
  Tensor values;
};

inline std::vector<uint8_t> encode_tensor_message(const TensorMessage& t) {
  ByteWriter w;
  w.u8(static_cast<uint8_t>(t.kind));
  w.f64(t.scalar);
  w.u16(t.item_rows);
  w.u32(static_cast<uint32_t>(t.indices.size()));
  for (uint32_t i : t.indices) w.u32(i);
  w.u32(static_cast<uint32_t>(t.values.rows()));
  w.u32(static_cast<uint32_t>(t.values.cols()));
  for (double v : t.values.data) w.f64(v);
  return w.take();
}

inline TensorMessage decode_tensor_message(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  TensorMessage t;
  const uint8_t kind = r.u8();
  if (kind < 1 || kind > 3) throw FormatError("tensor message: unknown kind", 0);
  t.kind = static_cast<TensorKind>(kind);
  t.scalar = r.f64();
  t.item_rows = r.u16();
  const uint32_t idx_count = r.u32();
  if (static_cast<uint64_t>(idx_count) * 4 > r.remaining())
    throw DecodeError("tensor message: index count exceeds the payload",
                      r.offset() - 4);
  for (uint32_t i = 0; i < idx_count; ++i) t.indices.push_back(r.u32());
  const uint32_t rows = r.u32();
  const uint32_t cols = r.u32();
  if (static_cast<uint64_t>(rows) * cols > r.remaining() / 8)
    throw DecodeError("tensor message: dimensions exceed the payload",
                      r.offset() - 8);
  t.values = Tensor::zeros(rows, cols);
  for (double& v : t.values.data) v = r.f64();
  if (!r.done()) throw FormatError("tensor message: trailing bytes", r.offset());
  return t;
}

inline std::vector<uint8_t> encode_eval_result(
    const std::vector<uint16_t>& predictions) {
  ByteWriter w;
  w.u32(static_cast<uint32_t>(predictions.size()));
  for (uint16_t p : predictions) w.u16(p);
  return w.take();
}

inline std::vector<uint16_t> decode_eval_result(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  const uint32_t count = r.u32();
  if (static_cast<uint64_t>(count) * 2 > r.remaining())
    throw DecodeError("eval result: count exceeds the payload", 0);
  std::vector<uint16_t> out;
  for (uint32_t i = 0; i < count; ++i) out.push_back(r.u16());
  if (!r.done()) throw FormatError("eval result: trailing bytes", r.offset());
  return out;
}

inline std::vector<uint8_t> encode_error_text(const std::string& text) {
  return std::vector<uint8_t>(text.begin(), text.end());
}
inline std::string decode_error_text(std::span<const uint8_t> bytes) {
  return std::string(bytes.begin(), bytes.end());
}

// -------------------------------- transports -------------------------------

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send_bytes(std::span<const uint8_t> bytes) = 0;
  virtual std::vector<uint8_t> recv_exact(size_t n) = 0;
  void set_timeout(double seconds) { timeout_seconds_ = seconds; }
  double timeout() const { return timeout_seconds_; }

 protected:
  double timeout_seconds_ = 30.0;
};

namespace channel_detail {

struct ByteQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<uint8_t> bytes;
  size_t capacity = 16ull << 20;
  bool closed = false;

  void close() {
    std::lock_guard lock(mu);
    closed = true;
    cv.notify_all();
  }
};

}  // namespace channel_detail

// In-process bounded FIFO pair. make_channel_pair() returns the two ends.
class ChannelTransport : public Transport {
 public:
  using Queue = channel_detail::ByteQueue;

  ChannelTransport(std::shared_ptr<Queue> in, std::shared_ptr<Queue> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~ChannelTransport() override {
    if (out_) out_->close();
    if (in_) in_->close();
  }

  void send_bytes(std::span<const uint8_t> bytes) override {
    size_t sent = 0;
    while (sent < bytes.size()) {
      std::unique_lock lock(out_->mu);
      if (!out_->cv.wait_for(lock, wait_step(), [&] {
            return out_->closed || out_->bytes.size() < out_->capacity;
          }))
        throw ProtocolError("channel send timed out");
      if (out_->closed) throw ProtocolError("channel closed by peer");
      while (sent < bytes.size() && out_->bytes.size() < out_->capacity)
        out_->bytes.push_back(bytes[sent++]);
      out_->cv.notify_all();
    }
  }

  std::vector<uint8_t> recv_exact(size_t n) override {
    std::vector<uint8_t> out;
    out.reserve(n);
    const auto deadline = std::chrono::steady_clock::now() +
                          std::chrono::duration<double>(timeout_seconds_);
    while (out.size() < n) {
      std::unique_lock lock(in_->mu);
      if (!in_->cv.wait_until(lock, deadline, [&] {
            return in_->closed || !in_->bytes.empty();
          }))
        throw ProtocolError("channel receive timed out");
      if (in_->bytes.empty() && in_->closed)
        throw ProtocolError("channel closed by peer");
      while (out.size() < n && !in_->bytes.empty()) {
        out.push_back(in_->bytes.front());
        in_->bytes.pop_front();
      }
      in_->cv.notify_all();
    }
    return out;
  }

 private:
  std::chrono::duration<double> wait_step() const {
    return std::chrono::duration<double>(timeout_seconds_);
  }

  std::shared_ptr<Queue> in_, out_;
};

inline std::pair<std::unique_ptr<ChannelTransport>,
                 std::unique_ptr<ChannelTransport>>
make_channel_pair(size_t capacity = 16ull << 20) {
  auto a = std::make_shared<channel_detail::ByteQueue>();
  auto b = std::make_shared<channel_detail::ByteQueue>();
  a->capacity = capacity;
  b->capacity = capacity;
  return {std::make_unique<ChannelTransport>(a, b),
          std::make_unique<ChannelTransport>(b, a)};
}

// Loopback/remote byte-stream transport over a socket descriptor.
class TcpTransport : public Transport {
 public:
  explicit TcpTransport(int fd) : fd_(fd) { apply_timeout(); }
  ~TcpTransport() override {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  static std::unique_ptr<TcpTransport> connect(const std::string& host,
                                               uint16_t port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw ProtocolError("socket: " + std::string(strerror(errno)));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      ::close(fd);
      throw ProtocolError("connect: bad address " + host);
    }
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      const std::string why = strerror(errno);
      ::close(fd);
      throw ProtocolError("connect to " + host + ":" + std::to_string(port) +
                          " failed: " + why);
    }
    return std::make_unique<TcpTransport>(fd);
  }

  void send_bytes(std::span<const uint8_t> bytes) override {
    size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent,
                               MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ProtocolError("send: " + std::string(strerror(errno)));
      }
      sent += static_cast<size_t>(n);
    }
  }

  std::vector<uint8_t> recv_exact(size_t n) override {
    apply_timeout();
    std::vector<uint8_t> out(n);
    size_t got = 0;
    while (got < n) {
      const ssize_t r = ::recv(fd_, out.data() + got, n - got, 0);
      if (r == 0) throw ProtocolError("connection closed by peer");
      if (r < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK)
          throw ProtocolError("receive timed out");
        throw ProtocolError("recv: " + std::string(strerror(errno)));
      }
      got += static_cast<size_t>(r);
    }
    return out;
  }

 private:
  void apply_timeout() {
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(timeout_seconds_);
    tv.tv_usec = static_cast<suseconds_t>(
        (timeout_seconds_ - static_cast<double>(tv.tv_sec)) * 1e6);
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  }

  int fd_ = -1;
};

class TcpListener {
 public:
  explicit TcpListener(uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw ProtocolError("socket: " + std::string(strerror(errno)));
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      const std::string why = strerror(errno);
      ::close(fd_);
      throw ProtocolError("bind to port " + std::to_string(port) +
                          " failed: " + why);
    }
    if (::listen(fd_, 4) != 0) {
      const std::string why = strerror(errno);
      ::close(fd_);
      throw ProtocolError("listen failed: " + why);
    }
  }
  ~TcpListener() {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  uint16_t port() const {
    sockaddr_in addr{};
    socklen_t len = sizeof(addr);
    if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) != 0)
      throw ProtocolError("getsockname: " + std::string(strerror(errno)));
    return ntohs(addr.sin_port);
  }

  std::unique_ptr<TcpTransport> accept(double timeout_seconds = 30.0) {
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(timeout_seconds);
    tv.tv_usec = static_cast<suseconds_t>(
        (timeout_seconds - static_cast<double>(tv.tv_sec)) * 1e6);
    ::setsockopt(fd_, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
    const int conn = ::accept(fd_, nullptr, nullptr);
    if (conn < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK)
        throw ProtocolError("accept timed out");
      throw ProtocolError("accept: " + std::string(strerror(errno)));
    }
    return std::make_unique<TcpTransport>(conn);
  }

 private:
  int fd_ = -1;
};

// -------------------------------- connection -------------------------------

// Frame-level endpoint: sequence numbers stamped and checked per direction,
// optional tap observing the exact bytes of every frame.
class Connection {
 public:
  using TapFn = std::function<void(bool outgoing, const std::vector<uint8_t>&)>;

  Connection(Transport& transport, uint64_t session)
      : transport_(transport), session_(session) {}

  uint64_t session() const { return session_; }
  void set_session(uint64_t s) { session_ = s; }
  void set_tap(TapFn tap) { tap_ = std::move(tap); }

  // Accept whatever session id the first inbound frame carries; later
  // frames must match it. For acceptors that cannot know the id up front.
  void adopt_session_from_peer() { adopt_ = true; }

  void send(Tag tag, std::vector<uint8_t> payload) {
    Message m;
    m.tag = tag;
    m.session = session_;
    m.seq = next_send_seq_++;
    m.payload = std::move(payload);
    std::vector<uint8_t> frame = encode_message(m);
    if (tap_) tap_(true, frame);
    transport_.send_bytes(frame);
  }

  Message recv() {
    std::vector<uint8_t> head = transport_.recv_exact(kFrameHeaderSize);
    FrameHeader h = decode_frame_header(head);
    std::vector<uint8_t> rest = transport_.recv_exact(h.payload_len + 4);
    std::vector<uint8_t> frame = std::move(head);
    frame.insert(frame.end(), rest.begin(), rest.end());
    Message m = decode_message(frame);
    if (tap_) tap_(false, frame);
    if (adopt_) {
      session_ = m.session;
      adopt_ = false;
    }
    if (m.session != session_)
      throw ProtocolError("session id mismatch: expected " +
                          std::to_string(session_) + ", got " +
                          std::to_string(m.session));
    if (have_recv_seq_ && m.seq <= last_recv_seq_)
      throw ProtocolError("sequence number went backwards: " +
                          std::to_string(m.seq) + " after " +
                          std::to_string(last_recv_seq_));
    last_recv_seq_ = m.seq;
    have_recv_seq_ = true;
    return m;
  }

  // Receives and insists on one of the listed tags. An inbound ERROR is
  // surfaced as a ProtocolError carrying the peer's text.
  Message expect(std::initializer_list<Tag> tags) {
    Message m = recv();
    if (m.tag == Tag::Error)
      throw ProtocolError("peer error: " + decode_error_text(m.payload));
    for (Tag t : tags)
      if (m.tag == t) return m;
    throw ProtocolError(std::string("unexpected ") + tag_name(m.tag));
  }

  void send_error(const std::string& text) {
    send(Tag::Error, encode_error_text(text));
  }

 private:
  Transport& transport_;
  uint64_t session_;
  uint64_t next_send_seq_ = 0;
  uint64_t last_recv_seq_ = 0;
  bool have_recv_seq_ = false;
  bool adopt_ = false;
  TapFn tap_;
};

// ------------------------------ session phases -----------------------------

enum class SessionPhase {
  Init,
  FrontendSent,
  RepsReceived,
  Adapting,
  Evaluating,
  Done,
};

inline const char* phase_name(SessionPhase p) {
  switch (p) {
    case SessionPhase::Init: return "Init";
    case SessionPhase::FrontendSent: return "FrontendSent";
    case SessionPhase::RepsReceived: return "RepsReceived";
    case SessionPhase::Adapting: return "Adapting";
    case SessionPhase::Evaluating: return "Evaluating";
    case SessionPhase::Done: return "Done";
  }
  return "?";
}

// Server-side view of the adaptation session: which inbound tags are legal
// in each phase, and where they lead.
inline SessionPhase advance_phase(SessionPhase phase, Tag inbound) {
  const auto illegal = [&]() -> SessionPhase {
    throw ProtocolError(std::string(tag_name(inbound)) + " not legal in phase " +
                        phase_name(phase));
  };
  switch (phase) {
    case SessionPhase::Init:
      return inbound == Tag::Hello ? SessionPhase::FrontendSent : illegal();
    case SessionPhase::FrontendSent:
      if (inbound == Tag::RepUpload) return SessionPhase::RepsReceived;
      if (inbound == Tag::Done) return SessionPhase::Done;
      return illegal();
    case SessionPhase::RepsReceived:
      if (inbound == Tag::RepUpload) return SessionPhase::RepsReceived;
      if (inbound == Tag::LossGrad) return SessionPhase::Adapting;
      if (inbound == Tag::EvalRequest) return SessionPhase::Evaluating;
      if (inbound == Tag::Done) return SessionPhase::Done;
      return illegal();
    case SessionPhase::Adapting:
      if (inbound == Tag::LossGrad) return SessionPhase::Adapting;
      if (inbound == Tag::EvalRequest) return SessionPhase::Evaluating;
      if (inbound == Tag::Done) return SessionPhase::Done;
      return illegal();
    case SessionPhase::Evaluating:
      if (inbound == Tag::EvalRequest) return SessionPhase::Evaluating;
      if (inbound == Tag::Done) return SessionPhase::Done;
      return illegal();
    case SessionPhase::Done:
      return illegal();
  }
  return illegal();
}

// --------------------------------- wiretap ---------------------------------

// Collects raw frames; can persist them as a concatenated SAPM stream.
struct Wiretap {
  std::vector<std::vector<uint8_t>> frames;

  Connection::TapFn hook() {
    return [this](bool, const std::vector<uint8_t>& frame) {
      frames.push_back(frame);
    };
  }

  std::vector<Message> messages() const {
    std::vector<Message> out;
    for (const auto& f : frames) out.push_back(decode_message(f));
    return out;
  }

  void save(const std::string& path) const {
    std::vector<uint8_t> all;
    for (const auto& f : frames) all.insert(all.end(), f.begin(), f.end());
    write_file_atomic(path, all);
  }
};

inline std::vector<Message> read_wiretap_dump(const std::string& path) {
  const std::vector<uint8_t> all = read_file_bytes(path);
  std::vector<Message> out;
  size_t at = 0;
  while (at < all.size()) {
    std::span<const uint8_t> rest(all.data() + at, all.size() - at);
    if (rest.size() < kFrameHeaderSize)
      throw DecodeError("wiretap dump: trailing partial frame", at);
    FrameHeader h = decode_frame_header(rest.first(kFrameHeaderSize));
    const size_t total = kFrameHeaderSize + h.payload_len + 4;
    if (rest.size() < total)
      throw DecodeError("wiretap dump: truncated frame", at);
    out.push_back(decode_message(rest.first(total)));
    at += total;
  }
  return out;
}

// ------------------------------ two-party glue -----------------------------

// Runs the two endpoint programs over an in-process channel pair, client on
// a second thread. Exceptions surface on their own side.
template <typename ServerFn, typename ClientFn>
void run_two_party(ServerFn&& server_fn, ClientFn&& client_fn,
                   double timeout_seconds = 30.0) {
  auto [server_end, client_end] = make_channel_pair();
  server_end->set_timeout(timeout_seconds);
  client_end->set_timeout(timeout_seconds);

  std::exception_ptr client_error;
  std::thread client_thread([&] {
    try {
      client_fn(*client_end);
    } catch (...) {
      client_error = std::current_exception();
    }
  });

  std::exception_ptr server_error;
  try {
    server_fn(*server_end);
  } catch (...) {
    server_error = std::current_exception();
  }

  client_thread.join();
  if (server_error) std::rethrow_exception(server_error);
  if (client_error) std::rethrow_exception(client_error);
}

}  // namespace sa

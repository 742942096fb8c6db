#pragma once

// Discrete-event model of the single inter-UAV link: fixed latency plus clock
// skew, dropout windows that discard traffic, per-tick bandwidth accounting,
// and closest-timestamp pairing of the two frame streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "costereo/errors.hpp"

namespace costereo {

enum class MessageKind { VioPose, Keypoints, FrameStub };

inline const char* to_string(MessageKind k) {
  switch (k) {
    case MessageKind::VioPose: return "vio_pose";
    case MessageKind::Keypoints: return "keypoints";
    case MessageKind::FrameStub: return "frame_stub";
  }
  return "?";
}

/// Payload sizes of the default message mix [bytes].
inline constexpr std::size_t kFrameStubBytes = 50'000;          // compressed 640x480 gray
inline constexpr std::size_t kKeypointBytes = 150 * (1 + 8 + 256);  // id, pixel, descriptor
inline constexpr std::size_t kVioPoseBytes = 28;                  // 7 floats

struct DropoutWindow {
  double start = 0.0;  // inclusive
  double end = 0.0;    // exclusive
  bool contains(double t) const { return t >= start && t < end; }
};

struct LinkConfig {
  double latency = 0.015;
  double bandwidth_cap = 20e6;  // bytes/s
  std::vector<DropoutWindow> dropout_windows;
  double clock_skew = 0.001;

  void validate() const {
    if (latency < 0.0) throw ConfigError("link: latency must be >= 0");
    if (!(bandwidth_cap > 0.0)) throw ConfigError("link: bandwidth_cap must be > 0");
    auto w = dropout_windows;
    std::sort(w.begin(), w.end(),
              [](const DropoutWindow& a, const DropoutWindow& b) { return a.start < b.start; });
    for (std::size_t k = 0; k < w.size(); ++k) {
      if (!(w[k].end > w[k].start)) throw ConfigError("link: empty dropout window");
      if (k > 0 && w[k].start < w[k - 1].end)
        throw ConfigError("link: dropout windows overlap");
    }
  }

  bool in_dropout(double t) const {
    return std::any_of(dropout_windows.begin(), dropout_windows.end(),
                       [t](const DropoutWindow& w) { return w.contains(t); });
  }
};

template <class Payload>
struct Message {
  MessageKind kind = MessageKind::VioPose;
  std::size_t payload_bytes = 1;
  double sent_at = 0.0;   // sender clock
  double due_at = 0.0;    // receiver clock
  std::uint64_t seq = 0;
  Payload payload{};
};

/// Accounting record of a message that crossed the link.
struct MessageRecord {
  MessageKind kind = MessageKind::VioPose;
  std::size_t payload_bytes = 0;
  double sent_at = 0.0;
  double due_at = 0.0;
};

/// FIFO link from one sender to one receiver.
template <class Payload>
class Link {
public:
  explicit Link(LinkConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  const LinkConfig& config() const { return cfg_; }

  /// Queues a message; returns false if it was sent inside a dropout window.
  bool send(MessageKind kind, std::size_t bytes, double sent_at, Payload payload) {
    if (bytes == 0) throw ContractError("link: payload_bytes must be > 0");
    if (static_cast<double>(bytes) > cfg_.bandwidth_cap)
      throw ContractError("link: message larger than the per-second bandwidth cap");
    if (!in_flight_.empty() && sent_at < last_sent_)
      throw ContractError("link: outbox must be time-ordered");
    last_sent_ = sent_at;
    if (cfg_.in_dropout(sent_at)) {
      ++dropped_;
      return false;
    }
    Message<Payload> m;
    m.kind = kind;
    m.payload_bytes = bytes;
    m.sent_at = sent_at;
    m.due_at = sent_at + cfg_.latency + cfg_.clock_skew;
    m.seq = next_seq_++;
    m.payload = std::move(payload);
    in_flight_.push_back(std::move(m));
    return true;
  }

  /// Delivers every due message, in order, while the bytes delivered in the
  /// current one-second bin [n, n+1) stay within bandwidth_cap. Undeliverable
  /// excess waits for a later tick; FIFO order is never violated.
  std::vector<Message<Payload>> step(double now) {
    const auto bin = static_cast<long long>(std::floor(now + 1e-12));
    if (bin != bin_) {
      bin_ = bin;
      bin_bytes_ = 0.0;
    }
    std::vector<Message<Payload>> out;
    while (!in_flight_.empty() && in_flight_.front().due_at <= now + 1e-12) {
      auto& m = in_flight_.front();
      const auto bytes = static_cast<double>(m.payload_bytes);
      if (bin_bytes_ + bytes > cfg_.bandwidth_cap) break;
      bin_bytes_ += bytes;
      log_.push_back({m.kind, m.payload_bytes, m.sent_at, m.due_at});
      out.push_back(std::move(m));
      in_flight_.pop_front();
    }
    return out;
  }

  const std::vector<MessageRecord>& delivered_log() const { return log_; }
  std::size_t dropped() const { return dropped_; }
  std::size_t in_flight() const { return in_flight_.size(); }

private:
  LinkConfig cfg_;
  std::deque<Message<Payload>> in_flight_;
  std::vector<MessageRecord> log_;
  long long bin_ = std::numeric_limits<long long>::min();
  double bin_bytes_ = 0.0;
  double last_sent_ = 0.0;
  std::uint64_t next_seq_ = 0;
  std::size_t dropped_ = 0;
};

/// Delivers the messages of `outbox` that are due by `now` (single-call form
/// of Link for callers holding their own outbox).
template <class Payload>
std::vector<Message<Payload>> step_network(double now,
                                           const std::vector<Message<Payload>>& outbox,
                                           const LinkConfig& cfg) {
  Link<Payload> link(cfg);
  for (const auto& m : outbox) link.send(m.kind, m.payload_bytes, m.sent_at, m.payload);
  return link.step(now);
}

struct BandwidthReport {
  std::map<std::string, double> bytes_per_s;  // keyed by message kind
  double total = 0.0;
};

inline BandwidthReport bandwidth_report(const std::vector<MessageRecord>& log,
                                        double horizon) {
  BandwidthReport r;
  for (auto k : {MessageKind::VioPose, MessageKind::Keypoints, MessageKind::FrameStub})
    r.bytes_per_s[to_string(k)] = 0.0;
  if (!(horizon > 0.0)) return r;
  // Integer byte counts, divided once.
  std::map<std::string, std::uint64_t> bytes;
  std::uint64_t total = 0;
  for (const auto& m : log) {
    bytes[to_string(m.kind)] += m.payload_bytes;
    total += m.payload_bytes;
  }
  for (const auto& [k, b] : bytes) r.bytes_per_s[k] = static_cast<double>(b) / horizon;
  r.total = static_cast<double>(total) / horizon;
  return r;
}

// ------------------------------------------------------------------ pairing

template <class Frame>
struct FramePair {
  double master_stamp = 0.0;
  double slave_stamp = 0.0;
  Frame master;
  Frame slave;
};

/// Bounded, time-ordered frame queues for the master (i) and slave (j).
template <class Frame>
class PairBuffer {
public:
  explicit PairBuffer(double tolerance = 0.5 / 30.0, std::size_t capacity = 60)
      : tol_(tolerance), cap_(capacity) {}

  void push_master(double stamp, Frame f) { push(master_, last_master_, stamp, std::move(f)); }
  void push_slave(double stamp, Frame f) { push(slave_, last_slave_, stamp, std::move(f)); }

  std::size_t master_size() const { return master_.size(); }
  std::size_t slave_size() const { return slave_.size(); }
  double tolerance() const { return tol_; }

  /// Emits every pair that can be formed now. Default mode pairs each master
  /// frame with the slave frame of minimum |dt| (ties to the earlier one);
  /// with a forced offset the slave frame nearest master - offset is used.
  std::vector<FramePair<Frame>> pair_closest_frames(std::optional<double> forced_offset = {}) {
    std::vector<FramePair<Frame>> out;
    while (!master_.empty() && !slave_.empty()) {
      const double target = master_.front().first - forced_offset.value_or(0.0);
      // Slave frames that cannot get closer to this or any later target.
      std::size_t best = 0;
      double best_d = std::abs(slave_.front().first - target);
      for (std::size_t k = 1; k < slave_.size(); ++k) {
        const double d = std::abs(slave_[k].first - target);
        if (d < best_d - 1e-12) {
          best = k;
          best_d = d;
        }
      }
      if (best_d <= tol_ + 1e-12) {
        FramePair<Frame> p;
        p.master_stamp = master_.front().first;
        p.slave_stamp = slave_[best].first;
        p.master = std::move(master_.front().second);
        p.slave = std::move(slave_[best].second);
        master_.pop_front();
        slave_.erase(slave_.begin(), slave_.begin() + static_cast<long>(best) + 1);
        out.push_back(std::move(p));
        continue;
      }
      if (slave_.back().first > target + tol_) {
        // A newer slave frame exists, so no acceptable partner will arrive.
        master_.pop_front();
        continue;
      }
      break;  // wait for the slave stream
    }
    // Old slave frames are useless once they fall behind every future target.
    if (!master_.empty()) {
      const double target = master_.front().first - forced_offset.value_or(0.0);
      while (slave_.size() > 1 && slave_.front().first < target - tol_) slave_.pop_front();
    }
    return out;
  }

private:
  void push(std::deque<std::pair<double, Frame>>& q, std::optional<double>& last, double stamp,
            Frame f) {
    if (last && stamp <= *last) throw ContractError("pair buffer: stamps must increase");
    last = stamp;
    q.emplace_back(stamp, std::move(f));
    while (q.size() > cap_) q.pop_front();
  }

  double tol_;
  std::size_t cap_;
  std::deque<std::pair<double, Frame>> master_;
  std::deque<std::pair<double, Frame>> slave_;
  std::optional<double> last_master_;
  std::optional<double> last_slave_;
};

}  // namespace costereo

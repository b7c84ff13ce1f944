#pragma once

// Behavior logs: TSV ingestion, per-user segmentation with leave-last-out
// split, negative sampling and the synthetic long-range benchmark generator.

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "dman/errors.hpp"
#include "dman/matrix.hpp"
#include "dman/rng.hpp"

namespace dman {

struct Interaction {
  UserId user = 0;
  ItemId item = 0;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

struct BehaviorLog {
  std::vector<Interaction> records;

  ItemId max_item() const {
    ItemId m = 0;
    for (const auto& r : records) m = std::max(m, r.item);
    return m;
  }
  bool operator==(const BehaviorLog&) const = default;
};

// Users with at least this many interactions are kept ("more than ten").
inline constexpr std::size_t kMinInteractions = 11;

namespace detail {
inline bool parse_int(std::string_view s, std::int64_t& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}
}  // namespace detail

inline BehaviorLog parse_log(std::istream& in, std::size_t min_interactions = kMinInteractions) {
  BehaviorLog log;
  std::vector<std::size_t> bad_lines;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::int64_t fields[3];
    std::size_t n = 0;
    std::size_t start = 0;
    bool ok = true;
    while (ok) {
      const std::size_t tab = line.find('\t', start);
      const std::string_view tok =
          std::string_view(line).substr(start, tab == std::string::npos ? tab : tab - start);
      if (n == 3 || !detail::parse_int(tok, fields[n])) ok = false;
      ++n;
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (!ok || n != 3 || fields[1] < 1) {
      bad_lines.push_back(line_no);
      continue;
    }
    log.records.push_back({fields[0], fields[1], fields[2]});
  }
  if (!bad_lines.empty()) {
    std::ostringstream os;
    os << bad_lines.size() << " malformed line(s), expected 'user<TAB>item>=1<TAB>timestamp' "
       << "integers; lines:";
    for (std::size_t i = 0; i < bad_lines.size() && i < 20; ++i) os << ' ' << bad_lines[i];
    if (bad_lines.size() > 20) os << " ...";
    throw ParseError(os.str());
  }
  if (min_interactions > 0) {
    std::map<UserId, std::size_t> counts;
    for (const auto& r : log.records) ++counts[r.user];
    std::erase_if(log.records,
                  [&](const Interaction& r) { return counts[r.user] < min_interactions; });
  }
  return log;
}

inline BehaviorLog ingest(const std::string& path,
                          std::size_t min_interactions = kMinInteractions) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot read behavior log '" + path + "'");
  try {
    return parse_log(in, min_interactions);
  } catch (const ParseError& e) {
    throw ParseError(path + ": " + e.what());
  }
}

inline void write_log(const BehaviorLog& log, std::ostream& out) {
  for (const auto& r : log.records) out << r.user << '\t' << r.item << '\t' << r.timestamp << '\n';
}

inline void write_log(const BehaviorLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write behavior log '" + path + "'");
  write_log(log, out);
  if (!out) throw RuntimeFailure("write failed for '" + path + "'");
}

// Chronological item sequence per user; ties on timestamp keep input order.
inline std::map<UserId, std::vector<ItemId>> user_sequences(const BehaviorLog& log) {
  std::vector<std::size_t> order(log.records.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ra = log.records[a];
    const auto& rb = log.records[b];
    return ra.user != rb.user ? ra.user < rb.user : ra.timestamp < rb.timestamp;
  });
  std::map<UserId, std::vector<ItemId>> out;
  for (std::size_t i : order) out[log.records[i].user].push_back(log.records[i].item);
  return out;
}

struct SegmentedHistory {
  UserId user = 0;
  std::vector<std::vector<ItemId>> segments;  // oldest first, each of window length
  Index pad_count = 0;                        // padding slots at the head of segments[0]
  std::optional<ItemId> validation;
  std::optional<ItemId> test;

  std::vector<ItemId> items() const {
    std::vector<ItemId> out;
    for (const auto& s : segments) {
      for (ItemId i : s) {
        if (i != kPaddingItem) out.push_back(i);
      }
    }
    return out;
  }
};

// Left-pads items to a multiple of window and cuts them into segments.
inline SegmentedHistory segment_items(UserId user, std::span<const ItemId> items, Index window) {
  if (window < 2) throw ValidationError("segment: window must be >= 2");
  SegmentedHistory h;
  h.user = user;
  const Index len = static_cast<Index>(items.size());
  const Index n = (len + window - 1) / window;
  h.pad_count = n * window - len;
  std::vector<ItemId> padded(static_cast<std::size_t>(h.pad_count), kPaddingItem);
  padded.insert(padded.end(), items.begin(), items.end());
  for (Index k = 0; k < n; ++k) {
    h.segments.emplace_back(padded.begin() + k * window, padded.begin() + (k + 1) * window);
  }
  return h;
}

// With split, the last item is held out for test and the one before it for
// validation; users left without training items are skipped.
inline std::vector<SegmentedHistory> segment(const BehaviorLog& log, Index window, bool split) {
  if (window < 2) throw ValidationError("segment: window must be >= 2");
  std::vector<SegmentedHistory> out;
  for (auto& [user, items] : user_sequences(log)) {
    std::optional<ItemId> val;
    std::optional<ItemId> test;
    std::span<const ItemId> train(items);
    if (split) {
      if (items.size() < 3) continue;
      test = items[items.size() - 1];
      val = items[items.size() - 2];
      train = train.first(items.size() - 2);
    }
    SegmentedHistory h = segment_items(user, train, window);
    h.validation = val;
    h.test = test;
    out.push_back(std::move(h));
  }
  return out;
}

// Training items plus the validation item: the history visible when
// predicting the test item.
inline SegmentedHistory test_history(const SegmentedHistory& h, Index window) {
  std::vector<ItemId> items = h.items();
  if (h.validation) items.push_back(*h.validation);
  SegmentedHistory out = segment_items(h.user, items, window);
  out.test = h.test;
  return out;
}

// k distinct items drawn uniformly from 1..vocab minus exclude.
inline std::vector<ItemId> sample_negatives(Rng& rng, ItemId vocab,
                                            std::span<const ItemId> exclude, Index k) {
  std::vector<ItemId> excl;
  for (ItemId e : exclude) {
    if (e >= 1 && e <= vocab) excl.push_back(e);
  }
  std::sort(excl.begin(), excl.end());
  excl.erase(std::unique(excl.begin(), excl.end()), excl.end());
  const Index available = vocab - static_cast<Index>(excl.size());
  if (k < 0 || available < k) {
    throw ValidationError("sample_negatives: vocabulary exhausted (" + std::to_string(available) +
                          " items available, " + std::to_string(k) + " requested)");
  }
  auto excluded = [&](ItemId i) { return std::binary_search(excl.begin(), excl.end(), i); };
  std::vector<ItemId> out;
  out.reserve(static_cast<std::size_t>(k));
  if (available >= 4 * k) {
    while (static_cast<Index>(out.size()) < k) {
      const ItemId c = rng.uniform_int(1, vocab);
      if (excluded(c) || std::find(out.begin(), out.end(), c) != out.end()) continue;
      out.push_back(c);
    }
    return out;
  }
  std::vector<ItemId> pool;
  for (ItemId i = 1; i <= vocab; ++i) {
    if (!excluded(i)) pool.push_back(i);
  }
  for (Index i = 0; i < k; ++i) {
    const auto j = rng.uniform_int(i, static_cast<std::int64_t>(pool.size()) - 1);
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    out.push_back(pool[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Synthetic long-range task.
//
// Item 1 is a trigger. Each user owns an anchor item (private while the anchor
// pool is large enough) placed early in the first segment. Recall events
// (trigger, then anchor with probability period_strength) occur in the middle
// of the history, at least two windows after the anchor and outside the last
// three windows, which a two-layer recurrent model reaches at test time. The sequence ends with (trigger, test item): the anchor with
// probability period_strength, otherwise the short-term successor of the item
// preceding the trigger. Everything else follows a Markov chain over the
// remaining items: with probability 0.8 the successor of the previous item.
struct SyntheticSpec {
  Index users = 0;
  Index segments = 0;
  Index window = 0;
  ItemId vocab = 0;
  double period_strength = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (users < 1 || segments < 1) throw ValidationError("synthetic: users and segments >= 1");
    if (window < 3) throw ValidationError("synthetic: window must be >= 3");
    if (!(period_strength >= 0.0 && period_strength <= 1.0)) {
      throw ValidationError("synthetic: period strength must lie in [0, 1]");
    }
    if (vocab <= segments * window || vocab < 6) {
      throw ValidationError("synthetic: vocab must exceed segments * window");
    }
  }
};

inline constexpr ItemId kTriggerItem = 1;
inline constexpr double kMarkovFollowProb = 0.8;

class SyntheticTask {
 public:
  explicit SyntheticTask(SyntheticSpec spec) : spec_(spec) {
    spec_.validate();
    anchor_pool_ = std::min<ItemId>(spec_.users, (spec_.vocab - 1) / 2);
    Rng rng(spec_.seed, 0);
    std::vector<ItemId> perm(static_cast<std::size_t>(spec_.users));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    for (Index u = 0; u < spec_.users; ++u) {
      anchors_.push_back(2 + perm[static_cast<std::size_t>(u)] % anchor_pool_);
    }
  }

  const SyntheticSpec& spec() const { return spec_; }
  ItemId anchor_of(UserId user) const { return anchors_.at(static_cast<std::size_t>(user - 1)); }
  // The long-range target for an anchor.
  static ItemId mapped_item(ItemId anchor) { return anchor; }
  ItemId markov_lo() const { return 2 + anchor_pool_; }
  ItemId markov_size() const { return spec_.vocab - markov_lo() + 1; }
  ItemId successor(ItemId item) const {
    return markov_lo() + (item - markov_lo() + 1) % markov_size();
  }
  bool is_markov(ItemId item) const { return item >= markov_lo() && item <= spec_.vocab; }

  // Chronological items of one user (ids start at 1).
  std::vector<ItemId> sequence(UserId user) const {
    const Index len = spec_.segments * spec_.window;
    const Index T = spec_.window;
    Rng rng(spec_.seed, static_cast<std::uint64_t>(user) + 1);
    const ItemId anchor = anchor_of(user);
    std::vector<ItemId> seq(static_cast<std::size_t>(len), kPaddingItem);
    auto markov_after = [&](ItemId prev) {
      if (is_markov(prev) && rng.bernoulli(kMarkovFollowProb)) return successor(prev);
      return rng.uniform_int(markov_lo(), spec_.vocab);
    };
    // Fixed slots: anchor, recall events, final trigger and test item.
    // Kept clear of the last two slots of the first window so the anchor stays
    // in the first segment after holding out two items and left-padding.
    const Index anchor_slot = rng.uniform_int(0, std::min(T - 3, len - 3));
    std::vector<Index> events;
    const Index lo = 2 * T;
    const Index hi = (spec_.segments - 3) * T - 3;  // last allowed recall position
    for (Index block = 2; block * T + 1 <= hi; ++block) {
      const Index first = std::max(lo, block * T) + 1;
      const Index last = std::min(hi, block * T + T - 1);
      if (first <= last) events.push_back(rng.uniform_int(first, last));
    }
    ItemId last_markov = kPaddingItem;
    std::size_t next_event = 0;
    for (Index t = 0; t < len; ++t) {
      auto at = [&](Index i) -> ItemId& { return seq[static_cast<std::size_t>(i)]; };
      const bool final_trigger = t == len - 2;
      const bool final_test = t == len - 1;
      const bool event_trigger = next_event < events.size() && t == events[next_event] - 1;
      const bool event_recall = next_event < events.size() && t == events[next_event];
      if (t == anchor_slot) {
        at(t) = anchor;
      } else if (final_trigger || event_trigger) {
        at(t) = kTriggerItem;
      } else if (final_test || event_recall) {
        at(t) = rng.bernoulli(spec_.period_strength) ? mapped_item(anchor)
                                                     : markov_after(last_markov);
        if (event_recall) ++next_event;
      } else {
        at(t) = markov_after(last_markov);
      }
      if (is_markov(at(t))) last_markov = at(t);
    }
    return seq;
  }

  BehaviorLog generate() const {
    BehaviorLog log;
    for (UserId u = 1; u <= spec_.users; ++u) {
      const auto seq = sequence(u);
      for (std::size_t t = 0; t < seq.size(); ++t) {
        log.records.push_back({u, seq[t], static_cast<std::int64_t>(t)});
      }
    }
    return log;
  }

 private:
  SyntheticSpec spec_;
  ItemId anchor_pool_ = 0;
  std::vector<ItemId> anchors_;
};

inline BehaviorLog generate_synthetic(Index users, Index segments, Index window, ItemId vocab,
                                      double period_strength, std::uint64_t seed) {
  return SyntheticTask({users, segments, window, vocab, period_strength, seed}).generate();
}

}  // namespace dman

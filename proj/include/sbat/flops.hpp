#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace sbat {

struct FlopCounts {
  std::uint64_t mults = 0;
  std::uint64_t adds = 0;

  FlopCounts& operator+=(const FlopCounts& o) {
    mults += o.mults;
    adds += o.adds;
    return *this;
  }
  friend bool operator==(const FlopCounts&, const FlopCounts&) = default;
};

// Counts multiply/add operations issued by the matmul kernels. Counts are
// bucketed by the category active at the time (see FlopCategory); the
// default bucket is "linear". When disabled, recording is a no-op.
class FlopCounter {
 public:
  void enable() { enabled_ = true; }
  void disable() { enabled_ = false; }
  bool enabled() const { return enabled_; }
  void reset() { buckets_.clear(); }

  void record(std::uint64_t mults, std::uint64_t adds) {
    if (!enabled_) return;
    auto& b = buckets_[category_];
    b.mults += mults;
    b.adds += adds;
  }

  FlopCounts total() const;
  FlopCounts category(const std::string& name) const;

  /// Flat key/value report: "<category>.mults", "<category>.adds", "total.*".
  std::map<std::string, std::uint64_t> report() const;

  const std::string& current_category() const { return category_; }

 private:
  friend class FlopCategory;
  bool enabled_ = false;
  std::string category_ = "linear";
  std::map<std::string, FlopCounts> buckets_;
};

/// The calling thread's counter.
FlopCounter& flop_counter();

/// Routes counts to `name` for the lifetime of the guard.
class FlopCategory {
 public:
  explicit FlopCategory(std::string name);
  ~FlopCategory();
  FlopCategory(const FlopCategory&) = delete;
  FlopCategory& operator=(const FlopCategory&) = delete;

 private:
  std::string previous_;
};

/// Enables and resets the thread's counter, restoring the prior state on exit.
class FlopScope {
 public:
  FlopScope();
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;

 private:
  bool was_enabled_;
};

}  // namespace sbat

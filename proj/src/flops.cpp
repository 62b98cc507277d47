#include "sbat/flops.hpp"

namespace sbat {

FlopCounts FlopCounter::total() const {
  FlopCounts t;
  for (const auto& [_, c] : buckets_) t += c;
  return t;
}

FlopCounts FlopCounter::category(const std::string& name) const {
  auto it = buckets_.find(name);
  return it == buckets_.end() ? FlopCounts{} : it->second;
}

std::map<std::string, std::uint64_t> FlopCounter::report() const {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [name, c] : buckets_) {
    out[name + ".mults"] = c.mults;
    out[name + ".adds"] = c.adds;
  }
  const FlopCounts t = total();
  out["total.mults"] = t.mults;
  out["total.adds"] = t.adds;
  return out;
}

FlopCounter& flop_counter() {
  thread_local FlopCounter counter;
  return counter;
}

FlopCategory::FlopCategory(std::string name) : previous_(flop_counter().category_) {
  flop_counter().category_ = std::move(name);
}

FlopCategory::~FlopCategory() { flop_counter().category_ = std::move(previous_); }

FlopScope::FlopScope() : was_enabled_(flop_counter().enabled()) {
  flop_counter().reset();
  flop_counter().enable();
}

FlopScope::~FlopScope() {
  if (!was_enabled_) flop_counter().disable();
}

}  // namespace sbat

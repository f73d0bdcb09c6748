#pragma once

#include <functional>
#include <string_view>

namespace tfr {

using WarningHandler = std::function<void(std::string_view)>;

// Non-fatal conditions (degenerate pools, substituted distances, dropped
// columns) are reported here. The default handler writes to stderr.
void warn(std::string_view message);

// Replaces the process-wide handler and returns the previous one.
WarningHandler set_warning_handler(WarningHandler handler);

// Installs a handler for the lifetime of the object.
class ScopedWarningHandler {
 public:
  explicit ScopedWarningHandler(WarningHandler handler)
      : previous_(set_warning_handler(std::move(handler))) {}
  ~ScopedWarningHandler() { set_warning_handler(std::move(previous_)); }
  ScopedWarningHandler(const ScopedWarningHandler&) = delete;
  ScopedWarningHandler& operator=(const ScopedWarningHandler&) = delete;

 private:
  WarningHandler previous_;
};

}  // namespace tfr

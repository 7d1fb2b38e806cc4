#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace mpe {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void check_failed(const char* expr, const char* file, int line, const std::string& msg) {
  std::ostringstream oss;
  oss << file << ":" << line << ": check failed (" << expr << ")";
  if (!msg.empty()) oss << ": " << msg;
  throw Error(oss.str());
}
}  // namespace detail

#define MPE_CHECK(cond, msg)                                               \
  do {                                                                     \
    if (!(cond)) ::mpe::detail::check_failed(#cond, __FILE__, __LINE__,    \
                                             (std::ostringstream() << msg).str()); \
  } while (0)

// Number of worker threads for batch-parallel sections. Fixed per process so
// that parallel reductions keep a stable summation order.
int num_threads();
void set_num_threads(int n);

}  // namespace mpe

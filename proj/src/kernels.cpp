#include "htkg/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace htkg::kernels {

namespace scalar {
const Ops& table();
}
namespace avx2 {
const Ops& table();
bool supported();
}

namespace {

Backend initial_backend() {
  if (const char* env = std::getenv("HTKG_KERNELS")) {
    const std::string v(env);
    if (v == "scalar") return Backend::scalar;
    if (v == "avx2" && avx2::supported()) return Backend::avx2;
  }
  return avx2::supported() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& current() {
  static std::atomic<Backend> b{initial_backend()};
  return b;
}

}  // namespace

bool backend_available(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
      return avx2::supported();
  }
  return false;
}

const Ops& ops_for(Backend b) {
  if (!backend_available(b)) throw std::runtime_error("kernel backend not available on this cpu");
  return b == Backend::avx2 ? avx2::table() : scalar::table();
}

const Ops& ops() { return ops_for(current().load(std::memory_order_relaxed)); }

Backend active_backend() { return current().load(std::memory_order_relaxed); }

bool set_backend(Backend b) {
  if (!backend_available(b)) return false;
  current().store(b, std::memory_order_relaxed);
  return true;
}

std::string_view backend_name(Backend b) {
  return b == Backend::avx2 ? "avx2" : "scalar";
}

}  // namespace htkg::kernels

#include "alore/accounting.hpp"

#include <cmath>
#include <cstdio>

#include "alore/matrix.hpp"

namespace alore {

const char* method_name(Method m) {
  switch (m) {
    case Method::AdapterLike: return "adapter_like";
    case Method::VPTShallow: return "vpt_shallow";
    case Method::VPTDeep: return "vpt_deep";
    case Method::LoRA: return "lora";
    case Method::SSF: return "ssf";
    case Method::ARC: return "arc";
    case Method::ALoRE: return "alore";
  }
  return "?";
}

std::optional<Method> method_from_name(const std::string& name) {
  if (name == "adapter_like" || name == "adapter") return Method::AdapterLike;
  if (name == "vpt_shallow") return Method::VPTShallow;
  if (name == "vpt_deep") return Method::VPTDeep;
  if (name == "lora") return Method::LoRA;
  if (name == "ssf") return Method::SSF;
  if (name == "arc") return Method::ARC;
  if (name == "alore") return Method::ALoRE;
  return std::nullopt;
}

void AccountingInputs::validate() const {
  if (d < 0 || r < 0 || L < 0 || n < 0 || m < 0 || w < 0 || o < 0) {
    throw ConfigError("accounting: all counts must be nonnegative");
  }
}

long long fine_tune_params(const AccountingInputs& inp) {
  inp.validate();
  switch (inp.method) {
    case Method::AdapterLike: return 4 * inp.d * inp.r * inp.L;
    case Method::VPTShallow: return inp.m * inp.d;
    case Method::VPTDeep: return inp.m * inp.d * inp.L;
    case Method::LoRA: return 2 * inp.w * inp.d * inp.r * inp.L;
    case Method::SSF: return 2 * inp.o * inp.d * inp.L;
    case Method::ARC: return 2 * (inp.d * inp.r + (inp.d + inp.r) * inp.L);
    case Method::ALoRE: return 4 * inp.d * inp.r * inp.L + inp.n * inp.n * inp.n;
  }
  throw ConfigError("accounting: unknown method");
}

long long inference_extra_params(const AccountingInputs& inp) {
  inp.validate();
  switch (inp.method) {
    case Method::AdapterLike: return 4 * inp.d * inp.r * inp.L;
    case Method::VPTShallow: return inp.m * inp.d;
    case Method::VPTDeep: return inp.m * inp.d * inp.L;
    case Method::LoRA:
    case Method::SSF:
    case Method::ARC:
    case Method::ALoRE: return 0;
  }
  throw ConfigError("accounting: unknown method");
}

std::string format_millions(long long count) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", static_cast<double>(count) / 1e6);
  return std::string(buf);
}

}  // namespace alore

#pragma once

#include <optional>
#include <string>

namespace alore {

/// PETL parameter-budget families from the appendix comparison table.
enum class Method { AdapterLike, VPTShallow, VPTDeep, LoRA, SSF, ARC, ALoRE };

const char* method_name(Method m);
std::optional<Method> method_from_name(const std::string& name);

struct AccountingInputs {
  Method method = Method::ALoRE;
  long long d = 0;  // model width
  long long r = 0;  // bottleneck rank
  long long L = 0;  // layers
  long long n = 0;  // experts (ALoRE)
  long long m = 0;  // prompt count (VPT)
  long long w = 0;  // attention projections updated (LoRA)
  long long o = 0;  // operations per layer (SSF)

  void validate() const;
};

/// Trainable parameters added during fine-tuning (no task head).
long long fine_tune_params(const AccountingInputs& inp);

/// Parameters still present at inference; 0 for re-parameterizable methods.
long long inference_extra_params(const AccountingInputs& inp);

/// Count in millions rounded to 2 decimals, as the paper tables print it.
std::string format_millions(long long count);

}  // namespace alore

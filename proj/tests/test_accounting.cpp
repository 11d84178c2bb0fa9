#include <doctest.h>

#include "alore/accounting.hpp"
#include "alore/experts.hpp"

using namespace alore;

namespace {

AccountingInputs alore_inputs(long long d, long long r, long long L, long long n) {
  AccountingInputs inp;
  inp.method = Method::ALoRE;
  inp.d = d;
  inp.r = r;
  inp.L = L;
  inp.n = n;
  return inp;
}

}  // namespace

TEST_CASE("paper budget rows reproduce exactly") {
  CHECK(fine_tune_params(alore_inputs(768, 4, 12, 4)) == 147520);
  CHECK(format_millions(147520) == "0.15");

  // attn-only variant halves the expert budget: via the alore-module count
  CHECK(count_alore_params(768, 4, 4, 1, 12) == 73792);
  CHECK(format_millions(73792) == "0.07");

  CHECK(fine_tune_params(alore_inputs(768, 4, 12, 32)) == 180224);
  CHECK(format_millions(180224) == "0.18");

  // default two-site config agrees with the generic formula
  CHECK(count_alore_params(768, 4, 4, 2, 12) == fine_tune_params(alore_inputs(768, 4, 12, 4)));

  // stacked baseline: n replicated Eq-5 adapters with biases
  CHECK(count_stacked_params(768, 4, 4, 2, 12) == 663936);
  CHECK(format_millions(663936) == "0.66");
}

TEST_CASE("baseline family formulas") {
  AccountingInputs lora;
  lora.method = Method::LoRA;
  lora.d = 768;
  lora.r = 4;
  lora.L = 12;
  lora.w = 2;
  CHECK(fine_tune_params(lora) == 147456);
  CHECK(inference_extra_params(lora) == 0);

  AccountingInputs vpt;
  vpt.method = Method::VPTShallow;
  vpt.m = 5;
  vpt.d = 768;
  CHECK(fine_tune_params(vpt) == 3840);
  CHECK(inference_extra_params(vpt) == 3840);

  AccountingInputs vptd;
  vptd.method = Method::VPTDeep;
  vptd.m = 0;
  vptd.d = 768;
  vptd.L = 12;
  CHECK(fine_tune_params(vptd) == 0);
  CHECK(inference_extra_params(vptd) == 0);

  AccountingInputs adapter;
  adapter.method = Method::AdapterLike;
  adapter.d = 768;
  adapter.r = 4;
  adapter.L = 12;
  CHECK(inference_extra_params(adapter) == fine_tune_params(adapter));

  AccountingInputs ssf;
  ssf.method = Method::SSF;
  ssf.o = 6;
  ssf.d = 768;
  ssf.L = 12;
  CHECK(fine_tune_params(ssf) == 2LL * 6 * 768 * 12);
  CHECK(inference_extra_params(ssf) == 0);

  AccountingInputs arc;
  arc.method = Method::ARC;
  arc.d = 768;
  arc.r = 50;
  arc.L = 12;
  CHECK(fine_tune_params(arc) == 2LL * (768 * 50 + (768 + 50) * 12));
  CHECK(inference_extra_params(arc) == 0);

  AccountingInputs alore = alore_inputs(768, 4, 12, 4);
  CHECK(inference_extra_params(alore) == 0);
}

TEST_CASE("ALoRE minus AdapterLike is exactly n^3") {
  Rng rng(1);
  for (int trial = 0; trial < 25; ++trial) {
    const long long d = 8 + static_cast<long long>(rng.next_below(2000));
    const long long r = 1 + static_cast<long long>(rng.next_below(64));
    const long long L = 1 + static_cast<long long>(rng.next_below(40));
    const long long n = 1 + static_cast<long long>(rng.next_below(64));
    AccountingInputs alore = alore_inputs(d, r, L, n);
    AccountingInputs adapter = alore;
    adapter.method = Method::AdapterLike;
    CHECK(fine_tune_params(alore) - fine_tune_params(adapter) == n * n * n);
  }
}

TEST_CASE("fine_tune_params is monotone nondecreasing in every input") {
  Rng rng(2);
  const Method methods[] = {Method::AdapterLike, Method::VPTShallow, Method::VPTDeep,
                            Method::LoRA,        Method::SSF,        Method::ARC,
                            Method::ALoRE};
  for (Method m : methods) {
    for (int trial = 0; trial < 10; ++trial) {
      AccountingInputs base;
      base.method = m;
      base.d = static_cast<long long>(rng.next_below(512));
      base.r = static_cast<long long>(rng.next_below(32));
      base.L = static_cast<long long>(rng.next_below(24));
      base.n = static_cast<long long>(rng.next_below(16));
      base.m = static_cast<long long>(rng.next_below(50));
      base.w = static_cast<long long>(rng.next_below(4));
      base.o = static_cast<long long>(rng.next_below(8));
      const long long before = fine_tune_params(base);
      for (int field = 0; field < 7; ++field) {
        AccountingInputs bumped = base;
        const long long inc = 1 + static_cast<long long>(rng.next_below(3));
        switch (field) {
          case 0: bumped.d += inc; break;
          case 1: bumped.r += inc; break;
          case 2: bumped.L += inc; break;
          case 3: bumped.n += inc; break;
          case 4: bumped.m += inc; break;
          case 5: bumped.w += inc; break;
          case 6: bumped.o += inc; break;
        }
        CHECK(fine_tune_params(bumped) >= before);
      }
    }
  }
}

TEST_CASE("counts agree with enumerated bank sizes on random configs") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 1 << rng.next_below(3);
    const int w = 2 + static_cast<int>(rng.next_below(5));
    const int d = n * w;
    const int r = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(w)));
    const int layers = 1 + static_cast<int>(rng.next_below(4));

    AloreConfig cfg;
    cfg.d = d;
    cfg.n = n;
    cfg.r = r;
    cfg.sites = {Site::PreMHSA, Site::PreFFN};
    cfg.layers_adapted = layers;
    cfg.dropout_p = 0.0;
    auto bank = init_alore<double>(cfg, layers, rng);

    CHECK(bank.parameter_count() == count_alore_params(d, r, n, 2, layers));
    // full-depth two-site banks also match the appendix ALoRE formula
    AccountingInputs inp = alore_inputs(d, r, layers, n);
    CHECK(bank.parameter_count() == fine_tune_params(inp));
  }
}

TEST_CASE("validation and name mapping") {
  AccountingInputs bad;
  bad.method = Method::LoRA;
  bad.d = -1;
  CHECK_THROWS_AS(fine_tune_params(bad), ConfigError);

  CHECK(method_from_name("alore") == Method::ALoRE);
  CHECK(method_from_name("vpt_deep") == Method::VPTDeep);
  CHECK(method_from_name("adapter_like") == Method::AdapterLike);
  CHECK_FALSE(method_from_name("nope").has_value());
  CHECK(std::string(method_name(Method::SSF)) == "ssf");
}

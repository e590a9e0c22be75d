// SPDX-License-Identifier: Apache-2.0
//
// Theoretical energy accounting: dense layers cost E_MAC per multiply-
// accumulate; spiking layers cost E_AC per synaptic operation, with
// SOPs = T * firing_rate * FLOPs. One MAC counts as one FLOP.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "spikebert/config.hpp"
#include "spikebert/model.hpp"

namespace spikebert {

inline constexpr double kEnergyMacPj = 4.6;
inline constexpr double kEnergyAcPj = 0.9;

enum class LayerKind { kEmbeddingMac, kSpikingFc, kSsa };

const char* to_string(LayerKind kind);

struct LayerProfile {
  std::string name;
  LayerKind kind = LayerKind::kSpikingFc;
  double flops = 0;
  double firing_rate = 0;  // gamma of the layer's input spikes
  int time_steps = 1;

  void validate() const;
};

/// T * gamma * FLOPs, rounded to the nearest integer. Spiking kinds only.
double sops(const LayerProfile& profile);

/// FLOPs * E_MAC, in millijoules.
double ann_energy_mj(double flops);

struct LayerEnergy {
  std::string name;
  LayerKind kind;
  double flops;
  double firing_rate;
  double sops;       // 0 for the embedding layer
  double energy_pj;
};

struct EnergyReport {
  std::vector<LayerEnergy> layers;
  double embedding_flops = 0;
  double total_sops = 0;
  double mac_energy_mj = 0;
  double ac_energy_mj = 0;
  double total_mj = 0;
};

/// E_MAC * embedding FLOPs + E_AC * sum of SOPs. Exactly one embedding profile is required.
EnergyReport snn_energy(std::span<const LayerProfile> profiles);

/// Fraction of nonzero entries. Equals the mean for binary tensors; for the
/// integer-valued inputs of the attention output projection and the first
/// feed-forward layer it counts positions that trigger any accumulate.
template <typename Derived>
double firing_rate(const Eigen::MatrixBase<Derived>& x) {
  if (x.size() == 0) return 0.0;
  return double((x.derived().array() != typename Derived::Scalar(0)).count()) / double(x.size());
}

/// Per-sample layer profiles for a model, using measured firing rates keyed by probe name
/// ("block0.input", "block0.q", ..., "final"). Missing rates default to 0.
std::vector<LayerProfile> model_profiles(const ModelConfig& config, const std::map<std::string, double>& rates);

/// Runs one inference pass and returns the firing rate of each probe tensor.
template <typename S>
std::map<std::string, double> measure_firing_rates(const Parameters<S>& params, const ModelConfig& config,
                                                   const TokenBatch& tokens) {
  ad::Tape<S> tape;
  BoundParameters<S> bound(tape, params, false);
  const ForwardResult<S> result = forward(tokens, bound, config);
  std::map<std::string, double> rates;
  rates["embedding"] = firing_rate(result.embedding_spikes.value());
  for (const auto& [name, var] : result.probes) rates[name] = firing_rate(var.value());
  return rates;
}

/// Aligned human-readable table.
std::string format_report(const EnergyReport& report);

/// "key value" lines: totals plus layer.<name>.{flops,firing_rate,sops,energy_pj}.
void write_report_kv(const EnergyReport& report, const std::filesystem::path& path);

}  // namespace spikebert

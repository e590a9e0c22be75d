// SPDX-License-Identifier: Apache-2.0
#include "spikebert/energy.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "spikebert/error.hpp"

namespace spikebert {

const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kEmbeddingMac:
      return "embedding_mac";
    case LayerKind::kSpikingFc:
      return "spiking_fc";
    case LayerKind::kSsa:
      return "ssa";
  }
  return "?";
}

void LayerProfile::validate() const {
  SPIKEBERT_REQUIRE(flops >= 0, "LayerProfile " + name + ": flops must be >= 0");
  SPIKEBERT_REQUIRE(firing_rate >= 0 && firing_rate <= 1, "LayerProfile " + name + ": firing rate outside [0, 1]");
  SPIKEBERT_REQUIRE(time_steps >= 1, "LayerProfile " + name + ": time_steps must be >= 1");
}

double sops(const LayerProfile& profile) {
  profile.validate();
  SPIKEBERT_REQUIRE(profile.kind != LayerKind::kEmbeddingMac, "sops: embedding layers are MAC, not spiking");
  return std::round(double(profile.time_steps) * profile.firing_rate * profile.flops);
}

double ann_energy_mj(double flops) {
  SPIKEBERT_REQUIRE(flops >= 0, "ann_energy_mj: flops must be >= 0");
  return flops * kEnergyMacPj * 1e-9;
}

EnergyReport snn_energy(std::span<const LayerProfile> profiles) {
  EnergyReport report;
  int embeddings = 0;
  double ac_pj = 0, mac_pj = 0;
  for (const auto& p : profiles) {
    p.validate();
    LayerEnergy e{p.name, p.kind, p.flops, p.firing_rate, 0.0, 0.0};
    if (p.kind == LayerKind::kEmbeddingMac) {
      ++embeddings;
      e.energy_pj = p.flops * kEnergyMacPj;
      mac_pj += e.energy_pj;
      report.embedding_flops += p.flops;
    } else {
      e.sops = sops(p);
      e.energy_pj = e.sops * kEnergyAcPj;
      ac_pj += e.energy_pj;
      report.total_sops += e.sops;
    }
    report.layers.push_back(std::move(e));
  }
  SPIKEBERT_REQUIRE(embeddings == 1, "snn_energy: exactly one embedding_mac profile required, got " +
                                         std::to_string(embeddings));
  report.mac_energy_mj = mac_pj * 1e-9;
  report.ac_energy_mj = ac_pj * 1e-9;
  report.total_mj = report.mac_energy_mj + report.ac_energy_mj;
  return report;
}

std::vector<LayerProfile> model_profiles(const ModelConfig& config, const std::map<std::string, double>& rates) {
  config.validate();
  const double n = config.max_len, d = config.hidden_dim, f = double(config.hidden_dim) * config.ffn_mult;
  const int t = config.time_steps;
  auto rate = [&rates](const std::string& key) {
    const auto it = rates.find(key);
    return it == rates.end() ? 0.0 : it->second;
  };
  std::vector<LayerProfile> out;
  out.push_back({"embedding", LayerKind::kEmbeddingMac, n * d, 0.0, t});
  for (int i = 0; i < config.depth; ++i) {
    const std::string b = "block" + std::to_string(i) + ".";
    for (const char* proj : {"q", "k", "v"}) {
      out.push_back({b + proj, LayerKind::kSpikingFc, n * d * d, rate(b + "input"), t});
    }
    out.push_back({b + "attn_scores", LayerKind::kSsa, n * n * d, rate(b + "q"), t});
    out.push_back({b + "attn_values", LayerKind::kSsa, n * n * d, rate(b + "v"), t});
    out.push_back({b + "attn_out", LayerKind::kSpikingFc, n * d * d, rate(b + "attn_product"), t});
    out.push_back({b + "ffn1", LayerKind::kSpikingFc, n * d * f, rate(b + "residual"), t});
    out.push_back({b + "ffn2", LayerKind::kSpikingFc, n * f * d, rate(b + "ffn_hidden"), t});
  }
  out.push_back({"head", LayerKind::kSpikingFc, n * d * config.num_classes, rate("final"), t});
  return out;
}

std::string format_report(const EnergyReport& report) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-22s %-14s %14s %8s %14s %14s\n", "layer", "kind", "FLOPs", "gamma", "SOPs",
                "energy(pJ)");
  out << line;
  for (const auto& l : report.layers) {
    std::snprintf(line, sizeof(line), "%-22s %-14s %14.0f %8.4f %14.0f %14.2f\n", l.name.c_str(), to_string(l.kind),
                  l.flops, l.firing_rate, l.sops, l.energy_pj);
    out << line;
  }
  std::snprintf(line, sizeof(line), "MAC energy (mJ): %.6f\nAC energy (mJ):  %.6f\nTotal (mJ):      %.6f\n",
                report.mac_energy_mj, report.ac_energy_mj, report.total_mj);
  out << line;
  return out.str();
}

void write_report_kv(const EnergyReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write energy report " + path.string());
  char buf[256];
  auto put = [&](const std::string& key, double v) {
    std::snprintf(buf, sizeof(buf), "%s %.17g\n", key.c_str(), v);
    out << buf;
  };
  put("embedding_flops", report.embedding_flops);
  put("total_sops", report.total_sops);
  put("mac_energy_mj", report.mac_energy_mj);
  put("ac_energy_mj", report.ac_energy_mj);
  put("total_mj", report.total_mj);
  for (const auto& l : report.layers) {
    put("layer." + l.name + ".flops", l.flops);
    put("layer." + l.name + ".firing_rate", l.firing_rate);
    put("layer." + l.name + ".sops", l.sops);
    put("layer." + l.name + ".energy_pj", l.energy_pj);
  }
}

}  // namespace spikebert

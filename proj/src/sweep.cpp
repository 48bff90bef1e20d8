#include "coarseseg/sweep.hpp"

#include <algorithm>

#include "coarseseg/io.hpp"
#include "coarseseg/noise_synth.hpp"

namespace coarseseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<int> normalized(std::span<const int> levels) {
  std::vector<int> out(levels.begin(), levels.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw ValidationError("sweep: no levels given");
  for (int l : out) {
    if (l < 1 || l > 5) throw ValidationError("sweep: level " + std::to_string(l) + " not in 1..5");
  }
  return out;
}

SegDataset noisy_copy(const SegDataset& clean, int level, std::uint64_t seed) {
  SegDataset ds = clean;
  for (auto& s : ds.samples) {
    s.pos_coarse.clear();
    s.neg_coarse.clear();
  }
  noise::synthesize_dataset(ds, level, seed);
  return ds;
}

TrainConfig level_config(const TrainConfig& base) {
  TrainConfig c = base;
  c.pos_sources.clear();
  c.neg_sources.clear();
  if (c.mode == TrainMode::strong) c.mode = TrainMode::weak;
  return c;
}

}  // namespace

std::vector<SweepRow> sensitivity_sweep(const TrainConfig& base, const SegDataset& clean_train,
                                        const SegDataset& test, std::span<const int> levels) {
  base.validate();
  std::vector<SweepRow> rows;
  for (int level : normalized(levels)) {
    const SegDataset train = noisy_copy(clean_train, level, static_cast<std::uint64_t>(base.noise_seed));
    std::vector<double> mious;
    for (std::uint64_t seed : base.seeds) {
      TrainConfig c = level_config(base);
      c.seed = seed;
      mious.push_back(run_in_memory(c, train, nullptr, &test).test->miou);
    }
    rows.push_back({level, seed_stats(std::move(mious))});
  }
  return rows;
}

json to_json(const std::vector<SweepRow>& table) {
  json rows = json::array();
  for (const auto& r : table) {
    rows.push_back({{"level", r.level},
                    {"miou_mean", r.miou.mean},
                    {"miou_std", r.miou.std},
                    {"miou_per_seed", r.miou.values}});
  }
  return {{"rows", rows}};
}

json sensitivity_sweep(const TrainConfig& base, std::span<const int> levels, bool force) {
  base.validate();
  if (base.dataset.empty() || base.test_dataset.empty()) {
    throw ValidationError("sweep: config needs dataset and test_dataset");
  }
  if (fs::exists(base.output / "sweep.json") && !force) {
    throw ValidationError(base.output.string() + "/sweep.json exists (use --force)", "E_EXISTS");
  }
  const SegDataset clean = load_dataset(base.dataset);
  std::vector<SweepRow> rows;
  for (int level : normalized(levels)) {
    const fs::path dir = base.output / ("level_" + std::to_string(level));
    const fs::path data = dir / "data";
    if (fs::exists(data)) fs::remove_all(data);
    save_dataset(noisy_copy(clean, level, static_cast<std::uint64_t>(base.noise_seed)), data);
    std::vector<double> mious;
    for (std::uint64_t seed : base.seeds) {
      TrainConfig c = level_config(base);
      c.seed = seed;
      c.dataset = data;
      c.output = dir / ("seed_" + std::to_string(seed));
      const RunArtifacts a = train(c, force);
      mious.push_back(a.report_json.at("test").at("miou").get<double>());
    }
    rows.push_back({level, seed_stats(std::move(mious))});
  }
  json out = to_json(rows);
  out["seeds"] = base.seeds;
  out["noise_seed"] = base.noise_seed;
  io::write_text_atomic(base.output / "sweep.json", out.dump(2) + "\n");
  return out;
}

}  // namespace coarseseg

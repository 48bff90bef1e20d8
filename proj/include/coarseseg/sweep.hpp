#pragma once

#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "coarseseg/datasets.hpp"
#include "coarseseg/train.hpp"

namespace coarseseg {

struct SweepRow {
  int level = 0;
  SeedStats miou;
};

/// For every level (sorted, duplicates dropped): replaces the coarse maps
/// of `clean_train` with synthesized ones at that level (noise seed
/// base.noise_seed), trains one run per seed in base.seeds and records the
/// final model's mIoU on `test`.
std::vector<SweepRow> sensitivity_sweep(const TrainConfig& base, const SegDataset& clean_train,
                                        const SegDataset& test, std::span<const int> levels);

nlohmann::json to_json(const std::vector<SweepRow>& table);

/// File-based variant: writes level_<k>/data (synthesized training set),
/// level_<k>/seed_<s> runs and sweep.json under base.output.
nlohmann::json sensitivity_sweep(const TrainConfig& base, std::span<const int> levels,
                                 bool force = false);

}  // namespace coarseseg

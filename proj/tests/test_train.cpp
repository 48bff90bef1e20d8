#include <doctest.h>

#include <fstream>
#include <sstream>

#include "coarseseg/io.hpp"
#include "coarseseg/train.hpp"
#include "support.hpp"

using namespace coarseseg;
using json = nlohmann::json;

namespace {

std::vector<json> read_rows(const std::filesystem::path& p) {
  std::vector<json> rows;
  std::istringstream in(io::read_text(p));
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(json::parse(line));
  return rows;
}

bool same_params(Model<float>& a, Model<float>& b) {
  const auto pa = a.params(), pb = b.params();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(pa[i]->value == pb[i]->value)) return false;
  return true;
}

// Training files for the run-level tests.
struct RunFiles {
  testing::TempDir dir{"run"};
  TrainConfig cfg = testing::small_config();
  RunFiles(int n = 16, std::uint64_t seed = 1) {
    save_dataset(testing::noisy_blobs(n, seed), dir / "train");
    save_dataset(testing::blob_dataset(6, seed + 100, 16, 16, "val"), dir / "val");
    cfg.dataset = dir / "train";
    cfg.val_dataset = dir / "val";
    cfg.output = dir / "out";
  }
};

}  // namespace

TEST_CASE("one epoch on a 16-sample toy set") {
  RunFiles f;
  f.cfg.epochs = 1;
  const RunArtifacts a = train(f.cfg);
  const auto rows = read_rows(a.metrics);
  int train_rows = 0, val_rows = 0;
  for (const auto& r : rows) {
    train_rows += r.at("split") == "train";
    val_rows += r.at("split") == "val";
  }
  CHECK(train_rows == 1);
  CHECK(val_rows == 1);
  REQUIRE(a.checkpoints.size() == 1);
  const Checkpoint ck = load_checkpoint(a.checkpoints[0]);
  CHECK(ck.epoch == 1);
  CHECK(std::filesystem::exists(a.resolved_config));
  CHECK(a.report_json.at("best_checkpoint") == "checkpoints/epoch_0001.ckpt");
  CHECK_THROWS_AS(train(f.cfg), ValidationError);
  CHECK_NOTHROW(train(f.cfg, true));
}

TEST_CASE("identical seeded runs write identical metrics") {
  RunFiles f;
  f.cfg.epochs = 2;
  const auto a = train(f.cfg);
  TrainConfig again = f.cfg;
  again.output = f.dir / "out2";
  const auto b = train(again);
  CHECK(io::read_text(a.metrics) == io::read_text(b.metrics));
  again.seed = 9;
  again.output = f.dir / "out3";
  CHECK(io::read_text(train(again).metrics) != io::read_text(a.metrics));
}

TEST_CASE("metrics rows increase in epoch and the best checkpoint has the best val mIoU") {
  RunFiles f;
  f.cfg.epochs = 3;
  const auto a = train(f.cfg);
  int last = 0;
  double best = -1.0;
  for (const auto& r : read_rows(a.metrics)) {
    if (r.at("split") != "train") continue;
    CHECK(r.at("epoch").get<int>() > last);
    last = r.at("epoch");
  }
  for (const auto& r : read_rows(a.metrics))
    if (r.at("split") == "val") best = std::max(best, r.at("miou").get<double>());
  CHECK(a.report_json.at("best_val_miou").get<double>() == best);
}

TEST_CASE("resume continues exactly") {
  RunFiles f;
  f.cfg.epochs = 4;
  f.cfg.loss.warmup_epochs = 1;
  const auto straight = train(f.cfg);

  TrainConfig half = f.cfg;
  half.epochs = 2;
  half.output = f.dir / "halves";
  const auto first = train(half);
  const auto resumed = resume(first.dir / "checkpoints" / "epoch_0002.ckpt", f.cfg);

  Checkpoint a = load_checkpoint(straight.final_checkpoint);
  Checkpoint b = load_checkpoint(resumed.final_checkpoint);
  CHECK(a.epoch == 4);
  CHECK(b.epoch == 4);
  CHECK(same_params(a.model, b.model));
  CHECK(a.optimizer.steps() == b.optimizer.steps());
  CHECK(io::read_text(straight.metrics) == io::read_text(resumed.metrics));
}

TEST_CASE("resume from the last epoch appends a warning row") {
  RunFiles f;
  f.cfg.epochs = 1;
  const auto a = train(f.cfg);
  resume(a.final_checkpoint, f.cfg);
  const auto rows = read_rows(a.metrics);
  REQUIRE(!rows.empty());
  CHECK(rows.back().at("split") == "warning");
  CHECK(rows.back().at("epoch") == 1);
}

TEST_CASE("resume with a different class count is refused") {
  RunFiles f;
  f.cfg.epochs = 1;
  const auto a = train(f.cfg);
  SegDataset three = testing::noisy_blobs(8, 4);
  three.space = LabelSpace{3, {"bg", "a", "b"}};
  save_dataset(three, f.dir / "three");
  TrainConfig other = f.cfg;
  other.dataset = f.dir / "three";
  other.val_dataset.clear();
  other.epochs = 2;
  try {
    resume(a.final_checkpoint, other);
    FAIL("expected a mismatch");
  } catch (const ValidationError& e) {
    CHECK(e.code() == "E_ARCH_MISMATCH");
    CHECK(std::string(e.what()).find("num_classes") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip") {
  const SegDataset ds = testing::noisy_blobs(8, 2);
  TrainConfig cfg = testing::small_config();
  Trainer tr(cfg, ds);
  tr.run_epoch();
  testing::TempDir dir("ckpt");
  save_checkpoint(dir / "m.ckpt", tr.model(), tr.optimizer(), 1);
  Checkpoint ck = load_checkpoint(dir / "m.ckpt");
  CHECK(ck.model.arch == tr.model().arch);
  CHECK(same_params(ck.model, tr.model()));
  CHECK(ck.optimizer.steps() == tr.optimizer().steps());
  REQUIRE(ck.optimizer.first().size() == tr.optimizer().first().size());
  for (std::size_t i = 0; i < ck.optimizer.first().size(); ++i) {
    CHECK(ck.optimizer.first()[i] == tr.optimizer().first()[i]);
    CHECK(ck.optimizer.second()[i] == tr.optimizer().second()[i]);
  }
  const auto side = json::parse(io::read_text(dir / "m.ckpt.json"));
  CHECK(side.at("L") == 2);
  CHECK(side.at("format") == kCheckpointFormat);

  io::write_text_atomic(dir / "junk.ckpt", "not a checkpoint");
  CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), IoError);
}

// Weak training with identity CMs and only the objective branch is plain CE
// on the positive coarse labels.
TEST_CASE("reduction to plain cross-entropy over 100 steps") {
  const SegDataset weak_ds = testing::noisy_blobs(16, 3);
  SegDataset plain = weak_ds;
  for (auto& s : plain.samples) {
    s.gt_label = s.pos_coarse.at(0).labels;
    s.pos_coarse.clear();
    s.neg_coarse.clear();
  }
  TrainConfig weak = testing::small_config();
  weak.freeze_identity_cm = true;
  weak.loss.lambda = 0.0;
  weak.loss.w_comp = 0.0;
  TrainConfig strong = weak;
  strong.mode = TrainMode::strong;

  Trainer a(weak, weak_ds), b(strong, plain);
  std::vector<double> la, lb;
  while (la.size() < 100) {
    a.run_epoch([&](const BatchLoss& s) { la.push_back(s.breakdown.total); });
    b.run_epoch([&](const BatchLoss& s) { lb.push_back(s.breakdown.total); });
  }
  REQUIRE(la.size() == lb.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < la.size(); ++i) worst = std::max(worst, std::abs(la[i] - lb[i]));
  CHECK(worst < 1e-5);
  CHECK(la.back() < la.front());
}

TEST_CASE("the naive arm is the reduction configuration") {
  TrainConfig base = testing::small_config();
  const TrainConfig naive = arm_config(base, AblationArm::naive);
  CHECK(naive.freeze_identity_cm);
  CHECK(naive.loss.lambda == 0.0);
  CHECK(naive.loss.w_comp == 0.0);
  CHECK(naive.mode == TrainMode::weak);
  const TrainConfig wo = arm_config(base, AblationArm::without_negative);
  CHECK(wo.loss.w_comp == 0.0);
  CHECK(wo.loss.lambda == base.loss.lambda);
  CHECK_FALSE(wo.freeze_identity_cm);
}

TEST_CASE("strong mode never evaluates confusion or transition matrices") {
  const SegDataset ds = testing::blob_dataset(8, 4);
  TrainConfig cfg = testing::small_config();
  cfg.mode = TrainMode::strong;
  instrumentation::reset();
  Trainer tr(cfg, ds);
  tr.run_epoch();
  CHECK(instrumentation::cm_tm_calls() == 0);

  TrainConfig weak = testing::small_config();
  const SegDataset noisy = testing::noisy_blobs(8, 4);
  Trainer tw(weak, noisy);
  tw.run_epoch();
  CHECK(instrumentation::cm_tm_calls() > 0);
}

TEST_CASE("semi batch loss is the sum of its strong and weak parts") {
  SegDataset ds = testing::noisy_blobs(8, 6);
  for (int i = 0; i < 4; ++i) {
    ds.samples[i].pos_coarse.clear();
    ds.samples[i].neg_coarse.clear();
  }
  TrainConfig cfg = testing::small_config();
  cfg.mode = TrainMode::semi;
  Trainer tr(cfg, ds);
  tr.run_epoch();
  const std::size_t all[] = {0, 5, 1, 6, 2, 7};
  const std::size_t dense[] = {0, 1, 2};
  const std::size_t coarse[] = {5, 6, 7};
  const BatchLoss b = tr.batch_loss(all, 0.01, false);
  const BatchLoss s = tr.batch_loss(dense, 0.01, false);
  const BatchLoss w = tr.batch_loss(coarse, 0.01, false);
  CHECK(std::abs(b.breakdown.total - (b.strong_part + b.weak_part)) < 1e-6);
  CHECK(std::abs(b.strong_part - 0.5 * s.breakdown.total) < 1e-6);
  CHECK(std::abs(b.weak_part - 0.5 * w.breakdown.total) < 1e-6);
  CHECK(s.weak_part == 0.0);
  CHECK(w.strong_part == 0.0);
}

TEST_CASE("datasets that cannot drive a mode are rejected") {
  TrainConfig cfg = testing::small_config();
  const SegDataset clean = testing::blob_dataset(4, 1);
  try {
    Trainer tr(cfg, clean);
    FAIL("weak mode without coarse labels");
  } catch (const ValidationError& e) {
    CHECK(e.code() == "E_MODE_DATA");
  }
  cfg.mode = TrainMode::semi;
  CHECK_THROWS_AS(Trainer(cfg, testing::noisy_blobs(4, 1)), ValidationError);
  cfg.mode = TrainMode::weak;
  cfg.pos_sources = {"nobody"};
  CHECK_THROWS_AS(Trainer(cfg, testing::noisy_blobs(4, 1)), ValidationError);
}

TEST_CASE("config parsing and overrides") {
  json j = {{"dataset", "data/train"}, {"output", "runs/a"}, {"loss", {{"lambda", 0.02}}}};
  apply_override(j, "loss.lambda=0.05");
  apply_override(j, "optimizer.type=sgd");
  apply_override(j, "epochs=3");
  const TrainConfig c = TrainConfig::from_json(j, "/base");
  CHECK(c.loss.lambda == 0.05);
  CHECK(c.optimizer.kind == OptimizerConfig::Kind::sgd);
  CHECK(c.epochs == 3);
  CHECK(c.dataset == std::filesystem::path("/base/data/train"));
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());

  json bad = j;
  bad["lamda"] = 1;
  CHECK_THROWS_AS(TrainConfig::from_json(bad), ValidationError);
  json neg = j;
  neg["epochs"] = 0;
  CHECK_THROWS_AS(TrainConfig::from_json(neg), ValidationError);
  CHECK_THROWS_AS(apply_override(j, "no-equals-sign"), ValidationError);
}

TEST_CASE("optimizers move against the gradient") {
  for (const auto kind : {OptimizerConfig::Kind::adam, OptimizerConfig::Kind::sgd}) {
    nn::Param<float> w{"w", Mat<float>::Constant(1, 1, 1.0f), Mat<float>::Constant(1, 1, 2.0f)};
    OptimizerConfig oc;
    oc.kind = kind;
    oc.lr = 0.1;
    Optimizer<float> opt(oc, {&w});
    opt.step({&w});
    CHECK(w.value(0, 0) < 1.0f);
    if (kind == OptimizerConfig::Kind::adam) CHECK(std::abs(w.value(0, 0) - 0.9f) < 1e-5f);
    if (kind == OptimizerConfig::Kind::sgd) CHECK(std::abs(w.value(0, 0) - 0.8f) < 1e-6f);
  }
}

TEST_CASE("seed statistics use the sample deviation") {
  const SeedStats s = seed_stats({1.0, 2.0, 3.0});
  CHECK(s.mean == doctest::Approx(2.0));
  CHECK(s.std == doctest::Approx(1.0));
  CHECK(seed_stats({0.5}).std == 0.0);
}

TEST_CASE("ablation table has one row per arm") {
  TrainConfig base = testing::small_config();
  base.epochs = 1;
  base.seeds = {0, 1};
  const SegDataset train = testing::noisy_blobs(8, 1);
  const SegDataset test = testing::blob_dataset(4, 50);
  const auto rows = ablation_suite(base, train, test);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].arm == AblationArm::full);
  CHECK(rows[1].arm == AblationArm::without_negative);
  CHECK(rows[2].arm == AblationArm::naive);
  for (const auto& r : rows) CHECK(r.miou.values.size() == 2);
  const json j = to_json(rows);
  CHECK(j.at("rows").size() == 3);
  CHECK(j.at("rows")[1].at("arm") == "without_negative");
}

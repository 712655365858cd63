#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>
#include <sstream>

#include "dsa_ltd/image_io.hpp"
#include "dsa_ltd/train.hpp"
#include "test_support.hpp"

using namespace dsa_ltd;
namespace fs = std::filesystem;

namespace {

// Ten 32x32 samples split 8/2, generated once for the whole binary.
const DatasetManifest& shared_dataset() {
    static fixtures::TempDir dir("train_data");
    static const DatasetManifest m = [] {
        auto cfg = fixtures::tiny_phantom(10, 21);
        cfg.test_fraction = 0.2;
        return generate_dataset(cfg, dir.path());
    }();
    return m;
}

BundleConfig small_model(FusionLayout layout = {}) { return BundleConfig::uniform(layout, 4, 2); }

TrainConfig quick_config(int epochs, int warmup = 0) {
    TrainConfig c;
    c.epochs = epochs;
    c.tdl_warmup_epochs = warmup;
    c.val_fraction = 0.0;
    c.seed = 5;
    return c;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(fixtures::slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        rows.push_back(cells);
    }
    return rows;
}

std::vector<std::vector<float>> parameter_values(nn::UNet<float>& net) {
    std::vector<std::vector<float>> out;
    for (auto* p : net.parameters()) out.push_back(p->value);
    return out;
}

}  // namespace

TEST(CosineLr, EndpointsAndMidpoint) {
    TrainConfig c;
    c.initial_lr = 1e-3;
    c.lr_min = 0.0;
    EXPECT_DOUBLE_EQ(cosine_lr(0, 150, c), 1e-3);
    EXPECT_NEAR(cosine_lr(150, 150, c), 0.0, 1e-18);
    EXPECT_NEAR(cosine_lr(75, 150, c), 5e-4, 1e-15);
    c.lr_min = 1e-4;
    EXPECT_NEAR(cosine_lr(150, 150, c), 1e-4, 1e-15);
    EXPECT_NEAR(cosine_lr(75, 150, c), 5.5e-4, 1e-15);
}

TEST(CosineLr, MonotoneAndMatchesClosedForm) {
    TrainConfig c;
    c.initial_lr = 2e-3;
    c.lr_min = 1e-5;
    for (int t = 1; t <= 40; ++t) {
        EXPECT_LE(cosine_lr(t, 40, c), cosine_lr(t - 1, 40, c));
        const double expect = 1e-5 + (2e-3 - 1e-5) * 0.5 * (1 + std::cos(std::numbers::pi * t / 40.0));
        EXPECT_NEAR(cosine_lr(t, 40, c), expect, 1e-15);
    }
}

TEST(CosineLr, RejectsOutOfRangeSteps) {
    TrainConfig c;
    EXPECT_THROW(cosine_lr(-1, 10, c), std::invalid_argument);
    EXPECT_THROW(cosine_lr(11, 10, c), std::invalid_argument);
    EXPECT_THROW(cosine_lr(0, 0, c), std::invalid_argument);
}

TEST(TrainConfigJson, RoundTripAndStrictness) {
    TrainConfig c;
    c.batch_size = 3;
    c.weights.lambda0 = 0.25;
    c.detach_aux = true;
    c.device = Device::Accelerator;
    EXPECT_EQ(train_config_from_json(to_json(c)), c);
    auto j = to_json(c);
    j["weights"]["gamma"] = 1;
    EXPECT_THROW(train_config_from_json(j), ConfigError);
    EXPECT_THROW(train_config_from_json(json{{"device", "gpu"}}), ConfigError);
    EXPECT_THROW(train_config_from_json(json{{"epochs", 5}, {"tdl_warmup_epochs", 5}}), ConfigError);
    EXPECT_THROW(train_config_from_json(json{{"lr_min", 1.0}}), ConfigError);
    EXPECT_THROW(train_config_from_json(json{{"weights", {{"a", 2.0}}}}), ConfigError);
    EXPECT_EQ(train_config_from_json(json::object()), TrainConfig{});
}

TEST(ValidationSplit, DisjointCoveringAndOrderIndependent) {
    std::vector<ManifestEntry> entries(10);
    for (int i = 0; i < 10; ++i) entries[static_cast<std::size_t>(i)].id = sample_id_for(i);
    std::vector<const ManifestEntry*> ptrs;
    for (const auto& e : entries) ptrs.push_back(&e);
    const auto [fit, val] = split_validation(ptrs, 0.2);
    EXPECT_EQ(val.size(), 2u);
    EXPECT_EQ(fit.size(), 8u);
    std::set<std::string> all;
    for (const auto* e : fit) all.insert(e->id);
    for (const auto* e : val) all.insert(e->id);
    EXPECT_EQ(all.size(), 10u);
    std::reverse(ptrs.begin(), ptrs.end());
    const auto [fit2, val2] = split_validation(ptrs, 0.2);
    EXPECT_EQ(val, val2);
    EXPECT_EQ(fit, fit2);
    EXPECT_TRUE(split_validation(ptrs, 0.0).second.empty());
    EXPECT_EQ(split_validation(ptrs, 0.99).first.size(), 1u);
}

TEST(Train, StepCountFollowsDrawsAndBatchSize) {
    fixtures::TempDir out("train");
    auto cfg = quick_config(1);
    const auto r = train(shared_dataset(), small_model(), cfg, out.path());
    // 8 training samples, each drawn at k, k+1 and k+2, batches of 8.
    EXPECT_EQ(r.joint_steps_per_epoch, 3);
    EXPECT_EQ(r.optimizer_steps, 3);
    EXPECT_EQ(r.log.size(), 1u);
    cfg.augment = false;
    const auto r2 = train(shared_dataset(), small_model(), cfg, out / "b");
    EXPECT_EQ(r2.optimizer_steps, 1);
}

TEST(Train, WarmupAddsEpochsAndLogsScheduledRates) {
    fixtures::TempDir out("train");
    auto cfg = quick_config(4, 2);
    cfg.initial_lr = 2e-3;
    const auto r = train(shared_dataset(), small_model(), cfg, out.path());
    ASSERT_EQ(r.log.size(), 6u);
    EXPECT_EQ(r.optimizer_steps, 18);
    for (int e = 0; e < 6; ++e) {
        const double expect = e < 2 ? cfg.initial_lr : cosine_lr(e - 2, 4, cfg);
        EXPECT_EQ(r.log[static_cast<std::size_t>(e)].lr, expect);
        EXPECT_EQ(r.log[static_cast<std::size_t>(e)].epoch, e);
    }
    EXPECT_GE(r.best_epoch, 2);

    const auto rows = read_csv(r.log_path);
    ASSERT_EQ(rows.size(), 7u);
    EXPECT_EQ(fixtures::slurp(r.log_path).substr(0, kTrainLogHeader.size()), kTrainLogHeader);
    for (std::size_t e = 0; e < 6; ++e) {
        ASSERT_EQ(rows[e + 1].size(), 8u);
        EXPECT_EQ(std::stod(rows[e + 1][1]), r.log[e].lr);
        EXPECT_EQ(std::stod(rows[e + 1][5]), r.log[e].loss.total);
        EXPECT_EQ(rows[e + 1][7], "nan");
    }
}

TEST(Train, WarmupIsSkippedWithoutTdl) {
    fixtures::TempDir out("train");
    const auto r = train(shared_dataset(), small_model({MotionInput::FrameDifference, true}), quick_config(2, 1),
                         out.path());
    EXPECT_EQ(r.log.size(), 2u);
    EXPECT_EQ(r.log[0].loss.l_ltd, 0.0);
}

TEST(Train, WarmupReducesTemporalDifferenceLoss) {
    fixtures::TempDir out("train");
    auto cfg = quick_config(9, 8);
    cfg.initial_lr = 3e-3;
    const auto r = train(shared_dataset(), small_model(), cfg, out.path());
    EXPECT_LT(r.log[7].loss.l_ltd, 0.8 * r.log[0].loss.l_ltd);
}

TEST(Train, SameSeedGivesByteIdenticalOutputs) {
    fixtures::TempDir a("train"), b("train"), c("train");
    auto cfg = quick_config(3, 1);
    cfg.val_fraction = 0.25;
    train(shared_dataset(), small_model(), cfg, a.path());
    train(shared_dataset(), small_model(), cfg, b.path());
    EXPECT_EQ(fixtures::slurp(a / "train_log.csv"), fixtures::slurp(b / "train_log.csv"));
    EXPECT_EQ(fixtures::slurp(a / "best.ckpt"), fixtures::slurp(b / "best.ckpt"));
    EXPECT_EQ(fixtures::slurp(a / "final.ckpt"), fixtures::slurp(b / "final.ckpt"));
    cfg.seed = 6;
    train(shared_dataset(), small_model(), cfg, c.path());
    EXPECT_NE(fixtures::slurp(a / "train_log.csv"), fixtures::slurp(c / "train_log.csv"));
}

TEST(Train, LossFallsWhenOverfittingFourSamples) {
    fixtures::TempDir data("train_data4"), out("train");
    auto pc = fixtures::tiny_phantom(4, 3);
    pc.test_fraction = 0.0;
    const auto m = generate_dataset(pc, data.path());
    auto cfg = quick_config(50);
    cfg.batch_size = 4;
    cfg.initial_lr = 3e-3;
    const auto r = train(m, small_model(), cfg, out.path());
    EXPECT_LT(r.log.back().loss.total, 0.6 * r.log.front().loss.total);
    EXPECT_GT(r.log.back().train_dice, 0.8);
}

TEST(Train, ZeroAuxWeightsWithDetachFreezeTdlAndLrs) {
    fixtures::TempDir a("train"), b("train");
    auto cfg = quick_config(2);
    cfg.weights.lambda0 = 0.0;
    cfg.weights.lambda1 = 0.0;
    cfg.detach_aux = true;
    const auto model = small_model();
    auto initial = build_bundle<float>(model, cfg.seed);
    auto frozen = train(shared_dataset(), model, cfg, a.path());
    EXPECT_EQ(parameter_values(*frozen.final_bundle.tdl), parameter_values(*initial.tdl));
    EXPECT_EQ(parameter_values(*frozen.final_bundle.lrs), parameter_values(*initial.lrs));
    EXPECT_NE(parameter_values(frozen.final_bundle.ffs), parameter_values(initial.ffs));

    cfg.detach_aux = false;
    auto live = train(shared_dataset(), model, cfg, b.path());
    EXPECT_NE(parameter_values(*live.final_bundle.tdl), parameter_values(*initial.tdl));
    EXPECT_NE(parameter_values(*live.final_bundle.lrs), parameter_values(*initial.lrs));
}

TEST(Train, BestCheckpointReproducesLoggedValidationDice) {
    fixtures::TempDir out("train");
    auto cfg = quick_config(4);
    cfg.val_fraction = 0.25;
    const auto r = train(shared_dataset(), small_model(), cfg, out.path());
    const auto echo = json::parse(fixtures::slurp(out / "train_config.json"));
    EXPECT_EQ(echo.at("dataset_hash"), shared_dataset().hash);
    EXPECT_EQ(echo.at("val_ids").size(), 2u);
    EXPECT_EQ(echo.at("fit_ids").size(), 6u);

    auto ck = load_checkpoint(r.best_checkpoint);
    EXPECT_EQ(ck.meta.epoch, r.best_epoch);
    std::vector<PreparedSample> val;
    for (const auto& id : echo.at("val_ids"))
        for (const auto& e : shared_dataset().samples)
            if (e.id == id) val.push_back(prepare_sample(shared_dataset(), e, false));
    const double logged = r.log[static_cast<std::size_t>(r.best_epoch)].val_dice;
    EXPECT_EQ(evaluate(ck.bundle, val).mean, logged);
    for (const auto& row : r.log) EXPECT_LE(row.val_dice, logged);
}

TEST(Evaluate, ZeroHeadPredictsEverywhere) {
    // A 0.5 output binarizes to all ones, so DICE is 2|T| / (|T| + HW).
    fixtures::TempDir out("eval");
    auto b = build_bundle<float>(small_model(), 0);
    for (auto* n : b.networks()) n->zero_head();
    auto data = prepare_split(shared_dataset(), Split::Test);
    const auto r = evaluate(b, data);
    double sum = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double t = static_cast<double>(count_ones(data[i].sample.tumor_mask));
        const double expect = 2 * t / (t + 32.0 * 32.0);
        EXPECT_NEAR(r.dice[i], expect, 1e-12);
        sum += expect;
    }
    EXPECT_NEAR(r.mean, sum / static_cast<double>(data.size()), 1e-12);

    save_checkpoint(out / "z.ckpt", b, {b.config, 0, 0, json::object()});
    const auto from_file = evaluate(shared_dataset(), Split::Test, out / "z.ckpt");
    EXPECT_EQ(from_file.dice, r.dice);
    const auto other = small_model({MotionInput::None, true});
    EXPECT_THROW(evaluate(shared_dataset(), Split::Test, out / "z.ckpt", &other), CheckpointError);
}

TEST(Evaluate, EmptySplitRejected) {
    fixtures::TempDir data("eval_data"), out("eval");
    auto pc = fixtures::tiny_phantom(2, 4);
    pc.test_fraction = 0.0;
    const auto m = generate_dataset(pc, data.path());
    auto b = build_bundle<float>(small_model(), 0);
    save_checkpoint(out / "z.ckpt", b, {b.config, 0, 0, json::object()});
    EXPECT_THROW(evaluate(m, Split::Test, out / "z.ckpt"), std::invalid_argument);
    std::vector<PreparedSample> none;
    EXPECT_THROW(evaluate(b, none), std::invalid_argument);
}

TEST(TrainErrors, AcceleratorRequestIsRefused) {
    fixtures::TempDir out("train");
    auto cfg = quick_config(1);
    cfg.device = Device::Accelerator;
    EXPECT_THROW(train(shared_dataset(), small_model(), cfg, out.path()), TrainError);
}

TEST(TrainErrors, DivergenceReportsTheStep) {
    fixtures::TempDir out("train");
    auto cfg = quick_config(3);
    cfg.initial_lr = 1e30;
    try {
        train(shared_dataset(), small_model(), cfg, out.path());
        FAIL() << "expected divergence";
    } catch (const TrainError& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite loss at step"), std::string::npos) << e.what();
    }
}

TEST(TrainErrors, InvalidSampleNamesTheSample) {
    fixtures::TempDir data("bad_data"), out("train");
    auto pc = fixtures::tiny_phantom(3, 8);
    pc.test_fraction = 0.0;
    const auto m = generate_dataset(pc, data.path());
    io::write_mask(data / "sample_0001" / "tumor_mask.png", BinaryMask(16, 16));
    try {
        train(m, small_model(), quick_config(1), out.path());
        FAIL() << "expected rejection";
    } catch (const TrainError& e) {
        EXPECT_NE(std::string(e.what()).find("sample_0001"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("dimension mismatch"), std::string::npos) << e.what();
    }
}

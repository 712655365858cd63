#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "dsa_ltd/ablation.hpp"
#include "test_support.hpp"

using namespace dsa_ltd;
namespace fs = std::filesystem;

namespace {

// Twelve 32x32 samples split 6/6 so each variant has four best and four
// worst test cases to draw.
const DatasetManifest& shared_dataset() {
    static fixtures::TempDir dir("ablation_data");
    static const DatasetManifest m = [] {
        auto cfg = fixtures::tiny_phantom(12, 31);
        cfg.test_fraction = 0.5;
        return generate_dataset(cfg, dir.path());
    }();
    return m;
}

TrainConfig quick_config() {
    TrainConfig c;
    c.epochs = 2;
    c.tdl_warmup_epochs = 1;
    c.val_fraction = 0.0;
    c.seed = 3;
    return c;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string l;
    while (std::getline(in, l)) out.push_back(l);
    return out;
}

}  // namespace

TEST(Variants, CanonicalSetIsComplete) {
    const auto v = canonical_variants();
    ASSERT_EQ(v.size(), 8u);
    std::set<std::string> names;
    for (const auto& x : v) names.insert(x.name);
    EXPECT_EQ(names.size(), 8u);
    EXPECT_EQ(v.front().layout.ffs_channels(), 1);
    EXPECT_EQ(v.back().layout.ffs_channels(), 3);
    EXPECT_EQ(v.back().ffs_inputs().front(), "key_frame");
    EXPECT_EQ(v.back().ffs_inputs().back(), "liver_map");
    for (const auto& x : v) {
        const int expect = 1 + (x.layout.motion != MotionInput::None) + (x.includes_lrs() ? 1 : 0);
        EXPECT_EQ(x.layout.ffs_channels(), expect) << x.name;
        EXPECT_EQ(static_cast<int>(x.ffs_inputs().size()), expect) << x.name;
    }
}

TEST(Variants, ReferenceValuesAreStoredAsGiven) {
    // Deltas are kept exactly as published, even where they disagree with
    // the difference of the stored DICE values.
    const auto v = canonical_variants();
    EXPECT_EQ(v.front().reference_dice, 70.75);
    EXPECT_EQ(v.front().reference_delta, 0.0);
    EXPECT_EQ(v.back().reference_dice, 73.68);
    EXPECT_EQ(v.back().reference_delta, 2.97);
    for (std::size_t i = 1; i + 1 < v.size(); ++i)
        EXPECT_NEAR(v[i].reference_dice - v.front().reference_dice, v[i].reference_delta, 1e-9) << v[i].name;
}

TEST(Variants, UnsupervisedTdlDropsItsLossAndWarmup) {
    const auto v = canonical_variants();
    TrainConfig base;
    for (const auto& x : v) {
        const auto c = variant_train_config(x, base);
        if (x.name == "kf_tdl_unsupervised") {
            EXPECT_EQ(c.weights.lambda0, 0.0);
            EXPECT_EQ(c.tdl_warmup_epochs, 0);
        } else {
            EXPECT_EQ(c, base) << x.name;
        }
    }
}

TEST(MeanStd, PopulationFormula) {
    const auto [m, s] = mean_std({0.2, 0.4, 0.6, 0.8});
    EXPECT_NEAR(m, 0.5, 1e-15);
    EXPECT_NEAR(s, std::sqrt(0.05), 1e-15);
    EXPECT_EQ(mean_std({}).first, 0.0);
}

TEST(Ablation, RunsAllVariantsAndWritesReports) {
    fixtures::TempDir out("ablation");
    const auto report = run_ablation(shared_dataset(), canonical_variants(), 4, 2, quick_config(), out.path());
    const auto failures = emit_report(report, shared_dataset(), out.path());
    EXPECT_TRUE(failures.empty());
    ASSERT_EQ(report.variants.size(), 8u);

    const auto j = json::parse(fixtures::slurp(out / "results.json"));
    EXPECT_EQ(j.at("dataset_hash"), shared_dataset().hash);
    ASSERT_EQ(j.at("variants").size(), 8u);
    for (const auto& v : j.at("variants")) {
        EXPECT_EQ(v.at("status"), "ok") << v.dump();
        const auto& ps = v.at("per_sample");
        ASSERT_EQ(ps.size(), 6u);
        double sum = 0.0;
        for (const auto& p : ps) sum += p.at("dice").get<double>();
        EXPECT_NEAR(v.at("mean_dice").get<double>(), sum / 6.0, 1e-12);
        EXPECT_TRUE(fs::exists(out / v.at("train_log_path").get<std::string>()));
        EXPECT_EQ(v.at("ffs_inputs").back() == "liver_map", v.at("includes_lrs").get<bool>());
    }

    const auto csv = lines(fixtures::slurp(out / "results.csv"));
    ASSERT_EQ(csv.size(), 9u);
    EXPECT_EQ(csv[0], "method,inputs,dice_pct,std_pct,delta_vs_baseline,reference_dice_pct,reference_delta");
    EXPECT_NE(csv[1].find(",0.00,70.75,0.00"), std::string::npos) << csv[1];
    EXPECT_NE(csv[8].find(",73.68,2.97"), std::string::npos) << csv[8];

    EXPECT_TRUE(fs::exists(out / "dice_bar.png"));
    for (const auto& v : canonical_variants()) {
        std::size_t best = 0, worst = 0;
        for (const auto& e : fs::directory_iterator(out / "overlays" / v.name)) {
            const auto n = e.path().filename().string();
            best += n.rfind("best_", 0) == 0;
            worst += n.rfind("worst_", 0) == 0;
        }
        EXPECT_EQ(best, 4u) << v.name;
        EXPECT_EQ(worst, 4u) << v.name;
    }
}

TEST(Ablation, RerunIsByteIdentical) {
    fixtures::TempDir a("ablation"), b("ablation");
    std::vector<AblationVariant> subset{canonical_variants()[0], canonical_variants()[7]};
    for (const auto* dir : {&a, &b}) {
        const auto r = run_ablation(shared_dataset(), subset, 4, 2, quick_config(), dir->path());
        EXPECT_TRUE(emit_report(r, shared_dataset(), dir->path()).empty());
    }
    EXPECT_EQ(fixtures::slurp(a / "results.json"), fixtures::slurp(b / "results.json"));
    EXPECT_EQ(fixtures::slurp(a / "results.csv"), fixtures::slurp(b / "results.csv"));
    EXPECT_EQ(fixtures::slurp(a / "variants/dsa_ltdnet/train_log.csv"),
              fixtures::slurp(b / "variants/dsa_ltdnet/train_log.csv"));
}

TEST(Ablation, FailedVariantIsRecordedAndOthersContinue) {
    fixtures::TempDir out("ablation");
    std::vector<AblationVariant> subset{canonical_variants()[0], canonical_variants()[2]};
    std::string current;
    AblationHooks hooks;
    hooks.on_variant_start = [&](const AblationVariant& v) { current = v.name; };
    hooks.train.on_epoch = [&](const EpochLog&) {
        if (current == "kf_fd") throw std::runtime_error("injected failure");
    };
    const auto r = run_ablation(shared_dataset(), subset, 4, 2, quick_config(), out.path(), hooks);
    ASSERT_EQ(r.variants.size(), 2u);
    EXPECT_TRUE(r.variants[0].ok);
    EXPECT_FALSE(r.variants[1].ok);
    EXPECT_EQ(r.variants[1].error, "injected failure");
    emit_report(r, shared_dataset(), out.path());
    const auto j = json::parse(fixtures::slurp(out / "results.json"));
    EXPECT_EQ(j["variants"][1]["status"], "failed");
    EXPECT_TRUE(j["variants"][1]["mean_dice"].is_null());
    EXPECT_EQ(j["variants"][1]["error"], "injected failure");
    const auto csv = lines(fixtures::slurp(out / "results.csv"));
    EXPECT_NE(csv[2].find("failed"), std::string::npos);
    EXPECT_FALSE(fs::exists(out / "overlays" / "kf_fd"));
}

TEST(Ablation, EmptyInputsRejected) {
    fixtures::TempDir out("ablation");
    EXPECT_THROW(run_ablation(shared_dataset(), {}, 4, 2, quick_config(), out.path()), std::invalid_argument);
}

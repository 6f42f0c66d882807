#include "ionflux/train.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace ionflux;

namespace {

SpeciesPtr nacl_mgso4() { return default_ion_database().select({"Na+", "Mg2+", "Cl-", "SO4_2-"}); }

std::vector<std::pair<std::string, MixtureState>> named(const std::vector<MixtureState>& feeds,
                                                        const std::string& prefix) {
    std::vector<std::pair<std::string, MixtureState>> out;
    for (std::size_t i = 0; i < feeds.size(); ++i) out.emplace_back(prefix + std::to_string(i), feeds[i]);
    return out;
}

ModelState tiny_model(const MeasuredDataset& ds) {
    Architecture a;
    a.width = 12;
    a.encoding_order = 2;
    return make_model(*nacl_mgso4(), a, 3e-5, max_feed(ds), 21);
}

MeasuredDataset tiny_sim() {
    const auto feeds = sobol_compositions(nacl_mgso4(), std::vector<ConcentrationBounds>(4, {5.0, 50.0}), 10);
    return generate_pretrain_data(reference_membrane(), named(feeds, "s"), uniform_flux_grid(4), SolverConfig{})
        .dataset;
}

}  // namespace

TEST(Schedule, HalvingEvery200Epochs) {
    EXPECT_DOUBLE_EQ(learning_rate(0, 1e-3, 200), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate(199, 1e-3, 200), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate(200, 1e-3, 200), 5e-4);
    EXPECT_DOUBLE_EQ(learning_rate(450, 1e-3, 200), 2.5e-4);
    std::set<double> plateaus;
    for (int e = 0; e < 1000; ++e) plateaus.insert(learning_rate(e, 1e-3, 200));
    EXPECT_EQ(plateaus.size(), 5u);
    EXPECT_THROW(learning_rate(1, 1e-3, 0), InvalidInputError);
}

TEST(Adam, FirstStepIsUnitDirection) {
    AdamState st;
    std::vector<double> theta{1.0};
    adam_step(st, theta, {theta[0]}, 1e-3);
    EXPECT_NEAR(theta[0], 0.999, 1e-10);
}

TEST(Adam, ZeroGradientsAreFixedPoint) {
    AdamState st;
    std::vector<double> theta{1.0, -2.0, 3.0};
    for (int i = 0; i < 50; ++i) adam_step(st, theta, {0.0, 0.0, 0.0}, 1e-2);
    EXPECT_EQ(theta, (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(Adam, DeterministicAndAbortsOnNaN) {
    AdamState a, b;
    std::vector<double> ta{0.5, 1.5}, tb{0.5, 1.5};
    for (int i = 0; i < 10; ++i) {
        adam_step(a, ta, {ta[0] - 0.1, 2.0 * ta[1]}, 1e-2);
        adam_step(b, tb, {tb[0] - 0.1, 2.0 * tb[1]}, 1e-2);
    }
    EXPECT_EQ(ta, tb);
    EXPECT_THROW(adam_step(a, ta, {std::nan(""), 0.0}, 1e-2), TrainingAbortError);
}

TEST(Loss, PretrainDefinition) {
    MatrixXd p(1, 1), t(1, 1);
    p << 3.0;
    t << 1.0;
    EXPECT_DOUBLE_EQ(loss_pretrain(p, t, Mask(1)), 4.0);
    MatrixXd pred = MatrixXd::Random(5, 4), targ = MatrixXd::Random(5, 4);
    EXPECT_EQ(loss_pretrain(pred, pred, Mask(4)), 0.0);
    const double l1 = loss_pretrain(pred, targ, Mask(4));
    const double l2 = loss_pretrain(targ + 2.0 * (pred - targ), targ, Mask(4));
    EXPECT_NEAR(l2, 4.0 * l1, 1e-12 * l2);
}

TEST(Loss, MaskedEntriesReduceDenominator) {
    MatrixXd p = MatrixXd::Zero(2, 3), t = MatrixXd::Zero(2, 3);
    p(0, 0) = 2.0;
    p(0, 2) = 100.0;
    Mask m(std::vector<std::uint8_t>{1, 1, 0});
    EXPECT_DOUBLE_EQ(loss_pretrain(p, t, m), 1.0);
}

TEST(Loss, FinetuneWithZeroSigmaIsDeterministicMse) {
    const MatrixXd pred = MatrixXd::Random(6, 4), mu = MatrixXd::Random(6, 4).cwiseAbs();
    const MatrixXd w = MatrixXd::Ones(6, 4);
    std::mt19937_64 rng(1);
    EXPECT_LE(std::abs(loss_finetune(pred, mu, MatrixXd::Zero(6, 4), w, rng) - loss_pretrain(pred, mu, w)), 1e-12);
    EXPECT_EQ(loss_finetune(mu, mu, MatrixXd::Zero(6, 4), w, rng), 0.0);
}

TEST(Loss, FinetuneSmallSigmaApproachesMse) {
    // The linear term 2 r sigma eps dominates, so the gap scales with sigma * |r|.
    const MatrixXd pred = MatrixXd::Random(6, 4), mu = MatrixXd::Constant(6, 4, 5.0);
    const MatrixXd w = MatrixXd::Ones(6, 4);
    std::mt19937_64 rng(2);
    const double gap = std::abs(loss_finetune(pred, mu, MatrixXd::Constant(6, 4, 1e-9), w, rng) -
                                loss_pretrain(pred, mu, w));
    EXPECT_LT(gap, 20.0 * 1e-9 * 6.0);
}

TEST(Loss, FinetuneMonteCarloExpectation) {
    MatrixXd pred(3, 4), mu(3, 4), sigma(3, 4);
    pred << 9, 4, 7, 2, 11, 5, 6, 1, 10, 3, 8, 2;
    mu << 10, 5, 6, 2, 10, 4, 7, 1.5, 9, 3.5, 8, 2.5;
    sigma << 0.5, 0.25, 0.3, 0.1, 0.6, 0.2, 0.35, 0.1, 0.4, 0.3, 0.5, 0.2;
    const MatrixXd w = MatrixXd::Ones(3, 4);
    const double expected = loss_pretrain(pred, mu, w) + sigma.array().square().mean();
    std::mt19937_64 rng(99);
    double sum = 0.0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) sum += loss_finetune(pred, mu, sigma, w, rng);
    EXPECT_NEAR(sum / draws, expected, 0.01 * expected);

    std::mt19937_64 r1(5), r2(5);
    EXPECT_EQ(loss_finetune(pred, mu, sigma, w, r1), loss_finetune(pred, mu, sigma, w, r2));
}

TEST(Loss, DrawsClampedAtZero) {
    std::mt19937_64 rng(3);
    const MatrixXd d = draw_targets(MatrixXd::Constant(50, 2, 0.1), MatrixXd::Constant(50, 2, 5.0), rng);
    EXPECT_GE(d.minCoeff(), 0.0);
}

TEST(Sampling, SobolFeedsAreNeutralAndDeterministic) {
    const auto sp = nacl_mgso4();
    const std::vector<ConcentrationBounds> b(4, {1.0, 100.0});
    const auto a = sobol_compositions(sp, b, 64, 3);
    const auto c = sobol_compositions(sp, b, 64, 3);
    ASSERT_EQ(a.size(), 64u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].concentrations(), c[i].concentrations());
        EXPECT_LE(charge_imbalance(a[i].concentrations(), a[i].valences(), a[i].mask()), 1e-12);
        EXPECT_GE(a[i].concentration(0), 1.0);
        EXPECT_LE(a[i].concentration(0), 100.0);
    }
    const auto first = sobol_compositions(default_ion_database().select({"Na+", "Cl-"}), {{1, 1000}, {1, 1000}}, 1);
    EXPECT_NEAR(first[0].concentration(0), 31.62277660168379, 1e-12);
    EXPECT_THROW(sobol_compositions(default_ion_database().select({"Na+", "K+"}), b, 1), InvalidInputError);
}

TEST(Sampling, FluxGridEndsExactlyAtMaximum) {
    const auto g = uniform_flux_grid(20, 3e-5);
    ASSERT_EQ(g.size(), 20u);
    EXPECT_EQ(g.back(), 3e-5);
    EXPECT_DOUBLE_EQ(g.front(), 1.5e-6);
}

TEST(PretrainData, NaClRowsAreNeutralAndZeroFluxIsFeed) {
    const auto sp = default_ion_database().select({"Na+", "Cl-"});
    const auto feed = MixtureState::from_map(sp, {{"Na+", 10}, {"Cl-", 10}});
    auto grid = uniform_flux_grid(19);
    grid.insert(grid.begin(), 0.0);
    const auto gen = generate_pretrain_data(reference_membrane(), {{"nacl", feed}}, grid, SolverConfig{});
    EXPECT_EQ(gen.failed_points, 0u);
    EXPECT_LE(gen.dataset.size(), 40u);
    ASSERT_EQ(gen.dataset.experiments.size(), 1u);
    std::map<double, double> charge, total;
    for (const auto& r : gen.dataset.records) {
        charge[r.jv_m_s] += r.valence * r.permeate_mol_m3;
        total[r.jv_m_s] += std::abs(r.valence) * r.permeate_mol_m3;
        if (r.jv_m_s == 0.0) EXPECT_EQ(r.permeate_mol_m3, r.feed_mol_m3);
        EXPECT_EQ(r.provenance, "simulated");
    }
    EXPECT_EQ(charge.size(), 20u);
    for (const auto& [jv, q] : charge) EXPECT_LE(std::abs(q), 1e-8 * total[jv]);

    const auto again = generate_pretrain_data(reference_membrane(), {{"nacl", feed}}, grid, SolverConfig{});
    EXPECT_EQ(format_dataset(again.dataset), format_dataset(gen.dataset));
}

TEST(PretrainData, PerturbationIsSeeded) {
    const auto sim = tiny_sim();
    const auto a = perturb_dataset(sim, 0.05, 4);
    const auto b = perturb_dataset(sim, 0.05, 4);
    EXPECT_EQ(format_dataset(a), format_dataset(b));
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        EXPECT_NEAR(a.records[i].sigma_mol_m3, 0.05 * sim.records[i].permeate_mol_m3, 1e-15);
        EXPECT_EQ(a.records[i].provenance, "measured");
    }
}

TEST(Evaluate, MeanAbsoluteDefinition) {
    const auto sim = tiny_sim();
    auto exact = [&](double offset) {
        return [&sim, offset](const Experiment& e) {
            std::vector<std::map<std::string, double>> rows(e.fluxes.size());
            for (auto r : e.records) {
                const auto& rec = sim.records[r];
                const auto k = static_cast<std::size_t>(
                    std::lower_bound(e.fluxes.begin(), e.fluxes.end(), rec.jv_m_s) - e.fluxes.begin());
                rows[k][rec.ion] = rec.permeate_mol_m3 - offset * rec.feed_mol_m3;
            }
            return rows;
        };
    };
    EXPECT_NEAR(evaluate_with(sim, exact(0.0)).mae_percent, 0.0, 1e-12);
    const auto ev = evaluate_with(sim, exact(0.05));
    EXPECT_NEAR(ev.mae_percent, 5.0, 1e-9);
    EXPECT_NEAR(ev.rmse_percent, 5.0, 1e-9);
    EXPECT_EQ(ev.parity.size(), sim.size());
    EXPECT_EQ(format_parity_csv(ev).substr(0, 38), "experiment_id,ion,jv_m_s,R_meas,R_pred");
}

TEST(Evaluate, ContinuumBaselineOnItsOwnData) {
    const auto sim = tiny_sim();
    const auto ev = evaluate_membrane(reference_membrane(), sim, default_ion_database());
    EXPECT_LT(ev.mae_percent, 1e-6);
    EXPECT_EQ(ev.failed_experiments, 0u);
}

TEST(Train, ConfigValidation) {
    TrainConfig cfg;
    cfg.replay = 0.2;
    EXPECT_THROW(cfg.validate(50, 10), InvalidInputError);
    EXPECT_NO_THROW(cfg.validate(100, 10));
    cfg.batch_size = 0;
    EXPECT_THROW(cfg.validate(100, 10), InvalidInputError);
}

TEST(Train, SamplesRejectUnknownSpecies) {
    const auto sim = tiny_sim();
    Architecture a;
    a.width = 4;
    a.encoding_order = 1;
    const auto m = make_model(*default_ion_database().select({"K+", "Cl-"}), a, 3e-5, 10.0, 1);
    EXPECT_THROW(make_samples(sim, m), UnsupportedSpeciesError);
}

TEST(Train, PretrainReducesLossAndIsDeterministic) {
    const auto sim = tiny_sim();
    TrainConfig cfg;
    cfg.epochs = 12;
    cfg.batch_size = 2;
    cfg.halving_period = 6;
    cfg.lr0 = 3e-3;
    cfg.seed = 5;
    cfg.run_finetune = false;
    const auto model = tiny_model(sim);
    const auto a = train(model, sim, nullptr, cfg);
    const auto b = train(model, sim, nullptr, cfg);
    ASSERT_EQ(a.history.size(), 12u);
    EXPECT_EQ(a.model.theta, b.model.theta);
    EXPECT_EQ(history_jsonl(a.history), history_jsonl(b.history));
    const auto samples = make_samples(sim, model);
    EXPECT_LT(dataset_loss(a.model, samples, cfg.integration), dataset_loss(model, samples, cfg.integration));
    EXPECT_DOUBLE_EQ(a.history[6].lr, 1.5e-3);
}

TEST(Train, ParallelBatchesMatchSerial) {
    const auto sim = tiny_sim();
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 3;
    cfg.run_finetune = false;
    const auto model = tiny_model(sim);
    const auto serial = train(model, sim, nullptr, cfg);
    cfg.jobs = 3;
    const auto parallel = train(model, sim, nullptr, cfg);
    EXPECT_EQ(serial.model.theta, parallel.model.theta);
}

TEST(Train, FinetuneStageWithReplayAndCheckpoints) {
    const auto sim = tiny_sim();
    const auto meas = perturb_dataset(
        generate_pretrain_data(reference_membrane(),
                               named(sobol_compositions(nacl_mgso4(), std::vector<ConcentrationBounds>(4, {5.0, 50.0}),
                                                        1, 40),
                                     "m"),
                               uniform_flux_grid(4), SolverConfig{})
            .dataset,
        0.05, 8);
    const auto dir = std::filesystem::temp_directory_path() / "ionflux_train_ckpt";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.halving_period = 2;
    cfg.batch_size = 4;
    cfg.replay = 0.5;
    cfg.seed = 2;
    cfg.checkpoint_dir = dir.string();
    const auto r = train(tiny_model(sim), sim, &meas, cfg);
    ASSERT_EQ(r.history.size(), 8u);
    EXPECT_EQ(r.history[4].stage, "finetune");
    EXPECT_DOUBLE_EQ(r.history[4].lr, cfg.lr0);
    for (const char* name : {"pretrain_epoch2.json", "pretrain_epoch4.json", "finetune_epoch2.json",
                             "finetune_epoch4.json"})
        EXPECT_TRUE(std::filesystem::exists(dir / name)) << name;
    EXPECT_EQ(load_checkpoint((dir / "finetune_epoch4.json").string()).theta, r.model.theta);
    std::filesystem::remove_all(dir);
}

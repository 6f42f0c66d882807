#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ionflux/chem.hpp"
#include "ionflux/dataset.hpp"
#include "ionflux/enp.hpp"
#include "ionflux/errors.hpp"
#include "ionflux/io.hpp"
#include "ionflux/node.hpp"
#include "ionflux/parallel.hpp"
#include "ionflux/sobol.hpp"

namespace ionflux {

// ---------------------------------------------------------------------------
// Feed sampling

struct ConcentrationBounds {
    double lo = 1.0;   // mol/m3
    double hi = 100.0;
};

// Sobol points mapped log-uniformly per ion; anions are then rescaled
// together so the feed is electroneutral.
inline std::vector<MixtureState> sobol_compositions(const SpeciesPtr& species,
                                                    const std::vector<ConcentrationBounds>& bounds,
                                                    std::size_t count, std::uint64_t skip = 0) {
    const auto d = static_cast<int>(species->size());
    if (static_cast<int>(bounds.size()) != d) throw InvalidInputError("one concentration interval per ion is required");
    bool cation = false, anion = false;
    for (const auto& ion : *species) {
        cation |= ion.valence > 0;
        anion |= ion.valence < 0;
    }
    if (!cation || !anion) throw InvalidInputError("Sobol feeds need at least one cation and one anion");
    for (const auto& b : bounds)
        if (!(b.lo > 0.0 && b.lo < b.hi)) throw InvalidInputError("concentration bounds need 0 < lo < hi");

    SobolSequence seq(d);
    seq.skip(skip);
    std::vector<MixtureState> out;
    out.reserve(count);
    for (std::size_t n = 0; n < count; ++n) {
        const auto u = seq.next();
        VectorXd c(d);
        double plus = 0.0, minus = 0.0;
        for (int j = 0; j < d; ++j) {
            c[j] = log_uniform(u[static_cast<std::size_t>(j)], bounds[static_cast<std::size_t>(j)].lo,
                               bounds[static_cast<std::size_t>(j)].hi);
            const int z = (*species)[static_cast<std::size_t>(j)].valence;
            (z > 0 ? plus : minus) += std::abs(z) * c[j];
        }
        const double scale = plus / minus;
        for (int j = 0; j < d; ++j)
            if ((*species)[static_cast<std::size_t>(j)].valence < 0) c[j] *= scale;
        out.emplace_back(species, c);
    }
    return out;
}

// n uniform fluxes on (0, jv_max].
inline std::vector<double> uniform_flux_grid(int n = 20, double jv_max = 3e-5) {
    if (n < 1 || !(jv_max > 0.0)) throw InvalidInputError("flux grid needs n >= 1 and jv_max > 0");
    std::vector<double> g(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] = jv_max * (i + 1) / n;
    g.back() = jv_max;
    return g;
}

// ---------------------------------------------------------------------------
// Simulated data

struct GeneratedData {
    MeasuredDataset dataset;  // provenance "simulated", sigma 0
    std::size_t converged_points = 0;
    std::size_t failed_points = 0;
    std::vector<std::string> log;
};

// Continuum solutions for every (feed, flux); points that fail to converge are
// skipped and logged. More than 10% failures is a data-quality error.
inline GeneratedData generate_pretrain_data(const MembraneParams& membrane,
                                            const std::vector<std::pair<std::string, MixtureState>>& feeds,
                                            const std::vector<double>& flux_grid, const SolverConfig& solver,
                                            int jobs = 1) {
    for (std::size_t i = 0; i < flux_grid.size(); ++i)
        if (!(flux_grid[i] >= 0.0) || (i > 0 && flux_grid[i] < flux_grid[i - 1]))
            throw InvalidInputError("flux grid must be ascending and non-negative");
    struct FeedResult {
        std::vector<RejectionRecord> records;
        std::vector<std::string> failures;
    };
    std::vector<FeedResult> results(feeds.size());
    parallel_for(feeds.size(), jobs, [&](std::size_t f) {
        const auto& [id, feed] = feeds[f];
        std::optional<PoreIterate> warm;
        for (double jv : flux_grid) {
            TransportSolution sol;
            try {
                sol = solve_point(feed, jv, membrane, solver, warm ? &*warm : nullptr);
            } catch (const Error& e) {
                results[f].failures.push_back(id + " at jv=" + io::format_double(jv) + ": " + e.what());
                warm.reset();
                continue;
            }
            if (jv > 0.0) warm = sol.iterate;
            for (Eigen::Index j = 0; j < feed.dim(); ++j) {
                if (!feed.mask()[j]) continue;
                const auto& ion = feed.species()[static_cast<std::size_t>(j)];
                RejectionRecord r;
                r.experiment_id = id;
                r.ion = ion.name;
                r.valence = ion.valence;
                r.feed_mol_m3 = feed.concentration(j);
                r.jv_m_s = jv;
                r.permeate_mol_m3 = jv == 0.0 ? feed.concentration(j) : sol.permeate.concentration(j);
                r.provenance = "simulated";
                results[f].records.push_back(std::move(r));
            }
        }
    });

    GeneratedData out;
    std::vector<RejectionRecord> records;
    for (auto& r : results) {
        out.failed_points += r.failures.size();
        for (auto& msg : r.failures) out.log.push_back("skipped " + msg);
        records.insert(records.end(), r.records.begin(), r.records.end());
    }
    const std::size_t total = feeds.size() * flux_grid.size();
    out.converged_points = total - out.failed_points;
    if (total > 0 && 10 * out.failed_points > total)
        throw DataQualityError(std::to_string(out.failed_points) + " of " + std::to_string(total) +
                               " flux points failed to converge");
    out.dataset = make_dataset(std::move(records));
    return out;
}

// Noisy copy: mu ~ N(clean, (rel*clean)^2) clamped at 0, sigma = rel*clean.
inline MeasuredDataset perturb_dataset(const MeasuredDataset& clean, double relative_sigma, std::uint64_t seed,
                                       const std::string& provenance = "measured") {
    if (!(relative_sigma >= 0.0)) throw InvalidInputError("relative sigma must be non-negative");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    auto records = clean.records;
    for (auto& r : records) {
        const double s = relative_sigma * r.permeate_mol_m3;
        r.permeate_mol_m3 = std::max(0.0, r.permeate_mol_m3 + s * normal(rng));
        r.sigma_mol_m3 = s;
        r.provenance = provenance;
    }
    return make_dataset(std::move(records));
}

inline double max_feed(const MeasuredDataset& ds) {
    double m = 0.0;
    for (const auto& r : ds.records) m = std::max(m, r.feed_mol_m3);
    return m;
}

// ---------------------------------------------------------------------------
// Training samples: one trajectory per experiment

struct TrainSample {
    std::string id;
    VectorXd h0;                // feed in model species order
    Mask mask;
    std::vector<double> fluxes; // ascending
    MatrixXd mu;                // |fluxes| x d
    MatrixXd sigma;
    MatrixXd weight;            // 1 where a record exists
};

inline std::vector<TrainSample> make_samples(const MeasuredDataset& ds, const ModelState& model) {
    const auto d = model.arch.species;
    std::vector<TrainSample> out;
    out.reserve(ds.experiments.size());
    for (const auto& e : ds.experiments) {
        TrainSample s;
        s.id = e.id;
        s.h0 = VectorXd::Zero(d);
        s.mask = Mask(static_cast<std::size_t>(d), false);
        for (const auto& [ion, c] : e.feed) {
            const auto idx = model.index_of(ion);
            if (!idx) throw UnsupportedSpeciesError("species not supported by the model: " + ion);
            if (model.valences[*idx] != e.valence.at(ion))
                throw UnsupportedSpeciesError("valence of " + ion + " differs from the model");
            s.h0[*idx] = c;
            s.mask.set(*idx, c > 0.0);
        }
        s.fluxes = e.fluxes;
        const auto nf = static_cast<Eigen::Index>(s.fluxes.size());
        s.mu = MatrixXd::Zero(nf, d);
        s.sigma = MatrixXd::Zero(nf, d);
        s.weight = MatrixXd::Zero(nf, d);
        for (auto r : e.records) {
            const auto& rec = ds.records[r];
            const auto j = *model.index_of(rec.ion);
            if (!s.mask[j]) continue;
            const auto row = static_cast<Eigen::Index>(
                std::lower_bound(s.fluxes.begin(), s.fluxes.end(), rec.jv_m_s) - s.fluxes.begin());
            s.mu(row, j) = rec.permeate_mol_m3;
            s.sigma(row, j) = rec.sigma_mol_m3;
            s.weight(row, j) = 1.0;
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

// Mean squared error over entries with non-zero weight.
inline double loss_pretrain(const MatrixXd& pred, const MatrixXd& targets, const MatrixXd& weight) {
    if (pred.rows() != targets.rows() || pred.cols() != targets.cols() || weight.rows() != pred.rows() ||
        weight.cols() != pred.cols())
        throw InvalidInputError("loss_pretrain: shape mismatch");
    const double count = (weight.array() != 0.0).count();
    if (count == 0.0) return 0.0;
    return ((pred - targets).array().square() * (weight.array() != 0.0).cast<double>()).sum() / count;
}

inline double loss_pretrain(const MatrixXd& pred, const MatrixXd& targets, const Mask& mask) {
    MatrixXd w(pred.rows(), pred.cols());
    for (Eigen::Index j = 0; j < pred.cols(); ++j) w.col(j).setConstant(mask[j] ? 1.0 : 0.0);
    return loss_pretrain(pred, targets, w);
}

// One Gaussian draw per entry, clamped at 0; sigma = 0 returns mu exactly.
inline MatrixXd draw_targets(const MatrixXd& mu, const MatrixXd& sigma, std::mt19937_64& rng) {
    if (mu.rows() != sigma.rows() || mu.cols() != sigma.cols()) throw InvalidInputError("draw_targets: shape mismatch");
    std::normal_distribution<double> normal;
    MatrixXd out = mu;
    for (Eigen::Index i = 0; i < mu.rows(); ++i)
        for (Eigen::Index j = 0; j < mu.cols(); ++j)
            if (sigma(i, j) > 0.0) out(i, j) = std::max(0.0, mu(i, j) + sigma(i, j) * normal(rng));
    return out;
}

inline double loss_finetune(const MatrixXd& pred, const MatrixXd& mu, const MatrixXd& sigma, const MatrixXd& weight,
                            std::mt19937_64& rng) {
    return loss_pretrain(pred, draw_targets(mu, sigma, rng), weight);
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline void adam_step(AdamState& state, std::vector<double>& theta, const std::vector<double>& grads, double lr,
                      const AdamConfig& cfg = {}) {
    if (grads.size() != theta.size()) throw InvalidInputError("adam_step: gradient size mismatch");
    for (double g : grads)
        if (!std::isfinite(g)) throw TrainingAbortError("non-finite gradient");
    if (state.m.size() != theta.size()) {
        state.m.assign(theta.size(), 0.0);
        state.v.assign(theta.size(), 0.0);
        state.step = 0;
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        theta[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.eps);
    }
}

// lr halves every `period` epochs; epochs count from 0.
inline double learning_rate(int epoch, double lr0, int period) {
    if (period < 1) throw InvalidInputError("halving period must be positive");
    return lr0 * std::ldexp(1.0, -(epoch / period));
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    int batch_size = 32;
    double lr0 = 1e-3;
    int halving_period = 200;
    int epochs = 1000;           // per stage; the schedule restarts for fine-tuning
    std::size_t pretrain_count = 0;  // k; 0 uses every simulated experiment
    std::size_t finetune_count = 0;  // n; 0 uses every measured experiment
    std::uint64_t seed = 0;
    double replay = 0.0;         // rho
    bool freeze_draws = false;   // one fixed noisy copy instead of fresh draws per epoch
    bool run_pretrain = true;    // stage 1 on the simulated set
    bool run_finetune = true;    // stage 2 on the measured set (simulated set used for replay only)
    int jobs = 1;
    std::string checkpoint_dir;  // empty disables checkpoints
    IntegrationConfig integration;
    AdamConfig adam;

    void validate(std::size_t k, std::size_t n) const {
        if (batch_size < 1) throw InvalidInputError("batch size must be positive");
        if (!(lr0 > 0.0)) throw InvalidInputError("learning rate must be positive");
        if (halving_period < 1 || epochs < 0) throw InvalidInputError("invalid epoch schedule");
        if (!(replay >= 0.0 && replay <= 1.0)) throw InvalidInputError("replay fraction must lie in [0, 1]");
        if (replay > 0.0 && n > 0 && 10 * n > k)
            throw InvalidInputError("replay requires finetune count n <= k/10");
        integration.validate();
    }
};

struct HistoryEntry {
    int epoch = 0;
    std::string stage;
    double lr = 0.0;
    double loss = 0.0;
};

inline std::string history_jsonl(const std::vector<HistoryEntry>& h) {
    std::string out;
    for (const auto& e : h) {
        nlohmann::ordered_json j;
        j["epoch"] = e.epoch;
        j["stage"] = e.stage;
        j["lr"] = e.lr;
        j["loss"] = e.loss;
        out += j.dump() + "\n";
    }
    return out;
}

struct TrainResult {
    ModelState model;
    std::vector<HistoryEntry> history;
};

namespace detail {

inline std::mt19937_64 stream(std::uint64_t seed, std::uint64_t stage, std::uint64_t epoch, std::uint64_t batch) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stage), static_cast<std::uint32_t>(epoch),
                      static_cast<std::uint32_t>(batch)};
    return std::mt19937_64(seq);
}

struct SampleGrad {
    std::vector<double> theta;
    double sse = 0.0;
    double count = 0.0;
};

// Sum of squared errors and its parameter gradient for one trajectory.
inline SampleGrad sample_gradient(const ModelState& model, const TrainSample& s, const MatrixXd& targets,
                                  const IntegrationConfig& cfg) {
    const VectorXd y0 = initial_state(model, s.h0, s.mask);
    const auto u = normalized_targets(model, s.fluxes);
    const MatrixXd traj = integrate_normalized(model, y0, s.mask, u, cfg);
    const MatrixXd pred = traj * model.conc_scale;
    const VectorXd z = model.valences.cast<double>().cwiseProduct(s.mask.weights());
    for (Eigen::Index i = 0; i < pred.rows(); ++i)
        if (std::abs(z.dot(pred.row(i).transpose())) > 1e-6 * std::max(pred.row(i).lpNorm<1>(), 1e-300))
            throw TrainingAbortError("prediction violates electroneutrality for " + s.id);
    const MatrixXd on = (s.weight.array() != 0.0).cast<double>();
    const MatrixXd r = (pred - targets).cwiseProduct(on);
    SampleGrad g;
    g.sse = r.squaredNorm();
    g.count = on.sum();
    // dSSE/dy = 2 r * conc_scale
    const auto tg = adjoint_normalized(model, s.mask, u, traj, 2.0 * model.conc_scale * r, cfg);
    g.theta = tg.theta;
    return g;
}

}  // namespace detail

// One pass over `items` (sample index, targets) in the given order.
inline double run_epoch(ModelState& model, const std::vector<TrainSample>& samples,
                        const std::vector<std::pair<std::size_t, MatrixXd>>& items, double lr,
                        const TrainConfig& cfg, const std::string& context) {
    double sse = 0.0, count = 0.0;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t start = 0; start < items.size(); start += bs) {
        const std::size_t end = std::min(items.size(), start + bs);
        std::vector<detail::SampleGrad> grads(end - start);
        try {
            parallel_for(grads.size(), cfg.jobs, [&](std::size_t b) {
                const auto& [idx, targets] = items[start + b];
                grads[b] = detail::sample_gradient(model, samples[idx], targets, cfg.integration);
            });
        } catch (const Error& e) {
            throw TrainingAbortError(context + ", batch " + std::to_string(start / bs) + ": " + e.what());
        }
        double bsse = 0.0, bcount = 0.0;
        std::vector<double> g(model.theta.size(), 0.0);
        for (const auto& sg : grads) {
            bsse += sg.sse;
            bcount += sg.count;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sg.theta[i];
        }
        if (bcount == 0.0) continue;
        for (double& v : g) v /= bcount;
        try {
            adam_step(model.adam, model.theta, g, lr, cfg.adam);
        } catch (const TrainingAbortError& e) {
            throw TrainingAbortError(context + ", batch " + std::to_string(start / bs) + ": " + e.what());
        }
        sse += bsse;
        count += bcount;
    }
    return count > 0.0 ? sse / count : 0.0;
}

// Mean loss over all samples at fixed parameters (no update).
inline double dataset_loss(const ModelState& model, const std::vector<TrainSample>& samples,
                           const IntegrationConfig& cfg, int jobs = 1) {
    std::vector<std::array<double, 2>> parts(samples.size());
    parallel_for(samples.size(), jobs, [&](std::size_t i) {
        const auto& s = samples[i];
        const MatrixXd pred = integrate(model, s.h0, s.mask, s.fluxes, cfg);
        const MatrixXd on = (s.weight.array() != 0.0).cast<double>();
        parts[i] = {(pred - s.mu).cwiseProduct(on).squaredNorm(), on.sum()};
    });
    double sse = 0.0, count = 0.0;
    for (const auto& p : parts) {
        sse += p[0];
        count += p[1];
    }
    return count > 0.0 ? sse / count : 0.0;
}

namespace detail {

inline void checkpoint_if_due(const ModelState& model, const TrainConfig& cfg, const std::string& stage, int epoch) {
    if (cfg.checkpoint_dir.empty()) return;
    if ((epoch + 1) % cfg.halving_period != 0 && epoch + 1 != cfg.epochs) return;
    const auto path = std::filesystem::path(cfg.checkpoint_dir) /
                      (stage + "_epoch" + std::to_string(epoch + 1) + ".json");
    save_checkpoint(model, path.string());
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(idx[i - 1], idx[pick(rng)]);
    }
    return idx;
}

}  // namespace detail

// Stage 1 on `sim` (if non-empty), then stage 2 on `meas` (if non-empty) with
// a replay fraction of simulated trajectories.
inline TrainResult train(ModelState model, const MeasuredDataset& sim, const MeasuredDataset* meas,
                         const TrainConfig& cfg) {
    model.validate();
    auto sim_samples = make_samples(sim, model);
    if (cfg.pretrain_count > 0 && cfg.pretrain_count < sim_samples.size()) sim_samples.resize(cfg.pretrain_count);
    std::vector<TrainSample> meas_samples;
    if (meas) {
        meas_samples = make_samples(*meas, model);
        if (cfg.finetune_count > 0 && cfg.finetune_count < meas_samples.size())
            meas_samples.resize(cfg.finetune_count);
    }
    if (sim_samples.empty() && meas_samples.empty()) throw InvalidInputError("train: no data for any stage");
    cfg.validate(sim_samples.size(), meas_samples.size());

    TrainResult out;
    if (cfg.run_pretrain && !sim_samples.empty()) {
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            auto rng = detail::stream(cfg.seed, 1, static_cast<std::uint64_t>(epoch), 0);
            std::vector<std::pair<std::size_t, MatrixXd>> items;
            for (auto i : detail::shuffled(sim_samples.size(), rng)) items.emplace_back(i, sim_samples[i].mu);
            const double lr = learning_rate(epoch, cfg.lr0, cfg.halving_period);
            const double loss = run_epoch(model, sim_samples, items, lr, cfg, "pretrain epoch " + std::to_string(epoch));
            out.history.push_back({epoch, "pretrain", lr, loss});
            detail::checkpoint_if_due(model, cfg, "pretrain", epoch);
        }
    }
    if (cfg.run_finetune && !meas_samples.empty()) {
        // The fine-tuning schedule starts with fresh optimizer moments.
        model.adam = AdamState{};
        std::vector<TrainSample> pool = meas_samples;
        const std::size_t n_meas = pool.size();
        pool.insert(pool.end(), sim_samples.begin(), sim_samples.end());
        const auto n_replay = static_cast<std::size_t>(std::llround(cfg.replay * static_cast<double>(sim_samples.size())));
        std::vector<MatrixXd> frozen;
        if (cfg.freeze_draws) {
            auto rng = detail::stream(cfg.seed, 2, 0xffffffffu, 0);
            for (std::size_t i = 0; i < n_meas; ++i) frozen.push_back(draw_targets(pool[i].mu, pool[i].sigma, rng));
        }
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
            auto rng = detail::stream(cfg.seed, 2, static_cast<std::uint64_t>(epoch), 0);
            std::vector<std::size_t> chosen(n_meas);
            std::iota(chosen.begin(), chosen.end(), 0);
            if (n_replay > 0) {
                const auto sim_order = detail::shuffled(sim_samples.size(), rng);
                for (std::size_t r = 0; r < n_replay; ++r) chosen.push_back(n_meas + sim_order[r]);
            }
            const auto order = detail::shuffled(chosen.size(), rng);
            std::vector<std::pair<std::size_t, MatrixXd>> items;
            for (auto o : order) {
                const auto i = chosen[o];
                if (i >= n_meas)
                    items.emplace_back(i, pool[i].mu);
                else if (cfg.freeze_draws)
                    items.emplace_back(i, frozen[i]);
                else
                    items.emplace_back(i, draw_targets(pool[i].mu, pool[i].sigma, rng));
            }
            const double lr = learning_rate(epoch, cfg.lr0, cfg.halving_period);
            const double loss = run_epoch(model, pool, items, lr, cfg, "finetune epoch " + std::to_string(epoch));
            out.history.push_back({epoch, "finetune", lr, loss});
            detail::checkpoint_if_due(model, cfg, "finetune", epoch);
        }
    }
    out.model = std::move(model);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ParityRow {
    std::string experiment_id;
    std::string ion;
    double jv_m_s = 0.0;
    double measured = 0.0;   // R_meas
    double predicted = 0.0;  // R_pred
};

struct IonError {
    std::string ion;
    std::size_t count = 0;
    double mae_percent = 0.0;
    double rmse_percent = 0.0;
};

struct Evaluation {
    double mae_percent = 0.0;   // primary test error
    double rmse_percent = 0.0;
    std::vector<IonError> per_ion;
    std::vector<ParityRow> parity;
    std::size_t failed_experiments = 0;
};

// Predicted permeate (mol/m3) per ion name for one experiment at its fluxes;
// rows follow e.fluxes.
using ExperimentPredictor =
    std::function<std::vector<std::map<std::string, double>>(const Experiment& e)>;

inline Evaluation evaluate_with(const MeasuredDataset& test, const ExperimentPredictor& predictor, int jobs = 1) {
    if (test.empty()) throw InvalidInputError("evaluate: empty test set");
    std::vector<std::vector<std::map<std::string, double>>> preds(test.experiments.size());
    std::vector<char> failed(test.experiments.size(), 0);
    parallel_for(test.experiments.size(), jobs, [&](std::size_t i) {
        try {
            preds[i] = predictor(test.experiments[i]);
        } catch (const UnsupportedSpeciesError&) {
            throw;
        } catch (const Error&) {
            failed[i] = 1;
        }
    });
    Evaluation ev;
    std::map<std::string, std::array<double, 3>> acc;  // count, abs sum, sq sum
    double abs_sum = 0.0, sq_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < test.experiments.size(); ++i) {
        const auto& e = test.experiments[i];
        if (failed[i]) {
            ++ev.failed_experiments;
            continue;
        }
        for (auto r : e.records) {
            const auto& rec = test.records[r];
            if (!(rec.feed_mol_m3 > 0.0)) continue;
            const auto row = static_cast<std::size_t>(
                std::lower_bound(e.fluxes.begin(), e.fluxes.end(), rec.jv_m_s) - e.fluxes.begin());
            const double cp = preds[i][row].at(rec.ion);
            ParityRow p{e.id, rec.ion, rec.jv_m_s, rec.rejection(), 1.0 - cp / rec.feed_mol_m3};
            const double err = p.predicted - p.measured;
            abs_sum += std::abs(err);
            sq_sum += err * err;
            ++count;
            auto& a = acc[rec.ion];
            a[0] += 1.0;
            a[1] += std::abs(err);
            a[2] += err * err;
            ev.parity.push_back(std::move(p));
        }
    }
    if (count == 0) throw DataQualityError("evaluate: no record could be predicted");
    ev.mae_percent = 100.0 * abs_sum / static_cast<double>(count);
    ev.rmse_percent = 100.0 * std::sqrt(sq_sum / static_cast<double>(count));
    for (const auto& [ion, a] : acc)
        ev.per_ion.push_back({ion, static_cast<std::size_t>(a[0]), 100.0 * a[1] / a[0], 100.0 * std::sqrt(a[2] / a[0])});
    return ev;
}

inline Evaluation evaluate(const ModelState& model, const MeasuredDataset& test, const IntegrationConfig& cfg = {},
                           int jobs = 1) {
    model.validate();
    return evaluate_with(
        test,
        [&](const Experiment& e) {
            Mask mask(static_cast<std::size_t>(model.arch.species), false);
            VectorXd h0 = VectorXd::Zero(model.arch.species);
            for (const auto& [ion, c] : e.feed) {
                const auto idx = model.index_of(ion);
                if (!idx) throw UnsupportedSpeciesError("species not supported by the model: " + ion);
                h0[*idx] = c;
                mask.set(*idx, c > 0.0);
            }
            const MatrixXd traj = integrate(model, h0, mask, e.fluxes, cfg);
            std::vector<std::map<std::string, double>> rows(e.fluxes.size());
            for (std::size_t k = 0; k < rows.size(); ++k)
                for (const auto& [ion, c] : e.feed)
                    rows[k][ion] = traj(static_cast<Eigen::Index>(k), *model.index_of(ion));
            return rows;
        },
        jobs);
}

// The continuum model scored through the same metric (baseline column).
inline Evaluation evaluate_membrane(const MembraneParams& membrane, const MeasuredDataset& test,
                                    const IonDatabase& db, const SolverConfig& solver = {}, int jobs = 1) {
    const auto species = dataset_species(test, db);
    return evaluate_with(
        test,
        [&](const Experiment& e) {
            const auto feed = experiment_feed(e, species);
            const auto curve = solve_rejection(feed, membrane, solver, e.fluxes);
            std::vector<std::map<std::string, double>> rows(e.fluxes.size());
            for (std::size_t k = 0; k < rows.size(); ++k)
                for (const auto& [ion, c] : e.feed)
                    rows[k][ion] = curve[k].permeate.concentration(*feed.index_of(ion));
            return rows;
        },
        jobs);
}

inline std::string format_parity_csv(const Evaluation& ev) {
    std::string out = "experiment_id,ion,jv_m_s,R_meas,R_pred\n";
    for (const auto& p : ev.parity)
        out += p.experiment_id + "," + p.ion + "," + io::format_double(p.jv_m_s) + "," + io::format_double(p.measured) +
               "," + io::format_double(p.predicted) + "\n";
    return out;
}

inline nlohmann::ordered_json evaluation_to_json(const Evaluation& ev) {
    nlohmann::ordered_json j;
    j["mae_percent"] = ev.mae_percent;
    j["rmse_percent"] = ev.rmse_percent;
    j["records"] = ev.parity.size();
    j["failed_experiments"] = ev.failed_experiments;
    j["per_ion"] = nlohmann::ordered_json::array();
    for (const auto& e : ev.per_ion)
        j["per_ion"].push_back({{"ion", e.ion}, {"count", e.count}, {"mae_percent", e.mae_percent},
                                {"rmse_percent", e.rmse_percent}});
    return j;
}

}  // namespace ionflux

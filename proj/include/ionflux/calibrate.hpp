#pragma once

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ionflux/chem.hpp"
#include "ionflux/dataset.hpp"
#include "ionflux/enp.hpp"
#include "ionflux/errors.hpp"
#include "ionflux/parallel.hpp"

namespace ionflux {

struct Interval {
    double lo = 0.0;
    double hi = 1.0;
    double width() const { return hi - lo; }
};

// Search box for Z = {r_p, dx_e, zeta_p, chi_d}.
struct ParameterBounds {
    Interval pore_radius_nm{0.2, 2.0};
    Interval thickness_um{0.1, 10.0};
    Interval pore_dielectric{10.0, 78.54};
    Interval charge_density_mol_m3{-500.0, 500.0};

    std::array<Interval, 4> as_array() const {
        return {pore_radius_nm, thickness_um, pore_dielectric, charge_density_mol_m3};
    }
    void validate() const {
        for (const auto& b : as_array())
            if (!std::isfinite(b.lo) || !std::isfinite(b.hi) || !(b.hi > b.lo))
                throw InvalidInputError("calibration bounds must be finite with hi > lo");
        if (pore_radius_nm.lo <= 0.0 || thickness_um.lo <= 0.0 || pore_dielectric.lo <= 1.0)
            throw InvalidInputError("calibration bounds leave the valid membrane region");
    }
};

struct CalibrationConfig {
    double cooling = 0.95;           // T_k = T_0 alpha^k
    double proposal_scale = 0.05;    // Gaussian step as a fraction of each bound range
    double initial_temperature_fraction = 0.1;  // T_0 = fraction * objective at the start point
    int polish_max_evals = 250;
    double polish_ftol = 1e-10;
    double polish_xtol = 1e-7;
    double failure_penalty = 1e6;
    bool concentration_space = false;  // residuals on permeate concentration instead of rejection
    int jobs = 1;
    SolverConfig solver;
};

namespace detail {

inline MembraneParams membrane_from_unit(const std::array<double, 4>& u, const ParameterBounds& b,
                                         const MembraneParams& fixed) {
    MembraneParams m = fixed;
    const auto box = b.as_array();
    m.pore_radius_nm = box[0].lo + u[0] * box[0].width();
    m.thickness_um = box[1].lo + u[1] * box[1].width();
    m.pore_dielectric = box[2].lo + u[2] * box[2].width();
    m.charge_density_mol_m3 = box[3].lo + u[3] * box[3].width();
    return m;
}

// Folds a coordinate back into [0, 1] by mirror reflection.
inline double reflect_unit(double x) {
    if (!std::isfinite(x)) return 0.5;
    x = std::fmod(std::abs(x), 2.0);
    return x > 1.0 ? 2.0 - x : x;
}

}  // namespace detail

// Prepared dataset: species, feeds, flux grids and per-record targets.
class CalibrationProblem {
public:
    struct Target {
        std::size_t experiment = 0;
        Eigen::Index species = 0;
        std::size_t flux = 0;
        double feed = 0.0;
        double measured = 0.0;  // mu
        double sigma = 0.0;     // effective sigma in concentration units
    };

    CalibrationProblem(const MeasuredDataset& ds, const IonDatabase& db) {
        if (ds.empty()) throw InvalidInputError("calibration dataset is empty");
        species_ = dataset_species(ds, db);
        double min_sigma = std::numeric_limits<double>::infinity();
        for (const auto& r : ds.records)
            if (r.sigma_mol_m3 > 0.0) min_sigma = std::min(min_sigma, r.sigma_mol_m3);
        // No positive sigma anywhere: unit weights in the chosen residual space.
        const bool unit_weights = !std::isfinite(min_sigma);
        for (std::size_t e = 0; e < ds.experiments.size(); ++e) {
            const auto& ex = ds.experiments[e];
            feeds_.push_back(validate_feed(experiment_feed(ex, species_)));
            grids_.push_back(ex.fluxes);
            for (auto ri : ex.records) {
                const auto& r = ds.records[ri];
                Target t;
                t.experiment = e;
                t.species = *feeds_.back().index_of(r.ion);
                t.flux = static_cast<std::size_t>(
                    std::lower_bound(ex.fluxes.begin(), ex.fluxes.end(), r.jv_m_s) - ex.fluxes.begin());
                t.feed = r.feed_mol_m3;
                t.measured = r.permeate_mol_m3;
                t.sigma = r.sigma_mol_m3 > 0.0 ? r.sigma_mol_m3 : (unit_weights ? -1.0 : min_sigma);
                if (t.feed <= 0.0) throw ValidationError("record " + r.experiment_id + "/" + r.ion + " has zero feed");
                targets_.push_back(t);
            }
        }
        unit_weights_ = unit_weights;
    }

    const SpeciesPtr& species() const { return species_; }
    const std::vector<MixtureState>& feeds() const { return feeds_; }
    const std::vector<std::vector<double>>& grids() const { return grids_; }
    const std::vector<Target>& targets() const { return targets_; }

    // Model permeate per experiment (rows: flux grid points); throws on solver failure.
    MatrixXd permeate(std::size_t experiment, const MembraneParams& z, const SolverConfig& solver) const {
        const auto curve = solve_rejection(feeds_[experiment], z, solver, grids_[experiment]);
        MatrixXd out(static_cast<Eigen::Index>(curve.size()), feeds_[experiment].dim());
        for (std::size_t i = 0; i < curve.size(); ++i)
            out.row(static_cast<Eigen::Index>(i)) = curve[i].permeate.concentrations().transpose();
        return out;
    }

    // Squared weighted residual of one target given the model permeate.
    double term(const Target& t, double model_permeate, bool concentration_space) const {
        if (concentration_space) {
            const double s = unit_weights_ ? 1.0 : t.sigma;
            const double r = (model_permeate - t.measured) / s;
            return r * r;
        }
        const double s = unit_weights_ ? 1.0 : t.sigma / t.feed;
        const double r = ((1.0 - model_permeate / t.feed) - (1.0 - t.measured / t.feed)) / s;
        return r * r;
    }

    struct Evaluation {
        double value = 0.0;
        int failures = 0;
    };

    Evaluation evaluate(const MembraneParams& z, const CalibrationConfig& cfg) const {
        const std::size_t ne = feeds_.size();
        std::vector<double> partial(ne, 0.0);
        std::vector<char> failed(ne, 0);
        parallel_for(ne, cfg.jobs, [&](std::size_t e) {
            MatrixXd cp;
            try {
                cp = permeate(e, z, cfg.solver);
            } catch (const Error&) {
                failed[e] = 1;
                return;
            }
            double sum = 0.0;
            for (const auto& t : targets_)
                if (t.experiment == e)
                    sum += term(t, cp(static_cast<Eigen::Index>(t.flux), t.species), cfg.concentration_space);
            partial[e] = sum;
        });
        Evaluation out;
        for (std::size_t e = 0; e < ne; ++e) {
            if (failed[e]) {
                out.value += cfg.failure_penalty;
                ++out.failures;
            } else {
                out.value += partial[e];
            }
        }
        return out;
    }

private:
    SpeciesPtr species_;
    std::vector<MixtureState> feeds_;
    std::vector<std::vector<double>> grids_;
    std::vector<Target> targets_;
    bool unit_weights_ = false;
};

inline double objective(const MembraneParams& z, const CalibrationProblem& problem,
                        const CalibrationConfig& cfg = {}) {
    return problem.evaluate(z, cfg).value;
}

inline double objective(const MembraneParams& z, const MeasuredDataset& ds, const IonDatabase& db,
                        const CalibrationConfig& cfg = {}) {
    return objective(z, CalibrationProblem(ds, db), cfg);
}

struct TraceEntry {
    int evaluation = 0;
    double temperature = 0.0;
    double current = 0.0;
    double best = 0.0;
};

struct FitResult {
    MembraneParams membrane;
    double objective = 0.0;
    int evaluations = 0;
    int successful_evaluations = 0;
    std::vector<TraceEntry> trace;  // one entry per annealing step
};

inline nlohmann::json fit_result_to_json(const FitResult& r, std::uint64_t seed, int budget) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto& t : r.trace) trace.push_back({t.evaluation, t.temperature, t.current, t.best});
    return {{"membrane", membrane_to_json(r.membrane)},
            {"objective", r.objective},
            {"evaluations", r.evaluations},
            {"successful_evaluations", r.successful_evaluations},
            {"seed", seed},
            {"budget", budget},
            {"trace_columns", {"evaluation", "temperature", "current", "best"}},
            {"trace", trace}};
}

// Simulated annealing over the unit cube of the bounds with a bounded
// Nelder-Mead polish after every improvement of the best point.
inline FitResult fit_membrane(const CalibrationProblem& problem, const ParameterBounds& bounds, std::uint64_t seed,
                              int budget, const CalibrationConfig& cfg = {}, const MembraneParams& fixed = {}) {
    bounds.validate();
    if (budget < 1) throw InvalidInputError("calibration budget must be positive");
    using Point = std::array<double, 4>;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);

    FitResult res;
    Point best{};
    double best_f = std::numeric_limits<double>::infinity();
    auto f = [&](const Point& u) {
        const auto ev = problem.evaluate(detail::membrane_from_unit(u, bounds, fixed), cfg);
        ++res.evaluations;
        if (ev.failures == 0) ++res.successful_evaluations;
        if (ev.value < best_f) {
            best_f = ev.value;
            best = u;
        }
        return ev.value;
    };
    auto remaining = [&] { return budget - res.evaluations; };

    auto polish = [&](Point start, double f_start) {
        const int limit = std::min(cfg.polish_max_evals, remaining());
        if (limit < 5) return std::pair{start, f_start};
        const int stop_at = res.evaluations + limit;
        std::array<Point, 5> s;
        std::array<double, 5> fs;
        s[0] = start;
        fs[0] = f_start;
        for (int i = 0; i < 4; ++i) {
            s[i + 1] = start;
            const double step = start[i] + cfg.proposal_scale <= 1.0 ? cfg.proposal_scale : -cfg.proposal_scale;
            s[i + 1][i] = detail::reflect_unit(start[i] + step);
            fs[i + 1] = f(s[i + 1]);
        }
        auto clamp_point = [](Point p) {
            for (auto& v : p) v = detail::reflect_unit(v);
            return p;
        };
        while (res.evaluations < stop_at) {
            std::array<int, 5> order{0, 1, 2, 3, 4};
            std::sort(order.begin(), order.end(), [&](int a, int b) { return fs[a] < fs[b]; });
            std::array<Point, 5> s2;
            std::array<double, 5> f2;
            for (int i = 0; i < 5; ++i) {
                s2[i] = s[order[i]];
                f2[i] = fs[order[i]];
            }
            s = s2;
            fs = f2;
            double size = 0.0;
            for (int i = 1; i < 5; ++i)
                for (int j = 0; j < 4; ++j) size = std::max(size, std::abs(s[i][j] - s[0][j]));
            if (std::abs(fs[4] - fs[0]) <= cfg.polish_ftol * (std::abs(fs[0]) + 1e-300) && size <= cfg.polish_xtol) break;
            if (size <= cfg.polish_xtol * 1e-3) break;

            Point centroid{};
            for (int i = 0; i < 4; ++i)
                for (int j = 0; j < 4; ++j) centroid[j] += s[i][j] / 4.0;
            auto along = [&](double coef) {
                Point p;
                for (int j = 0; j < 4; ++j) p[j] = centroid[j] + coef * (s[4][j] - centroid[j]);
                return clamp_point(p);
            };
            const Point xr = along(-1.0);  // reflection
            const double fr = f(xr);
            if (fr < fs[0]) {
                if (res.evaluations >= stop_at) {
                    s[4] = xr;
                    fs[4] = fr;
                    break;
                }
                const Point xe = along(-2.0);  // expansion
                const double fe = f(xe);
                if (fe < fr) {
                    s[4] = xe;
                    fs[4] = fe;
                } else {
                    s[4] = xr;
                    fs[4] = fr;
                }
            } else if (fr < fs[3]) {
                s[4] = xr;
                fs[4] = fr;
            } else {
                if (res.evaluations >= stop_at) break;
                const bool outside = fr < fs[4];
                const Point xc = along(outside ? -0.5 : 0.5);  // contraction
                const double fc = f(xc);
                if (fc < std::min(fr, fs[4])) {
                    s[4] = xc;
                    fs[4] = fc;
                } else {
                    for (int i = 1; i < 5 && res.evaluations < stop_at; ++i) {  // shrink
                        for (int j = 0; j < 4; ++j) s[i][j] = s[0][j] + 0.5 * (s[i][j] - s[0][j]);
                        fs[i] = f(s[i]);
                    }
                }
            }
        }
        int arg = 0;
        for (int i = 1; i < 5; ++i)
            if (fs[i] < fs[arg]) arg = i;
        return std::pair{s[arg], fs[arg]};
    };

    Point x{0.5, 0.5, 0.5, 0.5};
    double fx = f(x);
    double temperature = std::max(cfg.initial_temperature_fraction * std::abs(fx), 1e-12);
    res.trace.push_back({res.evaluations, temperature, fx, best_f});
    while (remaining() > 0) {
        Point y;
        for (int j = 0; j < 4; ++j) y[j] = detail::reflect_unit(x[j] + cfg.proposal_scale * gauss(rng));
        const double previous_best = best_f;
        const double fy = f(y);
        const double u = unif(rng);
        if (fy <= fx || u < std::exp(-(fy - fx) / temperature)) {
            x = y;
            fx = fy;
        }
        if (fy < previous_best) {
            auto [p, fp] = polish(y, fy);
            if (fp <= fx) {
                x = p;
                fx = fp;
            }
        }
        temperature *= cfg.cooling;
        res.trace.push_back({res.evaluations, temperature, fx, best_f});
    }
    if (res.successful_evaluations == 0)
        throw CalibrationFailureError("no successful solver evaluation within the budget");
    res.membrane = detail::membrane_from_unit(best, bounds, fixed);
    res.objective = best_f;
    return res;
}

inline FitResult fit_membrane(const MeasuredDataset& ds, const IonDatabase& db, const ParameterBounds& bounds,
                              std::uint64_t seed, int budget, const CalibrationConfig& cfg = {}) {
    return fit_membrane(CalibrationProblem(ds, db), bounds, seed, budget, cfg);
}

// Synthetic records from a membrane: one row per (experiment, ion, flux).
inline MeasuredDataset synthesize_dataset(const std::vector<std::pair<std::string, MixtureState>>& feeds,
                                          const std::vector<double>& fluxes, const MembraneParams& z,
                                          const SolverConfig& solver, double relative_sigma,
                                          const std::string& provenance = "simulated") {
    std::vector<RejectionRecord> records;
    for (const auto& [id, feed] : feeds) {
        const auto curve = solve_rejection(feed, z, solver, fluxes);
        for (const auto& p : curve) {
            for (Eigen::Index j = 0; j < feed.dim(); ++j) {
                if (!feed.mask()[j]) continue;
                RejectionRecord r;
                r.experiment_id = id;
                r.ion = feed.species()[static_cast<std::size_t>(j)].name;
                r.valence = feed.species()[static_cast<std::size_t>(j)].valence;
                r.feed_mol_m3 = feed.concentration(j);
                r.jv_m_s = p.jv;
                r.permeate_mol_m3 = p.permeate.concentration(j);
                r.sigma_mol_m3 = relative_sigma * r.feed_mol_m3;
                r.provenance = provenance;
                records.push_back(std::move(r));
            }
        }
    }
    return make_dataset(std::move(records));
}

}  // namespace ionflux

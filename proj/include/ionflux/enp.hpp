#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ionflux/chem.hpp"
#include "ionflux/constants.hpp"
#include "ionflux/errors.hpp"
#include "ionflux/thermo.hpp"

namespace ionflux {

using Eigen::MatrixXd;

struct SherwoodCorrelation {
    double a = 0.2;
    double b = 0.57;
    double c = 0.40;
};

struct SolverConfig {
    int grid_points = 64;  // cells per domain; profiles have grid_points + 1 nodes
    double eta_psi = 0.10;
    double eta_c = 0.175;
    int max_iters = 50000;
    int max_outer_iters = 500;
    double tol_rel = 1e-6;
    double tol_en = 1e-8;

    SherwoodCorrelation sherwood;
    double hydraulic_diameter_m = 1e-3;
    double reynolds = 500.0;
    double kinematic_viscosity_m2_s = 8.93e-7;
    double reference_diffusivity_m2_s = 1.5e-9;  // sets the species-independent film thickness

    ActivityModel bulk_activity;  // gamma(0-) and permeate side
    ActivityModel pore_activity;  // gamma(0+); ideal unless configured
    PhysicalConstants constants;

    void validate() const {
        if (grid_points < 8) throw InvalidInputError("solver: grid_points must be >= 8");
        if (!(eta_psi > 0.0 && eta_psi <= 1.0)) throw InvalidInputError("solver: eta_psi must lie in (0, 1]");
        if (!(eta_c > 0.0 && eta_c <= 1.0)) throw InvalidInputError("solver: eta_c must lie in (0, 1]");
        if (max_iters < 1 || max_outer_iters < 1) throw InvalidInputError("solver: iteration limits must be positive");
        if (!(tol_rel > 0.0) || !(tol_en > 0.0)) throw InvalidInputError("solver: tolerances must be positive");
        if (!(hydraulic_diameter_m > 0.0)) throw InvalidFlowError("hydraulic diameter must be positive");
    }
};

// ---------------------------------------------------------------------------
// Mass transfer

inline double sherwood_number(const SherwoodCorrelation& corr, double reynolds, double schmidt) {
    if (!(reynolds > 0.0) || !(schmidt > 0.0)) throw InvalidFlowError("Reynolds and Schmidt numbers must be positive");
    return corr.a * std::pow(reynolds, corr.b) * std::pow(schmidt, corr.c);
}

inline double film_thickness(double hydraulic_diameter_m, double sherwood) {
    if (!(hydraulic_diameter_m > 0.0) || !(sherwood > 0.0)) throw InvalidFlowError("film thickness needs d_h, Sh > 0");
    return hydraulic_diameter_m / sherwood;
}

struct MassTransfer {
    double coefficient_m_s = 0.0;  // k_i
    double film_thickness_m = 0.0;  // delta_f, shared by all ions
    double sherwood = 0.0;          // Sh_i
};

inline MassTransfer mass_transfer(const SolverConfig& config, const IonSpecies& ion) {
    if (!(config.kinematic_viscosity_m2_s > 0.0) || !(ion.diffusivity_m2_s > 0.0) ||
        !(config.reference_diffusivity_m2_s > 0.0))
        throw InvalidFlowError("mass transfer: non-positive viscosity or diffusivity");
    MassTransfer mt;
    const double sc = config.kinematic_viscosity_m2_s / ion.diffusivity_m2_s;
    mt.sherwood = sherwood_number(config.sherwood, config.reynolds, sc);
    mt.coefficient_m_s = mt.sherwood * ion.diffusivity_m2_s / config.hydraulic_diameter_m;
    const double sc_ref = config.kinematic_viscosity_m2_s / config.reference_diffusivity_m2_s;
    mt.film_thickness_m = film_thickness(config.hydraulic_diameter_m,
                                         sherwood_number(config.sherwood, config.reynolds, sc_ref));
    return mt;
}

inline double film_thickness(const SolverConfig& config) {
    const double sc_ref = config.kinematic_viscosity_m2_s / config.reference_diffusivity_m2_s;
    return film_thickness(config.hydraulic_diameter_m, sherwood_number(config.sherwood, config.reynolds, sc_ref));
}

// ---------------------------------------------------------------------------
// Under-relaxation

inline VectorXd update_potential(const VectorXd& psi_prev, const VectorXd& psi_curr, double eta_psi) {
    if (psi_prev.size() != psi_curr.size()) throw InvalidInputError("update_potential: length mismatch");
    if (!(eta_psi > 0.0 && eta_psi <= 1.0)) throw InvalidInputError("update_potential: eta_psi must lie in (0, 1]");
    return psi_prev + eta_psi * (psi_curr - psi_prev);
}

// Multiplicative update whose relative step never exceeds eta_c, so the
// iterate stays positive for eta_c < 1.
inline double update_concentration(double c_prev, double c_curr, double eta_c) {
    if (!(c_prev > 0.0)) throw InvalidStateError("update_concentration: previous concentration must be positive");
    if (!(eta_c > 0.0 && eta_c <= 1.0)) throw InvalidInputError("update_concentration: eta_c must lie in (0, 1]");
    const double delta = c_curr - c_prev;
    if (delta == 0.0) return c_prev;
    const double cap = std::min(1.0, std::abs(c_prev / delta));
    return c_prev * (1.0 + eta_c * cap * (delta / c_prev));
}

// ---------------------------------------------------------------------------
// Extended Nernst-Planck marches
//
// Both domains are marched from their upstream face with first-order upwind
// differences. The electric field comes from differentiating the
// electroneutrality closure, sum z_i dC_i/dx = 0, which gives
//   dPhi/dx = sum z_i s_i / sum z_i^2 C_i,  s_i = J_v/(K_d D_i) (K_c C_i - C_p,i)
// with Phi = F psi / RT, so neutrality is preserved node to node.

struct EnpMarch {
    VectorXd end;        // concentrations at the downstream face
    MatrixXd profile;    // (cells + 1) x n
    VectorXd phi;        // dimensionless potential relative to the upstream face
    bool clamped = false;
};

struct EnpCoefficients {
    std::span<const int> valence;
    std::span<const double> diffusivity;  // D_i K_d,i
    std::span<const double> convective;   // K_c,i
};

inline EnpMarch enp_march(const VectorXd& start, const VectorXd& permeate, const EnpCoefficients& coef, double jv,
                          double length_m, int cells, bool keep_profile = true) {
    const auto n = start.size();
    EnpMarch out;
    out.end = start;
    if (keep_profile) {
        out.profile.resize(cells + 1, n);
        out.profile.row(0) = start.transpose();
        out.phi = VectorXd::Zero(cells + 1);
    }
    const double h = length_m / cells;
    VectorXd s(n);
    VectorXd& c = out.end;
    double phi = 0.0;
    for (int k = 0; k < cells; ++k) {
        double zs = 0.0, zzc = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const int z = coef.valence[static_cast<std::size_t>(i)];
            s[i] = jv / coef.diffusivity[static_cast<std::size_t>(i)] *
                   (coef.convective[static_cast<std::size_t>(i)] * c[i] - permeate[i]);
            zs += z * s[i];
            zzc += double(z) * z * c[i];
        }
        const double dphi = zzc > 0.0 ? zs / zzc : 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            c[i] += h * (s[i] - coef.valence[static_cast<std::size_t>(i)] * c[i] * dphi);
            // A tiny positive floor keeps the exit partition solvable while the
            // iterate is still far from the fixed point.
            const double floor = 1e-12 * start[i];
            if (c[i] < floor) {
                c[i] = floor;
                out.clamped = true;
            }
        }
        phi += h * dphi;
        if (keep_profile) {
            out.profile.row(k + 1) = c.transpose();
            out.phi[k + 1] = phi;
        }
    }
    if (!keep_profile) out.phi = VectorXd::Constant(1, phi);
    return out;
}

// Unhindered film march on [-delta_f, 0] from the feed to the wall, for raw
// valence/diffusivity arrays (uncharged tracers allowed).
inline EnpMarch film_march(const VectorXd& feed, const VectorXd& permeate, std::span<const int> valence,
                           std::span<const double> diffusivity, double jv, double delta_f, int cells) {
    std::vector<double> ones(static_cast<std::size_t>(feed.size()), 1.0);
    return enp_march(feed, permeate, EnpCoefficients{valence, diffusivity, ones}, jv, delta_f, cells);
}

namespace detail {

// Indices of the masked-in species.
inline std::vector<Eigen::Index> active_indices(const Mask& m) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index j = 0; j < m.size(); ++j)
        if (m[j]) idx.push_back(j);
    return idx;
}

inline VectorXd gather(const VectorXd& v, const std::vector<Eigen::Index>& idx) {
    VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[idx[k]];
    return out;
}

inline VectorXd scatter(const VectorXd& v, const std::vector<Eigen::Index>& idx, Eigen::Index d) {
    VectorXd out = VectorXd::Zero(d);
    for (std::size_t k = 0; k < idx.size(); ++k) out[idx[k]] = v[static_cast<Eigen::Index>(k)];
    return out;
}

inline double closure_residual(const VectorXd& c, std::span<const int> z, double fixed_charge) {
    double net = fixed_charge, total = std::abs(fixed_charge);
    for (Eigen::Index i = 0; i < c.size(); ++i) {
        net += z[static_cast<std::size_t>(i)] * c[i];
        total += std::abs(z[static_cast<std::size_t>(i)]) * c[i];
    }
    return total > 0.0 ? std::abs(net) / total : 0.0;
}

}  // namespace detail

struct FilmResult {
    MixtureState wall;
    VectorXd x;      // nodes from -delta_f to 0 [m]
    MatrixXd profile;
    VectorXd psi;    // V, relative to the feed bulk
    double closure_residual = 0.0;  // max relative sum z C over the film
};

inline FilmResult film_solve(const MixtureState& feed, const VectorXd& permeate_guess, double jv,
                             const SolverConfig& config) {
    const auto idx = detail::active_indices(feed.mask());
    const auto& species = feed.species();
    std::vector<int> z;
    std::vector<double> dif;
    for (auto j : idx) {
        z.push_back(species[static_cast<std::size_t>(j)].valence);
        dif.push_back(species[static_cast<std::size_t>(j)].diffusivity_m2_s);
    }
    const double delta = film_thickness(config);
    const int cells = config.grid_points;
    const VectorXd cf = detail::gather(feed.concentrations(), idx);
    const VectorXd cp = detail::gather(permeate_guess, idx);
    const EnpMarch march = film_march(cf, cp, z, dif, jv, delta, cells);

    FilmResult res;
    std::vector<double> trace(march.phi.data(), march.phi.data() + march.phi.size());
    if (march.clamped || !march.end.allFinite())
        throw FilmDivergenceError("film march produced a negative or non-finite concentration", std::move(trace));
    const auto d = feed.dim();
    res.x = VectorXd::LinSpaced(cells + 1, -delta, 0.0);
    res.profile = MatrixXd::Zero(cells + 1, d);
    for (std::size_t k = 0; k < idx.size(); ++k) res.profile.col(idx[k]) = march.profile.col(static_cast<Eigen::Index>(k));
    res.psi = march.phi * config.constants.thermal_voltage();
    for (int k = 0; k <= cells; ++k)
        res.closure_residual = std::max(res.closure_residual,
                                        detail::closure_residual(march.profile.row(k).transpose(), z, 0.0));
    res.wall = MixtureState(feed.species_ptr(), detail::scatter(march.end, idx, d), feed.mask(), jv);
    return res;
}

// ---------------------------------------------------------------------------
// Pore interior

// Iterate carried between pore solves (continuation across flux points).
struct PoreIterate {
    VectorXd permeate;  // full-length, mol/m3
    VectorXd psi;       // relaxed potential vector (pore nodes + exit jump), dimensionless
};

struct PoreSolution {
    VectorXd permeate;   // full length d; exit partition with the solved exit potential
    VectorXd x;          // pore nodes [m]
    MatrixXd profiles;   // (cells + 1) x d
    VectorXd psi;        // V relative to the wall solution, at pore nodes
    double entrance_potential_v = 0.0;
    double exit_potential_v = 0.0;  // psi(dx-) - psi(permeate)
    double pore_closure = 0.0;      // max relative |sum z C + chi_d|
    double permeate_closure = 0.0;  // relative |sum z C_p|
    double fixed_point_residual = 0.0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> residual_history;
    PoreIterate iterate;
    VectorXd march_permeate;  // C_p used to set the ion fluxes of the final march
};

struct IonTransportCoefficients {
    std::vector<Eigen::Index> active;    // masked-in, not sterically excluded
    std::vector<Eigen::Index> excluded;  // lambda >= 1
    std::vector<int> valence;
    std::vector<double> hindered_diffusivity;  // K_d D
    std::vector<double> convective;            // K_c
    std::vector<double> equilibrium;           // phi_S phi_Di
};

inline IonTransportCoefficients transport_coefficients(const SpeciesList& species, const Mask& mask,
                                                       const MembraneParams& membrane, const PhysicalConstants& k) {
    IonTransportCoefficients t;
    for (Eigen::Index j = 0; j < mask.size(); ++j) {
        if (!mask[j]) continue;
        const auto& ion = species[static_cast<std::size_t>(j)];
        const double lambda = ion.stokes_radius_nm / membrane.pore_radius_nm;
        if (lambda >= 1.0) {
            t.excluded.push_back(j);
            continue;
        }
        const auto hc = hindrance_coefficients(lambda);
        t.active.push_back(j);
        t.valence.push_back(ion.valence);
        t.hindered_diffusivity.push_back(hc.diffusive * ion.diffusivity_m2_s);
        t.convective.push_back(hc.convective);
        t.equilibrium.push_back(steric_partition(lambda) * dielectric_partition(ion, membrane, k));
    }
    return t;
}

// Backward hindered march from the pore exit to the entrance. Marching against
// the flow is the stable direction for the convective mode and never forms
// small differences for strongly excluded co-ions. Row k of the profile is
// node x_k; phi is relative to the exit node.
inline EnpMarch enp_march_backward(const VectorXd& exit, const VectorXd& permeate, const EnpCoefficients& coef,
                                   double jv, double length_m, int cells) {
    const auto n = exit.size();
    EnpMarch out;
    out.profile.resize(cells + 1, n);
    out.profile.row(cells) = exit.transpose();
    out.phi = VectorXd::Zero(cells + 1);
    const double h = length_m / cells;
    VectorXd c = exit;
    VectorXd s(n);
    double phi = 0.0;
    for (int k = cells - 1; k >= 0; --k) {
        double zs = 0.0, zzc = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto u = static_cast<std::size_t>(i);
            s[i] = jv / coef.diffusivity[u] * (coef.convective[u] * c[i] - permeate[i]);
            zs += coef.valence[u] * s[i];
            zzc += double(coef.valence[u]) * coef.valence[u] * c[i];
        }
        const double dphi = zzc > 0.0 ? zs / zzc : 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            c[i] -= h * (s[i] - coef.valence[static_cast<std::size_t>(i)] * c[i] * dphi);
            const double floor = 1e-12 * exit[i];
            if (c[i] < floor) {
                c[i] = floor;
                out.clamped = true;
            }
        }
        phi -= h * dphi;
        out.profile.row(k) = c.transpose();
        out.phi[k] = phi;
    }
    out.end = c;
    return out;
}

// Solve of the pore for a given wall composition. Each iteration partitions
// the permeate iterate into the pore exit, marches the hindered equations back
// to the entrance and compares with the entrance partition of the wall. The
// new iterate C(n) is a Gauss-Newton step on that mismatch (plus permeate
// neutrality); the bracket-corrected concentration relaxation is applied to it
// and the potential relaxation to the potential vector.
inline PoreSolution pore_solve(const MixtureState& wall, double jv, const MembraneParams& membrane,
                               const SolverConfig& config, const PoreIterate* warm = nullptr) {
    config.validate();
    membrane.validate();
    const auto& k = config.constants;
    const auto d = wall.dim();
    const auto& species = wall.species();
    const auto tc = transport_coefficients(species, wall.mask(), membrane, k);
    const auto& act = tc.active;
    const auto n = static_cast<Eigen::Index>(act.size());
    const int cells = config.grid_points;
    const double inv_vt = k.inverse_thermal_voltage();
    const double phi_max = 0.5 * inv_vt;
    const double length = membrane.thickness_m();
    const double chi = membrane.charge_density_mol_m3;

    PoreSolution sol;
    sol.x = VectorXd::LinSpaced(cells + 1, 0.0, length);
    sol.profiles = MatrixXd::Zero(cells + 1, d);
    sol.permeate = VectorXd::Zero(d);
    sol.psi = VectorXd::Zero(cells + 1);
    if (n == 0) {
        sol.converged = true;
        return sol;
    }

    const VectorXd gamma_wall = activity_coefficients(wall, k.temperature, config.bulk_activity);
    const DonnanResult entrance = solve_donnan(wall, gamma_wall, membrane, config.pore_activity, k);
    const VectorXd c0 = detail::gather(entrance.pore, act);
    const double phi0 = entrance.potential_v * inv_vt;
    for (Eigen::Index i = 0; i < n; ++i)
        if (!(c0[i] > 0.0)) throw InfeasiblePartitioningError("entrance partition underflowed for an active ion");

    const EnpCoefficients coef{tc.valence, tc.hindered_diffusivity, tc.convective};
    const VectorXd equilibrium = Eigen::Map<const VectorXd>(tc.equilibrium.data(), n);

    auto active_gamma = [&](const VectorXd& c_active, const ActivityModel& model) {
        if (model.kind == ActivityKind::ideal) return VectorXd::Ones(n).eval();
        const VectorXd full = detail::scatter(c_active, act, d);
        return detail::gather(activity_coefficients(species, full, wall.mask(), k.temperature, model), act);
    };

    // Exit partition of a permeate vector into the pore: C(dx-) = a exp(-z Phi'),
    // a = C_p gamma_p phi_S phi_Di / gamma(dx-), Phi' = Phi(dx-) - Phi(permeate)
    // chosen so that sum z C(dx-) + chi_d = 0.
    struct ExitState {
        VectorXd pore;
        double jump = 0.0;
    };
    auto exit_partition = [&](const VectorXd& cp, double guess) {
        const VectorXd base = cp.cwiseProduct(active_gamma(cp, config.bulk_activity)).cwiseProduct(equilibrium);
        VectorXd gamma_in = VectorXd::Ones(n);
        ExitState e;
        e.jump = guess;
        for (int pass = 0; pass < 100; ++pass) {
            const VectorXd a = base.cwiseQuotient(gamma_in);
            e.jump = partition_potential_root(std::span<const double>(a.data(), static_cast<std::size_t>(n)),
                                              tc.valence, chi, phi_max, e.jump)
                         .phi;
            e.pore.resize(n);
            for (Eigen::Index i = 0; i < n; ++i)
                e.pore[i] = a[i] * std::exp(-tc.valence[static_cast<std::size_t>(i)] * e.jump);
            if (config.pore_activity.kind == ActivityKind::ideal) break;
            const VectorXd next = active_gamma(e.pore, config.pore_activity);
            const double change = (next - gamma_in).cwiseAbs().maxCoeff();
            gamma_in = next;
            if (change < 1e-13) break;
        }
        return e;
    };

    // Residuals: log mismatch at the entrance (n) and permeate charge balance (1).
    auto residuals = [&](const VectorXd& cp, EnpMarch& m, ExitState& e, double guess) {
        e = exit_partition(cp, guess);
        m = enp_march_backward(e.pore, cp, coef, jv, length, cells);
        VectorXd r(n + 1);
        for (Eigen::Index i = 0; i < n; ++i) r[i] = std::log(m.end[i] / c0[i]);
        r[n] = detail::closure_residual(cp, tc.valence, 0.0);
        double net = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) net += tc.valence[static_cast<std::size_t>(i)] * cp[i];
        if (net < 0.0) r[n] = -r[n];
        return r;
    };

    VectorXd cp(n);
    VectorXd psi;  // [Phi at pore nodes, Phi of the permeate], relative to the wall
    if (warm && warm->permeate.size() == d && warm->psi.size() == cells + 2) {
        cp = detail::gather(warm->permeate, act);
        psi = warm->psi;
        for (Eigen::Index i = 0; i < n; ++i)
            if (!(cp[i] > 0.0)) cp[i] = wall.concentration(act[static_cast<std::size_t>(i)]);
    } else {
        // Zero-flux limit: the permeate equals the wall composition.
        for (Eigen::Index i = 0; i < n; ++i) cp[i] = wall.concentration(act[static_cast<std::size_t>(i)]);
    }

    EnpMarch march, probe;
    ExitState exit, probe_exit;
    VectorXd fresh(cells + 2);
    MatrixXd jac(n + 1, n);
    for (int it = 1; it <= config.max_iters; ++it) {
        const double guess = psi.size() == cells + 2 ? psi[cells] - psi[cells + 1] : 0.0;
        const VectorXd r = residuals(cp, march, exit, guess);

        // Potential vector from this iterate, anchored at the entrance Donnan jump.
        fresh.head(cells + 1) = (march.phi.array() - march.phi[0] + phi0).matrix();
        fresh[cells + 1] = fresh[cells] - exit.jump;
        psi = (psi.size() == cells + 2) ? update_potential(psi, fresh, config.eta_psi) : fresh;
        const double psi_gap = (psi - fresh).cwiseAbs().maxCoeff() / std::max(1.0, fresh.cwiseAbs().maxCoeff());

        const double residual = r.head(n).cwiseAbs().maxCoeff();
        const double permeate_closure = std::abs(r[n]);
        sol.residual_history.push_back(residual);

        VectorXd target = cp;
        if (residual > 0.0 || permeate_closure > 0.0) {
            for (Eigen::Index j = 0; j < n; ++j) {
                VectorXd shifted = cp;
                const double step = 1e-7;
                shifted[j] *= std::exp(step);
                jac.col(j) = (residuals(shifted, probe, probe_exit, exit.jump) - r) / step;
            }
            const VectorXd dx = jac.colPivHouseholderQr().solve(-r);
            if (dx.allFinite()) target = cp.array() * dx.array().exp();
        }

        VectorXd next(n);
        double change = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            next[i] = update_concentration(cp[i], target[i], config.eta_c);
            if (!(next[i] > 0.0) || !std::isfinite(next[i]))
                throw NumericalBreakdownError("pore iteration produced a non-positive permeate concentration");
            change = std::max(change, std::abs(next[i] - cp[i]) / cp[i]);
        }

        if (residual <= config.tol_rel && change <= config.tol_rel && psi_gap <= config.tol_rel &&
            permeate_closure <= config.tol_en && !march.clamped) {
            sol.converged = true;
            sol.iterations = it;
            sol.fixed_point_residual = residual;
            sol.exit_potential_v = exit.jump / inv_vt;
            sol.march_permeate = detail::scatter(cp, act, d);
            // Report the permeate exactly neutral; the shift is below tol_en.
            VectorXi z_active(n);
            for (Eigen::Index i = 0; i < n; ++i) z_active[i] = tc.valence[static_cast<std::size_t>(i)];
            Mask on(static_cast<std::size_t>(n), true);
            VectorXd neutral = project_electroneutral(cp, z_active, on).cwiseMax(0.0);
            sol.permeate = detail::scatter(neutral, act, d);
            sol.permeate_closure = detail::closure_residual(neutral, tc.valence, 0.0);
            break;
        }
        cp = next;
    }
    if (!sol.converged)
        throw NonConvergenceError("pore iteration did not converge within max_iters", sol.residual_history);

    sol.entrance_potential_v = entrance.potential_v;
    for (std::size_t j = 0; j < act.size(); ++j) sol.profiles.col(act[j]) = march.profile.col(static_cast<Eigen::Index>(j));
    sol.psi = fresh.head(cells + 1) / inv_vt;
    for (int row = 0; row <= cells; ++row)
        sol.pore_closure = std::max(sol.pore_closure,
                                    detail::closure_residual(march.profile.row(row).transpose(), tc.valence, chi));
    sol.iterate.permeate = sol.march_permeate;
    sol.iterate.psi = psi;
    return sol;
}

// ---------------------------------------------------------------------------
// Coupled film + pore solve at one flux, and rejection curves

struct TransportSolution {
    MixtureState permeate;
    MixtureState wall;
    VectorXd x;                 // pore nodes [m]
    VectorXd potential_profile; // V at pore nodes, relative to the feed bulk
    MatrixXd pore_profiles;     // (cells + 1) x d [mol/m3]
    VectorXd ion_fluxes;        // mol/(m2 s)
    VectorXd rejections;        // observed, 1 - C_p/C_f
    VectorXd real_rejections;   // 1 - C_p/C_w
    int iterations = 0;         // pore iterations summed over outer passes
    int outer_iterations = 0;
    bool converged = false;
    double pore_closure = 0.0;
    double film_closure = 0.0;
    double permeate_closure = 0.0;
    double entrance_potential_v = 0.0;
    double exit_potential_v = 0.0;
    VectorXd march_permeate;  // permeate vector that set the ion fluxes in the final march
    PoreIterate iterate;
};

inline VectorXd observed_rejection(const VectorXd& feed, const VectorXd& permeate, const Mask& mask) {
    VectorXd r = VectorXd::Zero(feed.size());
    for (Eigen::Index j = 0; j < feed.size(); ++j)
        if (mask[j] && feed[j] > 0.0) r[j] = 1.0 - permeate[j] / feed[j];
    return r;
}

inline TransportSolution solve_point(const MixtureState& feed, double jv, const MembraneParams& membrane,
                                     const SolverConfig& config, const PoreIterate* warm = nullptr) {
    config.validate();
    membrane.validate();
    if (!(jv >= 0.0) || !std::isfinite(jv)) throw InvalidInputError("flux must be finite and non-negative");
    const auto d = feed.dim();
    const auto& k = config.constants;
    TransportSolution out;
    out.x = VectorXd::LinSpaced(config.grid_points + 1, 0.0, membrane.thickness_m());

    const auto tc = transport_coefficients(feed.species(), feed.mask(), membrane, k);
    if (jv == 0.0) {
        // Equilibrium limit: no separation for ions that can enter the pore.
        VectorXd cp = feed.concentrations();
        for (auto j : tc.excluded) cp[j] = 0.0;
        out.permeate = MixtureState(feed.species_ptr(), cp, feed.mask(), 0.0);
        out.wall = feed.with_flux(0.0);
        out.potential_profile = VectorXd::Zero(out.x.size());
        out.pore_profiles = MatrixXd::Zero(out.x.size(), d);
        out.ion_fluxes = VectorXd::Zero(d);
        out.rejections = observed_rejection(feed.concentrations(), cp, feed.mask());
        out.real_rejections = out.rejections;
        out.converged = true;
        out.march_permeate = cp;
        return out;
    }

    VectorXd cp_guess;
    PoreIterate pore_warm;
    bool have_warm = false;
    if (warm && warm->permeate.size() == d) {
        cp_guess = warm->permeate;
        pore_warm = *warm;
        have_warm = true;
    } else {
        // Cold start from the zero-flux limit; excluded ions never reach the permeate.
        cp_guess = feed.concentrations();
        for (auto j : tc.excluded) cp_guess[j] = 0.0;
    }

    // The inner solve must resolve the permeate more finely than the outer test.
    SolverConfig inner = config;
    inner.tol_rel = 1e-2 * config.tol_rel;

    std::vector<double> trace;
    PoreSolution pore;
    FilmResult film;
    bool done = false;
    for (int outer = 1; outer <= config.max_outer_iters; ++outer) {
        film = film_solve(feed, cp_guess, jv, config);
        pore = pore_solve(film.wall, jv, membrane, inner, have_warm ? &pore_warm : nullptr);
        out.iterations += pore.iterations;
        double change = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            if (!feed.mask()[j]) continue;
            const double ref = std::max(pore.permeate[j], std::numeric_limits<double>::min());
            if (pore.permeate[j] == 0.0 && cp_guess[j] == 0.0) continue;
            change = std::max(change, std::abs(pore.permeate[j] - cp_guess[j]) / ref);
        }
        trace.push_back(change);
        cp_guess = pore.permeate;
        pore_warm = pore.iterate;
        have_warm = true;
        out.outer_iterations = outer;
        if (change <= config.tol_rel) {
            done = true;
            break;
        }
    }
    if (!done) throw FilmDivergenceError("film/pore coupling did not converge", std::move(trace));

    out.converged = true;
    out.wall = film.wall;
    out.permeate = MixtureState(feed.species_ptr(), pore.permeate, feed.mask(), jv);
    const double film_drop = film.psi[film.psi.size() - 1];
    out.potential_profile = pore.psi.array() + film_drop;
    out.pore_profiles = pore.profiles;
    out.ion_fluxes = pore.permeate * jv;
    out.rejections = observed_rejection(feed.concentrations(), pore.permeate, feed.mask());
    out.real_rejections = observed_rejection(film.wall.concentrations(), pore.permeate, feed.mask());
    out.pore_closure = pore.pore_closure;
    out.film_closure = film.closure_residual;
    out.permeate_closure = pore.permeate_closure;
    out.entrance_potential_v = pore.entrance_potential_v;
    out.exit_potential_v = pore.exit_potential_v;
    out.march_permeate = pore.march_permeate;
    out.iterate = pore.iterate;
    return out;
}

struct RejectionPoint {
    double jv = 0.0;
    VectorXd rejections;
    MixtureState permeate;
    TransportSolution solution;
};

inline std::vector<RejectionPoint> solve_rejection(const MixtureState& feed, const MembraneParams& membrane,
                                                   const SolverConfig& config, const std::vector<double>& flux_grid) {
    for (std::size_t i = 0; i < flux_grid.size(); ++i) {
        if (!(flux_grid[i] >= 0.0) || !std::isfinite(flux_grid[i]))
            throw InvalidInputError("flux grid must be finite and non-negative");
        if (i > 0 && flux_grid[i] < flux_grid[i - 1]) throw InvalidInputError("flux grid must be ascending");
    }
    std::vector<RejectionPoint> out;
    out.reserve(flux_grid.size());
    std::optional<PoreIterate> warm;
    for (double jv : flux_grid) {
        try {
            auto sol = solve_point(feed, jv, membrane, config, warm ? &*warm : nullptr);
            if (jv > 0.0) warm = sol.iterate;
            RejectionPoint p;
            p.jv = jv;
            p.rejections = sol.rejections;
            p.permeate = sol.permeate;
            p.solution = std::move(sol);
            out.push_back(std::move(p));
        } catch (const FluxPointError&) {
            throw;
        } catch (const Error& e) {
            throw FluxPointError(jv, e.what());
        }
    }
    return out;
}

// Flux through each pore cell recomputed from the discrete flux expression
// (downstream node values, as in the backward march) on the stored profiles.
inline MatrixXd pore_flux_profile(const TransportSolution& sol, const MembraneParams& membrane,
                                  const SolverConfig& config) {
    const auto& species = sol.permeate.species();
    const auto d = sol.permeate.dim();
    const auto cells = sol.x.size() - 1;
    const double h = membrane.thickness_m() / static_cast<double>(cells);
    const double inv_vt = config.constants.inverse_thermal_voltage();
    const double jv = sol.permeate.flux();
    MatrixXd flux = MatrixXd::Zero(cells, d);
    for (Eigen::Index j = 0; j < d; ++j) {
        if (!sol.permeate.mask()[j]) continue;
        const auto& ion = species[static_cast<std::size_t>(j)];
        const double lambda = ion.stokes_radius_nm / membrane.pore_radius_nm;
        if (lambda >= 1.0) continue;
        const auto hc = hindrance_coefficients(lambda);
        const double kd = hc.diffusive * ion.diffusivity_m2_s;
        for (Eigen::Index c = 0; c < cells; ++c) {
            const double cl = sol.pore_profiles(c, j), cr = sol.pore_profiles(c + 1, j);
            const double dphi = (sol.potential_profile[c + 1] - sol.potential_profile[c]) * inv_vt;
            flux(c, j) = -kd * (cr - cl) / h + hc.convective * cr * jv - kd * cr * ion.valence * dphi / h;
        }
    }
    return flux;
}

}  // namespace ionflux

#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>

#include "ionflux/chem.hpp"
#include "ionflux/constants.hpp"
#include "ionflux/errors.hpp"

namespace ionflux {

struct PitzerPair {
    double beta0 = 0.0;
    double beta1 = 0.0;
    double beta2 = 0.0;  // only meaningful for 2:2 pairs
    double cphi = 0.0;
};

enum class ActivityKind { ideal, davies, pitzer_kim };

inline ActivityKind activity_kind_from_string(const std::string& s) {
    if (s == "ideal") return ActivityKind::ideal;
    if (s == "davies") return ActivityKind::davies;
    if (s == "pitzer" || s == "pitzer_kim") return ActivityKind::pitzer_kim;
    throw InvalidInputError("unknown activity model: " + s);
}

struct ActivityModel {
    ActivityKind kind = ActivityKind::ideal;
    std::map<std::pair<std::string, std::string>, PitzerPair> pitzer;  // keyed (cation, anion)
    double a_phi = 0.3915;     // Debye-Hueckel osmotic slope, kg^1/2 mol^-1/2, 25 C
    double b = 1.2;            // kg^1/2 mol^-1/2
    double davies_a = 0.5091;  // log10 slope, 25 C

    static ActivityModel ideal() { return {}; }
    static ActivityModel davies() {
        ActivityModel m;
        m.kind = ActivityKind::davies;
        return m;
    }
    static ActivityModel pitzer_kim(std::map<std::pair<std::string, std::string>, PitzerPair> params) {
        ActivityModel m;
        m.kind = ActivityKind::pitzer_kim;
        m.pitzer = std::move(params);
        return m;
    }

    const PitzerPair* pair(const std::string& cation, const std::string& anion) const {
        auto it = pitzer.find({cation, anion});
        return it == pitzer.end() ? nullptr : &it->second;
    }
};

inline std::map<std::pair<std::string, std::string>, PitzerPair> pitzer_params_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidInputError("pitzer parameter file must be a JSON object");
    std::map<std::pair<std::string, std::string>, PitzerPair> out;
    for (const auto& [key, val] : j.items()) {
        const auto bar = key.find('|');
        if (bar == std::string::npos || bar == 0 || bar + 1 == key.size())
            throw InvalidInputError("pitzer key must be CATION|ANION: " + key);
        PitzerPair p;
        p.beta0 = val.at("beta0").get<double>();
        p.beta1 = val.at("beta1").get<double>();
        p.cphi = val.at("cphi").get<double>();
        if (val.contains("beta2")) p.beta2 = val.at("beta2").get<double>();
        out[{key.substr(0, bar), key.substr(bar + 1)}] = p;
    }
    return out;
}

inline ActivityModel load_pitzer_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInputError("cannot open pitzer parameter file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError("pitzer file " + path + ": " + e.what());
    }
    return ActivityModel::pitzer_kim(pitzer_params_from_json(j));
}

namespace detail {

// g(x) = 2[1 - (1+x)e^-x]/x^2 and g'(x) = -2[1 - (1+x+x^2/2)e^-x]/x^2, with
// series near zero where the closed forms cancel.
inline double pitzer_g(double x) {
    if (x < 1e-3) return 1.0 - 2.0 * x / 3.0 + x * x / 4.0 - x * x * x / 15.0;
    return 2.0 * (1.0 - (1.0 + x) * std::exp(-x)) / (x * x);
}

inline double pitzer_gp(double x) {
    if (x < 1e-3) return -x / 3.0 + x * x / 4.0 - x * x * x / 10.0;
    return -2.0 * (1.0 - (1.0 + x + 0.5 * x * x) * std::exp(-x)) / (x * x);
}

}  // namespace detail

// Concentrations in mol/m3 are converted to molality assuming 1 kg water per
// litre. Masked-out species get gamma = 1. Parameters are 25 C values; the
// temperature argument is accepted for interface symmetry only.
inline VectorXd activity_coefficients(const SpeciesList& species, const VectorXd& c_mol_m3, const Mask& mask,
                                      double /*temperature*/, const ActivityModel& model) {
    const auto d = c_mol_m3.size();
    VectorXd gamma = VectorXd::Ones(d);
    if (model.kind == ActivityKind::ideal) return gamma;

    VectorXd m = VectorXd::Zero(d);
    double ionic = 0.0, zsum = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
        if (!mask[j]) continue;
        m[j] = std::max(c_mol_m3[j], 0.0) * 1e-3;
        const int z = species[static_cast<std::size_t>(j)].valence;
        ionic += 0.5 * m[j] * z * z;
        zsum += m[j] * std::abs(z);
    }

    if (model.kind == ActivityKind::davies) {
        const double s = std::sqrt(ionic);
        const double bracket = s / (1.0 + s) - 0.3 * ionic;
        for (Eigen::Index j = 0; j < d; ++j) {
            if (!mask[j]) continue;
            const int z = species[static_cast<std::size_t>(j)].valence;
            gamma[j] = std::pow(10.0, -model.davies_a * z * z * bracket);
        }
        return gamma;
    }

    // Pitzer-Kim: every cation-anion pair present needs parameters.
    for (Eigen::Index c = 0; c < d; ++c) {
        if (!mask[c] || species[static_cast<std::size_t>(c)].valence < 0) continue;
        for (Eigen::Index a = 0; a < d; ++a) {
            if (!mask[a] || species[static_cast<std::size_t>(a)].valence > 0) continue;
            if (!model.pair(species[static_cast<std::size_t>(c)].name, species[static_cast<std::size_t>(a)].name))
                throw IncompleteModelError("missing Pitzer parameters for " + species[static_cast<std::size_t>(c)].name +
                                           "|" + species[static_cast<std::size_t>(a)].name);
        }
    }
    if (ionic <= 0.0) return gamma;

    const double s = std::sqrt(ionic);
    const double fg = -model.a_phi * (s / (1.0 + model.b * s) + (2.0 / model.b) * std::log1p(model.b * s));

    // Pair quantities B, B', C for every present (cation, anion).
    Eigen::MatrixXd bmat = Eigen::MatrixXd::Zero(d, d);
    Eigen::MatrixXd cmat = Eigen::MatrixXd::Zero(d, d);
    double fsum = fg, csum = 0.0;
    for (Eigen::Index c = 0; c < d; ++c) {
        const auto& ci = species[static_cast<std::size_t>(c)];
        if (!mask[c] || ci.valence < 0) continue;
        for (Eigen::Index a = 0; a < d; ++a) {
            const auto& ai = species[static_cast<std::size_t>(a)];
            if (!mask[a] || ai.valence > 0) continue;
            const PitzerPair& p = *model.pair(ci.name, ai.name);
            const bool two_two = std::abs(ci.valence) == 2 && std::abs(ai.valence) == 2;
            const double alpha1 = two_two ? 1.4 : 2.0;
            const double alpha2 = 12.0;
            double bv = p.beta0 + p.beta1 * detail::pitzer_g(alpha1 * s);
            double bp = p.beta1 * detail::pitzer_gp(alpha1 * s) / ionic;
            if (two_two) {
                bv += p.beta2 * detail::pitzer_g(alpha2 * s);
                bp += p.beta2 * detail::pitzer_gp(alpha2 * s) / ionic;
            }
            const double cv = p.cphi / (2.0 * std::sqrt(double(std::abs(ci.valence * ai.valence))));
            bmat(c, a) = bv;
            cmat(c, a) = cv;
            fsum += m[c] * m[a] * bp;
            csum += m[c] * m[a] * cv;
        }
    }

    for (Eigen::Index i = 0; i < d; ++i) {
        if (!mask[i]) continue;
        const int zi = species[static_cast<std::size_t>(i)].valence;
        double lng = zi * zi * fsum + std::abs(zi) * csum;
        for (Eigen::Index k = 0; k < d; ++k) {
            if (!mask[k]) continue;
            const int zk = species[static_cast<std::size_t>(k)].valence;
            if (zi > 0 && zk < 0) lng += m[k] * (2.0 * bmat(i, k) + zsum * cmat(i, k));
            if (zi < 0 && zk > 0) lng += m[k] * (2.0 * bmat(k, i) + zsum * cmat(k, i));
        }
        gamma[i] = std::exp(lng);
    }
    return gamma;
}

inline VectorXd activity_coefficients(const MixtureState& composition, double temperature,
                                      const ActivityModel& model) {
    return activity_coefficients(composition.species(), composition.concentrations(), composition.mask(),
                                 temperature, model);
}

struct HindranceCoefficients {
    double convective = 1.0;  // K_c
    double diffusive = 1.0;   // K_d
};

// Hard sphere in a cylindrical pore, centreline-averaged polynomial fits.
inline HindranceCoefficients hindrance_coefficients(double lambda) {
    if (!(lambda >= 0.0)) throw InvalidInputError("hindrance: lambda must be non-negative");
    if (lambda >= 1.0) throw IonExceedsPoreError(lambda);
    const double l2 = lambda * lambda, l3 = l2 * lambda;
    const double phi = (1.0 - lambda) * (1.0 - lambda);
    HindranceCoefficients k;
    k.diffusive = std::max(0.0, 1.0 - 2.30 * lambda + 1.154 * l2 + 0.224 * l3);
    k.convective = (2.0 - phi) * (1.0 + 0.054 * lambda - 0.988 * l2 + 0.441 * l3);
    return k;
}

inline double steric_partition(double lambda) {
    if (lambda >= 1.0) return 0.0;
    return (1.0 - lambda) * (1.0 - lambda);
}

// Born solvation barrier for moving from bulk water into pore water.
inline double dielectric_partition(int valence, double cavity_radius_nm, const MembraneParams& membrane,
                                   const PhysicalConstants& k = {}) {
    const double e = k.elementary_charge;
    const double r = cavity_radius_nm * 1e-9;
    const double dw = (valence * valence * e * e) / (8.0 * std::numbers::pi * k.vacuum_permittivity * r) *
                      (1.0 / membrane.pore_dielectric - 1.0 / membrane.bulk_dielectric);
    return std::exp(-dw / k.thermal_energy());
}

inline double dielectric_partition(const IonSpecies& ion, const MembraneParams& membrane,
                                   const PhysicalConstants& k = {}) {
    return dielectric_partition(ion.valence, ion.cavity_radius_nm, membrane, k);
}

inline double donnan_factor(int valence, double donnan_potential_v, const PhysicalConstants& k = {}) {
    return std::exp(-valence * donnan_potential_v * k.inverse_thermal_voltage());
}

struct PartitionFactors {
    double steric = 1.0;      // phi_S
    double dielectric = 1.0;  // phi_Di
    double donnan = 1.0;      // phi_Do
    double lambda = 0.0;      // r_i / r_p
};

inline PartitionFactors partition_factors(const IonSpecies& ion, const MembraneParams& membrane,
                                          double donnan_potential_v, const PhysicalConstants& k = {}) {
    PartitionFactors f;
    f.lambda = ion.stokes_radius_nm / membrane.pore_radius_nm;
    f.steric = steric_partition(f.lambda);
    f.dielectric = dielectric_partition(ion, membrane, k);
    f.donnan = donnan_factor(ion.valence, donnan_potential_v, k);
    return f;
}

struct PotentialRoot {
    double phi = 0.0;  // dimensionless potential F psi / RT
    double residual = 0.0;
    double scale = 0.0;
    int iterations = 0;
};

// Root of r(phi) = q + sum_i z_i a_i exp(-z_i phi) with a_i >= 0. r is strictly
// decreasing whenever some a_i > 0, so safeguarded Newton on [-phi_max, phi_max]
// with a bisection fallback always terminates.
inline PotentialRoot partition_potential_root(std::span<const double> a, std::span<const int> z, double q,
                                              double phi_max, double guess = 0.0) {
    auto eval = [&](double phi, double& r, double& dr, double& scale) {
        r = q;
        dr = 0.0;
        scale = std::abs(q);
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i] == 0.0) continue;
            const double t = a[i] * std::exp(-z[i] * phi);
            r += z[i] * t;
            dr -= double(z[i]) * z[i] * t;
            scale += std::abs(z[i]) * t;
        }
    };

    double lo = -phi_max, hi = phi_max;
    double r, dr, scale;
    eval(lo, r, dr, scale);
    if (!(r > 0.0)) throw InfeasiblePartitioningError("partition residual has no sign change on the bracket (low end)");
    eval(hi, r, dr, scale);
    if (!(r < 0.0)) throw InfeasiblePartitioningError("partition residual has no sign change on the bracket (high end)");

    double phi = std::clamp(guess, lo, hi);
    PotentialRoot out;
    for (int it = 0; it < 400; ++it) {
        eval(phi, r, dr, scale);
        out.iterations = it + 1;
        if (std::abs(r) <= 1e-13 * scale) break;
        if (r > 0.0)
            lo = phi;
        else
            hi = phi;
        if (hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(phi))) break;
        double next = (dr < 0.0) ? phi - r / dr : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        phi = next;
    }
    eval(phi, r, dr, scale);
    out.phi = phi;
    out.residual = r;
    out.scale = scale;
    return out;
}

struct DonnanResult {
    double potential_v = 0.0;  // psi(0+) - psi(0-)
    VectorXd pore;             // C(0+) per species [mol/m3]
    double residual = 0.0;     // sum z C(0+) + chi_d
};

// Partitions an outside solution into the charged pore:
// C(0+) = C(0-) (gamma(0-)/gamma(0+)) phi_S phi_Di exp(-z F dpsi / RT),
// with dpsi chosen so that sum z C(0+) + chi_d = 0.
inline DonnanResult solve_donnan(const MixtureState& outside, const VectorXd& gamma_out,
                                 const MembraneParams& membrane, const ActivityModel& pore_model = {},
                                 const PhysicalConstants& k = {}, double guess_v = 0.0) {
    const auto& species = outside.species();
    const auto& c = outside.concentrations();
    const auto d = c.size();
    const double inv_vt = k.inverse_thermal_voltage();
    const double phi_max = 0.5 * inv_vt;

    VectorXd base = VectorXd::Zero(d);
    std::vector<int> z(static_cast<std::size_t>(d));
    for (Eigen::Index j = 0; j < d; ++j) {
        z[static_cast<std::size_t>(j)] = species[static_cast<std::size_t>(j)].valence;
        if (!outside.mask()[j]) continue;
        const auto& ion = species[static_cast<std::size_t>(j)];
        const double lambda = ion.stokes_radius_nm / membrane.pore_radius_nm;
        base[j] = c[j] * gamma_out[j] * steric_partition(lambda) * dielectric_partition(ion, membrane, k);
    }

    VectorXd gamma_in = VectorXd::Ones(d);
    DonnanResult res;
    double phi = guess_v * inv_vt;
    for (int outer = 0; outer < 100; ++outer) {
        VectorXd a = base.cwiseQuotient(gamma_in);
        const auto root = partition_potential_root(std::span<const double>(a.data(), static_cast<std::size_t>(d)), z,
                                                   membrane.charge_density_mol_m3, phi_max, phi);
        phi = root.phi;
        res.pore = VectorXd::Zero(d);
        for (Eigen::Index j = 0; j < d; ++j)
            if (a[j] > 0.0) res.pore[j] = a[j] * std::exp(-z[static_cast<std::size_t>(j)] * phi);
        if (pore_model.kind == ActivityKind::ideal) break;
        VectorXd next = activity_coefficients(species, res.pore, outside.mask(), k.temperature, pore_model);
        const double change = (next - gamma_in).cwiseAbs().maxCoeff();
        gamma_in = next;
        if (change < 1e-13) break;
    }
    res.potential_v = phi / inv_vt;
    double r = membrane.charge_density_mol_m3;
    for (Eigen::Index j = 0; j < d; ++j) r += z[static_cast<std::size_t>(j)] * res.pore[j];
    res.residual = r;
    return res;
}

}  // namespace ionflux

#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ionflux/errors.hpp"

namespace ionflux {

using Eigen::VectorXd;
using Eigen::VectorXi;

// Immutable record for one dissolved ion.
struct IonSpecies {
    std::string name;
    int valence = 0;
    double stokes_radius_nm = 0.0;
    double cavity_radius_nm = 0.0;
    double diffusivity_m2_s = 0.0;

    void validate() const {
        if (name.empty()) throw InvalidInputError("ion species needs a name");
        if (valence == 0) throw InvalidInputError(name + ": valence must be non-zero");
        if (!(diffusivity_m2_s > 0.0)) throw InvalidInputError(name + ": diffusivity must be positive");
        if (!(stokes_radius_nm > 0.0)) throw InvalidInputError(name + ": stokes radius must be positive");
        if (!(cavity_radius_nm > 0.0)) throw InvalidInputError(name + ": cavity radius must be positive");
    }
};

using SpeciesList = std::vector<IonSpecies>;
using SpeciesPtr = std::shared_ptr<const SpeciesList>;

inline VectorXi valences(const SpeciesList& species) {
    VectorXi z(static_cast<Eigen::Index>(species.size()));
    for (std::size_t j = 0; j < species.size(); ++j) z[static_cast<Eigen::Index>(j)] = species[j].valence;
    return z;
}

// Lookup table of ions, unique by name, kept in insertion order.
class IonDatabase {
public:
    IonDatabase() = default;

    explicit IonDatabase(const SpeciesList& ions) {
        for (const auto& ion : ions) add(ion);
    }

    void add(const IonSpecies& ion) {
        ion.validate();
        if (index_.count(ion.name) != 0) throw InvalidInputError("duplicate ion name: " + ion.name);
        index_.emplace(ion.name, ions_.size());
        ions_.push_back(ion);
    }

    bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

    const IonSpecies& at(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw UnsupportedSpeciesError("unknown ion: " + std::string(name));
        return ions_[it->second];
    }

    // Position in database order; used to make species orderings deterministic.
    std::size_t rank(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw UnsupportedSpeciesError("unknown ion: " + std::string(name));
        return it->second;
    }

    const SpeciesList& ions() const { return ions_; }
    std::size_t size() const { return ions_.size(); }

    // Builds an ordered species list (database order) from a set of names.
    SpeciesPtr select(const std::vector<std::string>& names) const {
        std::vector<std::pair<std::size_t, const IonSpecies*>> picked;
        for (const auto& n : names) {
            const auto r = rank(n);
            bool dup = false;
            for (const auto& p : picked) dup = dup || p.first == r;
            if (!dup) picked.emplace_back(r, &ions_[r]);
        }
        std::sort(picked.begin(), picked.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        auto out = std::make_shared<SpeciesList>();
        for (const auto& p : picked) out->push_back(*p.second);
        return out;
    }

private:
    SpeciesList ions_;
    std::map<std::string, std::size_t> index_;
};

inline IonSpecies ion_from_json(const nlohmann::json& j) {
    IonSpecies ion;
    ion.name = j.at("name").get<std::string>();
    ion.valence = j.at("z").get<int>();
    ion.stokes_radius_nm = j.at("stokes_radius_nm").get<double>();
    ion.cavity_radius_nm = j.at("cavity_radius_nm").get<double>();
    ion.diffusivity_m2_s = j.at("diffusivity_m2_s").get<double>();
    return ion;
}

inline nlohmann::json ion_to_json(const IonSpecies& ion) {
    return {{"name", ion.name},
            {"z", ion.valence},
            {"stokes_radius_nm", ion.stokes_radius_nm},
            {"cavity_radius_nm", ion.cavity_radius_nm},
            {"diffusivity_m2_s", ion.diffusivity_m2_s}};
}

inline IonDatabase ion_database_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw InvalidInputError("ion database must be a JSON array");
    IonDatabase db;
    for (const auto& rec : j) db.add(ion_from_json(rec));
    return db;
}

inline IonDatabase load_ion_database(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInputError("cannot open ion database: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError("ion database " + path + ": " + e.what());
    }
    return ion_database_from_json(j);
}

// Infinite-dilution diffusivities at 25 C; Stokes radii from Stokes-Einstein
// with water viscosity 0.8903 mPa s. The Born cavity radius is taken equal to
// the Stokes radius.
inline IonDatabase default_ion_database() {
    return IonDatabase(SpeciesList{
        {"Na+", 1, 0.1839, 0.1839, 1.334e-9},
        {"K+", 1, 0.1253, 0.1253, 1.957e-9},
        {"Li+", 1, 0.2384, 0.2384, 1.029e-9},
        {"Mg2+", 2, 0.3474, 0.3474, 0.706e-9},
        {"Ca2+", 2, 0.3097, 0.3097, 0.792e-9},
        {"Cl-", -1, 0.1207, 0.1207, 2.032e-9},
        {"NO3-", -1, 0.1290, 0.1290, 1.902e-9},
        {"SO4_2-", -2, 0.2303, 0.2303, 1.065e-9},
    });
}

// Binary species mask; true means the species is present in the mixture.
class Mask {
public:
    Mask() = default;
    explicit Mask(std::size_t n, bool value = true) : bits_(n, value ? 1 : 0) {}
    explicit Mask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
        for (auto& b : bits_) b = b ? 1 : 0;
    }

    static Mask from_positive(const VectorXd& c) {
        Mask m(static_cast<std::size_t>(c.size()), false);
        for (Eigen::Index j = 0; j < c.size(); ++j) m.bits_[static_cast<std::size_t>(j)] = c[j] > 0.0 ? 1 : 0;
        return m;
    }

    bool operator[](Eigen::Index j) const { return bits_[static_cast<std::size_t>(j)] != 0; }
    void set(Eigen::Index j, bool v) { bits_[static_cast<std::size_t>(j)] = v ? 1 : 0; }
    Eigen::Index size() const { return static_cast<Eigen::Index>(bits_.size()); }

    Eigen::Index count() const {
        Eigen::Index n = 0;
        for (auto b : bits_) n += b;
        return n;
    }

    VectorXd weights() const {
        VectorXd w(size());
        for (Eigen::Index j = 0; j < size(); ++j) w[j] = (*this)[j] ? 1.0 : 0.0;
        return w;
    }

    const std::vector<std::uint8_t>& bits() const { return bits_; }
    bool operator==(const Mask&) const = default;

private:
    std::vector<std::uint8_t> bits_;
};

// Concentrations [mol/m3] over a fixed, ordered species list plus a flux coordinate.
class MixtureState {
public:
    MixtureState() = default;

    MixtureState(SpeciesPtr species, VectorXd concentrations, Mask mask, double jv = 0.0)
        : species_(std::move(species)), c_(std::move(concentrations)), mask_(std::move(mask)), jv_(jv) {
        if (!species_) throw InvalidInputError("mixture state without species list");
        const auto d = static_cast<Eigen::Index>(species_->size());
        if (c_.size() != d || mask_.size() != d)
            throw InvalidInputError("mixture state: concentration/mask length differs from species count");
        for (Eigen::Index j = 0; j < d; ++j) {
            if (!std::isfinite(c_[j])) throw InvalidInputError("mixture state: non-finite concentration");
            if (c_[j] < 0.0)
                throw InvalidFeedError("negative concentration for " + (*species_)[static_cast<std::size_t>(j)].name);
            if (!mask_[j] && c_[j] != 0.0)
                throw InvalidInputError("mixture state: masked-out species with non-zero concentration");
        }
    }

    // Mask derived from which entries are positive.
    MixtureState(SpeciesPtr species, VectorXd concentrations, double jv = 0.0)
        : MixtureState(species, concentrations, Mask::from_positive(concentrations), jv) {}

    static MixtureState from_map(const SpeciesPtr& species, const std::map<std::string, double>& conc,
                                 double jv = 0.0) {
        VectorXd c = VectorXd::Zero(static_cast<Eigen::Index>(species->size()));
        Mask m(species->size(), false);
        for (const auto& [name, value] : conc) {
            bool found = false;
            for (std::size_t j = 0; j < species->size(); ++j) {
                if ((*species)[j].name == name) {
                    c[static_cast<Eigen::Index>(j)] = value;
                    m.set(static_cast<Eigen::Index>(j), value > 0.0);
                    found = true;
                }
            }
            if (!found) throw UnsupportedSpeciesError("species not in run configuration: " + name);
        }
        for (Eigen::Index j = 0; j < c.size(); ++j)
            if (!m[j] && c[j] < 0.0)
                throw InvalidFeedError("negative concentration for " + (*species)[static_cast<std::size_t>(j)].name);
        return MixtureState(species, c, m, jv);
    }

    const SpeciesList& species() const { return *species_; }
    const SpeciesPtr& species_ptr() const { return species_; }
    const VectorXd& concentrations() const { return c_; }
    double concentration(Eigen::Index j) const { return c_[j]; }
    const Mask& mask() const { return mask_; }
    double flux() const { return jv_; }
    Eigen::Index dim() const { return c_.size(); }
    VectorXi valences() const { return ionflux::valences(*species_); }

    MixtureState with_concentrations(VectorXd c) const { return MixtureState(species_, std::move(c), mask_, jv_); }
    MixtureState with_flux(double jv) const { return MixtureState(species_, c_, mask_, jv); }

    std::optional<Eigen::Index> index_of(std::string_view name) const {
        for (std::size_t j = 0; j < species_->size(); ++j)
            if ((*species_)[j].name == name) return static_cast<Eigen::Index>(j);
        return std::nullopt;
    }

private:
    SpeciesPtr species_;
    VectorXd c_;
    Mask mask_;
    double jv_ = 0.0;
};

// Relative charge imbalance |sum z c| / sum |z| c over the masked species.
inline double charge_imbalance(const VectorXd& c, const VectorXi& z, const Mask& m) {
    double net = 0.0, total = 0.0;
    for (Eigen::Index j = 0; j < c.size(); ++j) {
        if (!m[j]) continue;
        net += z[j] * c[j];
        total += std::abs(z[j]) * std::abs(c[j]);
    }
    return total > 0.0 ? std::abs(net) / total : 0.0;
}

// Removes the component of h along the masked valence vector. Coordinates with
// m_j = 0 pass through untouched and never influence the masked ones.
inline VectorXd project_electroneutral(const VectorXd& h, const VectorXi& z, const Mask& m) {
    if (h.size() != z.size() || h.size() != m.size())
        throw InvalidInputError("project_electroneutral: length mismatch");
    double zz = 0.0, zh = 0.0;
    for (Eigen::Index j = 0; j < h.size(); ++j) {
        if (!m[j]) continue;
        zz += double(z[j]) * z[j];
        zh += z[j] * h[j];
    }
    if (zz == 0.0) throw DegenerateProjectionError();
    const double scale = zh / zz;
    VectorXd out = h;
    for (Eigen::Index j = 0; j < h.size(); ++j)
        if (m[j]) out[j] -= scale * z[j];
    return out;
}

struct FeedCheck {
    double eps_en = 1e-6;
    double repair_threshold = 1e-2;
    bool repair = true;
};

inline MixtureState validate_feed(const MixtureState& state, const FeedCheck& check = {}) {
    const auto& c = state.concentrations();
    const VectorXi z = state.valences();
    for (Eigen::Index j = 0; j < c.size(); ++j)
        if (c[j] < 0.0) throw InvalidFeedError("negative concentration for " + state.species()[static_cast<std::size_t>(j)].name);
    const double imbalance = charge_imbalance(c, z, state.mask());
    if (imbalance > check.repair_threshold)
        throw InvalidFeedError("feed charge imbalance " + std::to_string(imbalance) + " exceeds repair threshold");
    if (imbalance == 0.0) return state;
    if (!check.repair) {
        if (imbalance > check.eps_en)
            throw InvalidFeedError("feed charge imbalance " + std::to_string(imbalance) + " exceeds tolerance");
        return state;
    }
    VectorXd fixed = project_electroneutral(c, z, state.mask()).cwiseMax(0.0);
    if (charge_imbalance(fixed, z, state.mask()) > check.eps_en)
        throw InvalidFeedError("feed could not be repaired to electroneutrality");
    Mask m = state.mask();
    for (Eigen::Index j = 0; j < fixed.size(); ++j)
        if (fixed[j] == 0.0) m.set(j, false);
    return MixtureState(state.species_ptr(), fixed, m, state.flux());
}

// Four fitted membrane parameters plus fixed dielectric constants.
struct MembraneParams {
    double pore_radius_nm = 0.51;
    double thickness_um = 1.27;
    double pore_dielectric = 43.56;
    double charge_density_mol_m3 = -51.23;
    double bulk_dielectric = 78.54;
    double matrix_dielectric = 4.5;  // informational only

    void validate() const {
        if (!(pore_radius_nm > 0.0)) throw InvalidInputError("membrane: pore radius must be positive");
        if (!(thickness_um > 0.0)) throw InvalidInputError("membrane: thickness must be positive");
        if (!(pore_dielectric > 1.0 && pore_dielectric <= bulk_dielectric))
            throw InvalidInputError("membrane: pore dielectric must lie in (1, bulk dielectric]");
        if (!std::isfinite(charge_density_mol_m3)) throw InvalidInputError("membrane: charge density not finite");
    }

    double thickness_m() const { return thickness_um * 1e-6; }
    double pore_radius_m() const { return pore_radius_nm * 1e-9; }

    bool operator==(const MembraneParams&) const = default;
};

// Reference membrane: the parameter set used to generate pre-training data.
inline MembraneParams reference_membrane() { return MembraneParams{}; }

inline MembraneParams membrane_from_json(const nlohmann::json& j) {
    MembraneParams m;
    m.pore_radius_nm = j.at("r_p_nm").get<double>();
    m.thickness_um = j.at("dx_e_um").get<double>();
    m.pore_dielectric = j.at("zeta_p").get<double>();
    m.charge_density_mol_m3 = j.at("chi_d_mol_m3").get<double>();
    if (j.contains("zeta_b")) m.bulk_dielectric = j.at("zeta_b").get<double>();
    if (j.contains("zeta_m")) m.matrix_dielectric = j.at("zeta_m").get<double>();
    m.validate();
    return m;
}

inline nlohmann::json membrane_to_json(const MembraneParams& m) {
    nlohmann::json j;
    j["r_p_nm"] = m.pore_radius_nm;
    j["dx_e_um"] = m.thickness_um;
    j["zeta_p"] = m.pore_dielectric;
    j["chi_d_mol_m3"] = m.charge_density_mol_m3;
    return j;
}

}  // namespace ionflux

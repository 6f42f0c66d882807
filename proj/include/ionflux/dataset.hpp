#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ionflux/chem.hpp"
#include "ionflux/errors.hpp"
#include "ionflux/io.hpp"

namespace ionflux {

// One observation: the permeate concentration of one ion at one flux.
struct RejectionRecord {
    std::string experiment_id;
    std::string ion;
    int valence = 0;
    double feed_mol_m3 = 0.0;
    double jv_m_s = 0.0;
    double permeate_mol_m3 = 0.0;  // mu_ij
    double sigma_mol_m3 = 0.0;     // sigma_ij
    std::string provenance;        // "measured", "simulated", or empty

    double rejection() const { return feed_mol_m3 > 0.0 ? 1.0 - permeate_mol_m3 / feed_mol_m3 : 0.0; }
};

struct Experiment {
    std::string id;
    std::map<std::string, double> feed;  // mol/m3 per ion
    std::map<std::string, int> valence;
    std::vector<double> fluxes;          // sorted, unique
    std::vector<std::size_t> records;    // indices into the dataset
};

struct MeasuredDataset {
    std::vector<RejectionRecord> records;
    std::vector<Experiment> experiments;  // first-appearance order
    std::vector<std::string> warnings;

    bool empty() const { return records.empty(); }
    std::size_t size() const { return records.size(); }
};

// Groups records by experiment and checks that each experiment has one
// consistent, near-neutral feed.
inline std::vector<Experiment> group_experiments(const std::vector<RejectionRecord>& records,
                                                 double repair_threshold = 1e-2) {
    std::vector<Experiment> out;
    std::map<std::string, std::size_t> index;
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& rec = records[r];
        auto [it, fresh] = index.emplace(rec.experiment_id, out.size());
        if (fresh) {
            out.emplace_back();
            out.back().id = rec.experiment_id;
        }
        auto& e = out[it->second];
        auto [f, first] = e.feed.emplace(rec.ion, rec.feed_mol_m3);
        if (!first && std::abs(f->second - rec.feed_mol_m3) > 1e-9 * std::max(1.0, std::abs(f->second)))
            throw ValidationError("experiment " + rec.experiment_id + ": inconsistent feed for " + rec.ion);
        auto [v, vfirst] = e.valence.emplace(rec.ion, rec.valence);
        if (!vfirst && v->second != rec.valence)
            throw ValidationError("experiment " + rec.experiment_id + ": inconsistent valence for " + rec.ion);
        e.records.push_back(r);
        e.fluxes.push_back(rec.jv_m_s);
    }
    for (auto& e : out) {
        std::sort(e.fluxes.begin(), e.fluxes.end());
        e.fluxes.erase(std::unique(e.fluxes.begin(), e.fluxes.end()), e.fluxes.end());
        double net = 0.0, total = 0.0;
        for (const auto& [ion, c] : e.feed) {
            net += e.valence.at(ion) * c;
            total += std::abs(e.valence.at(ion)) * c;
        }
        if (total > 0.0 && std::abs(net) > repair_threshold * total)
            throw ValidationError("experiment " + e.id + ": feed is not electroneutral");
    }
    return out;
}

inline MeasuredDataset make_dataset(std::vector<RejectionRecord> records) {
    MeasuredDataset ds;
    ds.experiments = group_experiments(records);
    ds.records = std::move(records);
    return ds;
}

inline MeasuredDataset parse_dataset(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::size_t> col;
    const std::vector<std::string> required = {"experiment_id", "ion",    "z",           "feed_mol_m3",
                                               "jv_m_s",        "permeate_mol_m3", "sigma_mol_m3"};
    std::vector<RejectionRecord> records;
    while (std::getline(in, line)) {
        ++lineno;
        if (io::trim(line).empty()) continue;
        const auto fields = io::split_csv(line);
        if (col.empty()) {
            for (std::size_t i = 0; i < fields.size(); ++i) col[fields[i]] = i;
            for (const auto& name : required)
                if (!col.count(name)) throw ParseError("missing column " + name, lineno);
            continue;
        }
        if (fields.size() < col.size()) throw ParseError("expected " + std::to_string(col.size()) + " fields", lineno);
        RejectionRecord r;
        r.experiment_id = fields[col["experiment_id"]];
        r.ion = fields[col["ion"]];
        if (r.experiment_id.empty() || r.ion.empty()) throw ParseError("empty experiment_id or ion", lineno);
        r.valence = io::parse_int(fields[col["z"]], lineno, "z");
        r.feed_mol_m3 = io::parse_double(fields[col["feed_mol_m3"]], lineno, "feed_mol_m3");
        r.jv_m_s = io::parse_double(fields[col["jv_m_s"]], lineno, "jv_m_s");
        r.permeate_mol_m3 = io::parse_double(fields[col["permeate_mol_m3"]], lineno, "permeate_mol_m3");
        r.sigma_mol_m3 = io::parse_double(fields[col["sigma_mol_m3"]], lineno, "sigma_mol_m3");
        if (auto p = col.find("provenance"); p != col.end()) r.provenance = fields[p->second];
        if (r.valence == 0) throw ParseError("valence must be non-zero", lineno);
        for (double v : {r.feed_mol_m3, r.jv_m_s, r.permeate_mol_m3, r.sigma_mol_m3})
            if (!std::isfinite(v)) throw ParseError("non-finite value", lineno);
        if (r.feed_mol_m3 < 0.0 || r.permeate_mol_m3 < 0.0) throw ParseError("negative concentration", lineno);
        if (r.sigma_mol_m3 < 0.0) throw ParseError("negative sigma", lineno);
        if (r.jv_m_s < 0.0) throw ParseError("negative flux", lineno);
        records.push_back(std::move(r));
    }
    if (col.empty()) throw ParseError("missing header", lineno);
    MeasuredDataset ds = make_dataset(std::move(records));
    if (ds.empty()) ds.warnings.push_back("dataset has a header but no records");
    return ds;
}

inline MeasuredDataset load_dataset(const std::string& path) { return parse_dataset(io::read_file(path)); }

inline std::string format_dataset(const MeasuredDataset& ds) {
    std::string out = "experiment_id,ion,z,feed_mol_m3,jv_m_s,permeate_mol_m3,sigma_mol_m3,provenance\n";
    for (const auto& r : ds.records) {
        out += r.experiment_id + "," + r.ion + "," + std::to_string(r.valence) + "," + io::format_double(r.feed_mol_m3) +
               "," + io::format_double(r.jv_m_s) + "," + io::format_double(r.permeate_mol_m3) + "," +
               io::format_double(r.sigma_mol_m3) + "," + r.provenance + "\n";
    }
    return out;
}

// Species of the dataset in database order; valences must agree with the database.
inline SpeciesPtr dataset_species(const MeasuredDataset& ds, const IonDatabase& db) {
    std::set<std::string> names;
    for (const auto& r : ds.records) {
        if (!db.contains(r.ion)) throw UnsupportedSpeciesError("ion not in database: " + r.ion);
        if (db.at(r.ion).valence != r.valence)
            throw ValidationError("valence of " + r.ion + " disagrees with the ion database");
        names.insert(r.ion);
    }
    return db.select(std::vector<std::string>(names.begin(), names.end()));
}

inline MixtureState experiment_feed(const Experiment& e, const SpeciesPtr& species) {
    return MixtureState::from_map(species, e.feed);
}

}  // namespace ionflux

#pragma once

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ionflux/ionflux.hpp"

namespace ionflux::cli {

inline constexpr const char* tool_version = "0.1.0";

inline std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, data.data(), data.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error("SHA-256 computation failed");
    }
    EVP_MD_CTX_free(ctx);
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Inputs, resolved configuration and output digests of one command.
class RunManifest {
public:
    explicit RunManifest(std::string command) : command_(std::move(command)), started_(utc_now()) {}

    void config(const std::string& key, nlohmann::ordered_json value) { config_[key] = std::move(value); }
    void seed(std::uint64_t s) { seed_ = s; }

    std::string read_input(const std::string& path) {
        std::string data = io::read_file(path);
        inputs_[path] = sha256_hex(data);
        return data;
    }
    void digest_input(const std::string& path) { inputs_[path] = sha256_hex(io::read_file(path)); }

    void write_output(const std::string& path, const std::string& content) {
        io::atomic_write(path, content);
        outputs_[path] = sha256_hex(content);
    }

    void finish(const std::string& manifest_path) const {
        nlohmann::ordered_json j;
        j["command"] = command_;
        j["tool_version"] = tool_version;
        j["seed"] = seed_;
        j["config"] = config_;
        j["inputs"] = inputs_;
        j["outputs"] = outputs_;
        j["timestamps"] = {{"started", started_}, {"finished", utc_now()}};
        io::atomic_write(manifest_path, j.dump(2) + "\n");
    }

private:
    std::string command_;
    std::string started_;
    std::uint64_t seed_ = 0;
    nlohmann::ordered_json config_ = nlohmann::ordered_json::object();
    nlohmann::ordered_json inputs_ = nlohmann::ordered_json::object();
    nlohmann::ordered_json outputs_ = nlohmann::ordered_json::object();
};

inline std::string manifest_path(const std::string& out) { return out + ".manifest.json"; }

inline nlohmann::json parse_json(const std::string& text, const std::string& path) {
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError(path + ": " + e.what());
    }
}

// Shared inputs: ion database, solver settings, activity model.
struct CommonOptions {
    std::string ions;
    std::string solver;
    std::string pitzer;
    std::uint64_t seed = 0;
    int jobs = 0;

    void add(CLI::App& app) {
        app.add_option("--ions", ions, "ion database JSON (default: built-in)")->check(CLI::ExistingFile);
        app.add_option("--solver", solver, "solver settings JSON")->check(CLI::ExistingFile);
        app.add_option("--pitzer", pitzer, "Pitzer parameters JSON; enables Pitzer activities in the bulk")
            ->check(CLI::ExistingFile);
        app.add_option("--seed", seed, "random seed")->capture_default_str();
        app.add_option("--jobs", jobs, "worker threads (default: IONFLUX_JOBS or logical cores)");
    }

    int resolved_jobs() const { return jobs > 0 ? jobs : default_jobs(); }

    IonDatabase database(RunManifest& m) const {
        if (ions.empty()) return default_ion_database();
        return ion_database_from_json(parse_json(m.read_input(ions), ions));
    }

    SolverConfig solver_config(RunManifest& m) const {
        SolverConfig c;
        if (!solver.empty()) {
            const auto j = parse_json(m.read_input(solver), solver);
            try {
                c.grid_points = j.value("grid_points", c.grid_points);
                c.eta_psi = j.value("eta_psi", c.eta_psi);
                c.eta_c = j.value("eta_c", c.eta_c);
                c.max_iters = j.value("max_iters", c.max_iters);
                c.max_outer_iters = j.value("max_outer_iters", c.max_outer_iters);
                c.tol_rel = j.value("tol_rel", c.tol_rel);
                c.tol_en = j.value("tol_en", c.tol_en);
                c.hydraulic_diameter_m = j.value("hydraulic_diameter_m", c.hydraulic_diameter_m);
                c.reynolds = j.value("reynolds", c.reynolds);
                c.kinematic_viscosity_m2_s = j.value("kinematic_viscosity_m2_s", c.kinematic_viscosity_m2_s);
                c.reference_diffusivity_m2_s = j.value("reference_diffusivity_m2_s", c.reference_diffusivity_m2_s);
                if (j.contains("activity")) {
                    const auto kind = activity_kind_from_string(j.at("activity").get<std::string>());
                    if (kind == ActivityKind::davies) c.bulk_activity = ActivityModel::davies();
                    if (kind == ActivityKind::pitzer_kim && pitzer.empty())
                        throw InvalidInputError("Pitzer activity requested without --pitzer");
                }
            } catch (const nlohmann::json::exception& e) {
                throw InvalidInputError(solver + ": " + e.what());
            }
        }
        if (!pitzer.empty()) {
            m.digest_input(pitzer);
            c.bulk_activity = load_pitzer_model(pitzer);
        }
        c.validate();
        m.config("solver", {{"grid_points", c.grid_points},
                            {"eta_psi", c.eta_psi},
                            {"eta_c", c.eta_c},
                            {"max_iters", c.max_iters},
                            {"max_outer_iters", c.max_outer_iters},
                            {"tol_rel", c.tol_rel},
                            {"tol_en", c.tol_en},
                            {"hydraulic_diameter_m", c.hydraulic_diameter_m},
                            {"reynolds", c.reynolds},
                            {"kinematic_viscosity_m2_s", c.kinematic_viscosity_m2_s},
                            {"reference_diffusivity_m2_s", c.reference_diffusivity_m2_s},
                            {"activity", pitzer.empty() ? (c.bulk_activity.kind == ActivityKind::davies ? "davies" : "ideal")
                                                        : "pitzer"}});
        return c;
    }
};

inline MembraneParams read_membrane(RunManifest& m, const std::string& path) {
    if (path.empty()) return reference_membrane();
    try {
        return membrane_from_json(parse_json(m.read_input(path), path));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInputError(path + ": " + e.what());
    }
}

// Feed file: {"Na+": 10, "Cl-": 10} or {"concentrations_mol_m3": {...}}.
inline MixtureState read_feed(RunManifest& m, const std::string& path, const IonDatabase& db) {
    auto j = parse_json(m.read_input(path), path);
    if (j.contains("concentrations_mol_m3")) j = j.at("concentrations_mol_m3");
    if (!j.is_object() || j.empty()) throw InvalidInputError(path + ": feed must map ion names to mol/m3");
    std::map<std::string, double> conc;
    std::vector<std::string> names;
    for (const auto& [name, v] : j.items()) {
        if (!v.is_number()) throw InvalidInputError(path + ": concentration of " + name + " is not a number");
        conc[name] = v.get<double>();
        names.push_back(name);
    }
    return validate_feed(MixtureState::from_map(db.select(names), conc));
}

inline std::vector<double> flux_grid(int n, double jv_max, bool include_zero) {
    auto g = uniform_flux_grid(n, jv_max);
    if (include_zero) g.insert(g.begin(), 0.0);
    return g;
}

inline std::string curve_csv(const SpeciesList& species, const Mask& mask, const std::vector<double>& jv,
                             const std::vector<VectorXd>& rejections, const std::vector<VectorXd>& permeate) {
    std::string out = "jv_m_s";
    for (std::size_t j = 0; j < species.size(); ++j)
        if (mask[static_cast<Eigen::Index>(j)]) out += ",R_" + species[j].name;
    for (std::size_t j = 0; j < species.size(); ++j)
        if (mask[static_cast<Eigen::Index>(j)]) out += ",C_" + species[j].name + "_mol_m3";
    out += "\n";
    for (std::size_t i = 0; i < jv.size(); ++i) {
        out += io::format_double(jv[i]);
        for (Eigen::Index j = 0; j < mask.size(); ++j)
            if (mask[j]) out += "," + io::format_double(rejections[i][j]);
        for (Eigen::Index j = 0; j < mask.size(); ++j)
            if (mask[j]) out += "," + io::format_double(permeate[i][j]);
        out += "\n";
    }
    return out;
}

struct TrainOptions {
    int epochs = 1000;
    double lr = 1e-3;
    int batch = 32;
    int halving = 200;
    double rtol = 1e-6;
    double atol = 1e-8;
    std::string history;
    std::string checkpoint_dir;

    void add(CLI::App& app) {
        app.add_option("--epochs", epochs, "epochs per stage")->capture_default_str();
        app.add_option("--lr", lr, "initial learning rate")->capture_default_str();
        app.add_option("--batch", batch, "feeds per batch")->capture_default_str();
        app.add_option("--halving", halving, "epochs between learning-rate halvings")->capture_default_str();
        app.add_option("--rtol", rtol, "integrator relative tolerance")->capture_default_str();
        app.add_option("--atol", atol, "integrator absolute tolerance")->capture_default_str();
        app.add_option("--history", history, "JSON-lines loss history output");
        app.add_option("--checkpoint-dir", checkpoint_dir, "directory for schedule-boundary checkpoints");
    }

    TrainConfig config(const CommonOptions& common, RunManifest& m) const {
        TrainConfig c;
        c.epochs = epochs;
        c.lr0 = lr;
        c.batch_size = batch;
        c.halving_period = halving;
        c.seed = common.seed;
        c.jobs = common.resolved_jobs();
        c.checkpoint_dir = checkpoint_dir;
        c.integration.rtol = rtol;
        c.integration.atol = atol;
        m.config("train", {{"epochs", epochs}, {"lr0", lr}, {"batch_size", batch}, {"halving_period", halving},
                           {"rtol", rtol}, {"atol", atol}});
        return c;
    }
};

inline void write_training_outputs(RunManifest& m, const TrainResult& r, const std::string& out,
                                   const TrainOptions& t) {
    m.write_output(out, checkpoint_to_json(r.model).dump(1) + "\n");
    if (!t.history.empty()) m.write_output(t.history, history_jsonl(r.history));
}

// Parses argv and runs one subcommand. Exit codes: 0 success, 1 domain or
// solver error, 2 usage error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Nanofiltration rejection modelling: continuum solver, calibration and neural ODE surrogate"};
    app.name("ionflux");
    app.require_subcommand(1, 1);
    app.set_version_flag("--version", tool_version);

    CommonOptions common;
    std::string out_path;

    // solve
    auto* solve = app.add_subcommand("solve", "rejection curve from the continuum model");
    std::string membrane_path, feed_path;
    int grid_n = 20;
    double jv_max = 3e-5;
    bool with_zero = false;
    solve->add_option("--membrane", membrane_path, "membrane parameters JSON (default: reference membrane)")
        ->check(CLI::ExistingFile);
    solve->add_option("--feed", feed_path, "feed composition JSON")->required()->check(CLI::ExistingFile);
    solve->add_option("--flux-grid", grid_n, "number of uniform fluxes on (0, jv-max]")->capture_default_str();
    solve->add_option("--jv-max", jv_max, "largest flux [m/s]")->capture_default_str();
    solve->add_flag("--include-zero", with_zero, "prepend J_v = 0");
    solve->add_option("--out", out_path, "output CSV")->required();
    common.add(*solve);

    // fit-membrane
    auto* fit = app.add_subcommand("fit-membrane", "calibrate membrane parameters by annealing + simplex");
    std::string data_path, bounds_path;
    int budget = 2000;
    bool conc_space = false;
    fit->add_option("--data", data_path, "measured dataset CSV")->required()->check(CLI::ExistingFile);
    fit->add_option("--budget", budget, "objective evaluation budget")->capture_default_str();
    fit->add_option("--bounds", bounds_path, "parameter bounds JSON")->check(CLI::ExistingFile);
    fit->add_flag("--concentration-space", conc_space, "residuals on permeate concentration");
    fit->add_option("--out", out_path, "fit result JSON")->required();
    common.add(*fit);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Sobol feeds solved by the continuum model");
    std::vector<std::string> species_names{"Na+", "Cl-", "Mg2+", "SO4_2-"};
    int count = 256;
    std::uint64_t skip = 0;
    double c_min = 1.0, c_max = 100.0, noise = 0.0;
    gen->add_option("--membrane", membrane_path, "membrane parameters JSON (default: reference membrane)")
        ->check(CLI::ExistingFile);
    gen->add_option("--species", species_names, "ions to sample")->delimiter(',')->capture_default_str();
    gen->add_option("--count", count, "number of feeds")->capture_default_str();
    gen->add_option("--skip", skip, "Sobol points to skip")->capture_default_str();
    gen->add_option("--c-min", c_min, "lower concentration bound [mol/m3]")->capture_default_str();
    gen->add_option("--c-max", c_max, "upper concentration bound [mol/m3]")->capture_default_str();
    gen->add_option("--flux-grid", grid_n, "number of uniform fluxes on (0, jv-max]")->capture_default_str();
    gen->add_option("--jv-max", jv_max, "largest flux [m/s]")->capture_default_str();
    gen->add_option("--noise", noise, "relative Gaussian noise; > 0 marks rows as measured")->capture_default_str();
    gen->add_option("--out", out_path, "dataset CSV")->required();
    common.add(*gen);

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "train a new surrogate on simulated data");
    std::string init_path;
    Eigen::Index width = 588;
    int order = 4;
    double jv_scale = 3e-5;
    TrainOptions topt;
    pre->add_option("--data", data_path, "simulated dataset CSV")->required()->check(CLI::ExistingFile);
    pre->add_option("--width", width, "hidden width")->capture_default_str();
    pre->add_option("--order", order, "positional encoding order p")->capture_default_str();
    pre->add_option("--jv-scale", jv_scale, "flux normalization [m/s]")->capture_default_str();
    pre->add_option("--init", init_path, "start from this checkpoint")->check(CLI::ExistingFile);
    pre->add_option("--out", out_path, "checkpoint JSON")->required();
    topt.add(*pre);
    common.add(*pre);

    // finetune
    auto* fine = app.add_subcommand("finetune", "fine-tune a surrogate on measured data");
    std::string model_path, sim_path;
    double replay = 0.0;
    bool freeze = false;
    TrainOptions fopt;
    fine->add_option("--model", model_path, "checkpoint to start from")->required()->check(CLI::ExistingFile);
    fine->add_option("--data", data_path, "measured dataset CSV")->required()->check(CLI::ExistingFile);
    fine->add_option("--sim", sim_path, "simulated dataset for replay")->check(CLI::ExistingFile);
    fine->add_option("--replay", replay, "replay fraction of simulated feeds")->capture_default_str();
    fine->add_flag("--freeze-draws", freeze, "draw the noisy targets once instead of every epoch");
    fine->add_option("--out", out_path, "checkpoint JSON")->required();
    fopt.add(*fine);
    common.add(*fine);

    // predict
    auto* pred = app.add_subcommand("predict", "surrogate rejection curve for one feed");
    pred->add_option("--model", model_path, "checkpoint")->required()->check(CLI::ExistingFile);
    pred->add_option("--feed", feed_path, "feed composition JSON")->required()->check(CLI::ExistingFile);
    pred->add_option("--flux-grid", grid_n, "number of uniform fluxes on (0, jv-max]")->capture_default_str();
    pred->add_option("--jv-max", jv_max, "largest flux [m/s]")->capture_default_str();
    pred->add_flag("--include-zero", with_zero, "prepend J_v = 0");
    pred->add_option("--out", out_path, "output CSV (default: standard output)");
    common.add(*pred);

    // eval
    auto* ev = app.add_subcommand("eval", "parity rows and error metrics on a test set");
    std::string metrics_path;
    ev->add_option("--model", model_path, "surrogate checkpoint")->check(CLI::ExistingFile);
    ev->add_option("--membrane", membrane_path, "score the continuum model with these parameters instead")
        ->check(CLI::ExistingFile);
    ev->add_option("--data", data_path, "test dataset CSV")->required()->check(CLI::ExistingFile);
    ev->add_option("--out", out_path, "parity CSV")->required();
    ev->add_option("--metrics", metrics_path, "metrics JSON (default: <out>.metrics.json)");
    common.add(*ev);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
        return 0;
    } catch (const CLI::CallForVersion&) {
        out << tool_version << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return 2;
    }

    auto* cmd = app.get_subcommands().front();
    RunManifest manifest(cmd->get_name());
    manifest.seed(common.seed);
    try {
        if (cmd == solve) {
            const auto db = common.database(manifest);
            const auto solver = common.solver_config(manifest);
            const auto membrane = read_membrane(manifest, membrane_path);
            const auto feed = read_feed(manifest, feed_path, db);
            const auto grid = flux_grid(grid_n, jv_max, with_zero);
            manifest.config("flux_grid", {{"points", grid_n}, {"jv_max_m_s", jv_max}, {"include_zero", with_zero}});
            manifest.config("membrane", membrane_to_json(membrane));
            const auto curve = solve_rejection(feed, membrane, solver, grid);
            std::vector<VectorXd> r, c;
            for (const auto& p : curve) {
                r.push_back(p.rejections);
                c.push_back(p.permeate.concentrations());
            }
            manifest.write_output(out_path, curve_csv(feed.species(), feed.mask(), grid, r, c));
        } else if (cmd == fit) {
            const auto db = common.database(manifest);
            CalibrationConfig cc;
            cc.solver = common.solver_config(manifest);
            cc.jobs = common.resolved_jobs();
            cc.concentration_space = conc_space;
            ParameterBounds bounds;
            if (!bounds_path.empty()) {
                const auto j = parse_json(manifest.read_input(bounds_path), bounds_path);
                auto read = [&](const char* key, Interval& iv) {
                    if (j.contains(key)) iv = {j.at(key).at(0).get<double>(), j.at(key).at(1).get<double>()};
                };
                try {
                    read("r_p_nm", bounds.pore_radius_nm);
                    read("dx_e_um", bounds.thickness_um);
                    read("zeta_p", bounds.pore_dielectric);
                    read("chi_d_mol_m3", bounds.charge_density_mol_m3);
                } catch (const nlohmann::json::exception& e) {
                    throw InvalidInputError(bounds_path + ": " + e.what());
                }
            }
            bounds.validate();
            const auto ds = parse_dataset(manifest.read_input(data_path));
            for (const auto& w : ds.warnings) err << "warning: " << w << "\n";
            manifest.config("budget", budget);
            manifest.config("concentration_space", conc_space);
            const auto result = fit_membrane(CalibrationProblem(ds, db), bounds, common.seed, budget, cc);
            manifest.write_output(out_path, fit_result_to_json(result, common.seed, budget).dump(1) + "\n");
        } else if (cmd == gen) {
            const auto db = common.database(manifest);
            const auto solver = common.solver_config(manifest);
            const auto membrane = read_membrane(manifest, membrane_path);
            const auto species = db.select(species_names);
            std::vector<ConcentrationBounds> b(species->size(), {c_min, c_max});
            const auto feeds = sobol_compositions(species, b, static_cast<std::size_t>(count), skip);
            std::vector<std::pair<std::string, MixtureState>> named;
            for (std::size_t i = 0; i < feeds.size(); ++i)
                named.emplace_back("sobol_" + std::to_string(skip + i), feeds[i]);
            const auto grid = flux_grid(grid_n, jv_max, false);
            manifest.config("sampling", {{"species", species_names}, {"count", count}, {"skip", skip},
                                         {"c_min_mol_m3", c_min}, {"c_max_mol_m3", c_max}, {"noise", noise}});
            manifest.config("flux_grid", {{"points", grid_n}, {"jv_max_m_s", jv_max}});
            manifest.config("membrane", membrane_to_json(membrane));
            auto data = generate_pretrain_data(membrane, named, grid, solver, common.resolved_jobs());
            for (const auto& line : data.log) err << line << "\n";
            err << data.converged_points << " points converged, " << data.failed_points << " skipped\n";
            auto ds = noise > 0.0 ? perturb_dataset(data.dataset, noise, common.seed) : data.dataset;
            manifest.write_output(out_path, format_dataset(ds));
        } else if (cmd == pre) {
            const auto db = common.database(manifest);
            const auto ds = parse_dataset(manifest.read_input(data_path));
            if (ds.empty()) throw InvalidInputError("pretrain: dataset has no records");
            ModelState model;
            if (!init_path.empty()) {
                model = checkpoint_from_json(parse_json(manifest.read_input(init_path), init_path));
            } else {
                Architecture arch;
                arch.width = width;
                arch.encoding_order = order;
                model = make_model(*dataset_species(ds, db), arch, jv_scale, max_feed(ds), common.seed);
            }
            manifest.config("architecture", checkpoint_to_json(model, false)["architecture"]);
            auto cfg = topt.config(common, manifest);
            cfg.run_finetune = false;
            const auto result = train(model, ds, nullptr, cfg);
            err << "parameters: " << result.model.theta.size() << ", final loss: "
                << (result.history.empty() ? 0.0 : result.history.back().loss) << "\n";
            write_training_outputs(manifest, result, out_path, topt);
        } else if (cmd == fine) {
            const auto model = checkpoint_from_json(parse_json(manifest.read_input(model_path), model_path));
            const auto meas = parse_dataset(manifest.read_input(data_path));
            if (meas.empty()) throw InvalidInputError("finetune: dataset has no records");
            MeasuredDataset sim;
            if (!sim_path.empty()) sim = parse_dataset(manifest.read_input(sim_path));
            if (replay > 0.0 && sim.empty()) throw InvalidInputError("--replay needs --sim");
            auto cfg = fopt.config(common, manifest);
            cfg.run_pretrain = false;
            cfg.replay = replay;
            cfg.freeze_draws = freeze;
            manifest.config("replay", replay);
            manifest.config("freeze_draws", freeze);
            const auto result = train(model, sim, &meas, cfg);
            write_training_outputs(manifest, result, out_path, fopt);
        } else if (cmd == pred) {
            const auto db = common.database(manifest);
            const auto model = checkpoint_from_json(parse_json(manifest.read_input(model_path), model_path));
            const auto feed = read_feed(manifest, feed_path, db);
            const auto grid = flux_grid(grid_n, jv_max, with_zero);
            if (extrapolating(grid.back(), model.jv_scale))
                err << "warning: fluxes above " << model.jv_scale << " m/s extrapolate beyond the training range\n";
            const auto points = predict_rejection(model, feed, grid);
            std::vector<VectorXd> r, c;
            for (const auto& p : points) {
                r.push_back(p.rejections);
                c.push_back(p.permeate);
            }
            const auto csv = curve_csv(feed.species(), feed.mask(), grid, r, c);
            manifest.config("flux_grid", {{"points", grid_n}, {"jv_max_m_s", jv_max}, {"include_zero", with_zero}});
            if (out_path.empty()) {
                out << csv;
                return 0;
            }
            manifest.write_output(out_path, csv);
        } else if (cmd == ev) {
            if (model_path.empty() == membrane_path.empty())
                throw CLI::ValidationError("eval needs exactly one of --model or --membrane");
            const auto test = parse_dataset(manifest.read_input(data_path));
            Evaluation result;
            if (!model_path.empty()) {
                const auto model = checkpoint_from_json(parse_json(manifest.read_input(model_path), model_path));
                result = evaluate(model, test, {}, common.resolved_jobs());
            } else {
                const auto db = common.database(manifest);
                const auto solver = common.solver_config(manifest);
                result = evaluate_membrane(read_membrane(manifest, membrane_path), test, db, solver,
                                           common.resolved_jobs());
            }
            manifest.write_output(out_path, format_parity_csv(result));
            manifest.write_output(metrics_path.empty() ? out_path + ".metrics.json" : metrics_path,
                                  evaluation_to_json(result).dump(2) + "\n");
            out << "MAE " << result.mae_percent << " %, RMSE " << result.rmse_percent << " %\n";
        }
        manifest.finish(manifest_path(out_path));
    } catch (const CLI::ValidationError& e) {
        err << "error: " << e.what() << "\n" << cmd->help();
        return 2;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace ionflux::cli

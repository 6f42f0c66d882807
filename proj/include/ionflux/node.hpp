#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ionflux/chem.hpp"
#include "ionflux/dopri.hpp"
#include "ionflux/errors.hpp"
#include "ionflux/io.hpp"
#include "ionflux/mlp.hpp"

namespace ionflux {

struct Architecture {
    Eigen::Index species = 0;  // d
    int encoding_order = 4;    // p
    Eigen::Index width = 588;  // w
    int layers = 5;            // L

    MlpShape shape() const { return MlpShape{species + encoding_order, width, species, layers}; }
    std::size_t parameter_count() const { return shape().parameter_count(); }
    bool operator==(const Architecture&) const = default;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
};

struct ModelState {
    Architecture arch;
    std::vector<double> theta;
    double jv_scale = 3e-5;    // J_v normalization [m/s]
    double conc_scale = 1.0;   // concentration normalization [mol/m3]
    std::vector<std::string> species;
    VectorXi valences;
    std::uint64_t seed = 0;
    AdamState adam;

    void validate() const {
        arch.shape().validate();
        if (theta.size() != arch.parameter_count()) throw ValidationError("parameter count does not match architecture");
        if (static_cast<Eigen::Index>(species.size()) != arch.species || valences.size() != arch.species)
            throw ValidationError("species/valence list does not match architecture");
        if (!(jv_scale > 0.0) || !(conc_scale > 0.0)) throw ValidationError("normalization scales must be positive");
    }

    std::optional<Eigen::Index> index_of(const std::string& name) const {
        for (std::size_t i = 0; i < species.size(); ++i)
            if (species[i] == name) return static_cast<Eigen::Index>(i);
        return std::nullopt;
    }
};

inline ModelState make_model(const SpeciesList& species, Architecture arch, double jv_scale, double conc_scale,
                             std::uint64_t seed) {
    arch.species = static_cast<Eigen::Index>(species.size());
    ModelState m;
    m.arch = arch;
    m.jv_scale = jv_scale;
    m.conc_scale = conc_scale;
    m.seed = seed;
    m.valences = valences(species);
    for (const auto& s : species) m.species.push_back(s.name);
    m.theta = mlp_initialize(arch.shape(), seed);
    m.validate();
    return m;
}

// [u, u^2, ..., u^p] with u = J_v / J_v,scale.
inline VectorXd positional_encoding(double jv, double jv_scale, int p) {
    if (!(jv_scale > 0.0)) throw InvalidInputError("flux scale must be positive");
    const double u = jv / jv_scale;
    VectorXd e(p);
    double power = 1.0;
    for (int i = 0; i < p; ++i) {
        power *= u;
        e[i] = power;
    }
    return e;
}

inline bool extrapolating(double jv, double jv_scale) { return jv < 0.0 || jv > jv_scale; }

// Projection onto z_m . x = 0 within the masked coordinates (symmetric, idempotent).
struct MaskedProjector {
    VectorXd zm;
    double zz = 0.0;

    MaskedProjector(const VectorXi& z, const Mask& m) : zm(z.size()) {
        for (Eigen::Index j = 0; j < z.size(); ++j) zm[j] = m[j] ? double(z[j]) : 0.0;
        zz = zm.squaredNorm();
        if (zz == 0.0) throw DegenerateProjectionError();
    }
    void apply(VectorXd& x) const { x -= (zm.dot(x) / zz) * zm; }
};

// Field in normalized coordinates: dy/du = P(m . MLP([y . m, u, ..., u^p])).
class NodeField {
public:
    NodeField(const ModelState& model, const Mask& mask)
        : model_(model), shape_(model.arch.shape()), mask_(mask.weights()), proj_(model.valences, mask) {}

    const ModelState& model() const { return model_; }
    const VectorXd& mask_weights() const { return mask_; }
    const MaskedProjector& projector() const { return proj_; }

    void operator()(double u, const VectorXd& y, VectorXd& dy) { eval(u, y, dy, cache_); }

    void eval(double u, const VectorXd& y, VectorXd& dy, MlpCache& cache) const {
        VectorXd x(shape_.input);
        fill_input(u, y, x);
        dy = mlp_forward(shape_, model_.theta, x, cache).cwiseProduct(mask_);
        proj_.apply(dy);
        if (!dy.allFinite()) throw NumericalOverflowError("non-finite vector field output");
    }

    // a^T d f/d y into a_y; a^T d f/d theta added into g_theta (if non-null).
    void vjp(double u, const VectorXd& y, const VectorXd& a, VectorXd& a_y, double* g_theta, MlpCache& cache) const {
        VectorXd dy;
        eval_vjp(u, y, a, dy, a_y, g_theta, cache);
    }

    // Field value and vector-Jacobian product from one forward pass.
    void eval_vjp(double u, const VectorXd& y, const VectorXd& a, VectorXd& dy, VectorXd& a_y, double* g_theta,
                  MlpCache& cache) const {
        VectorXd x(shape_.input);
        fill_input(u, y, x);
        dy = mlp_forward(shape_, model_.theta, x, cache).cwiseProduct(mask_);
        proj_.apply(dy);
        if (!dy.allFinite()) throw NumericalOverflowError("non-finite vector field output");
        VectorXd g = a;
        proj_.apply(g);
        g.array() *= mask_.array();
        const VectorXd gx = mlp_backward(shape_, model_.theta, cache, g, g_theta);
        a_y = gx.head(model_.arch.species).cwiseProduct(mask_);
    }

private:
    void fill_input(double u, const VectorXd& y, VectorXd& x) const {
        const auto d = model_.arch.species;
        x.head(d) = y.cwiseProduct(mask_);
        double power = 1.0;
        for (int i = 0; i < model_.arch.encoding_order; ++i) {
            power *= u;
            x[d + i] = power;
        }
    }

    const ModelState& model_;
    MlpShape shape_;
    VectorXd mask_;
    MaskedProjector proj_;
    MlpCache cache_;
};

// Physical-units field dh/dJ_v at (h, J_v).
inline VectorXd vector_field(const ModelState& model, const VectorXd& h, double jv, const Mask& mask) {
    if (!h.allFinite()) throw InvalidInputError("vector_field: non-finite state");
    NodeField f(model, mask);
    VectorXd dy(h.size());
    MlpCache cache;
    f.eval(jv / model.jv_scale, h / model.conc_scale, dy, cache);
    return dy * (model.conc_scale / model.jv_scale);
}

// Normalized initial state: masked, projected, scaled.
inline VectorXd initial_state(const ModelState& model, const VectorXd& h0, const Mask& mask) {
    VectorXd y = h0.cwiseProduct(mask.weights()) / model.conc_scale;
    MaskedProjector(model.valences, mask).apply(y);
    return y;
}

inline std::vector<double> normalized_targets(const ModelState& model, const std::vector<double>& jv) {
    std::vector<double> u(jv.size());
    for (std::size_t i = 0; i < jv.size(); ++i) u[i] = jv[i] / model.jv_scale;
    return u;
}

// Normalized trajectory: rows are y(u_k) for ascending u_k >= 0.
inline MatrixXd integrate_normalized(const ModelState& model, const VectorXd& y0, const Mask& mask,
                                     const std::vector<double>& u, const IntegrationConfig& cfg = {},
                                     IntegrationStats* stats = nullptr) {
    for (std::size_t i = 0; i < u.size(); ++i)
        if (u[i] < 0.0 || (i > 0 && u[i] < u[i - 1])) throw InvalidInputError("flux targets must be ascending and >= 0");
    NodeField f(model, mask);
    return integrate_dopri(f, 0.0, y0, u, cfg, stats);
}

// h(J_v) in mol/m3 for ascending targets; row for J_v = 0 equals the (masked, projected) h0.
inline MatrixXd integrate(const ModelState& model, const VectorXd& h0, const Mask& mask,
                          const std::vector<double>& targets, const IntegrationConfig& cfg = {}) {
    model.validate();
    const VectorXd y0 = initial_state(model, h0, mask);
    return integrate_normalized(model, y0, mask, normalized_targets(model, targets), cfg) * model.conc_scale;
}

// ---------------------------------------------------------------------------
// Gradients

struct TrajectoryGradients {
    std::vector<double> theta;  // dL/dtheta
    VectorXd h0;                // dL/dh0 (physical units)
};

namespace detail {

// Backward augmented system [y, a, q] for the continuous adjoint, with
// dq/du = a^T df/dtheta so that dL/dtheta = -q at u = 0.
struct AdjointField {
    const NodeField& field;
    Eigen::Index d;
    MlpCache cache;
    VectorXd fy, ay;

    void operator()(double u, const VectorXd& s, VectorXd& ds) {
        ds.tail(ds.size() - 2 * d).setZero();
        field.eval_vjp(u, s.head(d), s.segment(d, d), fy, ay, ds.data() + 2 * d, cache);
        ds.head(d) = fy;
        ds.segment(d, d) = -ay;
    }
};

}  // namespace detail

// Continuous adjoint for a normalized trajectory: y_traj rows are the forward
// states at u (ascending), dl_dy the loss gradients w.r.t. those rows.
inline TrajectoryGradients adjoint_normalized(const ModelState& model, const Mask& mask, const std::vector<double>& u,
                                              const MatrixXd& y_traj, const MatrixXd& dl_dy,
                                              const IntegrationConfig& cfg = {}) {
    const auto d = model.arch.species;
    const auto np = static_cast<Eigen::Index>(model.theta.size());
    NodeField field(model, mask);
    detail::AdjointField aug{field, d, {}, VectorXd(d), VectorXd(d)};
    IntegrationConfig back = cfg;
    back.error_components = 2 * d;
    back.active_components = 2 * d;
    back.dense_output = false;
    IntegrationStats stats;
    DopriStepper<detail::AdjointField> stepper(aug, back, stats);

    VectorXd s = VectorXd::Zero(2 * d + np);
    for (Eigen::Index k = static_cast<Eigen::Index>(u.size()) - 1; k >= 0; --k) {
        s.head(d) = y_traj.row(k).transpose();
        s.segment(d, d) += dl_dy.row(k).transpose();
        const double from = u[static_cast<std::size_t>(k)];
        const double to = k > 0 ? u[static_cast<std::size_t>(k - 1)] : 0.0;
        if (from <= to) continue;
        stepper.reset(from, s, to);
        while (stepper.t() > to) stepper.step(to);
        s = stepper.y();
    }
    TrajectoryGradients g;
    g.theta.resize(static_cast<std::size_t>(np));
    for (Eigen::Index i = 0; i < np; ++i) g.theta[static_cast<std::size_t>(i)] = -s[2 * d + i];
    VectorXd a0 = s.segment(d, d);
    field.projector().apply(a0);
    g.h0 = a0.cwiseProduct(field.mask_weights()) / model.conc_scale;
    return g;
}

// Physical-units wrapper: loss_grads rows are dL/dh at each target.
inline TrajectoryGradients adjoint_gradients(const ModelState& model, const VectorXd& h0, const Mask& mask,
                                             const std::vector<double>& targets, const MatrixXd& loss_grads,
                                             const IntegrationConfig& cfg = {}) {
    model.validate();
    if (loss_grads.rows() != static_cast<Eigen::Index>(targets.size()) || loss_grads.cols() != model.arch.species)
        throw InvalidInputError("loss gradient shape does not match targets x species");
    const VectorXd y0 = initial_state(model, h0, mask);
    const auto u = normalized_targets(model, targets);
    const MatrixXd traj = integrate_normalized(model, y0, mask, u, cfg);
    return adjoint_normalized(model, mask, u, traj, loss_grads * model.conc_scale, cfg);
}

// Exact reverse-mode differentiation through fixed-step DOPRI stages
// (fifth-order solution, `steps_per_unit` steps per unit of u). Used to
// cross-check the continuous adjoint.
struct DiscreteResult {
    MatrixXd trajectory;  // physical units
    TrajectoryGradients grads;
};

inline DiscreteResult discrete_gradients(const ModelState& model, const VectorXd& h0, const Mask& mask,
                                         const std::vector<double>& targets, const MatrixXd& loss_grads,
                                         int steps_per_unit) {
    using namespace dp45;
    model.validate();
    const auto d = model.arch.species;
    NodeField field(model, mask);
    MlpCache cache;
    const auto u = normalized_targets(model, targets);
    static constexpr double A[6][6] = {{0, 0, 0, 0, 0, 0},
                                       {a21, 0, 0, 0, 0, 0},
                                       {a31, a32, 0, 0, 0, 0},
                                       {a41, a42, a43, 0, 0, 0},
                                       {a51, a52, a53, a54, 0, 0},
                                       {a61, a62, a63, a64, a65, 0}};
    static constexpr double B[6] = {a71, 0.0, a73, a74, a75, a76};
    static constexpr double C[6] = {0.0, c2, c3, c4, c5, 1.0};

    struct Step {
        double t, h;
        VectorXd y;
    };
    std::vector<Step> steps;
    std::vector<std::size_t> target_step;  // number of steps taken before reaching target k
    VectorXd y = initial_state(model, h0, mask);
    double t = 0.0;
    MatrixXd traj(static_cast<Eigen::Index>(u.size()), d);
    std::array<VectorXd, 6> k;
    for (std::size_t ti = 0; ti < u.size(); ++ti) {
        const double span = u[ti] - t;
        const long n = span > 0.0 ? std::max(1L, static_cast<long>(std::ceil(span * steps_per_unit))) : 0;
        for (long s = 0; s < n; ++s) {
            const double h = span / static_cast<double>(n);
            const double ts = t + static_cast<double>(s) * h;
            steps.push_back({ts, h, y});
            VectorXd ynew = y;
            for (int i = 0; i < 6; ++i) {
                VectorXd yi = y;
                for (int j = 0; j < i; ++j) yi += h * A[i][j] * k[static_cast<std::size_t>(j)];
                field.eval(ts + C[i] * h, yi, k[static_cast<std::size_t>(i)], cache);
                ynew += h * B[i] * k[static_cast<std::size_t>(i)];
            }
            y = ynew;
        }
        t = u[ti];
        traj.row(static_cast<Eigen::Index>(ti)) = y.transpose();
        target_step.push_back(steps.size());
    }

    std::vector<double> g_theta(model.theta.size(), 0.0);
    VectorXd ybar = VectorXd::Zero(d);
    std::size_t cursor = steps.size();
    for (Eigen::Index ti = static_cast<Eigen::Index>(u.size()) - 1; ti >= 0; --ti) {
        ybar += model.conc_scale * loss_grads.row(ti).transpose();
        const std::size_t stop = ti > 0 ? target_step[static_cast<std::size_t>(ti - 1)] : 0;
        while (cursor > stop) {
            const Step& st = steps[--cursor];
            std::array<VectorXd, 6> yi;
            for (int i = 0; i < 6; ++i) {
                yi[static_cast<std::size_t>(i)] = st.y;
                for (int j = 0; j < i; ++j) yi[static_cast<std::size_t>(i)] += st.h * A[i][j] * k[static_cast<std::size_t>(j)];
                field.eval(st.t + C[i] * st.h, yi[static_cast<std::size_t>(i)], k[static_cast<std::size_t>(i)], cache);
            }
            std::array<VectorXd, 6> kbar;
            for (int i = 0; i < 6; ++i) kbar[static_cast<std::size_t>(i)] = st.h * B[i] * ybar;
            VectorXd ybar_prev = ybar;
            VectorXd stage_bar(d);
            for (int i = 5; i >= 0; --i) {
                field.vjp(st.t + C[i] * st.h, yi[static_cast<std::size_t>(i)], kbar[static_cast<std::size_t>(i)],
                          stage_bar, g_theta.data(), cache);
                ybar_prev += stage_bar;
                for (int j = 0; j < i; ++j) kbar[static_cast<std::size_t>(j)] += st.h * A[i][j] * stage_bar;
            }
            ybar = ybar_prev;
        }
    }
    DiscreteResult out;
    out.trajectory = traj * model.conc_scale;
    out.grads.theta = std::move(g_theta);
    field.projector().apply(ybar);
    out.grads.h0 = ybar.cwiseProduct(field.mask_weights()) / model.conc_scale;
    return out;
}

// ---------------------------------------------------------------------------
// Prediction

struct PredictionPoint {
    double jv = 0.0;
    VectorXd permeate;    // in the feed's species order
    VectorXd rejections;  // 1 - h/C_f for masked-in ions
};

// Feed concentrations in model species order; unknown species are an error.
inline VectorXd feed_in_model_order(const ModelState& model, const MixtureState& feed, Mask& mask) {
    VectorXd h0 = VectorXd::Zero(model.arch.species);
    mask = Mask(static_cast<std::size_t>(model.arch.species), false);
    for (Eigen::Index j = 0; j < feed.dim(); ++j) {
        if (!feed.mask()[j]) continue;
        const auto& ion = feed.species()[static_cast<std::size_t>(j)];
        const auto idx = model.index_of(ion.name);
        if (!idx) throw UnsupportedSpeciesError("species not supported by the model: " + ion.name);
        if (model.valences[*idx] != ion.valence)
            throw UnsupportedSpeciesError("valence of " + ion.name + " differs from the model");
        h0[*idx] = feed.concentration(j);
        mask.set(*idx, feed.concentration(j) > 0.0);
    }
    return h0;
}

inline std::vector<PredictionPoint> predict_rejection(const ModelState& model, const MixtureState& feed,
                                                      const std::vector<double>& flux_grid,
                                                      const IntegrationConfig& cfg = {}) {
    Mask mask;
    const VectorXd h0 = feed_in_model_order(model, feed, mask);
    std::vector<double> targets = flux_grid;
    const MatrixXd traj = integrate(model, h0, mask, targets, cfg);
    std::vector<PredictionPoint> out;
    for (std::size_t i = 0; i < flux_grid.size(); ++i) {
        PredictionPoint p;
        p.jv = flux_grid[i];
        p.permeate = VectorXd::Zero(feed.dim());
        p.rejections = VectorXd::Zero(feed.dim());
        for (Eigen::Index j = 0; j < feed.dim(); ++j) {
            if (!feed.mask()[j]) continue;
            const auto idx = *model.index_of(feed.species()[static_cast<std::size_t>(j)].name);
            p.permeate[j] = traj(static_cast<Eigen::Index>(i), idx);
            if (feed.concentration(j) > 0.0) p.rejections[j] = 1.0 - p.permeate[j] / feed.concentration(j);
        }
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: JSON header + parameters as base64 little-endian float64.

inline constexpr int checkpoint_version = 1;

inline nlohmann::json checkpoint_to_json(const ModelState& m, bool with_optimizer = true) {
    nlohmann::json j;
    j["format"] = "ionflux-node-checkpoint";
    j["version"] = checkpoint_version;
    j["architecture"] = {{"species", m.arch.species},
                         {"encoding_order", m.arch.encoding_order},
                         {"width", m.arch.width},
                         {"layers", m.arch.layers},
                         {"parameter_count", m.theta.size()}};
    j["normalization"] = {{"jv_scale_m_s", m.jv_scale}, {"conc_scale_mol_m3", m.conc_scale}};
    j["species"] = m.species;
    j["valences"] = std::vector<int>(m.valences.data(), m.valences.data() + m.valences.size());
    j["seed"] = m.seed;
    j["parameters"] = io::encode_doubles(m.theta);
    if (with_optimizer && m.adam.step > 0)
        j["adam"] = {{"step", m.adam.step}, {"m", io::encode_doubles(m.adam.m)}, {"v", io::encode_doubles(m.adam.v)}};
    return j;
}

inline ModelState checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.at("format").get<std::string>() != "ionflux-node-checkpoint") throw ValidationError("not a model checkpoint");
        if (j.at("version").get<int>() != checkpoint_version) throw ValidationError("unsupported checkpoint version");
        ModelState m;
        const auto& a = j.at("architecture");
        m.arch.species = a.at("species").get<Eigen::Index>();
        m.arch.encoding_order = a.at("encoding_order").get<int>();
        m.arch.width = a.at("width").get<Eigen::Index>();
        m.arch.layers = a.at("layers").get<int>();
        m.jv_scale = j.at("normalization").at("jv_scale_m_s").get<double>();
        m.conc_scale = j.at("normalization").at("conc_scale_mol_m3").get<double>();
        m.species = j.at("species").get<std::vector<std::string>>();
        const auto z = j.at("valences").get<std::vector<int>>();
        m.valences = Eigen::Map<const VectorXi>(z.data(), static_cast<Eigen::Index>(z.size()));
        m.seed = j.at("seed").get<std::uint64_t>();
        m.theta = io::decode_doubles(j.at("parameters").get<std::string>());
        if (j.contains("adam")) {
            m.adam.step = j["adam"].at("step").get<long>();
            m.adam.m = io::decode_doubles(j["adam"].at("m").get<std::string>());
            m.adam.v = io::decode_doubles(j["adam"].at("v").get<std::string>());
            if (m.adam.m.size() != m.theta.size() || m.adam.v.size() != m.theta.size())
                throw ValidationError("optimizer state size mismatch");
        }
        m.validate();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("malformed checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const ModelState& m, const std::string& path) {
    io::atomic_write(path, checkpoint_to_json(m).dump(1) + "\n");
}

inline ModelState load_checkpoint(const std::string& path) {
    try {
        return checkpoint_from_json(nlohmann::json::parse(io::read_file(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(std::string("checkpoint is not valid JSON: ") + e.what());
    }
}

}  // namespace ionflux

#include "ionflux/chem.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace ionflux;

namespace {

VectorXd vec(std::initializer_list<double> v) {
    VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

VectorXi ivec(std::initializer_list<int> v) {
    VectorXi out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (int x : v) out[i++] = x;
    return out;
}

SpeciesPtr nacl() { return default_ion_database().select({"Na+", "Cl-"}); }

}  // namespace

TEST(Projection, SymmetricPairSplitsImbalance) {
    const VectorXd p = project_electroneutral(vec({2, 1}), ivec({1, -1}), Mask(2));
    EXPECT_NEAR(p[0], 1.5, 1e-15);
    EXPECT_NEAR(p[1], 1.5, 1e-15);
}

TEST(Projection, NeutralInputIsUnchanged) {
    const VectorXd p = project_electroneutral(vec({1, 2}), ivec({2, -1}), Mask(2));
    EXPECT_DOUBLE_EQ(p[0], 1.0);
    EXPECT_DOUBLE_EQ(p[1], 2.0);
}

TEST(Projection, MaskedCoordinatePassesThrough) {
    Mask m(std::vector<std::uint8_t>{1, 1, 0});
    const VectorXd p = project_electroneutral(vec({1, 0, 0}), ivec({1, -1, 2}), m);
    EXPECT_NEAR(p[0], 0.5, 1e-15);
    EXPECT_NEAR(p[1], 0.5, 1e-15);
    EXPECT_EQ(p[2], 0.0);

    const VectorXd q = project_electroneutral(vec({1, 0, 7}), ivec({1, -1, 2}), m);
    EXPECT_EQ(q[2], 7.0);
    EXPECT_NEAR(q[0], 0.5, 1e-15);
}

TEST(Projection, AllMaskedOutIsDegenerate) {
    EXPECT_THROW(project_electroneutral(vec({1, 2}), ivec({1, -1}), Mask(2, false)), DegenerateProjectionError);
}

TEST(Projection, IdempotentAndOrthogonal) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd(0.0, 10.0);
    const VectorXi z = ivec({1, 1, 2, 2, -1, -1, -2, 1});
    for (int trial = 0; trial < 200; ++trial) {
        VectorXd h(8);
        Mask m(8, false);
        for (int j = 0; j < 8; ++j) {
            h[j] = nd(rng);
            m.set(j, (rng() & 3u) != 0);
        }
        m.set(0, true);
        const VectorXd p = project_electroneutral(h, z, m);
        const VectorXd pp = project_electroneutral(p, z, m);
        EXPECT_LE((pp - p).norm(), 1e-12 * std::max(1.0, p.norm()));

        double dot = 0.0, zp = 0.0;
        for (int j = 0; j < 8; ++j) {
            if (!m[j]) continue;
            dot += (h[j] - p[j]) * p[j];
            zp += z[j] * p[j];
        }
        EXPECT_LE(std::abs(dot), 1e-10 * std::max(1.0, h.squaredNorm()));
        EXPECT_LE(std::abs(zp), 1e-12 * std::max(1.0, h.lpNorm<1>()));
    }
}

TEST(ValidateFeed, NeutralFeedAccepted) {
    const auto feed = MixtureState::from_map(nacl(), {{"Na+", 10.0}, {"Cl-", 10.0}});
    const auto out = validate_feed(feed);
    EXPECT_EQ(out.concentrations(), feed.concentrations());
}

TEST(ValidateFeed, TinyImbalanceRepaired) {
    const auto feed = MixtureState::from_map(nacl(), {{"Na+", 10.0}, {"Cl-", 10.0000001}});
    const auto out = validate_feed(feed);
    EXPECT_NEAR(out.concentration(0), 10.00000005, 1e-12);
    EXPECT_NEAR(out.concentration(1), 10.00000005, 1e-12);
    EXPECT_LE(charge_imbalance(out.concentrations(), out.valences(), out.mask()), 1e-15);
}

TEST(ValidateFeed, LargeImbalanceRejected) {
    const auto feed = MixtureState::from_map(nacl(), {{"Na+", 10.0}, {"Cl-", 20.0}});
    EXPECT_THROW(validate_feed(feed), InvalidFeedError);
}

TEST(ValidateFeed, NegativeConcentrationRejected) {
    EXPECT_THROW(MixtureState(nacl(), vec({10.0, -1.0}), Mask(2)), InvalidFeedError);
}

TEST(ValidateFeed, RepairDisabledUsesTolerance) {
    const auto feed = MixtureState::from_map(nacl(), {{"Na+", 10.0}, {"Cl-", 10.001}});
    FeedCheck check;
    check.repair = false;
    EXPECT_THROW(validate_feed(feed, check), InvalidFeedError);
}

TEST(IonDatabase, SelectsInDatabaseOrder) {
    const auto db = default_ion_database();
    const auto sp = db.select({"SO4_2-", "Cl-", "Na+", "Cl-"});
    ASSERT_EQ(sp->size(), 3u);
    EXPECT_EQ((*sp)[0].name, "Na+");
    EXPECT_EQ((*sp)[1].name, "Cl-");
    EXPECT_EQ((*sp)[2].name, "SO4_2-");
    EXPECT_THROW(db.at("Xe+"), UnsupportedSpeciesError);
}

TEST(IonDatabase, JsonRoundTrip) {
    const auto db = default_ion_database();
    nlohmann::json j = nlohmann::json::array();
    for (const auto& ion : db.ions()) j.push_back(ion_to_json(ion));
    const auto back = ion_database_from_json(j);
    ASSERT_EQ(back.size(), db.size());
    for (std::size_t i = 0; i < db.size(); ++i) {
        EXPECT_EQ(back.ions()[i].name, db.ions()[i].name);
        EXPECT_EQ(back.ions()[i].diffusivity_m2_s, db.ions()[i].diffusivity_m2_s);
    }
}

TEST(IonDatabase, ShippedFileMatchesDefaults) {
    const auto file = load_ion_database(std::string(IONFLUX_DATA_DIR) + "/ions.json");
    const auto def = default_ion_database();
    ASSERT_EQ(file.size(), def.size());
    for (std::size_t i = 0; i < def.size(); ++i) {
        EXPECT_EQ(file.ions()[i].name, def.ions()[i].name);
        EXPECT_EQ(file.ions()[i].stokes_radius_nm, def.ions()[i].stokes_radius_nm);
    }
}

TEST(MixtureState, FromMapRejectsUnknownSpecies) {
    EXPECT_THROW(MixtureState::from_map(nacl(), {{"K+", 1.0}}), UnsupportedSpeciesError);
}

TEST(MixtureState, MaskedEntryMustBeZero) {
    EXPECT_THROW(MixtureState(nacl(), vec({1.0, 1.0}), Mask(std::vector<std::uint8_t>{1, 0})), InvalidInputError);
}

TEST(Membrane, ValidationRejectsBadDielectric) {
    MembraneParams m;
    m.pore_dielectric = 80.0;
    EXPECT_THROW(m.validate(), InvalidInputError);
    m = MembraneParams{};
    m.pore_radius_nm = 0.0;
    EXPECT_THROW(m.validate(), InvalidInputError);
    EXPECT_NO_THROW(reference_membrane().validate());
}

TEST(Membrane, JsonRoundTrip) {
    const auto m = reference_membrane();
    EXPECT_EQ(membrane_from_json(membrane_to_json(m)), m);
}

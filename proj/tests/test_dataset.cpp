#include "ionflux/dataset.hpp"

#include <gtest/gtest.h>

using namespace ionflux;

namespace {

const std::string kHeader = "experiment_id,ion,z,feed_mol_m3,jv_m_s,permeate_mol_m3,sigma_mol_m3,provenance\n";

}  // namespace

TEST(Dataset, HeaderOnlyIsEmptyWithWarning) {
    const auto ds = parse_dataset(kHeader);
    EXPECT_TRUE(ds.empty());
    EXPECT_EQ(ds.warnings.size(), 1u);
}

TEST(Dataset, NegativeConcentrationNamesLine) {
    const std::string text = kHeader + "e1,Na+,1,10,1e-5,2,0.1,measured\n" + "e1,Cl-,-1,10,1e-5,-2,0.1,measured\n";
    try {
        parse_dataset(text);
        FAIL() << "expected a parse error";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("3"), std::string::npos);
    }
}

TEST(Dataset, MalformedNumberRejected) {
    EXPECT_THROW(parse_dataset(kHeader + "e1,Na+,1,ten,1e-5,2,0.1,\n"), ParseError);
    EXPECT_THROW(parse_dataset("experiment_id,ion\n"), ParseError);
}

TEST(Dataset, InconsistentFeedRejected) {
    const std::string text = kHeader + "e1,Na+,1,10,1e-5,2,0.1,\n" + "e1,Cl-,-1,10,1e-5,2,0.1,\n" +
                             "e1,Na+,1,12,2e-5,2,0.1,\n";
    EXPECT_THROW(parse_dataset(text), ValidationError);
}

TEST(Dataset, GroupsAndRoundTrips) {
    const std::string text = kHeader + "a,Na+,1,10,1e-5,2,0.1,measured\n" + "a,Cl-,-1,10,1e-5,2,0.1,measured\n" +
                             "b,Mg2+,2,5,1e-5,0.5,0.05,simulated\n" + "b,SO4_2-,-2,5,1e-5,0.5,0.05,simulated\n" +
                             "a,Na+,1,10,2e-5,1.5,0.1,measured\n" + "a,Cl-,-1,10,2e-5,1.5,0.1,measured\n";
    const auto ds = parse_dataset(text);
    ASSERT_EQ(ds.size(), 6u);
    ASSERT_EQ(ds.experiments.size(), 2u);
    EXPECT_EQ(ds.experiments[0].id, "a");
    EXPECT_EQ(ds.experiments[0].fluxes, (std::vector<double>{1e-5, 2e-5}));
    EXPECT_EQ(ds.experiments[1].feed.at("Mg2+"), 5.0);
    const auto again = parse_dataset(format_dataset(ds));
    EXPECT_EQ(format_dataset(again), format_dataset(ds));
    EXPECT_NEAR(ds.records[0].rejection(), 0.8, 1e-15);
}

TEST(Dataset, SpeciesFollowDatabaseOrder) {
    const std::string text = kHeader + "a,SO4_2-,-2,5,1e-5,0.5,0.05,\n" + "a,Na+,1,10,1e-5,1,0.1,\n";
    const auto sp = dataset_species(parse_dataset(text), default_ion_database());
    ASSERT_EQ(sp->size(), 2u);
    EXPECT_EQ((*sp)[0].name, "Na+");
}

TEST(Dataset, ValenceMustMatchDatabase) {
    const std::string text = kHeader + "a,Na+,2,10,1e-5,1,0.1,\n" + "a,SO4_2-,-2,10,1e-5,1,0.1,\n";
    EXPECT_THROW(dataset_species(parse_dataset(text), default_ion_database()), ValidationError);
}

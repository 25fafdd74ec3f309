#include "doctest.h"

#include "agt/aggdata.hpp"
#include "agt/csv.hpp"

#include <string>

using namespace agt;

namespace {

const std::string kData = AGT_DATA_DIR;

CovariateSchema toy_schema() {
  return CovariateSchema::parse(R"(
[covariate age]
kind = continuous

[covariate sex]
kind = binary
levels = f, m

[covariate region]
kind = categorical
levels = north, south, east

[strata * age]
young = <50
old = >=50
)");
}

MetaDataset application() {
  return load_meta_dataset(kData + "/application/effects.csv", kData + "/application/moments.csv",
                           kData + "/application/schema.txt");
}

template <class F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("risk difference from counts") {
  auto rd = risk_difference_from_counts(415, 2997, 511, 2991);
  CHECK(rd.estimate == doctest::Approx(-0.032).epsilon(0.0005 / 0.032));
  CHECK(std::abs(rd.estimate + 0.032) < 0.0005);
  CHECK(std::abs(rd.se - 0.009) < 0.0005);

  rd = risk_difference_from_counts(0, 100, 0, 100);
  CHECK(rd.estimate == 0.0);
  CHECK(rd.se == 0.0);

  rd = risk_difference_from_counts(382, 2373, 495, 2371);
  CHECK(std::abs(rd.estimate + 0.0478) < 5e-5);
  CHECK(std::abs(rd.se - 0.0113) < 5e-5);

  CHECK_THROWS_AS(risk_difference_from_counts(1, 0, 1, 10), InputError);
  CHECK_THROWS_AS(risk_difference_from_counts(11, 10, 1, 10), InputError);
  CHECK_THROWS_AS(risk_difference_from_counts(-1, 10, 1, 10), InputError);
}

TEST_CASE("interval parsing") {
  const Interval a = Interval::parse("[40, 50)");
  CHECK(a.contains(40.0));
  CHECK_FALSE(a.contains(50.0));
  const Interval b = Interval::parse(">=60");
  CHECK(b.contains(60.0));
  CHECK_FALSE(b.contains(59.99));
  const Interval c = Interval::parse("<=40");
  CHECK(c.contains(40.0));
  CHECK_FALSE(c.contains(40.01));
  CHECK(Interval::parse("(-inf,40]") == c);
  CHECK(Interval::parse(a.str()) == a);
  CHECK_THROWS_AS(Interval::parse("[5,1)"), InputError);
  CHECK_THROWS_AS(Interval::parse("forty"), InputError);
}

TEST_CASE("schema parse, strata resolution and serialization") {
  const CovariateSchema s = toy_schema();
  CHECK(s.size() == 3);
  CHECK(s.covariate(1).kind == CovariateKind::binary);
  CHECK(s.strata_for("any", 0).size() == 2);
  CHECK(s.strata_for("any", 2).size() == 3);
  const auto [l, stratum] = s.resolve("T1", 2, "south");
  CHECK(l == 2);
  CHECK(stratum.contains(1.0));
  CHECK(s.parse_value(1, "m") == 1.0);
  CHECK(s.parse_value(1, "0") == 0.0);
  CHECK_THROWS_AS(s.parse_value(2, "west"), InputError);
  CHECK(CovariateSchema::parse(s.serialize()) == s);

  CHECK_THROWS_AS(CovariateSchema::parse("[covariate a]\nkind = binary\n[covariate a]\nkind = binary\n"), InputError);
  CHECK_THROWS_AS(CovariateSchema::parse("[covariate a]\nkind = categorical\nlevels = x, x\n"), InputError);
}

TEST_CASE("application tables load with J = 26") {
  const MetaDataset ds = application();
  CHECK(ds.trial_count() == 4);
  CHECK(ds.moment_count() == 26);
  CHECK(ds.schema().covariate(0).kind == CovariateKind::continuous);
  CHECK(ds.schema().covariate(1).kind == CovariateKind::binary);
  CHECK(ds.schema().covariate(2).kind == CovariateKind::binary);
  CHECK(ds.warnings().empty());

  const Trial& t = ds.trial("EMPEROR-Preserved");
  CHECK(t.effects.size() == 8);
  CHECK(t.effects.front().is_marginal());
  CHECK(t.n == 5988.0);
  // SD 8.8 becomes a second moment under the population-variance convention
  const auto& m2 = t.moments[1];
  CHECK(m2.spec.kind == MomentKind::second_moment);
  CHECK(m2.value == doctest::Approx(8.8 * 8.8 * 5987.0 / 5988.0 + 54.3 * 54.3));
  CHECK(ds.trial("DAPA-HF").effects.size() == 5);

  // Effects are ordered marginal first, then by (covariate, level).
  for (const auto& trial : ds.trials()) {
    for (std::size_t j = 1; j < trial.effects.size(); ++j) {
      CHECK(std::pair(trial.effects[j - 1].covariate, trial.effects[j - 1].level) <
            std::pair(trial.effects[j].covariate, trial.effects[j].level));
    }
  }
}

TEST_CASE("round trip reproduces the dataset field for field") {
  const MetaDataset ds = application();
  const MetaDataset again = parse_meta_dataset(serialize_effects(ds), serialize_moments(ds), ds.schema());
  CHECK(again == ds);
  const MetaDataset third = parse_meta_dataset(serialize_effects(again), serialize_moments(again),
                                               CovariateSchema::parse(again.schema().serialize()));
  CHECK(third == ds);
}

TEST_CASE("ingestion errors") {
  const CovariateSchema s = toy_schema();
  const std::string moments = "trial,covariate,statistic,value,n\nA,sex,proportion,0.4,100\n";
  const std::string effects = "trial,covariate,level,estimate,se\nA,,,0.1,0.02\n";

  CHECK(error_of([&] { parse_meta_dataset("", moments, s); }).find("trial has no marginal effect") !=
        std::string::npos);
  CHECK(error_of([&] { parse_meta_dataset("trial,covariate,level,estimate,se\n", moments, s); })
            .find("has no marginal effect") != std::string::npos);
  CHECK_THROWS_AS(parse_meta_dataset(effects, "trial,covariate,statistic,value,n\nA,sex,proportion,1.2,100\n", s),
                  InputError);
  CHECK_THROWS_AS(parse_meta_dataset(effects + "A,,,0.2,0.02\n", moments, s), InputError);
  CHECK_THROWS_AS(parse_meta_dataset(effects + "A,sex,x,0.2,0.02\n", moments, s), InputError);
  CHECK_THROWS_AS(parse_meta_dataset(effects + "A,height,m,0.2,0.02\n", moments, s), InputError);
  CHECK(error_of([&] { parse_meta_dataset("trial,covariate,level,estimate,se\nA,,,abc,0.02\n", moments, s); })
            .find("non-numeric") != std::string::npos);
  CHECK_THROWS_AS(parse_meta_dataset(effects, "trial,covariate,statistic,value,n\nA,age,sd,3,100\n", s), InputError);

  // Categorical proportion via covariate=level syntax.
  const MetaDataset ds = parse_meta_dataset(
      effects + "A,region,east,0.3,0.05\n",
      "trial,covariate,statistic,value,n\nA,region=east,proportion,0.2,100\nA,age,mean,40,100\n", s);
  CHECK(ds.moment_count() == 2);
  CHECK(ds.trials()[0].moments[0].spec.level == 2);
  CHECK(ds.trials()[0].effects[1].covariate == 3);
  CHECK(ds.trials()[0].effects[1].level == 3);
}

TEST_CASE("counts fill in missing estimates and disagreements warn") {
  const CovariateSchema s = toy_schema();
  const std::string moments = "trial,covariate,statistic,value,n\nA,sex,proportion,0.4,200\n";
  MetaDataset ds = parse_meta_dataset(
      "trial,covariate,level,estimate,se,events1,n1,events0,n0\nA,,,,,10,100,20,100\n", moments, s);
  CHECK(ds.trials()[0].effects[0].estimate == doctest::Approx(-0.1));
  CHECK(ds.warnings().empty());

  ds = parse_meta_dataset("trial,covariate,level,estimate,se,events1,n1,events0,n0\nA,,,-0.25,0.05,10,100,20,100\n",
                          moments, s);
  CHECK(ds.trials()[0].effects[0].estimate == -0.25);
  CHECK(ds.warnings().size() == 1);
}

TEST_CASE("covariate samples") {
  const CovariateSchema s = toy_schema();
  const CovariateSample x =
      parse_covariate_sample("age,sex,region\n40,f,north\n61.5,m,east\n", s, SampleRole::target);
  CHECK(x.rows() == 2);
  CHECK(x.row(1)[0] == 61.5);
  CHECK(x.row(1)[2] == 2.0);
  CHECK(serialize_covariate_sample(x, s) == "age,sex,region\n40,f,north\n61.5,m,east\n");

  CHECK_THROWS_AS(parse_covariate_sample("age,sex,region\n40,f,west\n", s, SampleRole::base), InputError);
  CHECK_THROWS_AS(parse_covariate_sample("age,sex,region\n,f,north\n", s, SampleRole::base), InputError);
  CHECK_THROWS_AS(parse_covariate_sample("age,sex\n40,f\n", s, SampleRole::base), InputError);

  const CovariateSample y = parse_covariate_sample("age,sex,region,Y\n40,f,north,1\n50,m,south,0\n", s,
                                                   SampleRole::target);
  REQUIRE(y.outcome());
  CHECK((*y.outcome())(0) == 1.0);
  const CovariateSample f = y.filter({false, true});
  CHECK(f.rows() == 1);
  CHECK((*f.outcome())(0) == 0.0);
}

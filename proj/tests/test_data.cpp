#include <cmath>
#include <fstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "evofa/feature_io.hpp"
#include "evofa/mmd.hpp"
#include "evofa/synthetic.hpp"
#include "test_support.hpp"

using namespace evofa;
using namespace evofa::testing;

namespace {

/// Rows of flattened features for the samples matching (subject, session).
Tensor session_matrix(const DatasetIndex& ds, int subject, int session) {
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& s : ds.samples) {
    if (s.subject_id != subject || s.session_id != session) continue;
    data.insert(data.end(), s.features.data().begin(), s.features.data().end());
    ++rows;
  }
  const std::size_t cols = ds.schema.electrodes * ds.schema.bands;
  return Tensor({rows, cols}, std::move(data));
}

double fixed_bandwidth_mmd(const Tensor& x, const Tensor& y, double sigma) {
  return mmd2(x, y, KernelSpec::single(sigma)).item();
}

void write_trial(const std::filesystem::path& path, std::size_t floats, float value = 0.5f) {
  std::string bytes(kFeatureMagic, 4);
  io::put_le<std::uint32_t>(bytes, kFeatureVersion);
  for (std::size_t i = 0; i < floats; ++i) io::put_le<float>(bytes, value);
  io::write_file_atomic(path, bytes);
}

/// One subject, one session, two trials of three 4x2 samples each.
std::filesystem::path small_manifest(const std::filesystem::path& dir) {
  write_trial(dir / "a.bin", 3 * 8);
  write_trial(dir / "b.bin", 3 * 8);
  nlohmann::json m;
  m["schema"] = {{"electrodes", 4}, {"bands", 2}};
  m["classes"] = {"neg", "neu", "pos"};
  m["subjects"] = nlohmann::json::array({{{"id", 1},
                                          {"sessions", nlohmann::json::array({{{"id", 1},
                                                                               {"trials", nlohmann::json::array({
                                                                                              {{"id", 1}, {"label", "neg"}, {"file", "a.bin"}, {"count", 3}},
                                                                                              {{"id", 2}, {"label", 2}, {"file", "b.bin"}, {"count", 3}},
                                                                                          })}}})}}});
  io::write_file_atomic(dir / "manifest.json", m.dump());
  return dir / "manifest.json";
}

}  // namespace

// --- import / export ------------------------------------------------------------

TEST(Import, SmallManifestCountsSamples) {
  const auto ds = import_features(small_manifest(scratch_dir("m")));
  EXPECT_EQ(ds.samples.size(), 6u);
  EXPECT_EQ(ds.schema, (FeatureSchema{4, 2}));
  EXPECT_EQ(ds.num_classes, 3u);
  EXPECT_EQ(ds.samples[0].label, 0u);
  EXPECT_EQ(ds.samples[5].label, 2u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(ds.samples[i].time_index, i);
  ds.validate();
}

TEST(Import, MissingFileNamesThePath) {
  const auto dir = scratch_dir("m");
  const auto manifest = small_manifest(dir);
  std::filesystem::remove(dir / "b.bin");
  try {
    import_features(manifest);
    FAIL() << "expected IngestError";
  } catch (const IngestError& e) {
    EXPECT_NE(std::string(e.what()).find("b.bin"), std::string::npos) << e.what();
  }
}

TEST(Import, MissingManifestIsIngestError) {
  EXPECT_THROW(import_features(scratch_dir("m") / "nope.json"), IngestError);
}

TEST(Import, TruncatedFileIsIngestError) {
  const auto dir = scratch_dir("m");
  const auto manifest = small_manifest(dir);
  write_trial(dir / "a.bin", 3 * 8 - 1);
  EXPECT_THROW(import_features(manifest), IngestError);
}

TEST(Import, BadMagicIsIngestError) {
  const auto dir = scratch_dir("m");
  const auto manifest = small_manifest(dir);
  io::write_file_atomic(dir / "a.bin", std::string(8 + 3 * 8 * 4, '\0'));
  EXPECT_THROW(import_features(manifest), IngestError);
}

TEST(Import, OversizedFileIsSchemaError) {
  const auto dir = scratch_dir("m");
  const auto manifest = small_manifest(dir);
  write_trial(dir / "a.bin", 4 * 8);
  EXPECT_THROW(import_features(manifest), SchemaError);
}

TEST(Import, NonFiniteValueIsDataErrorWithCoordinates) {
  const auto dir = scratch_dir("m");
  const auto manifest = small_manifest(dir);
  write_trial(dir / "b.bin", 3 * 8, std::numeric_limits<float>::quiet_NaN());
  try {
    import_features(manifest);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("subject 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("trial 2"), std::string::npos) << msg;
  }
}

TEST(Import, UnknownClassNameIsSchemaError) {
  const auto dir = scratch_dir("m");
  const auto manifest = small_manifest(dir);
  auto m = nlohmann::json::parse(io::read_file(manifest));
  m["subjects"][0]["sessions"][0]["trials"][0]["label"] = "angry";
  io::write_file_atomic(manifest, m.dump());
  EXPECT_THROW(import_features(manifest), SchemaError);
}

TEST(Import, SeedConventionRoundTrip) {
  DriftConfig cfg;
  cfg.num_subjects = 15;
  cfg.num_sessions = 3;
  cfg.trials_per_session = 15;
  cfg.samples_per_trial = 2;
  cfg.n_electrodes = 62;
  cfg.d_bands = 5;
  cfg.intra_drift_rate = 0.5;
  cfg.inter_subject_offset_scale = 1.0;
  const auto original = generate_synthetic_drift(cfg);

  const auto dir = scratch_dir("rt");
  const auto loaded = import_features(export_features(original, dir / "a"));
  ASSERT_EQ(loaded.samples.size(), 15u * 3 * 15 * 2);
  EXPECT_EQ(loaded.schema, original.schema);
  EXPECT_EQ(loaded.class_names, original.class_names);
  for (std::size_t i = 0; i < loaded.samples.size(); ++i) {
    const auto& a = original.samples[i];
    const auto& b = loaded.samples[i];
    ASSERT_EQ(ordering_key(a), ordering_key(b));
    ASSERT_EQ(a.label, b.label);
    for (std::size_t j = 0; j < a.features.size(); ++j) {
      ASSERT_EQ(b.features[j], static_cast<double>(static_cast<float>(a.features[j])));
    }
  }

  // Once quantized, a second trip is exact on disk.
  const auto again = import_features(export_features(loaded, dir / "b"));
  for (std::size_t i = 0; i < again.samples.size(); ++i) {
    ASSERT_TRUE(bitwise_equal(again.samples[i].features.data(), loaded.samples[i].features.data()));
  }
  EXPECT_EQ(io::read_file(dir / "a" / "manifest.json"), io::read_file(dir / "b" / "manifest.json"));
  EXPECT_EQ(io::read_file(dir / "a" / "s7/sess2/t9.bin"), io::read_file(dir / "b" / "s7/sess2/t9.bin"));
}

// --- validation -----------------------------------------------------------------

TEST(DatasetValidate, DetectsDisorderAndBadLabels) {
  auto ds = generate_synthetic_drift(tiny_drift());
  ds.validate();
  auto swapped = ds;
  std::swap(swapped.samples[3], swapped.samples[4]);
  EXPECT_THROW(swapped.validate(), DataError);
  auto bad_label = ds;
  bad_label.samples[0].label = 7;
  EXPECT_THROW(bad_label.validate(), DataError);
  auto bad_shape = ds;
  bad_shape.samples[0].features = Tensor::zeros({2, 2});
  EXPECT_THROW(bad_shape.validate(), SchemaError);
}

// --- splits ---------------------------------------------------------------------

TEST(IntraSplit, SessionsOneTwoThree) {
  const auto ds = generate_synthetic_drift(tiny_drift());
  const auto split = make_intra_split(ds, 2);
  EXPECT_TRUE(split.train.contains(2, 1));
  EXPECT_TRUE(split.val.contains(2, 2));
  EXPECT_TRUE(split.test.contains(2, 3));
  EXPECT_TRUE(split.disjoint());
  for (const auto* s : split.train_pool(ds)) EXPECT_EQ(s->session_id, 1);
  EXPECT_EQ(split.test_pool(ds).size(), 60u);
}

TEST(IntraSplit, MissingSessionIsProtocolError) {
  auto cfg = tiny_drift();
  cfg.num_sessions = 2;
  const auto ds = generate_synthetic_drift(cfg);
  EXPECT_THROW(make_intra_split(ds, 1), ProtocolError);
}

static DatasetIndex many_subjects(std::size_t n) {
  auto cfg = tiny_drift();
  cfg.num_subjects = n;
  cfg.trials_per_session = 3;
  cfg.samples_per_trial = 1;
  return generate_synthetic_drift(cfg);
}

TEST(InterSplit, FifteenSubjectsGiveTwelveTwoOne) {
  const auto ds = many_subjects(15);
  Rng rng(4);
  const auto split = make_inter_split(ds, 2, 5, rng);
  EXPECT_EQ(split.train.subjects().size(), 12u);
  EXPECT_EQ(split.val.subjects().size(), 2u);
  EXPECT_EQ(split.test.subjects(), (std::set<int>{5}));
  EXPECT_TRUE(split.disjoint());
  for (const auto& [subj, sess] : split.train.cells) EXPECT_EQ(sess, 2);
  for (const auto& [subj, sess] : split.val.cells) EXPECT_EQ(sess, 2);
}

TEST(InterSplit, SixteenSubjectsGiveTwelveThreeOne) {
  const auto ds = many_subjects(16);
  Rng rng(4);
  const auto split = make_inter_split(ds, 1, 16, rng);
  EXPECT_EQ(split.train.subjects().size(), 12u);
  EXPECT_EQ(split.val.subjects().size(), 3u);
  EXPECT_EQ(split.test.subjects().size(), 1u);
}

TEST(InterSplit, SeededRngIsReproducibleAndSeedsDiffer) {
  const auto ds = many_subjects(15);
  std::set<std::set<int>> seen;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng a(seed), b(seed);
    const auto x = make_inter_split(ds, 1, 1, a);
    const auto y = make_inter_split(ds, 1, 1, b);
    EXPECT_EQ(x.train.cells, y.train.cells);
    EXPECT_EQ(x.val.cells, y.val.cells);
    seen.insert(x.val.subjects());
  }
  EXPECT_GT(seen.size(), 1u);
}

TEST(InterSplit, PartitionIsExhaustiveAndDisjointOverSamples) {
  const auto ds = many_subjects(15);
  for (int test = 1; test <= 15; ++test) {
    Rng rng(static_cast<std::uint64_t>(test));
    const auto split = make_inter_split(ds, 3, test, rng);
    for (const auto& s : ds.samples) {
      const int hits = split.train(s) + split.val(s) + split.test(s);
      ASSERT_EQ(hits, s.session_id == 3 ? 1 : 0);
    }
  }
}

TEST(InterSplit, TooFewSubjectsIsProtocolError) {
  const auto ds = many_subjects(13);
  Rng rng(1);
  EXPECT_THROW(make_inter_split(ds, 1, 1, rng), ProtocolError);
}

TEST(InterSplit, AbsentTestSubjectIsProtocolError) {
  const auto ds = many_subjects(15);
  Rng rng(1);
  EXPECT_THROW(make_inter_split(ds, 1, 99, rng), ProtocolError);
  EXPECT_THROW(make_inter_split(ds, 4, 1, rng), ProtocolError);
}

// --- synthetic generator --------------------------------------------------------

TEST(Synthetic, ConfigValidation) {
  auto cfg = tiny_drift();
  cfg.num_classes = 0;
  EXPECT_THROW(generate_synthetic_drift(cfg), ConfigError);
  cfg = tiny_drift();
  cfg.noise_std = -1;
  EXPECT_THROW(generate_synthetic_drift(cfg), ConfigError);
}

TEST(Synthetic, ShapeCountsAndChronology) {
  const auto ds = generate_synthetic_drift(tiny_drift());
  EXPECT_EQ(ds.samples.size(), 2u * 3 * 6 * 10);
  ds.validate();
  for (std::size_t i = 1; i < ds.samples.size(); ++i) {
    const auto& a = ds.samples[i - 1];
    const auto& b = ds.samples[i];
    if (a.subject_id == b.subject_id && a.session_id == b.session_id) {
      ASSERT_LT(a.time_index, b.time_index);
      if (a.trial_id == b.trial_id) ASSERT_EQ(a.label, b.label);
    }
  }
}

TEST(Synthetic, SameConfigGivesIdenticalDatasets) {
  auto cfg = tiny_drift(11);
  cfg.intra_drift_rate = 1.5;
  cfg.inter_subject_offset_scale = 2.0;
  const auto a = generate_synthetic_drift(cfg);
  const auto b = generate_synthetic_drift(cfg);
  ASSERT_EQ(a.samples.size(), b.samples.size());
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    ASSERT_TRUE(bitwise_equal(a.samples[i].features.data(), b.samples[i].features.data()));
  }
}

TEST(Synthetic, ClassMeansSitRootTwoSeparationApart) {
  auto cfg = tiny_drift();
  cfg.noise_std = 0.0;
  cfg.class_separation = 3.0;
  const auto ds = generate_synthetic_drift(cfg);
  const auto& a = ds.samples[0];
  const auto& b = ds.samples[cfg.samples_per_trial];
  ASSERT_NE(a.label, b.label);
  double d2 = 0.0;
  for (std::size_t j = 0; j < a.features.size(); ++j) d2 += std::pow(a.features[j] - b.features[j], 2);
  EXPECT_NEAR(std::sqrt(d2), std::sqrt(2.0) * 3.0, 1e-9);
}

TEST(Synthetic, NoDriftSessionMeansAreStationary) {
  auto cfg = tiny_drift(3);
  cfg.num_subjects = 3;
  cfg.trials_per_session = 9;
  cfg.samples_per_trial = 20;
  const auto ds = generate_synthetic_drift(cfg);
  const std::size_t D = cfg.n_electrodes * cfg.d_bands;
  std::size_t coords = 0, within = 0;
  for (int subj = 1; subj <= 3; ++subj) {
    for (std::size_t k = 0; k < cfg.num_classes; ++k) {
      std::vector<double> m1(D, 0.0), m3(D, 0.0);
      std::size_t count = 0;
      for (const auto& s : ds.samples) {
        if (s.subject_id != subj || s.label != k || s.session_id == 2) continue;
        auto& m = s.session_id == 1 ? m1 : m3;
        for (std::size_t j = 0; j < D; ++j) m[j] += s.features[j];
        if (s.session_id == 1) ++count;
      }
      const double n = static_cast<double>(count);
      for (std::size_t j = 0; j < D; ++j) {
        const double diff = std::abs(m1[j] - m3[j]) / n;
        ++coords;
        if (diff < 3.0 * cfg.noise_std / std::sqrt(n)) ++within;
        EXPECT_LT(diff, 5.0 * cfg.noise_std * std::sqrt(2.0 / n)) << "subject " << subj << " class " << k;
      }
    }
  }
  // The difference of two independent means has sd noise*sqrt(2/count), so
  // about 3% of coordinates exceed 3*noise/sqrt(count) by chance.
  EXPECT_GE(static_cast<double>(within) / static_cast<double>(coords), 0.9);
}

TEST(Synthetic, DriftRaisesSessionOneToThreeMmd) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto cfg = tiny_drift(seed);
    const auto still = generate_synthetic_drift(cfg);
    cfg.intra_drift_rate = 1.0;
    const auto moving = generate_synthetic_drift(cfg);
    const Tensor s1 = session_matrix(still, 1, 1), s3 = session_matrix(still, 1, 3);
    const double sigma = median_heuristic(s1, s3);
    const double base = fixed_bandwidth_mmd(s1, s3, sigma);
    const double drifted = fixed_bandwidth_mmd(session_matrix(moving, 1, 1), session_matrix(moving, 1, 3), sigma);
    EXPECT_GT(drifted, base) << "seed " << seed;
  }
}

TEST(Synthetic, NoDriftSessionsPassPermutationTest) {
  // Observed MMD^2 between two sessions should sit below the permutation
  // null's 95th percentile; allow the occasional 5% false alarm.
  constexpr int kSeeds = 20, kPermutations = 200;
  int passed = 0;
  for (int seed = 1; seed <= kSeeds; ++seed) {
    auto cfg = tiny_drift(static_cast<std::uint64_t>(seed));
    cfg.num_subjects = 1;
    cfg.samples_per_trial = 5;
    const auto ds = generate_synthetic_drift(cfg);
    const Tensor a = session_matrix(ds, 1, 1), b = session_matrix(ds, 1, 3);
    const std::size_t m = a.dim(0), D = a.dim(1);
    const KernelSpec kernel = KernelSpec::around(median_heuristic(a, b));
    const double observed = mmd2(a, b, kernel).item();

    std::vector<double> pooled(a.data().begin(), a.data().end());
    pooled.insert(pooled.end(), b.data().begin(), b.data().end());
    Rng rng = make_rng(static_cast<std::uint64_t>(seed), 99);
    std::vector<double> null;
    for (int p = 0; p < kPermutations; ++p) {
      const auto order = sample_without_replacement(2 * m, 2 * m, rng);
      std::vector<double> x, y;
      for (std::size_t i = 0; i < 2 * m; ++i) {
        auto& dst = i < m ? x : y;
        dst.insert(dst.end(), pooled.begin() + static_cast<std::ptrdiff_t>(order[i] * D),
                   pooled.begin() + static_cast<std::ptrdiff_t>((order[i] + 1) * D));
      }
      null.push_back(mmd2(Tensor({m, D}, std::move(x)), Tensor({m, D}, std::move(y)), kernel).item());
    }
    std::sort(null.begin(), null.end());
    if (observed <= null[static_cast<std::size_t>(0.95 * kPermutations)]) ++passed;
  }
  EXPECT_GE(passed, 16) << passed << " of " << kSeeds;
}

// Overlap scores, classification metrics and differentiable losses:
// hand-evaluated values, brute-force confusion oracles, algebraic identities
// and finite-difference gradient checks.

#include <cmath>
#include <vector>

#include "catch_amalgamated.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "vsx/losses.hpp"

using namespace vsx;

namespace {

TensorD mask_tensor(const std::vector<int>& bits) {
  std::vector<double> v(bits.size());
  for (size_t i = 0; i < bits.size(); ++i) v[i] = bits[i] ? 1.0 : 0.0;
  return TensorD::from_data({static_cast<i64>(bits.size())}, std::move(v));
}

std::vector<int> random_bits(Rng& rng, size_t n, double p_on = 0.5) {
  std::vector<int> b(n);
  for (auto& x : b) x = rng.uniform() < p_on ? 1 : 0;
  return b;
}

// Expected metrics straight from the convention text, computed from oracle
// counts with none of the library's code.
struct Expected {
  double dice, jaccard, accuracy, precision, recall, f1;
  bool prec_flag, rec_flag;
};

Expected expected_from(const oracle::Confusion& c) {
  Expected e{};
  double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp);
  double fn = static_cast<double>(c.fn), tn = static_cast<double>(c.tn);
  e.dice = (2 * c.tp + c.fp + c.fn) == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
  e.jaccard = (c.tp + c.fp + c.fn) == 0 ? 1.0 : tp / (tp + fp + fn);
  e.accuracy = (tp + tn) / (tp + fp + fn + tn);
  e.prec_flag = (c.tp + c.fp) == 0;
  e.precision = e.prec_flag ? 0.0 : tp / (tp + fp);
  e.rec_flag = (c.tp + c.fn) == 0;
  e.recall = e.rec_flag ? 0.0 : tp / (tp + fn);
  e.f1 = (e.precision == 0.0 || e.recall == 0.0)
             ? 0.0
             : 2 * e.precision * e.recall / (e.precision + e.recall);
  return e;
}

}  // namespace

TEST_CASE("hard dice and jaccard: hand examples") {
  // G = 4 voxels, P = 2 of those 4, no extras.
  TensorD g = mask_tensor({1, 1, 1, 1, 0, 0, 0, 0});
  TensorD p = mask_tensor({1, 1, 0, 0, 0, 0, 0, 0});
  CHECK(dice_score(p, g) == Catch::Approx(2.0 * 2 / (2.0 * 2 + 2 + 0)).epsilon(1e-12));
  CHECK(dice_score(p, g) == Catch::Approx(0.6667).margin(5e-5));
  // |G∩P| = 2, |G∪P| = 4.
  CHECK(jaccard_score(p, g) == Catch::Approx(0.5).epsilon(1e-12));

  TensorD a = mask_tensor({1, 0, 1, 0});
  CHECK(dice_score(a, a) == 1.0);
  CHECK(jaccard_score(a, a) == 1.0);

  TensorD b = mask_tensor({0, 1, 0, 1});
  CHECK(dice_score(a, b) == 0.0);
  CHECK(jaccard_score(a, b) == 0.0);

  // Both-empty convention: perfect agreement.
  TensorD z = mask_tensor({0, 0, 0});
  CHECK(dice_score(z, z) == 1.0);
  CHECK(jaccard_score(z, z) == 1.0);

  CHECK_THROWS_AS(dice_score(a, z), ShapeError);
  CHECK_THROWS_AS(jaccard_score(z, a), ShapeError);
  CHECK_THROWS_AS(dice_score_soft(a, z), ShapeError);
}

TEST_CASE("soft dice replaces counts with probability sums") {
  TensorD p = TensorD::from_data({2}, {0.8, 0.2});
  TensorD g = mask_tensor({1, 0});
  // 2*0.8 / (1.0 + 1.0)
  CHECK(dice_score_soft(p, g) == Catch::Approx(0.8).epsilon(1e-12));
  TensorD z2 = TensorD::zeros({2});
  CHECK(dice_score_soft(z2, z2) == 1.0);
}

TEST_CASE("dice loss: smoothed hand values") {
  TensorD p = TensorD::from_data({2}, {0.8, 0.2});
  TensorD g = mask_tensor({1, 0});
  double expect = 1.0 - (2 * 0.8 + 1.0) / (1.0 + 1.0 + 1.0);
  CHECK(dice_loss(p, g).item() == Catch::Approx(expect).epsilon(1e-12));
  CHECK(dice_loss(p, g).item() == Catch::Approx(0.1333).margin(5e-5));

  // Perfect hard prediction: loss bounded by s/(2|G|+s).
  TensorD hard = mask_tensor({1, 1, 1, 0});
  double perfect = dice_loss(hard, hard).item();
  CHECK(perfect == Catch::Approx(0.0).margin(1e-12));
  CHECK(perfect <= 1.0 / (2.0 * 3 + 1.0));

  // Anti-prediction p = 1-g approaches 1 as the volume grows.
  const i64 n = 1000;
  std::vector<double> gv(n, 0.0), pv(n, 1.0);
  for (i64 i = 0; i < n / 2; ++i) {
    gv[static_cast<size_t>(i)] = 1.0;
    pv[static_cast<size_t>(i)] = 0.0;
  }
  TensorD gl = TensorD::from_data({n}, std::move(gv));
  TensorD pl = TensorD::from_data({n}, std::move(pv));
  CHECK(dice_loss(pl, gl).item() == Catch::Approx(1.0 - 1.0 / (n + 1.0)).epsilon(1e-12));
  CHECK(dice_loss(pl, gl).item() > 0.99);
}

TEST_CASE("bce loss: clipped hand values") {
  TensorD y1 = TensorD::from_data({1}, {1.0});
  TensorD p5 = TensorD::from_data({1}, {0.5});
  CHECK(bce_loss(p5, y1).item() == Catch::Approx(std::log(2.0)).epsilon(1e-9));

  TensorD y = TensorD::from_data({2}, {1.0, 0.0});
  TensorD p = TensorD::from_data({2}, {0.9, 0.1});
  CHECK(bce_loss(p, y).item() == Catch::Approx(-std::log(0.9)).epsilon(1e-9));
  CHECK(bce_loss(p, y).item() == Catch::Approx(0.1054).margin(5e-5));

  // y = p at the clipped extremes stays finite and near zero.
  TensorD ext = TensorD::from_data({4}, {1.0, 0.0, 1.0, 0.0});
  double v = bce_loss(ext, ext).item();
  CHECK(std::isfinite(v));
  CHECK(v >= 0.0);
  CHECK(v < 1e-6);
}

TEST_CASE("bce-dice is the exact component sum") {
  Rng rng(41);
  for (int trial = 0; trial < 5; ++trial) {
    TensorD p = TensorD::uniform({3, 4}, rng, 0.01, 0.99);
    TensorD g = mask_tensor(random_bits(rng, 12));
    g = reshape(g, {3, 4});
    double sum = bce_loss(p, g).item() + dice_loss(p, g).item();
    CHECK(bce_dice_loss(p, g).item() == Catch::Approx(sum).epsilon(1e-12));
  }
  // Perfect prediction stays near zero through both terms.
  TensorD hard = mask_tensor({1, 0, 1, 1});
  CHECK(bce_dice_loss(hard, hard).item() < 1e-6);
}

TEST_CASE("metrics match brute-force confusion counting on random pairs") {
  Rng rng(1234);
  int both_empty_seen = 0;
  for (int trial = 0; trial < 50; ++trial) {
    size_t n = 1 + static_cast<size_t>(rng.below(20));
    auto pb = random_bits(rng, n, 0.4);
    auto gb = random_bits(rng, n, 0.4);
    oracle::Confusion oc = oracle::confusion(pb, gb);
    Expected e = expected_from(oc);

    TensorD p = mask_tensor(pb);
    TensorD g = mask_tensor(gb);

    ConfusionCounts c = confusion_counts(p, g);
    CHECK(c.tp == oc.tp);
    CHECK(c.fp == oc.fp);
    CHECK(c.fn == oc.fn);
    CHECK(c.tn == oc.tn);
    CHECK(c.total() == static_cast<i64>(n));

    const ScoreEntry& s = classification_metrics(p, g).per_class[0];
    CHECK(s.dice == Catch::Approx(e.dice).margin(1e-15));
    CHECK(s.jaccard == Catch::Approx(e.jaccard).margin(1e-15));
    CHECK(s.accuracy == Catch::Approx(e.accuracy).margin(1e-15));
    CHECK(s.precision == Catch::Approx(e.precision).margin(1e-15));
    CHECK(s.recall == Catch::Approx(e.recall).margin(1e-15));
    CHECK(s.f1 == Catch::Approx(e.f1).margin(1e-15));
    CHECK(s.precision_zero_denominator == e.prec_flag);
    CHECK(s.recall_zero_denominator == e.rec_flag);

    // Same numbers through the standalone scorers.
    CHECK(dice_score(p, g) == Catch::Approx(e.dice).margin(1e-15));
    CHECK(jaccard_score(p, g) == Catch::Approx(e.jaccard).margin(1e-15));

    // dice = 2j/(1+j) exactly on hard masks (both-empty included).
    double j = jaccard_score(p, g);
    CHECK(dice_score(p, g) == Catch::Approx(2 * j / (1 + j)).margin(1e-15));
    if (oc.tp + oc.fp + oc.fn == 0) both_empty_seen++;

    // Soft dice against independent double-precision sums.
    TensorD probs = TensorD::uniform({static_cast<i64>(n)}, rng, 0.0, 1.0);
    double inter = 0, sp = 0, sg = 0;
    for (size_t i = 0; i < n; ++i) {
      inter += probs.vals()[i] * (gb[i] ? 1.0 : 0.0);
      sp += probs.vals()[i];
      sg += gb[i] ? 1.0 : 0.0;
    }
    double soft = (sp + sg) == 0 ? 1.0 : 2 * inter / (sp + sg);
    CHECK(dice_score_soft(probs, g) == Catch::Approx(soft).margin(1e-6));
  }
  (void)both_empty_seen;  // convention exercised whenever tiny pairs come up empty
}

TEST_CASE("symmetry and bounds") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    size_t n = 1 + static_cast<size_t>(rng.below(30));
    TensorD a = mask_tensor(random_bits(rng, n));
    TensorD b = mask_tensor(random_bits(rng, n));
    CHECK(dice_score(a, b) == dice_score(b, a));
    CHECK(jaccard_score(a, b) == jaccard_score(b, a));

    const ScoreEntry& s = classification_metrics(a, b).per_class[0];
    for (double v : {s.dice, s.jaccard, s.accuracy, s.precision, s.recall, s.f1}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }

    TensorD probs = TensorD::uniform({static_cast<i64>(n)}, rng, 0.0, 1.0);
    CHECK(dice_loss(probs, b).item() >= 0.0);
    CHECK(bce_loss(probs, b).item() >= 0.0);
  }
}

TEST_CASE("flipping a false negative to true positive never hurts") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    size_t n = 8 + static_cast<size_t>(rng.below(16));
    auto gb = random_bits(rng, n, 0.5);
    auto pb = random_bits(rng, n, 0.3);
    gb[0] = 1;
    pb[0] = 0;  // guarantee at least one false negative

    TensorD g = mask_tensor(gb);
    TensorD before_p = mask_tensor(pb);
    const ScoreEntry before = classification_metrics(before_p, g).per_class[0];

    // flip the first false negative
    size_t flip = 0;
    while (!(gb[flip] == 1 && pb[flip] == 0)) flip++;
    pb[flip] = 1;
    TensorD after_p = mask_tensor(pb);
    const ScoreEntry after = classification_metrics(after_p, g).per_class[0];

    CHECK(after.dice >= before.dice);
    CHECK(after.jaccard >= before.jaccard);
    CHECK(after.recall >= before.recall);
  }
}

TEST_CASE("zero-denominator conventions raise flags") {
  // All-background prediction on a mask with tumors.
  TensorD g = mask_tensor({1, 1, 0, 0, 0, 0, 0, 0});
  TensorD p = mask_tensor({0, 0, 0, 0, 0, 0, 0, 0});
  const ScoreEntry& s = classification_metrics(p, g).per_class[0];
  CHECK(s.recall == 0.0);
  CHECK_FALSE(s.recall_zero_denominator);  // fn > 0, the denominator is fine
  CHECK(s.precision == 0.0);
  CHECK(s.precision_zero_denominator);  // tp + fp = 0
  CHECK(s.accuracy == Catch::Approx(6.0 / 8.0).epsilon(1e-12));
  CHECK(s.f1 == 0.0);

  // Both masks empty: overlap scores 1, count-based rates degenerate to 0.
  TensorD z = mask_tensor({0, 0, 0, 0});
  const ScoreEntry& e = classification_metrics(z, z).per_class[0];
  CHECK(e.dice == 1.0);
  CHECK(e.jaccard == 1.0);
  CHECK(e.accuracy == 1.0);
  CHECK(e.precision == 0.0);
  CHECK(e.precision_zero_denominator);
  CHECK(e.recall == 0.0);
  CHECK(e.recall_zero_denominator);
  CHECK(e.f1 == 0.0);
}

TEST_CASE("per-class report scores channels independently") {
  // [3,2,2,2]: WT perfectly predicted, TC partial, ET missed entirely.
  std::vector<double> gv(24, 0.0), pv(24, 0.0);
  // WT (channel 0): voxels 0..4 on in both.
  for (int i = 0; i < 5; ++i) {
    gv[static_cast<size_t>(i)] = 1.0;
    pv[static_cast<size_t>(i)] = 1.0;
  }
  // TC (channel 1, offset 8): truth 4 voxels, pred hits 2 of them + 1 extra.
  for (int i = 0; i < 4; ++i) gv[static_cast<size_t>(8 + i)] = 1.0;
  pv[8] = 1.0;
  pv[9] = 1.0;
  pv[12] = 1.0;
  // ET (channel 2, offset 16): truth 2 voxels, pred empty.
  gv[16] = 1.0;
  gv[17] = 1.0;

  TensorD g = TensorD::from_data({3, 2, 2, 2}, gv);
  TensorD p = TensorD::from_data({3, 2, 2, 2}, pv);
  ScoreReport r = per_class_report(p, g);
  REQUIRE(r.per_class.size() == 3);
  CHECK(r.per_class[0].class_name == "WT");
  CHECK(r.per_class[1].class_name == "TC");
  CHECK(r.per_class[2].class_name == "ET");

  const ScoreEntry& wt = r.cls("WT");
  CHECK(wt.dice == 1.0);
  CHECK(wt.jaccard == 1.0);
  CHECK(wt.accuracy == 1.0);
  CHECK(wt.precision == 1.0);
  CHECK(wt.recall == 1.0);
  CHECK(wt.f1 == 1.0);

  // TC hand counts: tp=2 fp=1 fn=2 tn=3.
  const ScoreEntry& tc = r.cls("TC");
  CHECK(tc.dice == Catch::Approx(4.0 / 7.0).epsilon(1e-12));
  CHECK(tc.jaccard == Catch::Approx(2.0 / 5.0).epsilon(1e-12));
  CHECK(tc.accuracy == Catch::Approx(5.0 / 8.0).epsilon(1e-12));
  CHECK(tc.precision == Catch::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(tc.recall == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(tc.f1 == Catch::Approx(4.0 / 7.0).epsilon(1e-12));  // f1 equals dice on masks

  const ScoreEntry& et = r.cls("ET");
  CHECK(et.dice == 0.0);
  CHECK(et.recall == 0.0);
  CHECK(et.precision == 0.0);
  CHECK(et.precision_zero_denominator);
  CHECK(et.accuracy == Catch::Approx(6.0 / 8.0).epsilon(1e-12));

  CHECK_THROWS_AS(r.cls("nope"), ArgumentError);

  // Batched layout aggregates over the leading axis: duplicating the volume
  // leaves every score unchanged.
  std::vector<double> gv2(48), pv2(48);
  for (int i = 0; i < 24; ++i) {
    gv2[static_cast<size_t>(i)] = gv[static_cast<size_t>(i)];
    gv2[static_cast<size_t>(24 + i)] = gv[static_cast<size_t>(i)];
    pv2[static_cast<size_t>(i)] = pv[static_cast<size_t>(i)];
    pv2[static_cast<size_t>(24 + i)] = pv[static_cast<size_t>(i)];
  }
  ScoreReport r2 = per_class_report(TensorD::from_data({2, 3, 2, 2, 2}, pv2),
                                    TensorD::from_data({2, 3, 2, 2, 2}, gv2));
  for (size_t c = 0; c < 3; ++c) {
    CHECK(r2.per_class[c].dice == Catch::Approx(r.per_class[c].dice).margin(1e-15));
    CHECK(r2.per_class[c].accuracy == Catch::Approx(r.per_class[c].accuracy).margin(1e-15));
  }

  // Identical operands give the unit report.
  ScoreReport unit = per_class_report(g, g);
  for (const auto& e2 : unit.per_class) {
    CHECK(e2.dice == 1.0);
    CHECK(e2.jaccard == 1.0);
    CHECK(e2.accuracy == 1.0);
    CHECK(e2.precision == 1.0);
    CHECK(e2.recall == 1.0);
    CHECK(e2.f1 == 1.0);
  }

  // Non-3-channel inputs get generic names.
  TensorD two = TensorD::zeros({2, 2, 2, 2});
  ScoreReport rg = per_class_report(two, two);
  CHECK(rg.per_class[0].class_name == "class0");
  CHECK(rg.per_class[1].class_name == "class1");

  CHECK_THROWS_AS(per_class_report(mask_tensor({0, 1}), mask_tensor({0, 1})), ShapeError);
}

TEST_CASE("loss gradients agree with finite differences") {
  Rng rng(2025);
  TensorD p = TensorD::uniform({1, 2, 3, 3, 3}, rng, 0.05, 0.95);
  p.set_requires_grad(true);
  std::vector<double> gbits(p.vals().size());
  for (auto& v : gbits) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
  TensorD g = TensorD::from_data(p.shape(), std::move(gbits));

  SECTION("dice loss") {
    auto res = gradcheck::check({p}, [&] { return dice_loss(p, g); }, rng, 10);
    INFO(res.worst);
    CHECK(res.ok(1e-4));
  }
  SECTION("bce loss") {
    auto res = gradcheck::check({p}, [&] { return bce_loss(p, g); }, rng, 10);
    INFO(res.worst);
    CHECK(res.ok(1e-4));
  }
  SECTION("combined loss") {
    auto res = gradcheck::check({p}, [&] { return bce_dice_loss(p, g); }, rng, 10);
    INFO(res.worst);
    CHECK(res.ok(1e-4));
  }
}

TEST_CASE("report aggregation and csv serialization") {
  ScoreReport r;
  ScoreEntry a;
  a.class_name = "WT";
  a.dice = 0.5;
  a.jaccard = 0.4;
  a.accuracy = 0.9;
  a.precision = 0.8;
  a.recall = 0.7;
  a.f1 = 0.75;
  ScoreEntry b;
  b.class_name = "TC";
  b.dice = 1.0;
  b.jaccard = 1.0;
  b.accuracy = 1.0;
  b.precision = 1.0;
  b.recall = 1.0;
  b.f1 = 1.0;
  b.recall_zero_denominator = true;
  r.per_class = {a, b};

  ScoreEntry m = r.aggregate();
  CHECK(m.class_name == "mean");
  CHECK(m.dice == Catch::Approx(0.75).epsilon(1e-12));
  CHECK(m.jaccard == Catch::Approx(0.7).epsilon(1e-12));
  CHECK(m.accuracy == Catch::Approx(0.95).epsilon(1e-12));
  CHECK(m.precision == Catch::Approx(0.9).epsilon(1e-12));
  CHECK(m.recall == Catch::Approx(0.85).epsilon(1e-12));
  CHECK(m.f1 == Catch::Approx(0.875).epsilon(1e-12));
  CHECK(m.recall_zero_denominator);
  CHECK_FALSE(m.precision_zero_denominator);

  CHECK(score_csv_header() ==
        "model,phase,volume_id,class,dice,jaccard,accuracy,precision,recall,f1");
  CHECK(score_csv_row("unet", "val", "case7", a) ==
        "unet,val,case7,WT,0.500000,0.400000,0.900000,0.800000,0.700000,0.750000");
  auto rows = score_csv_rows("attunet", "test", "p3", r);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1] == "attunet,test,p3,TC,1.000000,1.000000,1.000000,1.000000,1.000000,1.000000");
}

TEST_CASE("mean and standard error") {
  MeanSE m = mean_se({0.8, 0.9, 1.0});
  CHECK(m.n == 3);
  CHECK(m.mean == Catch::Approx(0.9).epsilon(1e-12));
  // sd = 0.1, se = 0.1/sqrt(3)
  CHECK(m.se == Catch::Approx(0.1 / std::sqrt(3.0)).epsilon(1e-12));

  MeanSE one = mean_se({0.5});
  CHECK(one.n == 1);
  CHECK(one.mean == 0.5);
  CHECK(one.se == 0.0);

  CHECK(mean_se({}).n == 0);
}

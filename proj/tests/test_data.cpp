#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "crosstime/data.hpp"
#include "support/grad_check.hpp"

using namespace crosstime;

namespace {

struct TempCsv {
  std::string path;
  explicit TempCsv(const std::string& content) {
    static int counter = 0;
    path = "tmp_data_" + std::to_string(counter++) + ".csv";
    std::ofstream out(path);
    out << content;
  }
  ~TempCsv() { std::remove(path.c_str()); }
};

SeriesFrame ramp_frame(int64_t rows, int64_t cols) {
  SeriesFrame f;
  f.rows = rows;
  f.cols = cols;
  for (int64_t c = 0; c < cols; ++c) f.channel_names.push_back("c" + std::to_string(c));
  f.values.resize(static_cast<size_t>(rows * cols));
  for (int64_t t = 0; t < rows; ++t)
    for (int64_t c = 0; c < cols; ++c) f.at(t, c) = static_cast<double>(t + 100 * c);
  return f;
}

}  // namespace

TEST_CASE("load_csv basics") {
  TempCsv f("a,b\n1,2\n3,4\n5,6\n");
  SeriesFrame frame = load_csv(f.path, false);
  CHECK(frame.rows == 3);
  CHECK(frame.cols == 2);
  CHECK(frame.channel_names == std::vector<std::string>{"a", "b"});
  CHECK(frame.at(2, 1) == 6.0);
}

TEST_CASE("load_csv timestamp layout") {
  TempCsv f("date,c1,c2,c3,c4,c5,c6,c7\n2016-01-01,1,2,3,4,5,6,7\n2016-01-02,1,2,3,4,5,6,7\n");
  SeriesFrame frame = load_csv(f.path, true);
  CHECK(frame.cols == 7);
  CHECK(frame.timestamps.size() == 2);
  CHECK(frame.channel_index("c7") == 6);
}

TEST_CASE("load_csv errors") {
  TempCsv ragged("a,b\n1,2\n3\n");
  CHECK_THROWS_WITH_AS(load_csv(ragged.path, false), doctest::Contains("line 3"), IoError);
  TempCsv bad("a,b\n1,x\n");
  CHECK_THROWS_AS(load_csv(bad.path, false), IoError);
  CHECK_THROWS_AS(load_csv("does_not_exist.csv", false), IoError);
}

TEST_CASE("load_csv skips comment lines") {
  TempCsv f("# generator parameters\n# more\na,b\n1,2\n");
  SeriesFrame frame = load_csv(f.path, false);
  CHECK(frame.rows == 1);
  CHECK(frame.cols == 2);
}

TEST_CASE("split fractions") {
  SeriesFrame f = ramp_frame(10000, 2);
  SplitSpec spec;
  spec.border_overlap = 96;
  Splits s = split(f, spec);
  CHECK(s.train_base == 7000);
  CHECK(s.val_base == 1000);
  CHECK(s.test_base == 2000);
  CHECK(s.train.rows == 7000);
  CHECK(s.val.rows == 1096);
  CHECK(s.test.rows == 2096);
  // Chronological continuity: val context ends where val proper begins.
  CHECK(s.val.at(96, 0) == f.at(7000, 0));
  CHECK(s.test.at(96, 0) == f.at(8000, 0));
}

TEST_CASE("split degenerate cases") {
  SeriesFrame f = ramp_frame(100, 1);
  SplitSpec all_train;
  all_train.train_frac = 1.0;
  all_train.val_frac = 0.0;
  all_train.test_frac = 0.0;
  Splits s = split(f, all_train);
  CHECK(s.train.rows == 100);
  CHECK(s.val_base == 0);

  SeriesFrame small = ramp_frame(101, 1);
  SplitSpec spec;
  spec.mode = SplitSpec::Mode::kFixedCounts;
  spec.train_rows = 50;
  spec.val_rows = 0;
  spec.test_rows = 5;
  spec.border_overlap = 96;
  CHECK_THROWS_AS(split(small, spec), ConfigError);  // train shorter than lookback

  SplitSpec bad;
  bad.train_frac = 0.5;
  bad.val_frac = 0.1;
  bad.test_frac = 0.1;
  CHECK_THROWS_AS(split(f, bad), ConfigError);
}

TEST_CASE("scaler fit and round trip") {
  SeriesFrame train;
  train.rows = 2;
  train.cols = 2;
  train.channel_names = {"a", "const"};
  train.values = {2, 5, 4, 5};
  ChannelScaler sc = ChannelScaler::fit(train);
  SeriesFrame scaled = train;
  sc.apply(scaled);
  CHECK(scaled.at(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(scaled.at(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(scaled.at(0, 1) == 0.0);  // constant channel floors to zero
  CHECK(scaled.at(1, 1) == 0.0);

  // Validation data scaled with train statistics inverts within 1e-9.
  SeriesFrame val = ramp_frame(50, 2);
  SeriesFrame copy = val;
  sc.apply(val);
  sc.invert(val);
  for (size_t i = 0; i < val.values.size(); ++i)
    CHECK(std::abs(val.values[i] - copy.values[i]) < 1e-9);

  // Train columns standardize to mean 0, std 1.
  SeriesFrame big = ramp_frame(500, 2);
  ChannelScaler sb = ChannelScaler::fit(big);
  sb.apply(big);
  for (int64_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (int64_t t = 0; t < big.rows; ++t) m += big.at(t, c);
    m /= static_cast<double>(big.rows);
    for (int64_t t = 0; t < big.rows; ++t) v += (big.at(t, c) - m) * (big.at(t, c) - m);
    v /= static_cast<double>(big.rows);
    CHECK(std::abs(m) < 1e-9);
    CHECK(std::abs(std::sqrt(v) - 1.0) < 1e-9);
  }
}

TEST_CASE("instance normalization round trip") {
  std::vector<double> w = {1, 2, 3};
  RevInState st = revin_normalize(w, 3, 1);
  double m = (w[0] + w[1] + w[2]) / 3.0;
  CHECK(std::abs(m) < 1e-12);
  double var = 0.0;
  for (double v : w) var += v * v / 3.0;
  CHECK(std::abs(var - 1.0) < 1e-9);

  std::vector<double> orig = {1, 2, 3};
  revin_denormalize(w, 3, 1, st);
  for (size_t i = 0; i < 3; ++i) CHECK(std::abs(w[i] - orig[i]) < 1e-9);

  std::vector<double> constant = {5, 5, 5, 5};
  RevInState cst = revin_normalize(constant, 4, 1);
  for (double v : constant) CHECK(v == 0.0);
  revin_denormalize(constant, 4, 1, cst);
  for (double v : constant) CHECK(std::abs(v - 5.0) < 1e-9);
}

TEST_CASE("patch counts") {
  PatchSpec pad{16, 8, true};
  CHECK(patch_count(96, pad) == 12);
  PatchSpec nopad{16, 8, false};
  CHECK(patch_count(96, nopad) == 11);
  CHECK(patch_count(16, nopad) == 1);
  CHECK_THROWS_AS(patch_count(8, pad), ConfigError);  // patch_len > lookback
  // General pad-end form.
  for (int64_t L : {32, 64, 96, 128})
    CHECK(patch_count(L, pad) == (L - 16) / 8 + 2);
}

TEST_CASE("patchify values and padding") {
  const int64_t L = 24, C = 2;
  std::vector<double> v(static_cast<size_t>(L * C));
  for (int64_t t = 0; t < L; ++t)
    for (int64_t c = 0; c < C; ++c) v[static_cast<size_t>(t * C + c)] = static_cast<double>(t + 100 * c);
  Tensor window = Tensor::from_vector({L, C}, std::move(v));
  PatchSpec spec{16, 8, true};
  Tensor patches = patchify(window, spec);  // (C, P, 16), P = 3
  CHECK(patches.shape() == Shape{2, 3, 16});
  // First patch of channel 1 is steps 0..15 of that channel.
  for (int64_t j = 0; j < 16; ++j)
    CHECK(patches.values()[static_cast<size_t>(16 * 3 + j)] == doctest::Approx(100.0 + j));
  // Final patch starts at 16 and replicates the last value past the end.
  for (int64_t j = 0; j < 16; ++j) {
    const double expect = static_cast<double>(std::min<int64_t>(16 + j, L - 1));
    CHECK(patches.values()[static_cast<size_t>(2 * 16 + j)] == doctest::Approx(expect));
  }
}

TEST_CASE("embed_and_flatten layout") {
  const int64_t C = 7, P = 12, plen = 16, d = 4;
  Rng rng(21);
  Tensor patches = crosstime::testing::uniform_tensor({C, P, plen}, rng);
  Tensor proj = crosstime::testing::uniform_tensor({plen, d}, rng);
  Tensor bias = Tensor::zeros({d});
  Tensor pos = crosstime::testing::uniform_tensor({P, d}, rng);
  TokenBatch tb = embed_and_flatten(patches, proj, bias, pos);
  CHECK(tb.tokens.dim(0) == 84);
  CHECK(tb.tokens_per_sample() == 84);
  CHECK(tb.flat_index(2, 3) == 17);

  // Token (p, c) equals proj(patch(c, p)) + pos(p).
  for (int64_t p = 0; p < P; p += 5)
    for (int64_t c = 0; c < C; c += 3) {
      for (int64_t j = 0; j < d; ++j) {
        double acc = pos.at(p, j);
        for (int64_t i = 0; i < plen; ++i)
          acc += patches.values()[static_cast<size_t>((c * P + p) * plen + i)] * proj.at(i, j);
        CHECK(tb.tokens.at(tb.flat_index(p, c), j) == doctest::Approx(acc).epsilon(1e-12));
      }
    }

  Tensor zero_proj = Tensor::zeros({plen, d});
  Tensor zero_pos = Tensor::zeros({P, d});
  TokenBatch zeros = embed_and_flatten(patches, zero_proj, bias, zero_pos);
  for (double v : zeros.tokens.values()) CHECK(v == 0.0);

  // The (p, c) <-> flat map is a bijection covering each pair exactly once.
  std::set<std::pair<int64_t, int64_t>> seen;
  for (int64_t i = 0; i < tb.tokens_per_sample(); ++i) {
    auto [p, c] = tb.unflatten(i);
    CHECK(tb.flat_index(p, c) == i);
    seen.insert({p, c});
  }
  CHECK(seen.size() == static_cast<size_t>(P * C));
}

TEST_CASE("imputation masks") {
  Rng rng(22);
  Tensor all = make_imputation_mask(10, 10, 0.0, rng);
  for (double v : all.values()) CHECK(v == 1.0);

  Tensor half = make_imputation_mask(1000, 100, 0.5, rng);
  int64_t missing = 0;
  std::set<int64_t> missing_set;
  for (int64_t i = 0; i < half.numel(); ++i)
    if (half.data()[i] == 0.0) {
      ++missing;
      missing_set.insert(i);
    }
  CHECK(std::abs(static_cast<double>(missing) / 1e5 - 0.5) < 0.01);
  // The masked set is exactly the zero entries.
  CHECK(static_cast<int64_t>(missing_set.size()) == missing);
  CHECK_THROWS_AS(make_imputation_mask(2, 2, 1.0, rng), ConfigError);
}

TEST_CASE("sliding windows") {
  SeriesFrame f = ramp_frame(10, 1);
  auto ws = sliding_windows(f, 4, 2);
  CHECK(ws.size() == 5);
  CHECK(ws[0].input_begin == 0);
  CHECK(ws[0].target_begin == 4);

  SeriesFrame big = ramp_frame(250, 1);
  auto recon = sliding_windows(big, 100, 0, 100);
  CHECK(recon.size() == 2);  // tiled non-overlapping, tail dropped
  CHECK(recon[1].input_begin == 100);

  CHECK_THROWS_AS(sliding_windows(f, 9, 2), ConfigError);
}

TEST_CASE("patch index map matches patchify") {
  const int64_t L = 40, C = 3;
  PatchSpec spec{16, 8, true};
  Rng rng(23);
  Tensor window = crosstime::testing::uniform_tensor({L, C}, rng);
  Tensor patches = patchify(window, spec);

  // Channel-rows layout (C x L) driven through the index map.
  std::vector<double> rows(static_cast<size_t>(C * L));
  for (int64_t t = 0; t < L; ++t)
    for (int64_t c = 0; c < C; ++c) rows[static_cast<size_t>(c * L + t)] = window.at(t, c);
  const auto map = patch_index_map(L, C, spec);
  REQUIRE(map.size() == patches.values().size());
  for (size_t i = 0; i < map.size(); ++i)
    CHECK(rows[static_cast<size_t>(map[i])] == patches.values()[i]);
}

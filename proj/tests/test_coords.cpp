#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "mink/coords.hpp"
#include "test_util.hpp"

using namespace mink;
using testutil::coord;

TEST(FloorDiv, RoundsTowardNegativeInfinity) {
  EXPECT_EQ(floor_div(7, 2), 3);
  EXPECT_EQ(floor_div(-7, 2), -4);
  EXPECT_EQ(floor_div(-8, 2), -4);
  EXPECT_EQ(floor_div(-1, 3), -1);
  EXPECT_EQ(floor_div(0, 5), 0);
}

TEST(CoordinateMap, InsertFindAndDuplicates) {
  CoordinateMap m(3);
  auto [r0, fresh0] = m.insert(coord(0, {1, 2, 3}));
  auto [r1, fresh1] = m.insert(coord(1, {1, 2, 3}));
  auto [r2, fresh2] = m.insert(coord(0, {1, 2, 3}));
  EXPECT_TRUE(fresh0);
  EXPECT_TRUE(fresh1);
  EXPECT_FALSE(fresh2);
  EXPECT_EQ(r0, r2);
  EXPECT_NE(r0, r1);
  EXPECT_EQ(m.size(), 2u);
  EXPECT_EQ(m.find(coord(1, {1, 2, 3})), r1);
  EXPECT_FALSE(m.find(coord(0, {1, 2, 4})).has_value());
  EXPECT_FALSE(m.find(coord(2, {1, 2, 3})).has_value());
}

TEST(CoordinateMap, SurvivesGrowthWithDistinctRows) {
  CoordinateMap m(4);
  std::map<std::vector<int>, std::size_t> oracle;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> u(-50, 50);
  for (int i = 0; i < 20000; ++i) {
    Coordinate c = coord(u(rng) & 1, {u(rng), u(rng), u(rng), u(rng)});
    std::vector<int> key{c.batch, c.spatial[0], c.spatial[1], c.spatial[2], c.spatial[3]};
    auto [row, fresh] = m.insert(c);
    auto it = oracle.find(key);
    if (it == oracle.end()) {
      ASSERT_TRUE(fresh);
      oracle[key] = row;
    } else {
      ASSERT_FALSE(fresh);
      ASSERT_EQ(it->second, row);
    }
  }
  EXPECT_EQ(m.size(), oracle.size());
  for (const auto& [key, row] : oracle) {
    Coordinate c = coord(key[0], {key[1], key[2], key[3], key[4]});
    ASSERT_EQ(m.find(c), row);
    ASSERT_EQ(m.key(row), c);
  }
}

TEST(CoordinateMap, SortedMapIsLexicographic) {
  auto m = make_sorted_map({coord(1, {0, 0}), coord(0, {2, -1}), coord(0, {-3, 5}), coord(0, {2, -4})}, 2);
  ASSERT_EQ(m->size(), 4u);
  EXPECT_EQ(m->key(0), coord(0, {-3, 5}));
  EXPECT_EQ(m->key(1), coord(0, {2, -4}));
  EXPECT_EQ(m->key(2), coord(0, {2, -1}));
  EXPECT_EQ(m->key(3), coord(1, {0, 0}));
}

TEST(SparseTensor, RejectsRowMismatch) {
  auto m = make_sorted_map({coord(0, {0})}, 1);
  EXPECT_THROW(SparseTensor<double>(m, Matrix<double>(2, 1)), std::invalid_argument);
  EXPECT_THROW(SparseTensor<double>(nullptr, Matrix<double>(0, 1)), std::invalid_argument);
}

TEST(Quantize, FloorsNegativeCoordinates) {
  Matrix<double> p(3, 2);
  p(0, 0) = -0.1, p(0, 1) = 0.1;
  p(1, 0) = -1.0, p(1, 1) = 1.99;
  p(2, 0) = 0.0, p(2, 1) = -0.0001;
  auto q = quantize<double>(p, Matrix<double>(3, 1), {}, 1.0);
  ASSERT_EQ(q.tensor.size(), 3u);
  EXPECT_EQ(q.tensor.coords->key(q.point_to_row[0]), coord(0, {-1, 0}));
  EXPECT_EQ(q.tensor.coords->key(q.point_to_row[1]), coord(0, {-1, 1}));
  EXPECT_EQ(q.tensor.coords->key(q.point_to_row[2]), coord(0, {0, -1}));
}

TEST(Quantize, FirstPolicyKeepsEarliestPointAndMeanAverages) {
  Matrix<double> p(3, 1);
  p(0, 0) = 0.7, p(1, 0) = 0.2, p(2, 0) = 3.5;
  Matrix<double> f(3, 1);
  f(0, 0) = 10, f(1, 0) = 20, f(2, 0) = 30;
  auto first = quantize<double>(p, f, {}, 1.0);
  ASSERT_EQ(first.tensor.size(), 2u);
  EXPECT_EQ(first.tensor.features(first.point_to_row[0], 0), 10.0);
  std::vector<double> vs{1.0};
  auto mean = quantize<double>(p, f, {}, std::span<const double>(vs), {}, FeatureReduction::mean);
  EXPECT_EQ(mean.tensor.features(mean.point_to_row[0], 0), 15.0);
  EXPECT_EQ(mean.tensor.features(mean.point_to_row[2], 0), 30.0);
}

TEST(Quantize, MixedLabelsBecomeIgnore) {
  Matrix<double> p(4, 1);
  p(0, 0) = 0.1, p(1, 0) = 0.2, p(2, 0) = 1.1, p(3, 0) = 1.2;
  std::vector<std::int32_t> labels{2, 2, 0, 1};
  auto q = quantize<double>(p, Matrix<double>(4, 1), labels, 1.0);
  EXPECT_EQ(q.labels[q.point_to_row[0]], 2);
  EXPECT_EQ(q.labels[q.point_to_row[2]], kIgnoreLabel);
}

TEST(Quantize, BatchesStaySeparate) {
  Matrix<double> p(2, 2);
  std::vector<std::int32_t> batches{0, 1};
  std::vector<double> vs{1.0, 1.0};
  auto q = quantize<double>(p, Matrix<double>(2, 1), {}, std::span<const double>(vs), batches);
  EXPECT_EQ(q.tensor.size(), 2u);
}

TEST(Quantize, RejectsBadVoxelSizes) {
  Matrix<double> p(1, 2);
  EXPECT_THROW(quantize<double>(p, Matrix<double>(1, 1), {}, 0.0), std::invalid_argument);
  std::vector<double> wrong{1.0};
  EXPECT_THROW(quantize<double>(p, Matrix<double>(1, 1), {}, std::span<const double>(wrong)), std::invalid_argument);
}

TEST(StrideCoordinates, FloorsToTheCoarseLatticeAndUpdatesStride) {
  auto fine = make_sorted_map({coord(0, {-1, 3}), coord(0, {-2, 2}), coord(0, {1, 1}), coord(1, {-1, 3})}, 2);
  auto coarse = stride_coordinates(*fine, 2);
  EXPECT_EQ(coarse->tensor_stride(), (std::vector<std::int32_t>{2, 2}));
  std::set<std::tuple<int, int, int>> got;
  for (const auto& c : coarse->keys()) got.insert({c.batch, c.spatial[0], c.spatial[1]});
  std::set<std::tuple<int, int, int>> want{{0, -2, 2}, {0, 0, 0}, {1, -2, 2}};
  EXPECT_EQ(got, want);
  auto twice = stride_coordinates(*coarse, 2);
  EXPECT_EQ(twice->tensor_stride(), (std::vector<std::int32_t>{4, 4}));
  for (const auto& c : twice->keys()) {
    EXPECT_EQ(c.spatial[0] % 4, 0);
    EXPECT_EQ(c.spatial[1] % 4, 0);
  }
}

TEST(StrideCoordinates, PerAxisStrideLeavesTimeAlone) {
  auto fine = make_sorted_map({coord(0, {3, 3, 3, 5}), coord(0, {2, 2, 2, 6})}, 4);
  auto coarse = stride_coordinates(*fine, std::vector<std::int32_t>{2, 2, 2, 1});
  EXPECT_EQ(coarse->size(), 2u);
  EXPECT_TRUE(coarse->find(coord(0, {2, 2, 2, 5})).has_value());
  EXPECT_TRUE(coarse->find(coord(0, {2, 2, 2, 6})).has_value());
}

namespace {
struct ConstantHash {
  std::uint64_t operator()(const Coordinate&, int) const { return 42; }
};
}  // namespace

TEST(CoordinateHash, DeterministicAndCollisionsResolved) {
  const Coordinate c = coord(3, {1, -2, 7});
  EXPECT_EQ(hash_coordinate(c, 3), hash_coordinate(c, 3));
  BasicCoordinateMap<ConstantHash> m(2, {1, 1});
  std::vector<std::size_t> rows;
  for (int i = 0; i < 50; ++i) rows.push_back(m.insert(coord(0, {i, -i})).first);
  EXPECT_EQ(m.size(), 50u);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(m.find(coord(0, {i, -i})), rows[i]);
  EXPECT_FALSE(m.find(coord(0, {1, 1})).has_value());
}

TEST(CoordinateMap, MillionDistinct4dCoordinates) {
  CoordinateMap m(4);
  // A bijection from [0, 10^6) onto distinct 4D points with negative values.
  for (int i = 0; i < 1000000; ++i) m.insert(coord(0, {i % 10 - 5, (i / 10) % 100 - 50, (i / 1000) % 100, i / 100000}));
  EXPECT_EQ(m.size(), 1000000u);
}

TEST(CoordinateMap, AllPairsLookup) {
  std::mt19937_64 rng(9);
  auto m = testutil::random_coords(3, 10000, 40, rng, 2);
  std::size_t hits = 0, wrong = 0;
  for (std::size_t r = 0; r < m->size(); ++r) {
    auto row = m->find(m->key(r));
    hits += row.has_value();
    wrong += row && *row != r;
  }
  EXPECT_EQ(hits, 10000u);
  EXPECT_EQ(wrong, 0u);
}

TEST(Quantize, FloorArithmeticExample) {
  Matrix<double> p(1, 3);
  p(0, 0) = 0.12, p(0, 1) = 0.34, p(0, 2) = 0.56;
  auto q = quantize<double>(p, Matrix<double>(1, 1), {}, 0.1);
  EXPECT_EQ(q.tensor.coords->key(0), coord(0, {1, 3, 5}));
}

TEST(Quantize, RowCountMatchesSetOfFloors) {
  std::mt19937_64 rng(10);
  auto p = testutil::random_matrix(1000, 3, rng, 0.0, 10.0);
  std::set<std::array<long, 3>> occupied;
  for (std::size_t i = 0; i < 1000; ++i)
    occupied.insert({std::lround(std::floor(p(i, 0))), std::lround(std::floor(p(i, 1))), std::lround(std::floor(p(i, 2)))});
  auto q = quantize<double>(p, Matrix<double>(1000, 2), {}, 1.0);
  EXPECT_EQ(q.tensor.size(), occupied.size());
}

TEST(Quantize, EmptyInputAndNonFiniteRows) {
  auto q = quantize<double>(Matrix<double>(0, 3), Matrix<double>(0, 2), {}, 0.5);
  EXPECT_EQ(q.tensor.size(), 0u);
  Matrix<double> p(3, 2);
  p(2, 1) = std::numeric_limits<double>::infinity();
  try {
    quantize<double>(p, Matrix<double>(3, 1), {}, 1.0);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("2"), std::string::npos) << e.what();
  }
}

TEST(StrideCoordinates, OneDimensionalPairs) {
  auto m = make_sorted_map({coord(0, {0}), coord(0, {1}), coord(0, {2}), coord(0, {3})}, 1);
  auto s = stride_coordinates(*m, 2);
  ASSERT_EQ(s->size(), 2u);
  EXPECT_EQ(s->key(0), coord(0, {0}));
  EXPECT_EQ(s->key(1), coord(0, {2}));
  auto same = stride_coordinates(*m, 1);
  EXPECT_EQ(same->keys(), m->keys());
  EXPECT_EQ(same->tensor_stride(), m->tensor_stride());
}

TEST(StrideCoordinates, MatchesFloorDivOracleAtStrideFour) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> u(-20, 20);
  std::vector<Coordinate> keys;
  std::set<std::array<int, 3>> seen, oracle;
  while (keys.size() < 500) {
    std::array<int, 3> k{u(rng), u(rng), u(rng)};
    if (!seen.insert(k).second) continue;
    keys.push_back(coord(0, {k[0], k[1], k[2]}));
    oracle.insert({static_cast<int>(floor_div(k[0], 4) * 4), static_cast<int>(floor_div(k[1], 4) * 4),
                   static_cast<int>(floor_div(k[2], 4) * 4)});
  }
  auto s = stride_coordinates(*make_sorted_map(keys, 3), 4);
  std::set<std::array<int, 3>> got;
  for (const auto& c : s->keys()) got.insert({c.spatial[0], c.spatial[1], c.spatial[2]});
  EXPECT_EQ(got, oracle);
  EXPECT_EQ(s->size(), oracle.size());
}

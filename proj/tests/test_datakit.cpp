#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "support.hpp"

using namespace fedp3e;
namespace ts = testing_support;

namespace {

std::string csv_rows(std::size_t rows, std::size_t cols, double base) {
    std::string out;
    for (std::size_t c = 0; c < cols; ++c) out += (c ? ",f" : "f") + std::to_string(c);
    out += "\n";
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out += (c ? "," : "") + std::to_string(base + static_cast<double>(r) + 0.5 * static_cast<double>(c));
        }
        out += "\n";
    }
    return out;
}

// Reads one CSV file with nothing but iostreams; used as the comparison oracle.
std::vector<std::vector<double>> naive_read(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(row);
    }
    return rows;
}

CsvSchema narrow_schema(std::size_t cols) {
    CsvSchema s;
    s.feature_count = cols;
    return s;
}

}  // namespace

TEST(LoadCsvDir, ConcatenatesFilesInNameOrder) {
    auto dir = ts::fresh_dir("csv_concat");
    ts::write_file(dir / "benign.csv", csv_rows(10, 115, 0.0));
    ts::write_file(dir / "mirai_ack.csv", csv_rows(5, 115, 100.0));
    auto ds = load_csv_dir(dir);
    ASSERT_EQ(ds.size(), 15u);
    EXPECT_EQ(ds.dims(), 115u);
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(ds.labels[i], 0);
    for (std::size_t i = 10; i < 15; ++i) EXPECT_EQ(ds.labels[i], 2);
    EXPECT_EQ(ds.class_names, (std::vector<std::string>{"benign", "gafgyt", "mirai"}));
}

TEST(LoadCsvDir, RejectsShortRows) {
    auto dir = ts::fresh_dir("csv_short");
    ts::write_file(dir / "benign.csv", csv_rows(3, 114, 0.0));
    try {
        load_csv_dir(dir);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("column count mismatch"), std::string::npos) << e.what();
    }
}

TEST(LoadCsvDir, NonNumericCellNamesFileAndRow) {
    auto dir = ts::fresh_dir("csv_nonnumeric");
    ts::write_file(dir / "gafgyt_scan.csv", "a,b,c\n1,2,3\n4,oops,6\n");
    try {
        load_csv_dir(dir, narrow_schema(3));
        FAIL() << "expected an error";
    } catch (const Error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("gafgyt_scan.csv"), std::string::npos) << msg;
        EXPECT_NE(msg.find("row 3"), std::string::npos) << msg;
    }
}

TEST(LoadCsvDir, MissingDirectory) {
    EXPECT_THROW(load_csv_dir("/nonexistent/fedp3e/data"), Error);
}

TEST(LoadCsvDir, FixtureMatchesIndependentReader) {
    const std::filesystem::path dir = std::filesystem::path(FEDP3E_TEST_DATA) / "csv3";
    auto ds = load_csv_dir(dir, narrow_schema(5));
    std::vector<std::filesystem::path> files{dir / "benign.csv", dir / "gafgyt_combo.csv", dir / "mirai_udp.csv"};
    std::vector<int> expected_labels{0, 1, 2};
    std::size_t r = 0;
    for (std::size_t f = 0; f < files.size(); ++f) {
        for (const auto& row : naive_read(files[f])) {
            ASSERT_LT(r, ds.size());
            EXPECT_EQ(ds.labels[r], expected_labels[f]);
            for (std::size_t c = 0; c < row.size(); ++c) {
                EXPECT_EQ(ds.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)), row[c]);
            }
            ++r;
        }
    }
    EXPECT_EQ(r, ds.size());
}

TEST(LoadCsvDir, VariantIdsFollowSortedFileStems) {
    auto dir = ts::fresh_dir("csv_variants");
    ts::write_file(dir / "mirai_udp.csv", csv_rows(2, 3, 0.0));
    ts::write_file(dir / "mirai_ack.csv", csv_rows(2, 3, 0.0));
    ts::write_file(dir / "benign.csv", csv_rows(1, 3, 0.0));
    auto ds = load_csv_dir(dir, narrow_schema(3));
    // benign, mirai_ack, mirai_ack, mirai_udp, mirai_udp
    EXPECT_EQ(ds.variants, (std::vector<int>{0, 0, 0, 1, 1}));
}

TEST(MinMaxScale, AffineColumn) {
    Dataset ds = ts::tagged_dataset({3}, 0);
    auto out = min_max_scale(ds);
    EXPECT_DOUBLE_EQ(out.features(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(out.features(1, 0), 0.5);
    EXPECT_DOUBLE_EQ(out.features(2, 0), 1.0);
}

TEST(MinMaxScale, ConstantColumnMapsToZero) {
    Dataset ds = ts::tagged_dataset({3}, 1);
    ds.features.col(1).setConstant(7.0);
    auto out = min_max_scale(ds);
    for (Eigen::Index r = 0; r < 3; ++r) EXPECT_EQ(out.features(r, 1), 0.0);
}

TEST(MinMaxScale, MatchesPerColumnLoop) {
    std::mt19937_64 rng(11);
    Dataset ds;
    ds.class_names = {"a"};
    ds.features = ts::random_matrix(5, 3, rng, -4.0, 9.0);
    ds.labels.assign(5, 0);
    auto out = min_max_scale(ds);
    for (Eigen::Index c = 0; c < 3; ++c) {
        double lo = ds.features(0, c), hi = ds.features(0, c);
        for (Eigen::Index r = 1; r < 5; ++r) {
            lo = std::min(lo, ds.features(r, c));
            hi = std::max(hi, ds.features(r, c));
        }
        for (Eigen::Index r = 0; r < 5; ++r) {
            EXPECT_EQ(out.features(r, c), (ds.features(r, c) - lo) / (hi - lo));
        }
    }
}

TEST(MinMaxScale, EmptyDatasetIsAnError) {
    Dataset ds;
    EXPECT_THROW(min_max_scale(ds), Error);
}

TEST(StratifiedSplit, ExactProportions) {
    auto ds = ts::tagged_dataset({50, 50});
    auto s = stratified_split(ds, 0.8, 1);
    EXPECT_EQ(s.train.size(), 80u);
    EXPECT_EQ(s.test.size(), 20u);
    EXPECT_EQ(s.train.class_counts(), (std::vector<std::size_t>{40, 40}));
    EXPECT_EQ(s.test.class_counts(), (std::vector<std::size_t>{10, 10}));
}

TEST(StratifiedSplit, Deterministic) {
    auto ds = ts::tagged_dataset({50, 50});
    auto a = stratified_split(ds, 0.8, 99);
    auto b = stratified_split(ds, 0.8, 99);
    EXPECT_EQ(ts::ids_of(a.train), ts::ids_of(b.train));
    EXPECT_EQ(ts::ids_of(a.test), ts::ids_of(b.test));
}

TEST(StratifiedSplit, FloorRulePerClass) {
    auto s = stratified_split(ts::tagged_dataset({7, 13}), 0.8, 5);
    EXPECT_EQ(s.train.class_counts(), (std::vector<std::size_t>{5, 10}));
    EXPECT_EQ(s.test.class_counts(), (std::vector<std::size_t>{2, 3}));
}

TEST(StratifiedSplit, UnionIsInputIntersectionEmpty) {
    auto ds = ts::tagged_dataset({17, 9, 4});
    auto s = stratified_split(ds, 0.7, 3);
    auto a = ts::ids_of(s.train);
    auto b = ts::ids_of(s.test);
    std::set<std::size_t> all(a.begin(), a.end());
    for (auto id : b) EXPECT_TRUE(all.insert(id).second) << "row " << id << " in both splits";
    EXPECT_EQ(all.size(), ds.size());
}

TEST(StratifiedSplit, SingletonClassIsAnError) {
    EXPECT_THROW(stratified_split(ts::tagged_dataset({10, 1}), 0.8, 0), Error);
}

TEST(Partition, SevereGivesOneClassPerClient) {
    auto ds = ts::tagged_dataset({30, 30, 30});
    auto parts = partition(ds, make_severe_plan(ds, 3), 4);
    ASSERT_EQ(parts.size(), 3u);
    for (int k = 0; k < 3; ++k) {
        auto counts = parts[static_cast<std::size_t>(k)].class_counts();
        for (int c = 0; c < 3; ++c) EXPECT_EQ(counts[static_cast<std::size_t>(c)], c == k ? 30u : 0u);
    }
}

TEST(Partition, IidQuotasAreExact) {
    auto ds = ts::tagged_dataset({31, 60, 45});
    auto plan = make_iid_plan(ds, 3);
    auto parts = partition(ds, plan, 8);
    for (const auto& p : parts) EXPECT_EQ(p.class_counts(), (std::vector<std::size_t>{10, 20, 15}));
}

TEST(Partition, UnsatisfiableQuotaNamesClassAndShortfall) {
    auto ds = ts::tagged_dataset({40, 5});
    PartitionPlan plan{Scenario::iid, {{{0, -1, 50}}}};
    try {
        partition(ds, plan, 0);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("unsatisfiable quota"), std::string::npos) << msg;
        EXPECT_NE(msg.find("class 0"), std::string::npos) << msg;
        EXPECT_NE(msg.find("short by 10"), std::string::npos) << msg;
    }
}

TEST(Partition, NoRowInTwoClients) {
    auto ds = ts::tagged_dataset({40, 40, 40});
    auto parts = partition(ds, make_iid_plan(ds, 4), 2);
    std::set<std::size_t> seen;
    for (const auto& p : parts)
        for (auto id : ts::ids_of(p)) EXPECT_TRUE(seen.insert(id).second);
}

TEST(Partition, LightAndModerateKeepBenignEverywhere) {
    SyntheticSpec spec;
    spec.clusters_per_class = 5;
    spec.samples_per_class = 300;
    spec.seed = 3;
    auto ds = synthesize(spec);
    for (auto scenario : {Scenario::light_non_iid, Scenario::moderate_non_iid}) {
        auto parts = partition(ds, make_plan(scenario, ds, 3), 1);
        std::size_t total = 0;
        for (const auto& p : parts) {
            EXPECT_GT(p.class_counts()[0], 0u) << to_string(scenario);
            total += p.size();
        }
        EXPECT_LE(total, ds.size());
    }
    // Light: client 0 lacks gafgyt variants 1, 2 and 4 (cluster ids).
    auto light = partition(ds, make_light_plan(ds, 3), 1);
    for (std::size_t i = 0; i < light[0].size(); ++i) {
        if (light[0].labels[i] == 1) {
            EXPECT_TRUE(light[0].variants[i] == 0 || light[0].variants[i] == 3);
        }
    }
}

TEST(Partition, VariantPlansNeedVariantMetadata) {
    auto ds = ts::tagged_dataset({10, 10, 10});
    EXPECT_THROW(make_light_plan(ds, 3), Error);
}

TEST(Synthesize, CountsAndBalance) {
    SyntheticSpec spec{3, 10, 1, 0.05, 200, 7};
    auto ds = synthesize(spec);
    EXPECT_EQ(ds.size(), 600u);
    EXPECT_EQ(ds.dims(), 10u);
    EXPECT_EQ(ds.class_counts(), (std::vector<std::size_t>{200, 200, 200}));
}

TEST(Synthesize, BitIdenticalPerSeed) {
    SyntheticSpec spec{3, 10, 2, 0.05, 50, 7};
    auto a = synthesize(spec);
    auto b = synthesize(spec);
    EXPECT_TRUE(a.features == b.features);
    EXPECT_EQ(a.labels, b.labels);
    spec.seed = 8;
    EXPECT_FALSE(synthesize(spec).features == a.features);
}

TEST(Synthesize, NearestCentroidSeparatesTightClasses) {
    SyntheticSpec spec{2, 10, 1, 0.01, 200, 21};
    auto ds = synthesize(spec);
    Matrix centroid = Matrix::Zero(2, 10);
    for (std::size_t i = 0; i < ds.size(); ++i) centroid.row(ds.labels[i]) += ds.features.row(static_cast<Eigen::Index>(i)) / 200.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto row = ds.features.row(static_cast<Eigen::Index>(i));
        const int pred = (row - centroid.row(0)).squaredNorm() <= (row - centroid.row(1)).squaredNorm() ? 0 : 1;
        correct += pred == ds.labels[i] ? 1 : 0;
    }
    EXPECT_GE(static_cast<double>(correct) / static_cast<double>(ds.size()), 0.99);
}

TEST(Synthesize, InvalidSpecRejected) {
    SyntheticSpec spec;
    spec.cluster_spread = 0.0;
    EXPECT_THROW(synthesize(spec), Error);
    spec = {};
    spec.dims = 0;
    EXPECT_THROW(synthesize(spec), Error);
}

TEST(PrepareSilos, PerClientScalingUsesLocalRange) {
    SyntheticSpec spec{3, 4, 1, 0.05, 100, 2};
    auto ds = synthesize(spec);
    auto silos = prepare_silos(ds, make_severe_plan(ds, 3), {ScalingMode::per_client, 0.8}, 5);
    ASSERT_EQ(silos.size(), 3u);
    for (const auto& s : silos) {
        EXPECT_EQ(s.train.size(), 80u);
        EXPECT_EQ(s.test.size(), 20u);
        const Matrix all = (Matrix(100, 4) << s.train.features, s.test.features).finished();
        EXPECT_DOUBLE_EQ(all.minCoeff(), 0.0);
        EXPECT_DOUBLE_EQ(all.maxCoeff(), 1.0);
    }
}

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "mifi/data.hpp"
#include "mifi/survival_stats.hpp"

using namespace mifi;
using namespace mifi::data;
namespace fs = std::filesystem;

namespace {

SyntheticConfig small_cohort(std::size_t n, std::uint64_t seed = 1) {
    SyntheticConfig cfg;
    cfg.n_patients = n;
    cfg.volume_shape = {8, 8, 8};
    cfg.tabular_dim = 5;
    cfg.seed = seed;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

bool same_cohort(const Cohort& a, const Cohort& b) {
    if (a.size() != b.size() || a.ground_truth_risk != b.ground_truth_risk || a.generator != b.generator) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& p = a.patients[i];
        const auto& q = b.patients[i];
        if (p.id != q.id || p.time != q.time || p.event != q.event || p.tabular != q.tabular) return false;
        if (p.ct.shape() != q.ct.shape() || !std::equal(p.ct.data().begin(), p.ct.data().end(), q.ct.data().begin()))
            return false;
        if (!std::equal(p.mask.data().begin(), p.mask.data().end(), q.mask.data().begin())) return false;
    }
    return true;
}

}  // namespace

TEST(Synthetic, ConfigValidation) {
    auto cfg = small_cohort(10);
    EXPECT_NO_THROW(cfg.validate());
    cfg.censoring_rate = 1.0;
    EXPECT_THROW(generate_synthetic_cohort(cfg), std::invalid_argument);
    cfg = small_cohort(10);
    cfg.w_img = -1.0;
    EXPECT_THROW(generate_synthetic_cohort(cfg), std::invalid_argument);
    cfg = small_cohort(0);
    EXPECT_THROW(generate_synthetic_cohort(cfg), std::invalid_argument);
}

TEST(Synthetic, RecordInvariants) {
    auto c = generate_synthetic_cohort(small_cohort(50));
    ASSERT_EQ(c.size(), 50u);
    std::set<std::string> ids;
    for (const auto& p : c.patients) {
        ids.insert(p.id);
        EXPECT_EQ(p.ct.shape(), (Shape{1, 8, 8, 8}));
        EXPECT_EQ(p.mask.shape(), p.ct.shape());
        double inside = 0.0;
        for (double m : p.mask.data()) {
            EXPECT_TRUE(m == 0.0 || m == 1.0);
            inside += m;
        }
        EXPECT_GT(inside, 0.0);
        EXPECT_GT(p.time, 0.0);
        EXPECT_TRUE(p.event == 0 || p.event == 1);
        EXPECT_EQ(p.tabular.size(), 5u);
        for (double f : p.tabular) EXPECT_TRUE(std::isfinite(f));
    }
    EXPECT_EQ(ids.size(), 50u);
    EXPECT_EQ(c.patients[7].id, "p0007");
    EXPECT_EQ(c.ground_truth_risk.size(), 50u);
}

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
    auto a = generate_synthetic_cohort(small_cohort(20, 9));
    auto b = generate_synthetic_cohort(small_cohort(20, 9));
    EXPECT_TRUE(same_cohort(a, b));
    auto c = generate_synthetic_cohort(small_cohort(20, 10));
    EXPECT_NE(a.ground_truth_risk, c.ground_truth_risk);
}

TEST(Synthetic, CensoringRateCalibrated) {
    for (double rate : {0.1, 0.3, 0.4, 0.7})
        for (std::uint64_t seed : {1u, 2u}) {
            auto cfg = small_cohort(200, seed);
            cfg.censoring_rate = rate;
            EXPECT_NEAR(generate_synthetic_cohort(cfg).censoring_fraction(), rate, 0.05) << rate;
        }
}

TEST(Synthetic, SignalAndNullConcordance) {
    auto cfg = small_cohort(500, 4);
    cfg.volume_shape = {4, 4, 4};
    auto signal = generate_synthetic_cohort(cfg);
    EXPECT_GT(stats::concordance_index(signal.ground_truth_risk, signal.times(), signal.events()), 0.70);

    cfg.w_img = cfg.w_tab = 0.0;
    auto null = generate_synthetic_cohort(cfg);
    EXPECT_NEAR(stats::concordance_index(null.ground_truth_risk, null.times(), null.events()), 0.5, 0.05);
}

TEST(Synthetic, TopDecileDiesSooner) {
    auto cfg = small_cohort(300, 5);
    cfg.volume_shape = {4, 4, 4};
    auto c = generate_synthetic_cohort(cfg);
    std::vector<std::size_t> order(c.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return c.ground_truth_risk[a] < c.ground_truth_risk[b]; });
    const std::size_t decile = c.size() / 10;
    auto median_time = [&](std::size_t from) {
        std::vector<double> t;
        for (std::size_t i = from; i < from + decile; ++i) t.push_back(c.patients[order[i]].time);
        std::nth_element(t.begin(), t.begin() + t.size() / 2, t.end());
        return t[t.size() / 2];
    };
    EXPECT_LT(median_time(c.size() - decile), median_time(0));
}

TEST(Synthetic, ImageAndTabularCarrySignal) {
    auto cfg = small_cohort(200, 6);
    auto c = generate_synthetic_cohort(cfg);
    std::vector<double> tumour_sum, tab0;
    for (const auto& p : c.patients) {
        double s = 0.0;
        for (std::size_t i = 0; i < p.ct.numel(); ++i) s += p.ct.data()[i] * p.mask.data()[i];
        tumour_sum.push_back(s);
        tab0.push_back(p.tabular[0]);
    }
    auto corr = [](const std::vector<double>& x, const std::vector<double>& y) {
        const double n = static_cast<double>(x.size());
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            mx += x[i] / n;
            my += y[i] / n;
        }
        double sxy = 0, sxx = 0, syy = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            sxy += (x[i] - mx) * (y[i] - my);
            sxx += (x[i] - mx) * (x[i] - mx);
            syy += (y[i] - my) * (y[i] - my);
        }
        return sxy / std::sqrt(sxx * syy);
    };
    EXPECT_GT(corr(tumour_sum, c.ground_truth_risk), 0.5);
    EXPECT_GT(corr(tab0, c.ground_truth_risk), 0.5);
}

TEST(Storage, RoundTripIsLosslessAndByteStable) {
    TempDir a("mifi_data_a"), b("mifi_data_b");
    auto cohort = generate_synthetic_cohort(small_cohort(12));
    save_cohort(cohort, a.path);
    EXPECT_EQ(std::distance(fs::directory_iterator(a.path / "volumes"), fs::directory_iterator{}), 12);
    auto loaded = load_cohort(a.path);
    EXPECT_TRUE(same_cohort(cohort, loaded));
    save_cohort(loaded, b.path);
    for (const auto& entry : fs::recursive_directory_iterator(a.path)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), a.path);
        EXPECT_EQ(slurp(entry.path()), slurp(b.path / rel)) << rel;
    }
}

TEST(Storage, VolumeFormatHeader) {
    TempDir d("mifi_data_vol");
    Tensor t = Tensor::from({1, 2, 1, 2}, {1.0, -2.0, 0.5, 3.25});
    write_volume(d.path / "x.vol", t);
    const auto bytes = slurp(d.path / "x.vol");
    ASSERT_EQ(bytes.size(), 4u + 4u + 16u + 32u);
    EXPECT_EQ(bytes.substr(0, 4), "VOL0");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 4u);
    EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2u);
    auto back = read_volume(d.path / "x.vol");
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), t.data().begin()));
}

TEST(Storage, TruncatedVolumeNamesPatient) {
    TempDir d("mifi_data_trunc");
    save_cohort(generate_synthetic_cohort(small_cohort(5)), d.path);
    const auto victim = d.path / "volumes" / "p0003.vol";
    fs::resize_file(victim, fs::file_size(victim) - 8);
    try {
        load_cohort(d.path);
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("p0003"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
    }
}

TEST(Storage, CountMismatchesAreErrors) {
    TempDir d("mifi_data_count");
    save_cohort(generate_synthetic_cohort(small_cohort(5)), d.path);
    fs::remove(d.path / "volumes" / "p0004.vol");
    EXPECT_THROW(load_cohort(d.path), std::runtime_error);

    save_cohort(generate_synthetic_cohort(small_cohort(5)), d.path);
    auto csv = slurp(d.path / "clinical.csv");
    csv.erase(csv.rfind('\n', csv.size() - 2) + 1);  // drop last row
    std::ofstream(d.path / "clinical.csv", std::ios::trunc) << csv;
    EXPECT_THROW(load_cohort(d.path), std::runtime_error);
}

TEST(Storage, MalformedFiles) {
    TempDir d("mifi_data_bad");
    EXPECT_THROW(load_cohort(d.path), std::runtime_error);
    save_cohort(generate_synthetic_cohort(small_cohort(3)), d.path);
    auto csv = slurp(d.path / "clinical.csv");
    const auto pos = csv.find("\np0001,") + 7;
    csv.replace(pos, csv.find(',', pos) - pos, "abc");
    std::ofstream(d.path / "clinical.csv", std::ios::trunc) << csv;
    EXPECT_THROW(load_cohort(d.path), std::runtime_error);
    std::ofstream(d.path / "manifest.txt", std::ios::trunc) << "{ not json";
    EXPECT_THROW(load_cohort(d.path), std::runtime_error);
}

TEST(Kfold, PaperSplitSizes) {
    const auto folds = kfold_split(1354, 5, 0);
    std::vector<std::size_t> sizes;
    for (const auto& f : folds) sizes.push_back(f.test.size());
    EXPECT_EQ(sizes, (std::vector<std::size_t>{271, 271, 271, 271, 270}));
    EXPECT_EQ(folds[0].train.size(), 1083u);
}

TEST(Kfold, PartitionAndDeterminism) {
    for (std::size_t n : {5u, 17u, 200u}) {
        const auto folds = kfold_split(n, 5, 42);
        std::vector<int> seen(n, 0);
        for (const auto& f : folds) {
            EXPECT_EQ(f.train.size() + f.test.size(), n);
            for (auto i : f.test) ++seen[i];
            std::set<std::size_t> test(f.test.begin(), f.test.end());
            for (auto i : f.train) EXPECT_EQ(test.count(i), 0u);
            EXPECT_LE(f.test.size(), n / 5 + 1);
            EXPECT_GE(f.test.size(), n / 5);
        }
        for (int s : seen) EXPECT_EQ(s, 1);
        const auto again = kfold_split(n, 5, 42);
        for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(again[k].test, folds[k].test);
    }
    for (const auto& f : kfold_split(5, 5, 1)) EXPECT_EQ(f.test.size(), 1u);
    EXPECT_NE(kfold_split(100, 5, 1)[0].test, kfold_split(100, 5, 2)[0].test);
    EXPECT_THROW(kfold_split(3, 5, 0), std::invalid_argument);
}

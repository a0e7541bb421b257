#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mifi/tensor.hpp"

namespace mifi::data {

struct PatientRecord {
    std::string id;
    Tensor ct;    // [1, H, W, D]
    Tensor mask;  // [1, H, W, D], entries in {0, 1}
    std::vector<double> tabular;
    double time = 0.0;  // months, > 0
    int event = 0;
};

struct SyntheticConfig {
    std::size_t n_patients = 200;
    std::array<std::size_t, 3> volume_shape{16, 16, 16};
    std::size_t tabular_dim = 8;
    double censoring_rate = 0.3;
    // How strongly the latent hazard shows in tumour size/intensity and in tabular features.
    double w_img = 1.0;
    double w_tab = 1.0;
    double baseline_hazard = 1.0 / 24.0;  // per month
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const SyntheticConfig&) const = default;
};

struct Cohort {
    std::vector<PatientRecord> patients;
    std::optional<SyntheticConfig> generator;
    std::vector<double> ground_truth_risk;  // empty unless synthetic

    std::size_t size() const { return patients.size(); }
    std::vector<double> times() const;
    std::vector<int> events() const;
    double censoring_fraction() const;
};

/// Exponential survival with hazard baseline_hazard * exp(z), z ~ N(0, 1), and
/// independent exponential censoring tuned so the realised censored fraction
/// matches censoring_rate. With both signal weights zero the hazard ignores z.
Cohort generate_synthetic_cohort(const SyntheticConfig& cfg);

/// Layout: manifest.txt, clinical.csv, volumes/<id>.vol, masks/<id>.vol.
void save_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort load_cohort(const std::filesystem::path& dir);

/// `VOL0`, u32 rank, u32 extents, little-endian float64 payload.
void write_volume(const std::filesystem::path& path, const Tensor& t);
Tensor read_volume(const std::filesystem::path& path);

struct Fold {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
};

/// Seeded k-fold partition; test folds differ in size by at most one.
std::vector<Fold> kfold_split(std::size_t n, std::size_t k = 5, std::uint64_t seed = 0);

}  // namespace mifi::data

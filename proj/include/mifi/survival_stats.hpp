#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace mifi::stats {

/// Kaplan-Meier product-limit curve, one entry per distinct event time.
struct SurvivalCurve {
    std::vector<double> event_times;  // strictly increasing
    std::vector<double> survival;     // S(t) just after each event time
    std::vector<std::size_t> at_risk;
    std::vector<std::size_t> n_events;

    /// Right-continuous step function; 1 before the first event.
    double at(double t) const;
};

struct SurvivalGroup {
    std::vector<double> times;
    std::vector<int> events;
};

struct LogRankResult {
    double chi2 = 0.0;
    double p_value = 1.0;
    std::size_t df = 0;
};

enum class RiskGroup : int { low = 0, mid = 1, high = 2 };

struct RiskStratification {
    double c1 = 0.0;  // low: risk < c1
    double c2 = 0.0;  // high: risk >= c2
    std::vector<RiskGroup> labels;
    std::array<std::size_t, 3> group_sizes{};
    double logrank_chi2 = 0.0;
    double p_value = 1.0;
};

/// Harrell's C. A pair (i, j) is comparable when E_i = 1 and T_i < T_j, or
/// T_i = T_j with E_i = 1, E_j = 0. Tied risks score one half.
double concordance_index(std::span<const double> risks, std::span<const double> times, std::span<const int> events);

SurvivalCurve kaplan_meier(std::span<const double> times, std::span<const int> events);

/// k-sample log-rank test with k - 1 degrees of freedom.
LogRankResult logrank_test(const std::vector<SurvivalGroup>& groups);

/// Upper tail P(X > x) of a chi-square variable with `df` degrees of freedom.
double chi2_sf(double x, double df);

/// Regularised upper incomplete gamma Q(a, x).
double gamma_q(double a, double x);

/// Labels each risk against the two cutoffs.
std::vector<RiskGroup> assign_groups(std::span<const double> risks, double c1, double c2);

/// Exhaustive two-cutoff search over midpoints of sorted unique risks maximising the
/// three-group log-rank statistic; every group must hold at least
/// max(1, min_group_frac * n) patients. Ties go to the lexicographically smaller (c1, c2).
RiskStratification xtile_cutoffs(std::span<const double> risks, std::span<const double> times,
                                 std::span<const int> events, double min_group_frac = 0.1);

/// Candidate cutoffs used by xtile_cutoffs.
std::vector<double> cutoff_candidates(std::span<const double> risks);

}  // namespace mifi::stats

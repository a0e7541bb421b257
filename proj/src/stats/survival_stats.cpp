#include "mifi/survival_stats.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mifi::stats {

namespace {

void check_lengths(std::size_t a, std::size_t b, std::size_t c, const char* op) {
    if (a != b || a != c) {
        throw std::invalid_argument(std::string(op) + ": length mismatch (" + std::to_string(a) + ", " +
                                    std::to_string(b) + ", " + std::to_string(c) + ")");
    }
}

void check_events(std::span<const int> events, const char* op) {
    for (int e : events) {
        if (e != 0 && e != 1) throw std::invalid_argument(std::string(op) + ": event indicators must be 0 or 1");
    }
}

// Lower regularised gamma by series; valid for x < a + 1.
double gamma_p_series(double a, double x) {
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 10000; ++n) {
        term *= x / (a + n);
        sum += term;
        if (std::abs(term) < std::abs(sum) * 1e-17) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Upper regularised gamma by Lentz's continued fraction; valid for x >= a + 1.
double gamma_q_fraction(double a, double x) {
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double delta = d * c;
        h *= delta;
        if (std::abs(delta - 1.0) < 1e-16) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace

double SurvivalCurve::at(double t) const {
    double s = 1.0;
    for (std::size_t i = 0; i < event_times.size() && event_times[i] <= t; ++i) s = survival[i];
    return s;
}

double concordance_index(std::span<const double> risks, std::span<const double> times, std::span<const int> events) {
    check_lengths(risks.size(), times.size(), events.size(), "concordance_index");
    check_events(events, "concordance_index");
    const std::size_t n = risks.size();
    double concordant = 0.0;
    std::size_t comparable = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!events[i]) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const bool usable = times[i] < times[j] || (times[i] == times[j] && !events[j]);
            if (!usable) continue;
            ++comparable;
            if (risks[i] > risks[j]) concordant += 1.0;
            else if (risks[i] == risks[j]) concordant += 0.5;
        }
    }
    if (comparable == 0) throw std::invalid_argument("concordance_index: no comparable pairs");
    return concordant / static_cast<double>(comparable);
}

SurvivalCurve kaplan_meier(std::span<const double> times, std::span<const int> events) {
    if (times.empty()) throw std::invalid_argument("kaplan_meier: empty input");
    if (times.size() != events.size()) throw std::invalid_argument("kaplan_meier: length mismatch");
    check_events(events, "kaplan_meier");
    std::vector<std::size_t> order(times.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

    SurvivalCurve curve;
    std::size_t at_risk = times.size();
    double s = 1.0;
    for (std::size_t k = 0; k < order.size();) {
        const double t = times[order[k]];
        std::size_t deaths = 0, leaving = 0;
        while (k < order.size() && times[order[k]] == t) {
            deaths += static_cast<std::size_t>(events[order[k]]);
            ++leaving;
            ++k;
        }
        if (deaths > 0) {
            s *= 1.0 - static_cast<double>(deaths) / static_cast<double>(at_risk);
            curve.event_times.push_back(t);
            curve.survival.push_back(s);
            curve.at_risk.push_back(at_risk);
            curve.n_events.push_back(deaths);
        }
        at_risk -= leaving;
    }
    return curve;
}

LogRankResult logrank_test(const std::vector<SurvivalGroup>& groups) {
    const std::size_t k = groups.size();
    if (k < 2) throw std::invalid_argument("logrank_test: need at least two groups");
    struct Obs {
        double time;
        int event;
        std::size_t group;
    };
    std::vector<Obs> obs;
    std::vector<double> at_risk(k, 0.0);
    for (std::size_t g = 0; g < k; ++g) {
        const auto& grp = groups[g];
        if (grp.times.empty()) throw std::invalid_argument("logrank_test: group " + std::to_string(g) + " is empty");
        if (grp.times.size() != grp.events.size()) {
            throw std::invalid_argument("logrank_test: group " + std::to_string(g) + " length mismatch");
        }
        check_events(grp.events, "logrank_test");
        for (std::size_t i = 0; i < grp.times.size(); ++i) obs.push_back({grp.times[i], grp.events[i], g});
        at_risk[g] = static_cast<double>(grp.times.size());
    }
    std::stable_sort(obs.begin(), obs.end(), [](const Obs& a, const Obs& b) { return a.time < b.time; });

    Eigen::VectorXd diff = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(k));
    Eigen::MatrixXd var = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k));
    std::vector<double> deaths(k), leaving(k);
    std::size_t total_events = 0;
    for (std::size_t i = 0; i < obs.size();) {
        const double t = obs[i].time;
        std::fill(deaths.begin(), deaths.end(), 0.0);
        std::fill(leaving.begin(), leaving.end(), 0.0);
        for (; i < obs.size() && obs[i].time == t; ++i) {
            deaths[obs[i].group] += obs[i].event;
            leaving[obs[i].group] += 1.0;
        }
        const double N = std::accumulate(at_risk.begin(), at_risk.end(), 0.0);
        const double D = std::accumulate(deaths.begin(), deaths.end(), 0.0);
        if (D > 0.0) {
            total_events += static_cast<std::size_t>(D);
            const double spread = N > 1.0 ? D * (N - D) / (N - 1.0) : 0.0;
            for (std::size_t a = 0; a < k; ++a) {
                const double pa = at_risk[a] / N;
                diff(static_cast<Eigen::Index>(a)) += deaths[a] - D * pa;
                for (std::size_t b = 0; b < k; ++b) {
                    const double pb = at_risk[b] / N;
                    var(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) +=
                        spread * pa * ((a == b ? 1.0 : 0.0) - pb);
                }
            }
        }
        for (std::size_t g = 0; g < k; ++g) at_risk[g] -= leaving[g];
    }
    if (total_events == 0) throw std::invalid_argument("logrank_test: no events in any group");

    const auto m = static_cast<Eigen::Index>(k - 1);
    Eigen::VectorXd u = diff.head(m);
    Eigen::MatrixXd v = var.topLeftCorner(m, m);
    Eigen::VectorXd x = v.completeOrthogonalDecomposition().solve(u);
    LogRankResult r;
    r.chi2 = std::max(0.0, u.dot(x));
    r.df = k - 1;
    r.p_value = chi2_sf(r.chi2, static_cast<double>(r.df));
    return r;
}

double gamma_q(double a, double x) {
    if (!(a > 0.0) || x < 0.0 || std::isnan(x)) throw std::invalid_argument("gamma_q: requires a > 0, x >= 0");
    if (x == 0.0) return 1.0;
    if (std::isinf(x)) return 0.0;
    if (x < a + 1.0) return std::clamp(1.0 - gamma_p_series(a, x), 0.0, 1.0);
    return std::clamp(gamma_q_fraction(a, x), 0.0, 1.0);
}

double chi2_sf(double x, double df) {
    if (!(df > 0.0)) throw std::invalid_argument("chi2_sf: degrees of freedom must be positive");
    if (x <= 0.0) return 1.0;
    return gamma_q(0.5 * df, 0.5 * x);
}

std::vector<RiskGroup> assign_groups(std::span<const double> risks, double c1, double c2) {
    std::vector<RiskGroup> labels(risks.size());
    for (std::size_t i = 0; i < risks.size(); ++i) {
        labels[i] = risks[i] < c1 ? RiskGroup::low : (risks[i] < c2 ? RiskGroup::mid : RiskGroup::high);
    }
    return labels;
}

std::vector<double> cutoff_candidates(std::span<const double> risks) {
    std::vector<double> u(risks.begin(), risks.end());
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    std::vector<double> mids;
    for (std::size_t i = 0; i + 1 < u.size(); ++i) mids.push_back(0.5 * (u[i] + u[i + 1]));
    return mids;
}

RiskStratification xtile_cutoffs(std::span<const double> risks, std::span<const double> times,
                                 std::span<const int> events, double min_group_frac) {
    check_lengths(risks.size(), times.size(), events.size(), "xtile_cutoffs");
    const std::size_t n = risks.size();
    const double min_size = std::max(1.0, min_group_frac * static_cast<double>(n));
    if (static_cast<double>(n) < 3.0 * min_size) {
        throw std::invalid_argument("xtile_cutoffs: " + std::to_string(n) + " patients cannot form three groups of " +
                                    std::to_string(min_size));
    }
    const auto cands = cutoff_candidates(risks);
    std::vector<double> sorted(risks.begin(), risks.end());
    std::sort(sorted.begin(), sorted.end());
    auto count_below = [&](double c) {
        return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), c) - sorted.begin());
    };

    bool found = false;
    RiskStratification best;
    best.logrank_chi2 = -1.0;
    std::vector<SurvivalGroup> groups(3);
    for (std::size_t a = 0; a < cands.size(); ++a) {
        const std::size_t n_low = count_below(cands[a]);
        if (static_cast<double>(n_low) < min_size) continue;
        for (std::size_t b = a + 1; b < cands.size(); ++b) {
            const std::size_t below_c2 = count_below(cands[b]);
            const std::size_t n_mid = below_c2 - n_low, n_high = n - below_c2;
            if (static_cast<double>(n_mid) < min_size) continue;
            if (static_cast<double>(n_high) < min_size) break;
            for (auto& g : groups) {
                g.times.clear();
                g.events.clear();
            }
            const auto labels = assign_groups(risks, cands[a], cands[b]);
            for (std::size_t i = 0; i < n; ++i) {
                auto& g = groups[static_cast<std::size_t>(labels[i])];
                g.times.push_back(times[i]);
                g.events.push_back(events[i]);
            }
            const auto lr = logrank_test(groups);
            if (lr.chi2 > best.logrank_chi2) {
                found = true;
                best.c1 = cands[a];
                best.c2 = cands[b];
                best.logrank_chi2 = lr.chi2;
                best.p_value = lr.p_value;
                best.group_sizes = {n_low, n_mid, n_high};
            }
        }
    }
    if (!found) {
        throw std::invalid_argument("xtile_cutoffs: no cutoff pair satisfies the minimum group size of " +
                                    std::to_string(min_size));
    }
    best.labels = assign_groups(risks, best.c1, best.c2);
    return best;
}

}  // namespace mifi::stats

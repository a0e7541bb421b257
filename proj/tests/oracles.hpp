#pragma once

// Brute-force reference implementations shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "mifi/model.hpp"
#include "mifi/survival_stats.hpp"

namespace mifi::oracle {

/// Harrell's C by looping over unordered pairs.
inline double cindex(const std::vector<double>& r, const std::vector<double>& t, const std::vector<int>& e) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t j = i + 1; j < r.size(); ++j) {
            std::size_t a = i, b = j;  // a: candidate shorter survivor
            if (t[b] < t[a]) std::swap(a, b);
            bool ok;
            if (t[a] < t[b]) ok = e[a] == 1;
            else ok = e[a] + e[b] == 1;  // tied time: exactly one event
            if (!ok) continue;
            if (t[a] == t[b] && e[b] == 1) std::swap(a, b);
            den += 1.0;
            num += r[a] > r[b] ? 1.0 : (r[a] == r[b] ? 0.5 : 0.0);
        }
    return num / den;
}

inline double cox(const std::vector<double>& h, const std::vector<double>& t, const std::vector<int>& e) {
    double total = 0.0;
    int w = 0;
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (!e[i]) continue;
        ++w;
        double s = 0.0;
        for (std::size_t j = 0; j < h.size(); ++j)
            if (t[j] >= t[i]) s += std::exp(h[j]);
        total += h[i] - std::log(s);
    }
    return -total / w;
}

/// Product-limit estimate at `t` recomputed from scratch.
inline double km_at(const std::vector<double>& times, const std::vector<int>& events, double t) {
    double surv = 1.0;
    std::set<double> seen;
    for (double ti : times) {
        if (ti > t || seen.count(ti)) continue;
        seen.insert(ti);
        double n = 0, d = 0;
        for (std::size_t j = 0; j < times.size(); ++j) {
            n += times[j] >= ti;
            d += times[j] == ti && events[j];
        }
        surv *= 1.0 - d / n;
    }
    return surv;
}

/// Two-sample log-rank chi-square from an observed/expected table per distinct event time.
inline double logrank2(const stats::SurvivalGroup& g1, const stats::SurvivalGroup& g2) {
    std::set<double> event_times;
    for (const auto* g : {&g1, &g2})
        for (std::size_t i = 0; i < g->times.size(); ++i)
            if (g->events[i]) event_times.insert(g->times[i]);
    double o_minus_e = 0.0, var = 0.0;
    for (double t : event_times) {
        double n1 = 0, n2 = 0, d1 = 0, d2 = 0;
        for (std::size_t i = 0; i < g1.times.size(); ++i) {
            n1 += g1.times[i] >= t;
            d1 += g1.times[i] == t && g1.events[i];
        }
        for (std::size_t i = 0; i < g2.times.size(); ++i) {
            n2 += g2.times[i] >= t;
            d2 += g2.times[i] == t && g2.events[i];
        }
        const double n = n1 + n2, d = d1 + d2;
        o_minus_e += d1 - d * n1 / n;
        if (n > 1) var += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1);
    }
    return o_minus_e * o_minus_e / var;
}

struct XtileScan {
    double c1 = 0.0, c2 = 0.0, chi2 = -1.0;
};

/// Re-scan of every midpoint pair with its own grouping and size check.
inline XtileScan xtile_rescan(const std::vector<double>& risks, const std::vector<double>& times,
                              const std::vector<int>& events, double min_frac) {
    const std::size_t n = risks.size();
    const double min_size = std::max(1.0, min_frac * static_cast<double>(n));
    std::vector<double> u = risks;
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    XtileScan best;
    for (std::size_t a = 0; a + 1 < u.size(); ++a)
        for (std::size_t b = a + 1; b + 1 < u.size(); ++b) {
            const double c1 = 0.5 * (u[a] + u[a + 1]), c2 = 0.5 * (u[b] + u[b + 1]);
            std::vector<stats::SurvivalGroup> g(3);
            for (std::size_t i = 0; i < n; ++i) {
                const int lbl = risks[i] < c1 ? 0 : (risks[i] < c2 ? 1 : 2);
                g[lbl].times.push_back(times[i]);
                g[lbl].events.push_back(events[i]);
            }
            bool small = false;
            for (const auto& grp : g) small |= static_cast<double>(grp.times.size()) < min_size;
            if (small) continue;
            const double chi2 = stats::logrank_test(g).chi2;
            if (chi2 > best.chi2) best = {c1, c2, chi2};
        }
    return best;
}

/// The bottleneck block applied to every voxel token at once.
inline Tensor full_attention_block(const Tensor& x, const model::ModelParams& p, const model::ModelConfig& cfg) {
    const std::size_t C = x.dim(0), n = x.numel() / C;
    std::vector<double> tok(n * C);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) tok[i * C + c] = x.data()[c * n + i];
    Tensor t = Tensor::from({n, C}, tok);
    Tensor n1 = layer_norm(t, p.at("bottleneck.ln_attn.g"), p.at("bottleneck.ln_attn.b"));
    t = add(t, multihead_attention(n1, n1, n1, model::attention_weights(p, "bottleneck.attn"), cfg.heads));
    Tensor n2 = layer_norm(t, p.at("bottleneck.ln_ff.g"), p.at("bottleneck.ln_ff.b"));
    Tensor h = relu(linear(n2, p.at("bottleneck.ff.fc1.w"), p.at("bottleneck.ff.fc1.b")));
    t = add(t, linear(h, p.at("bottleneck.ff.fc2.w"), p.at("bottleneck.ff.fc2.b")));
    std::vector<double> back(n * C);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < n; ++i) back[c * n + i] = t.data()[i * C + c];
    return Tensor::from(x.shape(), back);
}

}  // namespace mifi::oracle

#include "mifi/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mifi::losses {

Tensor reconstruction_loss(const Tensor& gtv, const Tensor& recon) {
    if (gtv.shape() != recon.shape()) {
        throw std::invalid_argument("reconstruction_loss: " + shape_str(gtv.shape()) + " vs " +
                                    shape_str(recon.shape()));
    }
    return mean(square(sub(gtv, recon)));
}

Tensor alignment_loss(const Tensor& f_img, const Tensor& f_tab) {
    if (f_img.rank() != 1 || f_img.shape() != f_tab.shape()) {
        throw std::invalid_argument("alignment_loss: " + shape_str(f_img.shape()) + " vs " +
                                    shape_str(f_tab.shape()));
    }
    Tensor log_p = log_softmax(f_img, 0);
    Tensor log_q = log_softmax(f_tab, 0);
    return sum(mul(softmax(f_img, 0), sub(log_p, log_q)));
}

Tensor stack_risks(const std::vector<Tensor>& risks) {
    std::vector<Tensor> rows;
    rows.reserve(risks.size());
    for (const auto& r : risks) rows.push_back(reshape(r, {1}));
    return concat(rows, 0);
}

Tensor cox_loss(const BatchSurvival& batch) {
    const auto& h = batch.risks;
    const std::size_t n = batch.times.size();
    if (h.shape() != Shape{n} || batch.events.size() != n) {
        throw std::invalid_argument("cox_loss: risks " + shape_str(h.shape()) + ", " + std::to_string(n) +
                                    " times, " + std::to_string(batch.events.size()) + " events");
    }
    std::size_t observed = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(batch.times[i] > 0.0)) throw std::invalid_argument("cox_loss: non-positive time at " + std::to_string(i));
        if (batch.events[i] != 0 && batch.events[i] != 1) {
            throw std::invalid_argument("cox_loss: event indicator at " + std::to_string(i) + " is not binary");
        }
        observed += static_cast<std::size_t>(batch.events[i]);
    }
    if (observed == 0) throw std::invalid_argument("cox_loss: no observed events in batch");

    auto hd = h.data();
    const double shift = *std::max_element(hd.begin(), hd.end());
    // log sum_{j in R_i} exp(h_j), shifted for stability
    std::vector<double> log_risk_set(n, 0.0);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!batch.events[i]) continue;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (batch.times[j] >= batch.times[i]) s += std::exp(hd[j] - shift);
        log_risk_set[i] = shift + std::log(s);
        loss -= hd[i] - log_risk_set[i];
    }
    const double inv_w = 1.0 / static_cast<double>(observed);
    loss *= inv_w;

    return record_op("cox_loss", {}, {loss}, {h},
                     [h, times = batch.times, events = batch.events, log_risk_set, inv_w](const detail::GradContext& ctx) {
                         auto gh = ctx.input_grad(0);
                         if (gh.empty()) return;
                         auto hd = h.data();
                         const std::size_t n = times.size();
                         const double g = ctx.out_grad[0] * inv_w;
                         for (std::size_t i = 0; i < n; ++i) {
                             if (!events[i]) continue;
                             gh[i] -= g;
                             for (std::size_t j = 0; j < n; ++j)
                                 if (times[j] >= times[i]) gh[j] += g * std::exp(hd[j] - log_risk_set[i]);
                         }
                     });
}

Tensor total_loss(const Tensor& rec, const Tensor& align, const Tensor& surv, const LossWeights& w) {
    for (const Tensor* t : {&rec, &align, &surv}) {
        if (t->numel() != 1) throw std::invalid_argument("total_loss: component is not a scalar");
        if (!std::isfinite(t->item())) throw std::domain_error("total_loss: non-finite component");
    }
    auto term = [](const Tensor& t, double weight) { return weight == 1.0 ? t : scale(t, weight); };
    return add(add(term(rec, w.rec), term(align, w.align)), term(surv, w.surv));
}

}  // namespace mifi::losses

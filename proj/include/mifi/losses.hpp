#pragma once

#include <vector>

#include "mifi/tensor.hpp"

namespace mifi::losses {

struct BatchSurvival {
    Tensor risks;                // [n] risk scores h(x_i)
    std::vector<double> times;   // > 0
    std::vector<int> events;     // 1 = event observed, 0 = censored
};

/// Mean squared error over all voxels.
Tensor reconstruction_loss(const Tensor& gtv, const Tensor& recon);

/// KL(softmax(f_img) || softmax(f_tab)); the image representation is the reference.
Tensor alignment_loss(const Tensor& f_img, const Tensor& f_tab);

/// Negative Cox partial log-likelihood averaged over observed events.
/// Risk sets are {j : T_j >= T_i} (Breslow handling of ties).
Tensor cox_loss(const BatchSurvival& batch);

/// Builds the risk vector from per-patient scalar risks.
Tensor stack_risks(const std::vector<Tensor>& risks);

struct LossWeights {
    double rec = 1.0;
    double align = 1.0;
    double surv = 1.0;
};

Tensor total_loss(const Tensor& rec, const Tensor& align, const Tensor& surv, const LossWeights& w = {});

}  // namespace mifi::losses

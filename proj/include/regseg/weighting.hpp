#pragma once

#include <cmath>
#include <deque>
#include <vector>

#include "regseg/ops.hpp"

namespace regseg::weighting {

enum class Strategy { equal, homoscedastic, dwa };

inline const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::equal: return "equal";
        case Strategy::homoscedastic: return "homoscedastic";
        case Strategy::dwa: return "dwa";
    }
    return "?";
}

inline Strategy strategy_from_name(const std::string& s) {
    if (s == "equal") return Strategy::equal;
    if (s == "homoscedastic") return Strategy::homoscedastic;
    if (s == "dwa") return Strategy::dwa;
    throw ConfigError("unknown weighting strategy '" + s + "'");
}

// Loss weights in the order (NCC, DSC-R, DSC-S, BE). The bending weight stays
// fixed under every strategy.
struct WeightVector {
    double w0 = 1, w1 = 1, w2 = 1, w3 = 0.5;
};

inline WeightVector equal_weights(double bending_weight = 0.5) {
    return {1.0, 1.0, 1.0, bending_weight};
}

// ---------------------------------------------------------------------------
// Homoscedastic uncertainty: sum_i exp(-eta_i) L_i + eta_i/2, eta = log sigma^2
// ---------------------------------------------------------------------------

template <typename T>
struct HomoscedasticState {
    std::vector<Tensor<T>> eta;  // one trainable scalar per weighted task

    explicit HomoscedasticState(int num_tasks = 0) {
        for (int i = 0; i < num_tasks; ++i) eta.push_back(Tensor<T>({1}));
    }
    int num_tasks() const { return static_cast<int>(eta.size()); }
    double effective_weight(int i) const { return std::exp(-static_cast<double>(eta[i][0])); }
};

// Stages the eta parameters as trainable leaves. Caller applies the returned
// Vars to homoscedastic_loss and reads gradients back after backward.
template <typename T>
std::vector<Var<T>> stage_eta(Tape<T>& tp, HomoscedasticState<T>& st) {
    std::vector<Var<T>> vars;
    for (size_t i = 0; i < st.eta.size(); ++i)
        vars.push_back(tp.leaf(st.eta[i], "eta" + std::to_string(i), true));
    return vars;
}

template <typename T>
Var<T> homoscedastic_loss(Tape<T>& tp, const std::vector<Var<T>>& task_losses,
                          const std::vector<Var<T>>& eta_vars) {
    if (task_losses.size() != eta_vars.size())
        throw ConfigError("homoscedastic_loss: task/eta count mismatch");
    Var<T> total;
    for (size_t i = 0; i < task_losses.size(); ++i) {
        Var<T> w = ops::exp_op(tp, ops::scale(tp, eta_vars[i], -1.0));
        Var<T> term = ops::add(tp, ops::mul(tp, w, task_losses[i]),
                               ops::scale(tp, eta_vars[i], 0.5));
        total = total.valid() ? ops::add(tp, total, term) : term;
    }
    if (!total.valid()) throw ConfigError("homoscedastic_loss: no tasks");
    return total;
}

// ---------------------------------------------------------------------------
// Dynamic Weight Averaging
// ---------------------------------------------------------------------------

// w_k(t) = K exp(r_k/tmp) / sum_i exp(r_i/tmp), r_k = L_k(t-1)/L_k(t-2).
// r is 1 for the first two iterations and capped to survive near-zero
// historical losses. Optional moving-average window smooths the ratios.
struct DwaState {
    int num_tasks = 0;
    double tmp = 1.0;
    double r_cap = 10.0;
    int ma_window = 0;  // 0 = off (raw per-iteration losses)

    std::vector<double> prev1, prev2;  // smoothed L(t-1), L(t-2)
    int iters_seen = 0;
    std::deque<std::vector<double>> window;

    explicit DwaState(int k = 0, double temperature = 1.0) : num_tasks(k), tmp(temperature) {}

    void push(const std::vector<double>& losses) {
        if (static_cast<int>(losses.size()) != num_tasks)
            throw ConfigError("DwaState: task count mismatch");
        std::vector<double> smoothed = losses;
        if (ma_window > 1) {
            window.push_back(losses);
            while (static_cast<int>(window.size()) > ma_window) window.pop_front();
            for (int k = 0; k < num_tasks; ++k) {
                double s = 0;
                for (const auto& w : window) s += w[static_cast<size_t>(k)];
                smoothed[static_cast<size_t>(k)] = s / static_cast<double>(window.size());
            }
        }
        prev2 = prev1;
        prev1 = std::move(smoothed);
        ++iters_seen;
    }

    std::vector<double> ratios() const {
        std::vector<double> r(static_cast<size_t>(num_tasks), 1.0);
        if (iters_seen < 2) return r;
        for (int k = 0; k < num_tasks; ++k) {
            const double den = prev2[static_cast<size_t>(k)];
            double v = den <= 0.0 ? r_cap : prev1[static_cast<size_t>(k)] / den;
            r[static_cast<size_t>(k)] = std::min(v, r_cap);
        }
        return r;
    }

    std::vector<double> weights() const {
        const std::vector<double> r = ratios();
        double den = 0;
        for (double v : r) den += std::exp(v / tmp);
        std::vector<double> w(r.size());
        for (size_t i = 0; i < r.size(); ++i)
            w[i] = static_cast<double>(num_tasks) * std::exp(r[i] / tmp) / den;
        return w;
    }
};

}  // namespace regseg::weighting

#pragma once

// Shared synthetic-data helpers for the unit and acceptance suites.

#include <string>
#include <vector>

#include "toxlab/common.hpp"
#include "toxlab/probe.hpp"

namespace toxlab::testsupport {

struct PlantedData {
    std::vector<std::vector<std::vector<double>>> X_by_layer;  // [layer][row][dim]
    std::vector<char> y;                                       // shared labels
    std::vector<double> direction;                             // planted unit vector
};

// Balanced labels; activations are standard normal noise at every layer,
// with the class means shifted by +-delta/2 along a fixed unit direction at
// `planted_layer` only.
inline PlantedData make_planted(int n_layers, int planted_layer, size_t n, size_t d, double delta,
                                uint64_t seed) {
    Rng rng(seed);
    PlantedData out;
    out.direction.assign(d, 0.0);
    double nsq = 0.0;
    for (size_t j = 0; j < d; ++j) {
        out.direction[j] = rng.gauss();
        nsq += out.direction[j] * out.direction[j];
    }
    for (size_t j = 0; j < d; ++j) out.direction[j] /= std::sqrt(nsq);

    out.y.resize(n);
    for (size_t i = 0; i < n; ++i) out.y[i] = i % 2 == 0 ? 1 : 0;

    out.X_by_layer.assign(n_layers, {});
    for (int l = 0; l < n_layers; ++l) {
        auto& X = out.X_by_layer[l];
        X.assign(n, std::vector<double>(d));
        for (size_t i = 0; i < n; ++i) {
            const double shift =
                l == planted_layer ? (out.y[i] ? delta / 2.0 : -delta / 2.0) : 0.0;
            for (size_t j = 0; j < d; ++j) {
                X[i][j] = rng.gauss() + shift * out.direction[j];
            }
        }
    }
    return out;
}

// O(n^2) pair-counting AUC oracle with the 0.5-per-tie convention.
inline double auc_bruteforce(const std::vector<double>& scores, const std::vector<char>& labels) {
    double wins = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j]) wins += 1.0;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

}  // namespace toxlab::testsupport

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "genco/error.hpp"
#include "genco/layers.hpp"
#include "genco/ops.hpp"
#include "genco/rng.hpp"

namespace genco {

// Gaussian noise source for the generator: i.i.d. N(mean, variance) draws,
// row-major, fully determined by the key.
struct NoiseSpec {
    int dim = 128;
    double mean = 0.0;
    double variance = 0.1;
};

template <class T>
Tensor<T> sample_noise(const NoiseSpec& spec, int batch, RngKey key) {
    if (spec.dim < 0 || batch < 0) throw ConfigError("noise dims must be nonnegative");
    Tensor<T> z({batch, spec.dim});
    RngStream rng(key);
    const double stddev = std::sqrt(spec.variance);
    for (size_t i = 0; i < z.numel(); ++i) z[i] = (T)(spec.mean + stddev * rng.next_normal());
    return z;
}

// Feature generator: three linear layers with a ReLU between successive
// layers, mapping concat(q, z) to a feature of q's dimension. Hidden widths
// equal the input width. The output is L2-normalized.
template <class T>
struct Generator {
    int feature_dim = 128;
    int noise_dim = 128;
    LinearLayer<T> fc1, fc2, fc3;

    static Generator init(int feature_dim, int noise_dim, RngKey key) {
        if (feature_dim < 1 || noise_dim < 0) throw ConfigError("bad generator dims");
        Generator g;
        g.feature_dim = feature_dim;
        g.noise_dim = noise_dim;
        const int in_dim = feature_dim + noise_dim;
        g.fc1 = LinearLayer<T>::init(in_dim, in_dim, key, "generator.fc1");
        g.fc2 = LinearLayer<T>::init(in_dim, in_dim, key, "generator.fc2");
        g.fc3 = LinearLayer<T>::init(in_dim, feature_dim, key, "generator.fc3");
        return g;
    }

    // q' = normalize(G(concat(q, z))). Gradients flow into the layers and
    // through q.
    Var<T> forward(const Var<T>& q, const Var<T>& z) const {
        if (q.shape().size() != 2 || q.shape()[1] != feature_dim)
            throw ShapeError("generator expects q [B," + std::to_string(feature_dim) + "], got " +
                             shape_str(q.shape()));
        if (z.shape().size() != 2 || z.shape()[1] != noise_dim || z.shape()[0] != q.shape()[0])
            throw ShapeError("generator noise shape " + shape_str(z.shape()) +
                             " does not pair with q " + shape_str(q.shape()));
        Var<T> h = ops::concat_cols<T>({q, z});
        h = ops::relu(fc1.forward(h));
        h = ops::relu(fc2.forward(h));
        return ops::l2_normalize(fc3.forward(h));
    }

    std::vector<Var<T>> parameters() { return {fc1.w, fc1.b, fc2.w, fc2.b, fc3.w, fc3.b}; }
};

template <class T>
Var<T> generate(const Generator<T>& g, const Var<T>& q, const Var<T>& z) {
    return g.forward(q, z);
}

}  // namespace genco

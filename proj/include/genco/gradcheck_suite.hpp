#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "genco/bank.hpp"
#include "genco/generator.hpp"
#include "genco/gradcheck.hpp"
#include "genco/losses.hpp"
#include "genco/ops.hpp"

// Full gradient-oracle battery: every differentiable operator plus the
// composite contrastive path, checked in double precision against central
// differences. Shared by the gradcheck command and the test suite.

namespace genco {

struct GradSuiteResult {
    std::string name;
    double max_err = 0.0;
    int instances = 0;
};

namespace gcdetail {

inline Tensor<double> randn(const std::vector<int>& shape, RngStream& rng, double scale = 1.0,
                            double offset = 0.0) {
    Tensor<double> t = Tensor<double>::zeros(shape);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.next_normal() * scale + offset;
    return t;
}

// keep values away from the relu/maxpool kink so central differences are valid
inline Tensor<double> randn_away_from_zero(const std::vector<int>& shape, RngStream& rng,
                                           double margin = 5e-2) {
    Tensor<double> t = Tensor<double>::zeros(shape);
    for (size_t i = 0; i < t.numel(); ++i) {
        double v = rng.next_normal();
        if (std::abs(v) < margin) v = v < 0 ? v - margin : v + margin;
        t[i] = v;
    }
    return t;
}

inline Tensor<double> rand_rows_normalized(int rows, int dim, RngStream& rng) {
    Tensor<double> t = randn({rows, dim}, rng);
    for (int r = 0; r < rows; ++r) {
        double n = 0;
        for (int j = 0; j < dim; ++j) n += t[(size_t)r * dim + j] * t[(size_t)r * dim + j];
        n = std::sqrt(n);
        for (int j = 0; j < dim; ++j) t[(size_t)r * dim + j] /= n;
    }
    return t;
}

}  // namespace gcdetail

inline std::vector<GradSuiteResult> run_gradcheck_suites(uint64_t seed, int repeats) {
    using V = Var<double>;
    using gcdetail::randn;
    using gcdetail::randn_away_from_zero;
    std::vector<GradSuiteResult> results;
    const double eps = 1e-5;

    auto suite = [&](const std::string& name, auto make_check) {
        GradSuiteResult r;
        r.name = name;
        r.instances = repeats;
        for (int i = 0; i < repeats; ++i) {
            RngStream rng(RngKey::root(seed).fold(name).fold((uint64_t)i));
            r.max_err = std::max(r.max_err, make_check(rng));
        }
        results.push_back(r);
    };

    suite("arithmetic", [&](RngStream& rng) {
        V a(randn({3, 4}, rng), true, "a");
        V b(randn({3, 4}, rng), true, "b");
        return grad_check<double>(
            [&] {
                return ops::mean_all(
                    ops::mul(ops::add(a, ops::scale(b, 0.7)), ops::sub(a, b)));
            },
            {a, b}, eps);
    });

    suite("relu", [&](RngStream& rng) {
        V x(randn_away_from_zero({4, 5}, rng), true, "x");
        return grad_check<double>([&] { return ops::mean_all(ops::relu(x)); }, {x}, eps);
    });

    suite("matmul", [&](RngStream& rng) {
        V a(randn({3, 4}, rng), true, "a");
        V b(randn({4, 5}, rng), true, "b");
        V c(randn({3, 5}, rng), true, "c");
        return grad_check<double>(
            [&] { return ops::mean_all(ops::mul(ops::matmul(a, b), c)); }, {a, b, c}, eps);
    });

    suite("linear", [&](RngStream& rng) {
        V x(randn({4, 6}, rng), true, "x");
        V w(randn({3, 6}, rng), true, "w");
        V b(randn({3}, rng), true, "b");
        return grad_check<double>([&] { return ops::mean_all(ops::linear(x, w, b)); },
                                  {x, w, b}, eps);
    });

    suite("rowwise_dot", [&](RngStream& rng) {
        V a(randn({5, 7}, rng), true, "a");
        V b(randn({5, 7}, rng), true, "b");
        return grad_check<double>([&] { return ops::mean_all(ops::rowwise_dot(a, b)); }, {a, b},
                                  eps);
    });

    suite("l2_normalize", [&](RngStream& rng) {
        Tensor<double> t = randn({4, 6}, rng, 1.0, 0.0);
        // keep rows clear of the degenerate-norm region
        for (int r = 0; r < 4; ++r) t[(size_t)r * 6] += 2.0;
        V x(t, true, "x");
        V w(randn({4, 6}, rng), false, "w");
        return grad_check<double>(
            [&] { return ops::mean_all(ops::mul(ops::l2_normalize(x), w)); }, {x}, eps);
    });

    suite("log_sum_exp", [&](RngStream& rng) {
        V x(randn({3, 8}, rng, 2.0), true, "x");
        V v(randn({9}, rng, 2.0), true, "v");
        return grad_check<double>(
            [&] {
                return ops::add(ops::mean_all(ops::log_sum_exp(x)),
                                ops::log_sum_exp(v));
            },
            {x, v}, eps);
    });

    suite("concat", [&](RngStream& rng) {
        V a(randn({3, 4}, rng), true, "a");
        V b(randn({3, 2}, rng), true, "b");
        V c(randn({2, 6}, rng), true, "c");
        return grad_check<double>(
            [&] {
                return ops::mean_all(ops::concat_rows(
                    ops::concat_cols(std::vector<V>{a, b}), c));
            },
            {a, b, c}, eps);
    });

    suite("conv2d_s1", [&](RngStream& rng) {
        V x(randn({2, 3, 6, 6}, rng), true, "x");
        V w(randn({4, 3, 3, 3}, rng, 0.4), true, "w");
        V b(randn({4}, rng, 0.2), true, "b");
        return grad_check<double>(
            [&] { return ops::mean_all(ops::conv2d(x, w, b, 1, 1)); }, {x, w, b}, eps);
    });

    suite("conv2d_s2", [&](RngStream& rng) {
        V x(randn({2, 3, 6, 6}, rng), true, "x");
        V w(randn({4, 3, 3, 3}, rng, 0.4), true, "w");
        V b(randn({4}, rng, 0.2), true, "b");
        return grad_check<double>(
            [&] { return ops::mean_all(ops::conv2d(x, w, b, 2, 1)); }, {x, w, b}, eps);
    });

    suite("conv2d_1x1", [&](RngStream& rng) {
        V x(randn({2, 4, 5, 5}, rng), true, "x");
        V w(randn({3, 4, 1, 1}, rng, 0.4), true, "w");
        V b(randn({3}, rng, 0.2), true, "b");
        return grad_check<double>(
            [&] { return ops::mean_all(ops::conv2d(x, w, b, 1, 0)); }, {x, w, b}, eps);
    });

    suite("transposed_conv2d", [&](RngStream& rng) {
        V x(randn({2, 4, 3, 3}, rng), true, "x");
        V w(randn({4, 2, 2, 2}, rng, 0.4), true, "w");
        V b(randn({2}, rng, 0.2), true, "b");
        return grad_check<double>(
            [&] { return ops::mean_all(ops::transposed_conv2d(x, w, b, 2)); }, {x, w, b}, eps);
    });

    suite("max_pool2", [&](RngStream& rng) {
        V x(randn({2, 3, 6, 6}, rng, 3.0), true, "x");
        return grad_check<double>([&] { return ops::mean_all(ops::max_pool2(x)); }, {x}, eps);
    });

    suite("global_avg_pool", [&](RngStream& rng) {
        V x(randn({2, 3, 4, 4}, rng), true, "x");
        V w(randn({2, 3}, rng), false, "w");
        return grad_check<double>(
            [&] { return ops::mean_all(ops::mul(ops::global_avg_pool(x), w)); }, {x}, eps);
    });

    suite("batch_norm_train", [&](RngStream& rng) {
        V x(randn({4, 3, 4, 4}, rng, 1.5, 0.3), true, "x");
        V gamma(randn({3}, rng, 0.3, 1.0), true, "gamma");
        V beta(randn({3}, rng, 0.3), true, "beta");
        Tensor<double> rm = Tensor<double>::zeros({3});
        Tensor<double> rv = Tensor<double>::full({3}, 1.0);
        V w(randn({4, 3, 4, 4}, rng), false, "w");
        return grad_check<double>(
            [&] {
                return ops::mean_all(ops::mul(
                    ops::batch_norm2d(x, gamma, beta, rm, rv, true), w));
            },
            {x, gamma, beta}, eps);
    });

    suite("batch_norm_eval", [&](RngStream& rng) {
        V x(randn({4, 3, 4, 4}, rng), true, "x");
        V gamma(randn({3}, rng, 0.3, 1.0), true, "gamma");
        V beta(randn({3}, rng, 0.3), true, "beta");
        Tensor<double> rm = randn({3}, rng, 0.2);
        Tensor<double> rv = randn({3}, rng, 0.1, 1.5);
        V w(randn({4, 3, 4, 4}, rng), false, "w");
        return grad_check<double>(
            [&] {
                return ops::mean_all(ops::mul(
                    ops::batch_norm2d(x, gamma, beta, rm, rv, false), w));
            },
            {x, gamma, beta}, eps);
    });

    suite("broadcast_add_chan", [&](RngStream& rng) {
        V x(randn({2, 3, 4, 4}, rng), true, "x");
        V v(randn({2, 3}, rng), true, "v");
        return grad_check<double>(
            [&] { return ops::mean_all(ops::broadcast_add_chan(x, v)); }, {x, v}, eps);
    });

    suite("softmax_cross_entropy", [&](RngStream& rng) {
        V x(randn({5, 4}, rng, 2.0), true, "x");
        std::vector<int> labels;
        for (int i = 0; i < 5; ++i) labels.push_back((int)rng.next_below(4));
        return grad_check<double>([&] { return ops::softmax_cross_entropy(x, labels); }, {x},
                                  eps);
    });

    suite("softmax_cross_entropy_spatial", [&](RngStream& rng) {
        V x(randn({2, 3, 4, 4}, rng, 2.0), true, "x");
        std::vector<uint8_t> mask;
        for (int i = 0; i < 32; ++i)
            mask.push_back(rng.next_unit() < 0.2 ? 255 : (uint8_t)rng.next_below(3));
        if (mask[0] == 255) mask[0] = 0;  // keep at least one valid pixel
        return grad_check<double>(
            [&] { return ops::softmax_cross_entropy_spatial(x, mask, 255); }, {x}, eps);
    });

    suite("generator", [&](RngStream& rng) {
        auto g = Generator<double>::init(8, 4, RngKey::root(rng.next_u64()));
        V q(gcdetail::rand_rows_normalized(3, 8, rng), true, "q");
        V z(randn({3, 4}, rng, 0.3), false, "z");
        V w(randn({3, 8}, rng), false, "w");
        std::vector<V> leaves = {q};
        for (auto& p : g.parameters()) leaves.push_back(p);
        return grad_check<double>(
            [&] { return ops::mean_all(ops::mul(g.forward(q, z), w)); }, leaves, eps);
    });

    // the composite contrastive path: raw features -> normalize -> generator
    // -> loss, gradients w.r.t. raw features and all generator parameters
    suite("genco_loss_path", [&](RngStream& rng) {
        const int dim = 8, bank_n = 16, batch = 3;
        auto g = Generator<double>::init(dim, 4, RngKey::root(rng.next_u64()));
        MemoryBank<double> bank(bank_n, dim);
        bank.enqueue(gcdetail::rand_rows_normalized(bank_n, dim, rng));
        V raw_q(randn_away_from_zero({batch, dim}, rng), true, "raw_q");
        V k(gcdetail::rand_rows_normalized(batch, dim, rng), false, "k");
        V z(randn({batch, 4}, rng, 0.3), false, "z");
        std::vector<V> leaves = {raw_q};
        for (auto& p : g.parameters()) leaves.push_back(p);
        return grad_check<double>(
            [&] {
                V q = ops::l2_normalize(raw_q);
                V q_prime = g.forward(q, z);
                return genco_loss(q, q_prime, k, bank, 0.2);
            },
            leaves, eps);
    });

    suite("moco_loss_path", [&](RngStream& rng) {
        const int dim = 8, bank_n = 16, batch = 3;
        MemoryBank<double> bank(bank_n, dim);
        bank.enqueue(gcdetail::rand_rows_normalized(bank_n, dim, rng));
        V raw_q(randn_away_from_zero({batch, dim}, rng), true, "raw_q");
        V k(gcdetail::rand_rows_normalized(batch, dim, rng), false, "k");
        return grad_check<double>(
            [&] { return moco_loss(ops::l2_normalize(raw_q), k, bank, 0.2); }, {raw_q}, eps);
    });

    return results;
}

}  // namespace genco

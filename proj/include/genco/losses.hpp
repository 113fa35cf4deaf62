#pragma once

#include <vector>

#include "genco/bank.hpp"
#include "genco/error.hpp"
#include "genco/graph.hpp"
#include "genco/ops.hpp"

namespace genco {

// Generator-augmented InfoNCE. Per sample:
//   loss = -log[ (e^{q.k/t} + e^{q'.k/t}) /
//                (sum_neg e^{q.n/t} + e^{q.k/t} + e^{q'.k/t}) ]
// averaged over the batch and evaluated through log-sum-exp. The negatives
// pair with q only; `symmetric_negatives` adds the q'-vs-bank terms to the
// denominator as an explicitly non-default variant.
//
// Denominator term order is canonical: bank rows in slot order, then the two
// positive terms. log_sum_exp itself reduces in value-sorted order, so the
// result is bitwise invariant under bank-row permutation. With an empty bank
// the numerator and denominator term lists coincide and the loss is exactly
// zero.
template <class T>
Var<T> genco_loss(const Var<T>& q, const Var<T>& q_prime, const Var<T>& k,
                  const MemoryBank<T>& bank, T tau, bool symmetric_negatives = false) {
    if (!(tau > T(0))) throw Error("tau must be positive");
    if (q.shape().size() != 2 || q.shape()[0] < 1) throw Error("empty batch in genco_loss");
    if (!q.value().same_shape(q_prime.value()) || !q.value().same_shape(k.value()))
        shape_fail("genco_loss", q.shape(), k.shape());
    const T inv_tau = T(1) / tau;

    Var<T> a = ops::scale(ops::rowwise_dot(q, k), inv_tau);
    Var<T> b = ops::scale(ops::rowwise_dot(q_prime, k), inv_tau);
    Var<T> num = ops::log_sum_exp(ops::concat_cols<T>({a, b}));

    Var<T> den;
    if (bank.fill_count() > 0) {
        Var<T> negs = Var<T>::constant(bank.snapshot());
        std::vector<Var<T>> terms;
        terms.push_back(ops::scale(ops::matmul_nt(q, negs), inv_tau));
        if (symmetric_negatives)
            terms.push_back(ops::scale(ops::matmul_nt(q_prime, negs), inv_tau));
        terms.push_back(a);
        terms.push_back(b);
        den = ops::log_sum_exp(ops::concat_cols<T>(terms));
    } else {
        den = ops::log_sum_exp(ops::concat_cols<T>({a, b}));
    }
    return ops::mean_all(ops::sub(den, num));
}

// Plain momentum-contrast InfoNCE: the generator terms removed.
template <class T>
Var<T> moco_loss(const Var<T>& q, const Var<T>& k, const MemoryBank<T>& bank, T tau) {
    if (!(tau > T(0))) throw Error("tau must be positive");
    if (q.shape().size() != 2 || q.shape()[0] < 1) throw Error("empty batch in moco_loss");
    if (!q.value().same_shape(k.value())) shape_fail("moco_loss", q.shape(), k.shape());
    const T inv_tau = T(1) / tau;

    Var<T> a = ops::scale(ops::rowwise_dot(q, k), inv_tau);
    Var<T> num = ops::log_sum_exp(ops::concat_cols<T>({a}));

    Var<T> den;
    if (bank.fill_count() > 0) {
        Var<T> negs = Var<T>::constant(bank.snapshot());
        Var<T> s = ops::scale(ops::matmul_nt(q, negs), inv_tau);
        den = ops::log_sum_exp(ops::concat_cols<T>({s, a}));
    } else {
        den = ops::log_sum_exp(ops::concat_cols<T>({a}));
    }
    return ops::mean_all(ops::sub(den, num));
}

}  // namespace genco

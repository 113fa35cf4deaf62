#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <deque>
#include <vector>

#include "genco/bank.hpp"
#include "genco/generator.hpp"
#include "genco/losses.hpp"
#include "genco/momentum.hpp"
#include "genco/rng.hpp"

using namespace genco;

namespace {

// unit row along the given axis
Tensor<double> axis_row(int dim, int axis, double sign = 1.0) {
    Tensor<double> t = Tensor<double>::zeros({1, dim});
    t.data()[axis] = sign;
    return t;
}

Tensor<double> unit_rows(int n, int dim, RngStream& rng) {
    Tensor<double> t({n, dim});
    for (int i = 0; i < n; ++i) {
        double ss = 0;
        for (int j = 0; j < dim; ++j) {
            const double v = rng.next_normal();
            t.at(i, j) = v;
            ss += v * v;
        }
        const double inv = 1.0 / std::sqrt(ss);
        for (int j = 0; j < dim; ++j) t.at(i, j) *= inv;
    }
    return t;
}

// independent scalar oracle: loss for one sample from raw similarities
double scalar_loss(double qk, double qpk, const std::vector<double>& neg_sims, double tau,
                   bool symmetric = false, const std::vector<double>& qp_neg_sims = {}) {
    const double a = std::exp(qk / tau), b = std::exp(qpk / tau);
    double den = a + b;
    for (double s : neg_sims) den += std::exp(s / tau);
    if (symmetric)
        for (double s : qp_neg_sims) den += std::exp(s / tau);
    return -std::log((a + b) / den);
}

}  // namespace

TEST_CASE("hand instance matches the scalar oracle") {
    // dim 4, tau 1, one negative. q = e0, k = 0.6 e0 + 0.8 e1, q' = e1,
    // negative n = e2 -> q.k = 0.6, q'.k = 0.8, q.n = 0.
    const int dim = 4;
    MemoryBank<double> bank(8, dim);
    bank.enqueue(axis_row(dim, 2));
    Var<double> q(axis_row(dim, 0));
    Tensor<double> kt = Tensor<double>::zeros({1, dim});
    kt.data()[0] = 0.6;
    kt.data()[1] = 0.8;
    Var<double> k(kt);
    Var<double> qp(axis_row(dim, 1));
    const double val = genco_loss(q, qp, k, bank, 1.0).value().item();
    const double oracle = scalar_loss(0.6, 0.8, {0.0}, 1.0);
    CHECK(val == doctest::Approx(oracle).epsilon(1e-12));
    // frozen value, computed independently
    CHECK(val == doctest::Approx(0.22078584647025878).epsilon(1e-9));
}

TEST_CASE("moco hand instance matches the scalar oracle") {
    const int dim = 4;
    MemoryBank<double> bank(8, dim);
    bank.enqueue(axis_row(dim, 2));
    Var<double> q(axis_row(dim, 0));
    Tensor<double> kt = Tensor<double>::zeros({1, dim});
    kt.data()[0] = 0.6;
    kt.data()[1] = 0.8;
    Var<double> k(kt);
    // one positive e^{0.6}, one negative e^{0}
    const double val = moco_loss(q, k, bank, 1.0).value().item();
    const double oracle = -std::log(std::exp(0.6) / (std::exp(0.6) + 1.0));
    CHECK(val == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(val == doctest::Approx(0.43748795048588573).epsilon(1e-9));
}

TEST_CASE("empty bank makes the loss exactly zero") {
    const int dim = 8;
    MemoryBank<double> bank(16, dim);
    RngStream rng(RngKey::root(3).fold("q"));
    Var<double> q(unit_rows(4, dim, rng));
    Var<double> qp(unit_rows(4, dim, rng));
    Var<double> k(unit_rows(4, dim, rng));
    CHECK(genco_loss(q, qp, k, bank, 0.2).value().item() == 0.0);  // bitwise
}

TEST_CASE("1000-instance property suite") {
    RngStream rng(RngKey::root(77).fold("prop"));
    for (int inst = 0; inst < 1000; ++inst) {
        const int dim = 4 + (int)rng.next_below(8);
        const int n_neg = 1 + (int)rng.next_below(6);
        const double tau = 0.1 + rng.next_unit() * 0.9;

        MemoryBank<double> bank(16, dim);
        bank.enqueue(unit_rows(n_neg, dim, rng));
        Var<double> q(unit_rows(1, dim, rng));
        Var<double> qp(unit_rows(1, dim, rng));
        Var<double> k(unit_rows(1, dim, rng));

        const double loss = genco_loss(q, qp, k, bank, tau).value().item();
        CHECK(loss >= 0.0);  // denominator contains every numerator term

        // matches the independent scalar oracle
        std::vector<double> neg_sims(n_neg);
        const Tensor<double> rows = bank.snapshot();
        double qk = 0, qpk = 0;
        for (int j = 0; j < dim; ++j) {
            qk += q.value().data()[j] * k.value().data()[j];
            qpk += qp.value().data()[j] * k.value().data()[j];
        }
        for (int i = 0; i < n_neg; ++i) {
            neg_sims[i] = 0;
            for (int j = 0; j < dim; ++j)
                neg_sims[i] += q.value().data()[j] * rows.at(i, j);
        }
        CHECK(loss == doctest::Approx(scalar_loss(qk, qpk, neg_sims, tau)).epsilon(1e-9));
    }
}

TEST_CASE("loss is strictly monotone in each similarity") {
    // Orthonormal construction lets every similarity vary independently.
    const int dim = 12;
    const double tau = 0.5;

    // increasing any single negative similarity increases the loss;
    // rows are built as s*e0 + sqrt(1-s^2)*e_{2+i} so q.n == s exactly
    for (int which = 0; which < 3; ++which) {
        bool first = true;
        double prev = 0.0;
        for (double s : {-0.9, -0.4, 0.1, 0.5, 0.9}) {
            MemoryBank<double> bank(8, dim);
            for (int i = 0; i < 3; ++i) {
                Tensor<double> n = Tensor<double>::zeros({1, dim});
                const double sim = i == which ? s : 0.3;
                n.data()[0] = sim;
                n.data()[2 + i] = std::sqrt(1.0 - sim * sim);
                bank.enqueue(n);
            }
            Var<double> q(axis_row(dim, 0));
            Var<double> k(axis_row(dim, 1));
            Var<double> qp(axis_row(dim, 5));
            const double loss = genco_loss(q, qp, k, bank, tau).value().item();
            if (!first) CHECK(loss > prev);
            first = false;
            prev = loss;
        }
    }

    // increasing the q.k similarity decreases the loss (q' orthogonal)
    {
        double prev = -1.0;
        for (double alpha : {1.4, 1.0, 0.6, 0.2}) {  // decreasing angle = increasing sim
            MemoryBank<double> bank(8, dim);
            bank.enqueue(axis_row(dim, 3));
            Var<double> q(axis_row(dim, 0));
            Tensor<double> kt = Tensor<double>::zeros({1, dim});
            kt.data()[0] = std::cos(alpha);
            kt.data()[1] = std::sin(alpha);
            Var<double> k(kt);
            Var<double> qp(axis_row(dim, 2));  // q'.k = 0 throughout
            const double loss = genco_loss(q, qp, k, bank, tau).value().item();
            if (prev >= 0.0) CHECK(loss < prev);
            prev = loss;
        }
    }

    // increasing the q'.k similarity decreases the loss (q.k = 0 throughout)
    {
        double prev = -1.0;
        for (double gamma : {1.4, 1.0, 0.6, 0.2}) {
            MemoryBank<double> bank(8, dim);
            bank.enqueue(axis_row(dim, 3));
            Var<double> q(axis_row(dim, 0));
            Var<double> k(axis_row(dim, 1));
            Tensor<double> qpt = Tensor<double>::zeros({1, dim});
            qpt.data()[1] = std::cos(gamma);  // along k
            qpt.data()[2] = std::sin(gamma);
            Var<double> qp(qpt);
            const double loss = genco_loss(q, qp, k, bank, tau).value().item();
            if (prev >= 0.0) CHECK(loss < prev);
            prev = loss;
        }
    }
}

TEST_CASE("generator positive can only help: genco <= moco when q' = q") {
    RngStream rng(RngKey::root(9).fold("h"));
    for (int i = 0; i < 50; ++i) {
        const int dim = 6;
        MemoryBank<double> bank(8, dim);
        bank.enqueue(unit_rows(3, dim, rng));
        Var<double> q(unit_rows(2, dim, rng));
        Var<double> k(unit_rows(2, dim, rng));
        const double g = genco_loss(q, q, k, bank, 0.2).value().item();
        const double m = moco_loss(q, k, bank, 0.2).value().item();
        // with q' = q the numerator doubles but the denominator gains the
        // same term, so the loss cannot exceed the single-positive loss
        CHECK(g <= m + 1e-12);
    }
}

TEST_CASE("loss value is bitwise invariant under bank permutation") {
    RngStream rng(RngKey::root(10).fold("perm"));
    const int dim = 8;
    Tensor<double> rows = unit_rows(5, dim, rng);
    Tensor<double> shuffled({5, dim});
    const int order[5] = {3, 0, 4, 2, 1};
    for (int i = 0; i < 5; ++i)
        std::copy(rows.data() + (size_t)order[i] * dim, rows.data() + (size_t)(order[i] + 1) * dim,
                  shuffled.data() + (size_t)i * dim);
    MemoryBank<double> a(8, dim), b(8, dim);
    a.enqueue(rows);
    b.enqueue(shuffled);
    Var<double> q(unit_rows(2, dim, rng));
    Var<double> qp(unit_rows(2, dim, rng));
    Var<double> k(unit_rows(2, dim, rng));
    const double la = genco_loss(q, qp, k, a, 0.2).value().item();
    const double lb = genco_loss(q, qp, k, b, 0.2).value().item();
    CHECK(std::memcmp(&la, &lb, sizeof(double)) == 0);
}

TEST_CASE("symmetric_negatives adds q'-vs-bank terms and never lowers the loss") {
    RngStream rng(RngKey::root(11).fold("sym"));
    const int dim = 8;
    MemoryBank<double> bank(8, dim);
    bank.enqueue(unit_rows(4, dim, rng));
    Var<double> q(unit_rows(1, dim, rng));
    Var<double> qp(unit_rows(1, dim, rng));
    Var<double> k(unit_rows(1, dim, rng));
    const double plain = genco_loss(q, qp, k, bank, 0.2, false).value().item();
    const double sym = genco_loss(q, qp, k, bank, 0.2, true).value().item();
    CHECK(sym >= plain);  // extra non-negative denominator mass

    // matches the oracle with the extra terms
    std::vector<double> neg(4), qp_neg(4);
    const Tensor<double> rows = bank.snapshot();
    double qk = 0, qpk = 0;
    for (int j = 0; j < dim; ++j) {
        qk += q.value().data()[j] * k.value().data()[j];
        qpk += qp.value().data()[j] * k.value().data()[j];
    }
    for (int i = 0; i < 4; ++i) {
        neg[i] = qp_neg[i] = 0;
        for (int j = 0; j < dim; ++j) {
            neg[i] += q.value().data()[j] * rows.at(i, j);
            qp_neg[i] += qp.value().data()[j] * rows.at(i, j);
        }
    }
    CHECK(sym == doctest::Approx(scalar_loss(qk, qpk, neg, 0.2, true, qp_neg)).epsilon(1e-9));
}

TEST_CASE("bank FIFO matches a shadow deque over 1000 batches") {
    const int cap = 37, dim = 3;
    MemoryBank<float> bank(cap, dim);
    std::deque<std::vector<float>> shadow;
    RngStream rng(RngKey::root(12).fold("fifo"));
    for (int step = 0; step < 1000; ++step) {
        const int b = 1 + (int)rng.next_below(5);
        Tensor<float> keys({b, dim});
        for (int i = 0; i < b; ++i) {
            double ss = 0;
            std::vector<float> row(dim);
            for (int j = 0; j < dim; ++j) {
                row[j] = (float)rng.next_normal();
                ss += (double)row[j] * row[j];
            }
            const float inv = (float)(1.0 / std::sqrt(ss));
            for (int j = 0; j < dim; ++j) {
                row[j] *= inv;
                keys.at(i, j) = row[j];
            }
            shadow.push_back(row);
            if ((int)shadow.size() > cap) shadow.pop_front();
        }
        bank.enqueue(keys);
        REQUIRE(bank.fill_count() == (int)shadow.size());
        const Tensor<float> got = bank.ordered_rows();
        for (int i = 0; i < bank.fill_count(); ++i)
            for (int j = 0; j < dim; ++j)
                REQUIRE(got.at(i, j) == shadow[i][j]);
    }
}

TEST_CASE("bank rejects unnormalized rows and oversized batches") {
    MemoryBank<float> bank(4, 3);
    Tensor<float> bad({1, 3}, {1.0f, 1.0f, 0.0f});
    CHECK_THROWS(bank.enqueue(bad));
    Tensor<float> five = Tensor<float>::zeros({5, 3});
    for (int i = 0; i < 5; ++i) five.at(i, 0) = 1.0f;
    CHECK_THROWS(bank.enqueue(five));
    Tensor<float> wrong_dim = Tensor<float>::zeros({1, 2});
    wrong_dim.at(0, 0) = 1.0f;
    CHECK_THROWS_AS(bank.enqueue(wrong_dim), ShapeError);
}

TEST_CASE("momentum update follows the closed form exactly") {
    EncoderConfig cfg;
    cfg.stage_widths = {4, 4, 8, 8};
    cfg.feature_dim = 8;
    cfg.projection_dim = 4;
    auto pair = MomentumPair<float>::init(cfg, RngKey::root(13).fold("init"), 0.9f);
    // capture initial offline values
    auto off0 = pair.offline.parameters();
    std::vector<Tensor<float>> before;
    for (auto& p : off0) before.push_back(p.value());
    // nudge the online weights, then update
    auto on = pair.online.parameters();
    for (auto& p : on)
        for (size_t i = 0; i < p.value().numel(); ++i) p.value().data()[i] += 0.25f;
    pair.update();
    auto off = pair.offline.parameters();
    for (size_t pi = 0; pi < off.size(); ++pi)
        for (size_t i = 0; i < off[pi].value().numel(); ++i) {
            const float expect = 0.9f * before[pi].data()[i] + 0.1f * on[pi].value().data()[i];
            // fused form: off = m*off + (1-m)*on, evaluated in the same order
            CHECK(off[pi].value().data()[i] == doctest::Approx(expect).epsilon(1e-6));
        }
}

TEST_CASE("momentum update synchronizes BN running statistics") {
    EncoderConfig cfg;
    cfg.stage_widths = {4, 4, 8, 8};
    cfg.feature_dim = 8;
    auto pair = MomentumPair<float>::init(cfg, RngKey::root(14).fold("init"), 0.99f);
    RngStream rng(RngKey::root(15).fold("x"));
    Tensor<float> x({2, 4, 32, 32});
    for (size_t i = 0; i < x.numel(); ++i) x.data()[i] = (float)(0.5 + 0.2 * rng.next_normal());
    pair.online.training = true;
    pair.online.forward_projection(Var<float>(x));  // mutates online buffers
    pair.update();
    auto ob = pair.online.buffers();
    auto fb = pair.offline.buffers();
    for (size_t i = 0; i < ob.size(); ++i)
        CHECK(std::memcmp(ob[i].second->data(), fb[i].second->data(),
                          ob[i].second->numel() * 4) == 0);
}

TEST_CASE("offline clone is bitwise and requires no gradients") {
    EncoderConfig cfg;
    cfg.stage_widths = {4, 4, 8, 8};
    cfg.feature_dim = 8;
    auto pair = MomentumPair<float>::init(cfg, RngKey::root(16).fold("init"), 0.999f);
    auto on = pair.online.parameters();
    auto off = pair.offline.parameters();
    REQUIRE(on.size() == off.size());
    for (size_t i = 0; i < on.size(); ++i) {
        CHECK(std::memcmp(on[i].value().data(), off[i].value().data(),
                          on[i].value().numel() * 4) == 0);
        CHECK(on[i].requires_grad());
        CHECK_FALSE(off[i].requires_grad());
    }
    CHECK_THROWS_AS(MomentumPair<float>::init(cfg, RngKey::root(0), 0.0f), ConfigError);
    CHECK_THROWS_AS(MomentumPair<float>::init(cfg, RngKey::root(0), 1.5f), ConfigError);
}

TEST_CASE("generator output is unit rows and deterministic in the noise key") {
    const int d = 16, nd = 8, B = 5;
    auto gen = Generator<float>::init(d, nd, RngKey::root(17).fold("g"));
    RngStream rng(RngKey::root(18).fold("q"));
    Tensor<float> qt({B, d});
    for (size_t i = 0; i < qt.numel(); ++i) qt.data()[i] = (float)rng.next_normal();
    Var<float> q = ops::l2_normalize(Var<float>(qt));
    const RngKey nk = RngKey::root(19).fold("noise").fold(0);
    Var<float> z1 = Var<float>::constant(sample_noise<float>(NoiseSpec{nd, 0.0, 0.1}, B, nk));
    Var<float> z2 = Var<float>::constant(sample_noise<float>(NoiseSpec{nd, 0.0, 0.1}, B, nk));
    CHECK(std::memcmp(z1.value().data(), z2.value().data(), z1.value().numel() * 4) == 0);
    Tensor<float> out = gen.forward(q, z1).value();
    CHECK(out.shape() == std::vector<int>{B, d});
    for (int r = 0; r < B; ++r) {
        double n = 0;
        for (int c = 0; c < d; ++c) n += (double)out.at(r, c) * out.at(r, c);
        CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-5));
    }
    // different noise -> different output
    Var<float> z3 = Var<float>::constant(
        sample_noise<float>(NoiseSpec{nd, 0.0, 0.1}, B, RngKey::root(19).fold("noise").fold(1)));
    Tensor<float> out3 = gen.forward(q, z3).value();
    CHECK(std::memcmp(out.data(), out3.data(), out.numel() * 4) != 0);
}

TEST_CASE("sampled noise has the configured moments") {
    const NoiseSpec spec{32, 0.0, 0.1};
    Tensor<double> z = sample_noise<double>(spec, 2000, RngKey::root(20).fold("n"));
    double mean = 0;
    for (size_t i = 0; i < z.numel(); ++i) mean += z.data()[i];
    mean /= (double)z.numel();
    double var = 0;
    for (size_t i = 0; i < z.numel(); ++i)
        var += (z.data()[i] - mean) * (z.data()[i] - mean);
    var /= (double)z.numel();
    CHECK(mean == doctest::Approx(0.0).epsilon(0.01));
    CHECK(var == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("generator parameter shapes: 3 linear layers on concat(q, z)") {
    const int d = 8, nd = 4;
    auto gen = Generator<double>::init(d, nd, RngKey::root(21).fold("g"));
    auto ps = gen.parameters();
    REQUIRE(ps.size() == 6);  // three weight/bias pairs
    const int in = d + nd;
    CHECK(ps[0].shape() == std::vector<int>{in, in});  // fc1.w
    CHECK(ps[1].shape() == std::vector<int>{in});      // fc1.b
    CHECK(ps[2].shape() == std::vector<int>{in, in});  // fc2.w
    CHECK(ps[3].shape() == std::vector<int>{in});
    CHECK(ps[4].shape() == std::vector<int>{d, in});   // fc3.w
    CHECK(ps[5].shape() == std::vector<int>{d});
}

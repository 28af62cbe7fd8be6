// Copyright 2026 The SLOT Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "slot/tensor.hpp"

using slot::Matrix;

namespace {

double rel_err(const Matrix<double>& a, const Matrix<double>& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num = std::max(num, std::abs(a.data()[i] - b.data()[i]));
        den = std::max(den, std::abs(b.data()[i]));
    }
    return num / std::max(den, 1e-300);
}

TEST(Matmul, IdentityAndProjector) {
    Matrix<double> m(2, 2, {1, 2, 3, 4});
    EXPECT_EQ(slot::matmul(Matrix<double>::identity(2), m), m);
    EXPECT_EQ(slot::matmul(m, Matrix<double>::identity(2)), m);
    Matrix<double> p(2, 2, {1, 0, 0, 0});
    Matrix<double> b(2, 2, {5, 6, 7, 8});
    EXPECT_EQ(slot::matmul(p, b), Matrix<double>(2, 2, {5, 6, 0, 0}));
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(1);
    const auto a = oracle::random_matrix(rng, 7, 5);
    const auto b = oracle::random_matrix(rng, 5, 3);
    EXPECT_LE(rel_err(slot::matmul(a, b), oracle::naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, ShapeMismatchReportsShapes) {
    Matrix<double> a(2, 3), b(2, 3);
    try {
        slot::matmul(a, b);
        FAIL();
    } catch (const slot::ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
    }
}

TEST(Matmul, Deterministic) {
    std::mt19937_64 rng(2);
    const auto a = oracle::random_matrix(rng, 9, 17);
    const auto b = oracle::random_matrix(rng, 17, 6);
    EXPECT_EQ(slot::matmul(a, b), slot::matmul(a, b));
}

TEST(MatmulTransposed, MatchesOracleAndDotExactly) {
    std::mt19937_64 rng(3);
    // odd sizes exercise the blocked path and both remainders
    const auto a = oracle::random_matrix(rng, 6, 21);
    const auto bd = oracle::random_matrix(rng, 11, 21);
    const Matrix<float> b = bd.cast<float>();
    const auto c = slot::matmul_transposed(a, b);
    Matrix<double> bt(21, 11);
    for (std::size_t i = 0; i < 11; ++i)
        for (std::size_t j = 0; j < 21; ++j) bt(j, i) = b(i, j);
    EXPECT_LE(rel_err(c, oracle::naive_matmul(a, bt)), 1e-12);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) {
            EXPECT_EQ(c(i, j), slot::dot(a.row(i), b.row(j)));
        }
}

TEST(TransposedMatvec, MatchesOracle) {
    std::mt19937_64 rng(4);
    const auto w = oracle::random_matrix(rng, 13, 5);
    std::vector<double> x(13);
    std::normal_distribution<double> nd;
    for (auto& v : x) v = nd(rng);
    x[3] = 0.0;
    const auto y = slot::transposed_matvec(w, std::span<const double>(x));
    for (std::size_t j = 0; j < 5; ++j) {
        long double s = 0;
        for (std::size_t r = 0; r < 13; ++r) s += static_cast<long double>(w(r, j)) * x[r];
        EXPECT_NEAR(y[j], static_cast<double>(s), 1e-12);
    }
}

TEST(Dot, AccuracyAndLengthCheck) {
    std::vector<double> a(37), b(37);
    long double ref = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] = std::sin(i + 1.0);
        b[i] = std::cos(3.0 * i);
        ref += static_cast<long double>(a[i]) * b[i];
    }
    EXPECT_NEAR(slot::dot(a, b), static_cast<double>(ref), 1e-14);
    std::vector<double> c(5);
    EXPECT_THROW(slot::dot(a, c), slot::ShapeError);
}

TEST(Softmax, Symmetry) {
    Matrix<double> x(1, 3, {0, 0, 0});
    const auto p = slot::row_softmax(x);
    for (double v : p.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, TwoPointAgainstHighPrecision) {
    const double x = 0.37, c = 1.0;
    Matrix<double> m(1, 2, {x, x + c});
    const auto p = slot::row_softmax(m);
    const long double e = std::exp(static_cast<long double>(c));
    EXPECT_NEAR(p(0, 0), static_cast<double>(1.0L / (1.0L + e)), 1e-15);
    EXPECT_NEAR(p(0, 1), static_cast<double>(e / (1.0L + e)), 1e-15);
}

TEST(Softmax, LargeValuesDoNotOverflow) {
    Matrix<double> m(1, 2, {1000, 0});
    const auto p = slot::row_softmax(m);
    EXPECT_NEAR(p(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(p(0, 1), 0.0, 1e-15);
    EXPECT_TRUE(slot::all_finite(p.data()));
}

TEST(Softmax, ShiftInvarianceAndNormalization) {
    std::mt19937_64 rng(5);
    auto x = oracle::random_matrix(rng, 4, 30, 3.0);
    auto y = x;
    for (auto& v : y.data()) v += 123.456;
    const auto px = slot::row_softmax(x), py = slot::row_softmax(y);
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < 30; ++c) {
            EXPECT_NEAR(px(r, c), py(r, c), 1e-12);
            EXPECT_GE(px(r, c), 0.0);
            s += px(r, c);
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(LogSumExp, MatchesDirect) {
    std::vector<double> v{0.1, -2.0, 3.5, 1.25};
    long double s = 0;
    for (double x : v) s += std::exp(static_cast<long double>(x));
    EXPECT_NEAR(slot::log_sum_exp(std::span<const double>(v)), static_cast<double>(std::log(s)), 1e-14);
}

TEST(LayerNorm, ConstantRowGivesBias) {
    Matrix<double> x(1, 4, 2.5);
    std::vector<double> g(4, 1.0), b(4, 0.0);
    const auto y = slot::layer_norm<double>(x, g, b, 1e-5);
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizedRowUnchanged) {
    Matrix<double> x(1, 2, {1, -1});
    std::vector<double> g(2, 1.0), b(2, 0.0);
    const auto y = slot::layer_norm<double>(x, g, b, 1e-300);
    EXPECT_DOUBLE_EQ(y(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(y(0, 1), -1.0);
}

TEST(LayerNorm, MatchesTwoPassOracle) {
    std::mt19937_64 rng(6);
    const auto x = oracle::random_matrix(rng, 3, 24, 5.0);
    std::vector<double> g(24), b(24);
    std::normal_distribution<double> nd;
    for (auto& v : g) v = 1.0 + 0.3 * nd(rng);
    for (auto& v : b) v = 0.2 * nd(rng);
    const auto y = slot::layer_norm<double>(x, g, b, 1e-5);
    for (std::size_t r = 0; r < 3; ++r) {
        const auto ref = oracle::naive_layer_norm(oracle::Vec(x.row(r).begin(), x.row(r).end()), g, b, 1e-5);
        for (std::size_t c = 0; c < 24; ++c) EXPECT_NEAR(y(r, c), ref[c], 1e-10);
    }
}

TEST(LayerNorm, RejectsWrongGainLength) {
    Matrix<double> x(1, 3);
    std::vector<double> g(2, 1.0), b(3, 0.0);
    EXPECT_THROW(slot::layer_norm<double>(x, g, b, 1e-5), slot::ShapeError);
}

TEST(Gelu, ValuesAgainstOracle) {
    EXPECT_EQ(slot::gelu(0.0), 0.0);
    for (double x : {-3.0, -0.5, 0.1, 1.0, 2.7}) EXPECT_NEAR(slot::gelu(x), oracle::naive_gelu(x), 1e-15);
}

TEST(Argmax, TiesGoToLowestIndex) {
    EXPECT_EQ(slot::argmax_row(std::vector<double>{2, 5, 5}), 1u);
    EXPECT_EQ(slot::argmax_row(std::vector<double>{7, 7, 7}), 0u);
}

TEST(TopK, OrderAndTies) {
    EXPECT_EQ(slot::top_k(std::vector<double>{0.1, 0.9, 0.5}, 2), (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(slot::top_k(std::vector<double>{1, 3, 3, 2, 3}, 4), (std::vector<std::size_t>{1, 2, 4, 3}));
}

TEST(TopK, RejectsOutOfRange) {
    std::vector<double> v{1, 2, 3};
    EXPECT_THROW(slot::top_k(v, 0), slot::ConfigError);
    EXPECT_THROW(slot::top_k(v, 4), slot::ConfigError);
}

TEST(MatrixType, RejectsBadDataLength) {
    EXPECT_THROW(Matrix<double>(2, 2, std::vector<double>(3)), slot::ShapeError);
}

} // namespace

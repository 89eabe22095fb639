#pragma once

// Hand-evaluated calibration targets (computed outside this code base).

namespace o2o::fixtures {

struct SacCase {
    double q_anchor, logp_anchor, logp_a, q_fqe, alpha, expected;
};

struct TdCase {
    double q_anchor, d, k, sigma, q_fqe, expected;
};

inline constexpr SacCase kSacCases[] = {
    {10, -1, -3, 12, 0.2, 9.5999999999999996},
    {10, -1, -3, 9.0, 0.2, 9},
    {10, -1, -1, 12, 0.2, 10},
    {-50, -0.5, -4, -40, 0.2, -50.700000000000003},
    {-50, -0.5, -4, -60, 0.2, -60},
    {0, 0, -50, 5, 0.5, -25},
    {3.5, 1.2, 0.3, 4.0, 0.5, 3.0499999999999998},
    {-120.25, -2.0, -2.5, -119.0, 0.2, -120.34999999999999},
    {7, -10, -2, 100, 1.0, 15},
    {1000.0, 0.5, -49.5, 999, 0.05, 997.5},
};

inline constexpr TdCase kTdCases[] = {
    {10, 0, 1, 0.2, 12, 9.615384615384615},
    {10, 0.5, 1, 0.2, 12, 9.615384615384615},
    {-10, 0.2, 1, 0.2, 0, -10.4},
    {10, 0.1, 1, 0.2, 9.0, 9},
    {-10, 0.05, 2, 0.3, -12, -12},
    {-10, 0.05, 2, 0.3, -5, -11.799999999999999},
    {250, 0.0, 0.5, 0.1, 300, 248.75621890547265},
    {0, 0.2, 1, 0.2, 1, 0},
    {-0.75, 1.0, 3, 0.5, 10, -1.3125},
    {42, 0.15, 1, 0.2, 40.5, 40.38461538461538},
};

}  // namespace o2o::fixtures

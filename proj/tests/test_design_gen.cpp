#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <set>
#include <stdexcept>
#include <vector>

#include "metamat/errors.hpp"
#include "metamat/grf.hpp"
#include "metamat/rng.hpp"

using namespace metamat;

namespace {

// Periodogram of a real field at one integer frequency, direct O(N^2) sum.
// Deliberately avoids the FFT used by the synthesis path.
double power_at(const Tensor& field, long q1, long q2) {
    const long N = static_cast<long>(field.dim(0));
    std::complex<double> acc(0.0, 0.0);
    const double* v = field.data();
    const double w = -2.0 * M_PI / static_cast<double>(N);
    for (long x1 = 0; x1 < N; ++x1)
        for (long x2 = 0; x2 < N; ++x2) {
            const double ph = w * static_cast<double>(q1 * x1 + q2 * x2);
            acc += v[x1 * N + x2] * std::complex<double>(std::cos(ph), std::sin(ph));
        }
    return std::norm(acc);
}

// Angularly averaged log-log spectral slope over integer radial bins
// [2, N/4], spectra averaged across seeds before the regression.
double spectral_slope(std::size_t N, double alpha, int seeds) {
    const long kmax = static_cast<long>(N) / 4;
    std::vector<std::pair<long, long>> freqs;
    std::vector<int> bin_of;
    for (long q1 = -kmax; q1 <= kmax; ++q1)
        for (long q2 = -kmax; q2 <= kmax; ++q2) {
            const double r = std::sqrt(static_cast<double>(q1 * q1 + q2 * q2));
            const int b = static_cast<int>(std::floor(r + 0.5));
            if (b < 2 || b > kmax) continue;
            freqs.push_back({q1, q2});
            bin_of.push_back(b);
        }
    std::vector<double> bin_sum(kmax + 1, 0.0);
    std::vector<int> bin_n(kmax + 1, 0);
    for (int s = 0; s < seeds; ++s) {
        GrfSpec spec;
        spec.grid_size = N;
        spec.spectral_exponent = alpha;
        spec.rng_seed = 1000 + static_cast<std::uint64_t>(s);
        GrfField f = sample_grf(spec);
        for (std::size_t i = 0; i < freqs.size(); ++i) {
            bin_sum[bin_of[i]] += power_at(f.values, freqs[i].first, freqs[i].second);
            if (s == 0) ++bin_n[bin_of[i]];
        }
    }
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (int b = 2; b <= kmax; ++b) {
        if (bin_n[b] == 0) continue;
        const double x = std::log(static_cast<double>(b));
        const double y = std::log(bin_sum[b] / (static_cast<double>(bin_n[b]) * seeds));
        sx += x; sy += y; sxx += x * x; sxy += x * y;
        ++n;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

// Independent recursive flood fill used as the connectivity oracle.
void oracle_fill(const BinaryGrid& g, std::size_t i, std::size_t j, std::set<std::pair<std::size_t, std::size_t>>& comp) {
    if (!g.at(i, j) || comp.count({i, j})) return;
    comp.insert({i, j});
    if (i > 0) oracle_fill(g, i - 1, j, comp);
    if (i + 1 < g.rows) oracle_fill(g, i + 1, j, comp);
    if (j > 0) oracle_fill(g, i, j - 1, comp);
    if (j + 1 < g.cols) oracle_fill(g, i, j + 1, comp);
}

bool oracle_connectivity(const BinaryGrid& g, double fraction) {
    const auto need_h = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(g.cols)));
    const auto need_v = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(g.rows)));
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = 0; j < g.cols; ++j) {
            if (!g.at(i, j) || seen.count({i, j})) continue;
            std::set<std::pair<std::size_t, std::size_t>> comp;
            oracle_fill(g, i, j, comp);
            std::size_t top = 0, bottom = 0, left = 0, right = 0;
            for (auto& [r, c] : comp) {
                if (r == 0) ++top;
                if (r == g.rows - 1) ++bottom;
                if (c == 0) ++left;
                if (c == g.cols - 1) ++right;
            }
            if (top >= need_h && bottom >= need_h && left >= need_v && right >= need_v) return true;
            seen.insert(comp.begin(), comp.end());
        }
    return false;
}

}  // namespace

TEST_CASE("sampled field is standardized") {
    GrfSpec spec;
    spec.grid_size = 48;
    spec.spectral_exponent = 3.0;
    spec.rng_seed = 7;
    GrfField f = sample_grf(spec);
    REQUIRE(f.values.dim(0) == 48);
    REQUIRE(f.values.dim(1) == 48);
    CHECK(std::abs(f.values.mean()) < 1e-9);
    double var = 0.0;
    for (std::size_t i = 0; i < f.values.numel(); ++i) var += f.values[i] * f.values[i];
    var /= static_cast<double>(f.values.numel());
    CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);
}

TEST_CASE("spec validation rejects bad parameters") {
    GrfSpec spec;
    spec.validate();

    GrfSpec odd = spec;
    odd.grid_size = 7;
    CHECK_THROWS_AS(odd.validate(), std::invalid_argument);
    CHECK_THROWS_AS(sample_grf(odd), std::invalid_argument);

    GrfSpec tiny = spec;
    tiny.grid_size = 2;
    CHECK_THROWS_AS(tiny.validate(), std::invalid_argument);

    GrfSpec frac = spec;
    frac.boundary_fraction = 1.0;
    CHECK_THROWS_AS(frac.validate(), std::invalid_argument);

    GrfSpec tmax = spec;
    tmax.threshold_max = 1.5;
    CHECK_THROWS_AS(tmax.validate(), std::invalid_argument);
}

TEST_CASE("angularly averaged spectrum follows the configured power law") {
    CHECK(std::abs(spectral_slope(64, 3.0, 200) - (-3.0)) < 0.5);
    CHECK(std::abs(spectral_slope(32, 2.0, 200) - (-2.0)) < 0.5);
    CHECK(std::abs(spectral_slope(32, 1.0, 200) - (-1.0)) < 0.5);
}

TEST_CASE("zero exponent gives a flat spectrum") {
    CHECK(std::abs(spectral_slope(48, 0.0, 200)) < 0.3);
}

TEST_CASE("thresholding is strict and total") {
    GrfField zeros{Tensor::zeros({8, 8})};
    CHECK(threshold_field(zeros, -1.0).count() == 64);
    CHECK(threshold_field(zeros, 1.0).count() == 0);
    CHECK(threshold_field(zeros, 0.0).count() == 0);
}

TEST_CASE("positive thresholds keep expected fill below one half") {
    double total = 0.0;
    for (int s = 0; s < 1000; ++s) {
        GrfSpec spec;
        spec.grid_size = 16;
        spec.rng_seed = 50000 + static_cast<std::uint64_t>(s);
        Rng rng(spec.rng_seed);
        GrfField f = sample_grf(spec, rng);
        const double t = rng.uniform(0.0, 0.6);
        total += threshold_field(f, t).fill_fraction();
    }
    CHECK(total / 1000.0 < 0.5);
}

TEST_CASE("boundary connectivity matches trivial cases") {
    BinaryGrid ones(48, 48);
    for (auto& c : ones.cells) c = 1;
    CHECK(check_connectivity(ones, 0.1));

    BinaryGrid zeros(48, 48);
    CHECK_FALSE(check_connectivity(zeros, 0.1));

    BinaryGrid bar(48, 48);
    for (std::size_t i = 20; i < 25; ++i)
        for (std::size_t j = 0; j < 48; ++j) bar.at(i, j) = 1;
    CHECK_FALSE(check_connectivity(bar, 0.1));
    CHECK_FALSE(oracle_connectivity(bar, 0.1));
}

TEST_CASE("connectivity agrees with flood-fill oracle on all 3x3 grids") {
    for (int mask = 0; mask < 512; ++mask) {
        BinaryGrid g(3, 3);
        for (int b = 0; b < 9; ++b) g.cells[b] = (mask >> b) & 1;
        for (double fraction : {0.1, 0.4, 0.7})
            CHECK(check_connectivity(g, fraction) == oracle_connectivity(g, fraction));
    }
}

TEST_CASE("connectivity agrees with flood-fill oracle on random 16x16 grids") {
    Rng rng(99);
    for (int trial = 0; trial < 500; ++trial) {
        const double density = rng.uniform();
        BinaryGrid g(16, 16);
        for (auto& c : g.cells) c = rng.bernoulli(density) ? 1 : 0;
        CHECK(check_connectivity(g, 0.1) == oracle_connectivity(g, 0.1));
        CHECK(check_connectivity(g, 0.3) == oracle_connectivity(g, 0.3));
    }
}

TEST_CASE("component labelling separates diagonal contacts") {
    BinaryGrid g(2, 2);
    g.at(0, 0) = 1;
    g.at(1, 1) = 1;
    auto comps = connected_components(g);
    CHECK(comps.count == 2);
    CHECK(comps.labels[0] != comps.labels[3]);
    CHECK(comps.labels[1] == -1);
}

TEST_CASE("mirroring reflects across the right edge then the bottom edge") {
    BinaryGrid q(2, 2);
    q.at(0, 0) = 1;
    BinaryGrid full = mirror_quarter(q);
    const std::uint8_t want[4][4] = {
        {1, 0, 0, 1},
        {0, 0, 0, 0},
        {0, 0, 0, 0},
        {1, 0, 0, 1},
    };
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(full.at(i, j) == want[i][j]);
    CHECK(is_mirror_symmetric(full));
}

TEST_CASE("generated cell is mirror symmetric and reproducible") {
    GrfSpec spec;
    spec.grid_size = 48;
    spec.spectral_exponent = 3.0;
    spec.threshold_max = 0.6;
    spec.rng_seed = 11;
    UnitCell cell = generate_unit_cell(spec);
    REQUIRE(cell.pixels.rows == 96);
    REQUIRE(cell.pixels.cols == 96);
    CHECK(is_mirror_symmetric(cell.pixels));
    for (std::size_t j = 0; j < 96; ++j) CHECK(cell.pixels.at(0, j) == cell.pixels.at(95, j));

    BinaryGrid quarter(48, 48);
    for (std::size_t i = 0; i < 48; ++i)
        for (std::size_t j = 0; j < 48; ++j) quarter.at(i, j) = cell.pixels.at(i, j);
    CHECK(check_connectivity(quarter, 0.1));

    UnitCell again = generate_unit_cell(spec);
    CHECK(again.pixels == cell.pixels);
    CHECK(again.rejections == cell.rejections);
    CHECK(again.fill_fraction == cell.fill_fraction);
}

TEST_CASE("zero threshold ceiling yields half fill on average") {
    double total = 0.0;
    for (int s = 0; s < 100; ++s) {
        GrfSpec spec;
        spec.grid_size = 48;
        spec.threshold_max = 0.0;
        spec.rng_seed = 7000 + static_cast<std::uint64_t>(s);
        total += generate_unit_cell(spec).fill_fraction;
    }
    CHECK(std::abs(total / 100.0 - 0.5) < 0.05);
}

TEST_CASE("hopeless specs exhaust the retry budget") {
    GrfSpec spec;
    spec.grid_size = 8;
    spec.boundary_fraction = 0.99;
    spec.threshold_max = 0.6;
    spec.max_attempts = 25;
    spec.rng_seed = 3;
    CHECK_THROWS_AS(generate_unit_cell(spec), RetryBudgetError);
}

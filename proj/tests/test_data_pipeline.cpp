#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "metamat/dataset.hpp"
#include "metamat/errors.hpp"
#include "metamat/fe_lite.hpp"
#include "metamat/rng.hpp"

using namespace metamat;
namespace fs = std::filesystem;

namespace {

DatasetSample toy_sample(std::uint64_t id, Rng& rng) {
    DatasetSample s;
    s.id = id;
    s.seed = id * 100;
    s.design = BinaryGrid(2, 2);
    for (auto& c : s.design.cells) c = 1;
    s.fill_fraction = 1.0;
    s.fields = make_field_sequence(2, 2, 2);
    for (std::size_t i = 0; i < s.fields.frames.numel(); ++i) s.fields.frames[i] = rng.normal();
    s.curve.sigma_eff = {rng.normal(), rng.normal()};
    return s;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("min-max normalization endpoints and midpoint") {
    ChannelRange r{-4.0, 6.0};
    CHECK(normalize_value(-4.0, r) == -1.0);
    CHECK(normalize_value(6.0, r) == 1.0);
    CHECK(normalize_value(1.0, r) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(denormalize_value(-1.0, r) == -4.0);
    CHECK(denormalize_value(1.0, r) == 6.0);

    ChannelRange degenerate{2.0, 2.0};
    CHECK_THROWS_AS(normalize_value(0.0, degenerate), DegenerateChannelError);
}

TEST_CASE("normalization round trip and monotonicity") {
    Rng rng(5);
    ChannelRange r{-2.5, 9.0};
    for (int k = 0; k < 10000; ++k) {
        const double x = rng.uniform(-2.5, 9.0);
        CHECK(std::abs(denormalize_value(normalize_value(x, r), r) - x) < 1e-6);
    }
    for (int k = 0; k < 200; ++k) {
        double a = rng.uniform(-2.5, 9.0), b = rng.uniform(-2.5, 9.0);
        if (a > b) std::swap(a, b);
        if (a == b) continue;
        CHECK(normalize_value(a, r) < normalize_value(b, r));
        const double lam = rng.uniform();
        CHECK(normalize_value(lam * a + (1 - lam) * b, r) ==
              doctest::Approx(lam * normalize_value(a, r) + (1 - lam) * normalize_value(b, r))
                  .epsilon(1e-12));
    }
}

TEST_CASE("stats capture hand-built extremes") {
    Rng rng(6);
    std::vector<DatasetSample> samples{toy_sample(0, rng), toy_sample(1, rng)};
    samples[0].fields.at(0, 0, 0, 0) = -3.0;
    samples[1].fields.at(1, 0, 1, 1) = 7.0;
    for (auto& s : samples)
        for (std::size_t f = 0; f < 2; ++f)
            for (std::size_t ch = 1; ch < 3; ++ch) s.fields.at(f, ch, 0, 1) = ch + f * 0.5;
    const NormalizationStats stats = compute_stats(samples);
    CHECK(stats.sigma22.min == -3.0);
    CHECK(stats.sigma22.max == 7.0);

    const NormalizationStats back = NormalizationStats::from_json(stats.to_json());
    CHECK(back.sigma22.min == stats.sigma22.min);
    CHECK(back.curve.max == stats.curve.max);

    CHECK_THROWS_AS(compute_stats({}), std::invalid_argument);
}

TEST_CASE("empty dataset has a valid manifest and no stats") {
    const std::string dir = "/tmp/metamat_test_ds_empty";
    fs::remove_all(dir);
    build_dataset({}, dir);
    const Dataset ds = open_dataset(dir);
    CHECK(ds.size() == 0);
    CHECK_FALSE(ds.has_stats);
}

TEST_CASE("dataset round trip is bit-exact") {
    const std::string dir = "/tmp/metamat_test_ds_rt";
    const std::string dir2 = dir + "_copy";
    fs::remove_all(dir);
    fs::remove_all(dir2);

    Rng rng(7);
    std::vector<DatasetSample> samples{toy_sample(0, rng), toy_sample(1, rng)};
    build_dataset(samples, dir);

    const Dataset ds = open_dataset(dir);
    REQUIRE(ds.size() == 2);
    CHECK(ds.has_stats);
    CHECK(ds.entries[1].seed == 100);

    std::vector<DatasetSample> reloaded;
    for (std::size_t k = 0; k < 2; ++k) {
        DatasetSample s = load_sample(ds, k);
        CHECK(s.design == samples[k].design);
        REQUIRE(s.fields.frames.shape() == samples[k].fields.frames.shape());
        for (std::size_t i = 0; i < s.fields.frames.numel(); ++i)
            CHECK(s.fields.frames[i] == static_cast<double>(static_cast<float>(samples[k].fields.frames[i])));
        REQUIRE(s.curve.sigma_eff.size() == 2);
        reloaded.push_back(std::move(s));
    }

    build_dataset(reloaded, dir2);
    CHECK(slurp(dir + "/tensors.bin") == slurp(dir2 + "/tensors.bin"));
    CHECK(slurp(dir + "/manifest.jsonl") == slurp(dir2 + "/manifest.jsonl"));
}

TEST_CASE("corrupt records are detected") {
    const std::string dir = "/tmp/metamat_test_ds_corrupt";
    fs::remove_all(dir);
    Rng rng(8);
    build_dataset({toy_sample(0, rng)}, dir);
    const Dataset ds = open_dataset(dir);

    {
        std::fstream f(dir + "/tensors.bin", std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(static_cast<std::streamoff>(ds.entries[0].fields.offset + 9));
        char byte = 0x5a;
        f.write(&byte, 1);
    }
    CHECK_THROWS_AS(load_sample(ds, 0), CorruptRecordError);

    fs::resize_file(dir + "/tensors.bin", 10);
    CHECK_THROWS_AS(load_sample(ds, 0), CorruptRecordError);
}

TEST_CASE("curve from fields on constructed inputs") {
    FieldSequence uniform = make_field_sequence(2, 4, 4);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            uniform.at(0, 0, i, j) = -2.5;
            uniform.at(1, 0, i, j) = -5.0;
        }
    auto c = curve_from_fields(uniform);
    CHECK(c.sigma_eff[0] == doctest::Approx(-2.5).epsilon(1e-12));
    CHECK(c.sigma_eff[1] == doctest::Approx(-5.0).epsilon(1e-12));

    auto zero = curve_from_fields(make_field_sequence(2, 4, 4));
    CHECK(zero.sigma_eff[0] == 0.0);
    CHECK(zero.sigma_eff[1] == 0.0);

    // Each row sums to the same total force, row patterns differ.
    FieldSequence rows = make_field_sequence(2, 3, 4);
    const double patterns[3][4] = {{6, 0, 0, 0}, {1, 2, 3, 0}, {1.5, 1.5, 1.5, 1.5}};
    for (std::size_t f = 0; f < 2; ++f)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j) rows.at(f, 0, i, j) = patterns[i][j];
    auto rc = curve_from_fields(rows);
    CHECK(rc.sigma_eff[0] == doctest::Approx(6.0 / 4.0).epsilon(1e-12));
}

TEST_CASE("field averages reproduce the reaction curve on solver output") {
    GrfSpec spec;
    spec.grid_size = 12;
    spec.rng_seed = 29;
    const UnitCell cell = generate_unit_cell(spec);
    const SweepResult sweep = run_strain_sweep(cell.pixels, MaterialParams{}, 5);

    const StressStrainCurve derived = curve_from_fields(sweep.fields);
    for (std::size_t k = 0; k < 5; ++k)
        CHECK(std::abs(derived.sigma_eff[k] - sweep.curve.sigma_eff[k]) <
              1e-6 * std::abs(sweep.curve.sigma_eff[k]));
    for (std::size_t f = 0; f < 5; ++f) CHECK(row_average_spread(sweep.fields, f) < 1e-6);
}

TEST_CASE("text curves flip to the compression-positive convention") {
    const std::string path = "/tmp/metamat_test_curve.txt";
    StressStrainCurve curve;
    curve.sigma_eff = {-0.5, -1.25, -2.0};
    write_curve_text(path, curve);

    std::ifstream in(path);
    double first;
    in >> first;
    CHECK(first == doctest::Approx(0.5));

    const StressStrainCurve back = read_curve_text(path);
    REQUIRE(back.sigma_eff.size() == 3);
    for (std::size_t k = 0; k < 3; ++k)
        CHECK(back.sigma_eff[k] == doctest::Approx(curve.sigma_eff[k]).epsilon(1e-9));
}

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "metamat/fields.hpp"
#include "metamat/grf.hpp"
#include "metamat/tensor.hpp"

namespace metamat {

struct ChannelRange {
    double min = 0.0, max = 0.0;
};

// Dataset-wide min-max extrema: one range per field channel plus one for the
// effective-stress curve. Frozen after computation on the training set.
struct NormalizationStats {
    ChannelRange sigma22, u1, u2, curve;

    void validate() const;  // throws DegenerateChannelError on max <= min
    std::string to_json() const;
    static NormalizationStats from_json(const std::string& text);
};

// x -> 2(x - min)/(max - min) - 1, mapping [min, max] onto [-1, 1].
double normalize_value(double x, const ChannelRange& r);
double denormalize_value(double y, const ChannelRange& r);

FieldSequence normalize_fields(const FieldSequence& seq, const NormalizationStats& stats);
FieldSequence denormalize_fields(const FieldSequence& seq, const NormalizationStats& stats);
std::vector<double> normalize_curve(const std::vector<double>& sigma, const NormalizationStats& stats);
std::vector<double> denormalize_curve(const std::vector<double>& y, const NormalizationStats& stats);

struct DatasetSample {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    double fill_fraction = 0.0;
    BinaryGrid design;
    FieldSequence fields;
    StressStrainCurve curve;
};

NormalizationStats compute_stats(const std::vector<DatasetSample>& samples);

// One tensor record in the store: u32 rank, u32 dims, little-endian float32
// payload. crc covers the whole serialized record.
struct RecordRef {
    std::uint64_t offset = 0;
    std::uint64_t length = 0;
    std::uint32_t crc = 0;
};

RecordRef append_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in, const RecordRef& ref);  // CorruptRecordError on mismatch

struct ManifestEntry {
    std::uint64_t id = 0;
    std::uint64_t seed = 0;
    double fill_fraction = 0.0;
    RecordRef design, fields, curve;
};

struct Dataset {
    std::string dir;
    std::vector<ManifestEntry> entries;
    bool has_stats = false;
    NormalizationStats stats;

    std::size_t size() const { return entries.size(); }
};

// Writes manifest.jsonl + tensors.bin; with at least one sample also writes
// stats.json. Curves are stored with their in-memory sign (compression
// negative); only text curve files flip to the plotting convention.
void build_dataset(const std::vector<DatasetSample>& samples, const std::string& dir);
Dataset open_dataset(const std::string& dir);
DatasetSample load_sample(const Dataset& ds, std::size_t index);

// Effective stress per frame as the all-pixel mean of sigma22 (equal to the
// mean over per-row averages; void pixels contribute zero).
StressStrainCurve curve_from_fields(const FieldSequence& seq);

// Physical-consistency diagnostic: population std of per-row means divided by
// |mean| for one frame.
double row_average_spread(const FieldSequence& seq, std::size_t frame);

// Text curves: one stress per line, compression positive. In-memory curves
// keep compression negative, so both functions negate.
void write_curve_text(const std::string& path, const StressStrainCurve& curve);
StressStrainCurve read_curve_text(const std::string& path);

}  // namespace metamat

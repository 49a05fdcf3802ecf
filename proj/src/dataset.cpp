#include "metamat/dataset.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "metamat/errors.hpp"

namespace metamat {

namespace {

using nlohmann::json;

json range_json(const ChannelRange& r) { return json::array({r.min, r.max}); }

ChannelRange range_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f32(std::string& buf, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(buf, bits);
}

std::uint32_t crc_of(const std::string& buf) {
    return static_cast<std::uint32_t>(
        crc32(0L, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
}

void expand_range(ChannelRange& r, double v) {
    r.min = std::min(r.min, v);
    r.max = std::max(r.max, v);
}

constexpr ChannelRange kEmptyRange{std::numeric_limits<double>::infinity(),
                                   -std::numeric_limits<double>::infinity()};

}  // namespace

void NormalizationStats::validate() const {
    for (const ChannelRange* r : {&sigma22, &u1, &u2, &curve})
        if (!(r->max > r->min))
            throw DegenerateChannelError("channel range is degenerate: [" +
                                         std::to_string(r->min) + ", " + std::to_string(r->max) + "]");
}

std::string NormalizationStats::to_json() const {
    json j;
    j["sigma22"] = range_json(sigma22);
    j["u1"] = range_json(u1);
    j["u2"] = range_json(u2);
    j["sigma_eff"] = range_json(curve);
    return j.dump();
}

NormalizationStats NormalizationStats::from_json(const std::string& text) {
    const json j = json::parse(text);
    NormalizationStats s;
    s.sigma22 = range_from(j.at("sigma22"));
    s.u1 = range_from(j.at("u1"));
    s.u2 = range_from(j.at("u2"));
    s.curve = range_from(j.at("sigma_eff"));
    return s;
}

double normalize_value(double x, const ChannelRange& r) {
    if (!(r.max > r.min)) throw DegenerateChannelError("normalize on degenerate range");
    return 2.0 * (x - r.min) / (r.max - r.min) - 1.0;
}

double denormalize_value(double y, const ChannelRange& r) {
    if (!(r.max > r.min)) throw DegenerateChannelError("denormalize on degenerate range");
    return r.min + (y + 1.0) * (r.max - r.min) / 2.0;
}

FieldSequence normalize_fields(const FieldSequence& seq, const NormalizationStats& stats) {
    FieldSequence out = seq;
    const ChannelRange ranges[3] = {stats.sigma22, stats.u1, stats.u2};
    const std::size_t F = seq.frame_count(), H = seq.height(), W = seq.width();
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    out.at(f, ch, i, j) = normalize_value(seq.at(f, ch, i, j), ranges[ch]);
    return out;
}

FieldSequence denormalize_fields(const FieldSequence& seq, const NormalizationStats& stats) {
    FieldSequence out = seq;
    const ChannelRange ranges[3] = {stats.sigma22, stats.u1, stats.u2};
    const std::size_t F = seq.frame_count(), H = seq.height(), W = seq.width();
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t ch = 0; ch < 3; ++ch)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    out.at(f, ch, i, j) = denormalize_value(seq.at(f, ch, i, j), ranges[ch]);
    return out;
}

std::vector<double> normalize_curve(const std::vector<double>& sigma, const NormalizationStats& stats) {
    std::vector<double> out(sigma.size());
    for (std::size_t k = 0; k < sigma.size(); ++k) out[k] = normalize_value(sigma[k], stats.curve);
    return out;
}

std::vector<double> denormalize_curve(const std::vector<double>& y, const NormalizationStats& stats) {
    std::vector<double> out(y.size());
    for (std::size_t k = 0; k < y.size(); ++k) out[k] = denormalize_value(y[k], stats.curve);
    return out;
}

NormalizationStats compute_stats(const std::vector<DatasetSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("stats need at least one sample");
    NormalizationStats s{kEmptyRange, kEmptyRange, kEmptyRange, kEmptyRange};
    for (const auto& sample : samples) {
        ChannelRange* ranges[3] = {&s.sigma22, &s.u1, &s.u2};
        const std::size_t F = sample.fields.frame_count();
        const std::size_t H = sample.fields.height(), W = sample.fields.width();
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t ch = 0; ch < 3; ++ch)
                for (std::size_t i = 0; i < H; ++i)
                    for (std::size_t j = 0; j < W; ++j)
                        expand_range(*ranges[ch], sample.fields.at(f, ch, i, j));
        for (double v : sample.curve.sigma_eff) expand_range(s.curve, v);
    }
    s.validate();
    return s;
}

RecordRef append_tensor(std::ostream& out, const Tensor& t) {
    std::string buf;
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d)
        put_u32(buf, static_cast<std::uint32_t>(t.dim(d)));
    for (std::size_t i = 0; i < t.numel(); ++i)
        put_f32(buf, static_cast<float>(t[i]));

    RecordRef ref;
    ref.offset = static_cast<std::uint64_t>(out.tellp());
    ref.length = buf.size();
    ref.crc = crc_of(buf);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("tensor write failed");
    return ref;
}

Tensor read_tensor(std::istream& in, const RecordRef& ref) {
    std::string buf(ref.length, '\0');
    in.seekg(static_cast<std::streamoff>(ref.offset));
    in.read(buf.data(), static_cast<std::streamsize>(ref.length));
    if (static_cast<std::uint64_t>(in.gcount()) != ref.length)
        throw CorruptRecordError("record truncated");
    if (crc_of(buf) != ref.crc) throw CorruptRecordError("record checksum mismatch");

    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    const std::uint32_t rank = get_u32(p);
    if (ref.length < 4 + 4 * static_cast<std::uint64_t>(rank))
        throw CorruptRecordError("record header truncated");
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
        shape[d] = get_u32(p + 4 + 4 * d);
        numel *= shape[d];
    }
    if (ref.length != 4 + 4 * static_cast<std::uint64_t>(rank) + 4 * numel)
        throw CorruptRecordError("record length mismatch");
    Tensor t = Tensor::zeros(shape);
    const unsigned char* data = p + 4 + 4 * rank;
    for (std::size_t i = 0; i < numel; ++i) {
        const std::uint32_t bits = get_u32(data + 4 * i);
        float f;
        std::memcpy(&f, &bits, 4);
        t[i] = static_cast<double>(f);
    }
    return t;
}

namespace {

json ref_json(const RecordRef& r) { return json::array({r.offset, r.length, r.crc}); }

RecordRef ref_from(const json& j) {
    return {j.at(0).get<std::uint64_t>(), j.at(1).get<std::uint64_t>(), j.at(2).get<std::uint32_t>()};
}

Tensor design_tensor(const BinaryGrid& g) {
    Tensor t = Tensor::zeros({g.rows, g.cols});
    for (std::size_t p = 0; p < g.cells.size(); ++p) t[p] = g.cells[p] ? 1.0 : 0.0;
    return t;
}

Tensor curve_tensor(const StressStrainCurve& c) {
    Tensor t = Tensor::zeros({c.sigma_eff.size()});
    for (std::size_t k = 0; k < c.sigma_eff.size(); ++k) t[k] = c.sigma_eff[k];
    return t;
}

}  // namespace

void build_dataset(const std::vector<DatasetSample>& samples, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream bin(dir + "/tensors.bin", std::ios::binary | std::ios::trunc);
    std::ofstream manifest(dir + "/manifest.jsonl", std::ios::trunc);
    if (!bin || !manifest) throw std::runtime_error("cannot open dataset files in " + dir);

    for (const auto& s : samples) {
        ManifestEntry e;
        e.id = s.id;
        e.seed = s.seed;
        e.fill_fraction = s.fill_fraction;
        e.design = append_tensor(bin, design_tensor(s.design));
        e.fields = append_tensor(bin, s.fields.frames);
        e.curve = append_tensor(bin, curve_tensor(s.curve));
        json j;
        j["id"] = e.id;
        j["seed"] = e.seed;
        j["fill_fraction"] = e.fill_fraction;
        j["design"] = ref_json(e.design);
        j["fields"] = ref_json(e.fields);
        j["curve"] = ref_json(e.curve);
        manifest << j.dump() << "\n";
    }
    if (!samples.empty()) {
        std::ofstream stats(dir + "/stats.json", std::ios::trunc);
        stats << compute_stats(samples).to_json() << "\n";
    }
}

Dataset open_dataset(const std::string& dir) {
    Dataset ds;
    ds.dir = dir;
    std::ifstream manifest(dir + "/manifest.jsonl");
    if (!manifest) throw std::runtime_error("no manifest in " + dir);
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const json j = json::parse(line);
        ManifestEntry e;
        e.id = j.at("id").get<std::uint64_t>();
        e.seed = j.at("seed").get<std::uint64_t>();
        e.fill_fraction = j.at("fill_fraction").get<double>();
        e.design = ref_from(j.at("design"));
        e.fields = ref_from(j.at("fields"));
        e.curve = ref_from(j.at("curve"));
        ds.entries.push_back(e);
    }
    std::ifstream stats(dir + "/stats.json");
    if (stats) {
        std::stringstream ss;
        ss << stats.rdbuf();
        ds.stats = NormalizationStats::from_json(ss.str());
        ds.has_stats = true;
    }
    return ds;
}

DatasetSample load_sample(const Dataset& ds, std::size_t index) {
    const ManifestEntry& e = ds.entries.at(index);
    std::ifstream bin(ds.dir + "/tensors.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("no tensor store in " + ds.dir);

    DatasetSample s;
    s.id = e.id;
    s.seed = e.seed;
    s.fill_fraction = e.fill_fraction;

    const Tensor design = read_tensor(bin, e.design);
    s.design = BinaryGrid(design.dim(0), design.dim(1));
    for (std::size_t p = 0; p < design.numel(); ++p) s.design.cells[p] = design[p] > 0.5 ? 1 : 0;

    s.fields.frames = read_tensor(bin, e.fields);
    s.fields.strain_levels = strain_levels_for(s.fields.frames.dim(0));

    const Tensor curve = read_tensor(bin, e.curve);
    s.curve.sigma_eff.assign(curve.data(), curve.data() + curve.numel());
    return s;
}

StressStrainCurve curve_from_fields(const FieldSequence& seq) {
    const std::size_t F = seq.frame_count(), H = seq.height(), W = seq.width();
    StressStrainCurve curve;
    curve.sigma_eff.resize(F, 0.0);
    for (std::size_t f = 0; f < F; ++f) {
        double sum = 0.0;
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) sum += seq.at(f, 0, i, j);
        curve.sigma_eff[f] = sum / static_cast<double>(H * W);
    }
    return curve;
}

double row_average_spread(const FieldSequence& seq, std::size_t frame) {
    const std::size_t H = seq.height(), W = seq.width();
    std::vector<double> rows(H, 0.0);
    double mean = 0.0;
    for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) rows[i] += seq.at(frame, 0, i, j);
        rows[i] /= static_cast<double>(W);
        mean += rows[i];
    }
    mean /= static_cast<double>(H);
    double var = 0.0;
    for (double r : rows) var += (r - mean) * (r - mean);
    var /= static_cast<double>(H);
    if (mean == 0.0) throw UndefinedMetricError("row spread of a zero field");
    return std::sqrt(var) / std::abs(mean);
}

void write_curve_text(const std::string& path, const StressStrainCurve& curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.precision(9);
    for (double v : curve.sigma_eff) out << -v << "\n";
}

StressStrainCurve read_curve_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    StressStrainCurve curve;
    double v;
    while (in >> v) curve.sigma_eff.push_back(-v);
    return curve;
}

}  // namespace metamat

#include <CLI11.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "metamat/dataset.hpp"
#include "metamat/diffusion.hpp"
#include "metamat/errors.hpp"
#include "metamat/fe_lite.hpp"
#include "metamat/fields.hpp"
#include "metamat/grf.hpp"
#include "metamat/imageio.hpp"
#include "metamat/metrics.hpp"
#include "metamat/postproc.hpp"
#include "metamat/rng.hpp"
#include "metamat/train.hpp"
#include "metamat/unet.hpp"

namespace fs = std::filesystem;
using namespace metamat;

namespace {

std::string zfill(std::size_t v, int width) {
    std::ostringstream s;
    s.width(width);
    s.fill('0');
    s << v;
    return s.str();
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::string fmt_exact(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void spill(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

// Resolved option values land next to the artifacts; status flips to
// complete only after the last artifact is written.
void write_manifest(CLI::App* sub, const fs::path& dir, const std::string& status) {
    fs::create_directories(dir);
    spill(dir / "run-manifest.txt", "command=" + sub->get_name() + "\nstatus=" + status + "\n" +
                                        sub->config_to_str(true, false));
}

std::string trimmed(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

// key=value config lines fill in options the command line left untouched:
// flags > config file > defaults.
void apply_config(CLI::App* sub, const std::string& path) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string entry = trimmed(line);
        if (entry.empty() || entry[0] == '#') continue;
        const auto eq = entry.find('=');
        const std::string where = path + ":" + std::to_string(lineno);
        if (eq == std::string::npos)
            throw std::runtime_error(where + ": expected key=value");
        const std::string key = trimmed(entry.substr(0, eq));
        const std::string value = trimmed(entry.substr(eq + 1));
        if (key == "config") throw std::runtime_error(where + ": config cannot nest");
        CLI::Option* opt = sub->get_option_no_throw("--" + key);
        if (opt == nullptr)
            throw std::runtime_error(where + ": unknown option '" + key + "' for " +
                                     sub->get_name());
        if (opt->count() > 0) continue;
        opt->add_result(value);
        opt->run_callback();
    }
}

void require_value(const std::string& v, const char* flag) {
    if (v.empty()) throw std::runtime_error(std::string(flag) + " is required");
}

// Standalone tensor file: one dataset-format record plus a length/crc footer.
void write_tensor_file(const fs::path& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    const RecordRef ref = append_tensor(out, t);
    out.write(reinterpret_cast<const char*>(&ref.length), sizeof ref.length);
    out.write(reinterpret_cast<const char*>(&ref.crc), sizeof ref.crc);
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

Tensor read_tensor_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(in.tellg());
    RecordRef ref;
    if (size < sizeof ref.length + sizeof ref.crc)
        throw CorruptRecordError(path.string() + ": too short");
    in.seekg(static_cast<std::streamoff>(size - sizeof ref.length - sizeof ref.crc));
    in.read(reinterpret_cast<char*>(&ref.length), sizeof ref.length);
    in.read(reinterpret_cast<char*>(&ref.crc), sizeof ref.crc);
    if (!in || ref.length + sizeof ref.length + sizeof ref.crc != size)
        throw CorruptRecordError(path.string() + ": bad tensor footer");
    return read_tensor(in, ref);
}

// --- unit-cell generator options shared by generate-designs/build-dataset ---

struct CellOpts {
    std::size_t cell_size = 96;
    double alpha = 3.0;
    double threshold_max = 0.6;
    double boundary = 0.10;
    int max_attempts = 1000;
};

void add_cell_opts(CLI::App* sub, CellOpts& o) {
    sub->add_option("--cell-size", o.cell_size, "Unit-cell edge length in pixels (even)");
    sub->add_option("--alpha", o.alpha, "Spectral exponent of the random field");
    sub->add_option("--threshold-max", o.threshold_max, "Upper bound of the threshold draw");
    sub->add_option("--boundary", o.boundary, "Required boundary coverage fraction per side");
    sub->add_option("--max-attempts", o.max_attempts, "Rejection-sampling budget per design");
}

GrfSpec spec_from(const CellOpts& o, std::uint64_t seed) {
    if (o.cell_size == 0 || o.cell_size % 2 != 0)
        throw std::invalid_argument("--cell-size must be positive and even");
    GrfSpec spec;
    spec.grid_size = o.cell_size / 2;
    spec.spectral_exponent = o.alpha;
    spec.threshold_max = o.threshold_max;
    spec.boundary_fraction = o.boundary;
    spec.max_attempts = o.max_attempts;
    spec.rng_seed = seed;
    spec.validate();
    return spec;
}

// --- plotting helpers ---

struct Series {
    std::string label;
    std::vector<double> y;  // in-memory sign (compression negative)
    std::string stroke;
    std::string dash;  // empty = solid
};

// Stress-strain chart, compression plotted positive.
std::string curve_svg(const std::vector<double>& strain, const std::vector<Series>& series) {
    const double W = 640, H = 480, ml = 75, mr = 25, mt = 25, mb = 60;
    double xmax = 0.0, ymax = 0.0;
    for (double s : strain) xmax = std::max(xmax, s);
    for (const auto& sr : series)
        for (double v : sr.y) ymax = std::max(ymax, -v);
    if (xmax <= 0.0) xmax = 1.0;
    if (ymax <= 0.0) ymax = 1.0;
    ymax *= 1.05;
    const auto X = [&](double s) { return ml + s / xmax * (W - ml - mr); };
    const auto Y = [&](double v) { return H - mb - v / ymax * (H - mt - mb); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
        << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr << "\" y2=\""
        << H - mb << "\" stroke=\"black\"/>\n"
        << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << H - mb
        << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 5; ++k) {
        const double sv = xmax * k / 5.0, yv = ymax * k / 5.0;
        svg << "<line x1=\"" << X(sv) << "\" y1=\"" << H - mb << "\" x2=\"" << X(sv) << "\" y2=\""
            << H - mb + 6 << "\" stroke=\"black\"/>\n"
            << "<text x=\"" << X(sv) << "\" y=\"" << H - mb + 20
            << "\" font-size=\"12\" text-anchor=\"middle\">" << fmt(sv) << "</text>\n"
            << "<line x1=\"" << ml - 6 << "\" y1=\"" << Y(yv) << "\" x2=\"" << ml << "\" y2=\""
            << Y(yv) << "\" stroke=\"black\"/>\n"
            << "<text x=\"" << ml - 9 << "\" y=\"" << Y(yv) + 4
            << "\" font-size=\"12\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
    }
    svg << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 15
        << "\" font-size=\"14\" text-anchor=\"middle\">applied strain</text>\n"
        << "<text x=\"18\" y=\"" << (mt + H - mb) / 2
        << "\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
        << (mt + H - mb) / 2 << ")\">effective stress (compression positive)</text>\n";
    double ly = mt + 16;
    for (const auto& sr : series) {
        std::ostringstream pts;
        for (std::size_t i = 0; i < strain.size() && i < sr.y.size(); ++i)
            pts << (i ? " " : "") << X(strain[i]) << "," << Y(-sr.y[i]);
        svg << "<polyline points=\"" << pts.str() << "\" fill=\"none\" stroke=\"" << sr.stroke
            << "\" stroke-width=\"2\"";
        if (!sr.dash.empty()) svg << " stroke-dasharray=\"" << sr.dash << "\"";
        svg << "/>\n"
            << "<line x1=\"" << ml + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << ml + 44
            << "\" y2=\"" << ly - 4 << "\" stroke=\"" << sr.stroke << "\" stroke-width=\"2\"";
        if (!sr.dash.empty()) svg << " stroke-dasharray=\"" << sr.dash << "\"";
        svg << "/>\n"
            << "<text x=\"" << ml + 50 << "\" y=\"" << ly << "\" font-size=\"13\">" << sr.label
            << "</text>\n";
        ly += 18;
    }
    svg << "</svg>\n";
    return svg.str();
}

// Frames of a [F, H, W] stack side by side with one bright gutter column.
void write_strip_pgm(const fs::path& path, const Tensor& stack) {
    if (stack.rank() != 3) throw std::invalid_argument("strip needs a [F, H, W] stack");
    const std::size_t F = stack.dim(0), H = stack.dim(1), W = stack.dim(2);
    double lo = stack[0], hi = stack[0];
    for (std::size_t i = 0; i < stack.numel(); ++i) {
        lo = std::min(lo, stack[i]);
        hi = std::max(hi, stack[i]);
    }
    if (!(hi > lo)) hi = lo + 1.0;
    Tensor strip = Tensor::full({H, F * W + (F - 1)}, hi);
    for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
                strip.at({i, f * (W + 1) + j}) = stack.at({f, i, j});
    write_pgm(path.string(), strip, lo, hi);
}

// Curve files live either flat (<name>.txt) or per sample
// (<sample>/curve.txt); both map onto one name key.
std::map<std::string, fs::path> collect_curves(const fs::path& root) {
    std::map<std::string, fs::path> out;
    if (!fs::is_directory(root)) throw std::runtime_error("not a directory: " + root.string());
    for (const auto& entry : fs::recursive_directory_iterator(root)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        if (name == "curve.txt")
            out[entry.path().parent_path().filename().string()] = entry.path();
        else if (entry.path().extension() == ".txt" && name != "run-manifest.txt" &&
                 name != "losses.txt" && name != "target.txt")
            out[entry.path().stem().string()] = entry.path();
    }
    return out;
}

FieldSequence fields_from_tensor(Tensor frames) {
    if (frames.rank() != 4) throw CorruptRecordError("field stack must be [F, C, H, W]");
    FieldSequence seq;
    seq.strain_levels = strain_levels_for(frames.dim(0));
    seq.frames = std::move(frames);
    return seq;
}

// --- subcommands ---

struct GenerateArgs {
    std::size_t count = 10;
    std::string out;
    CellOpts cell;
    std::uint64_t seed = 0;
    std::string config;
};

int run_generate(const GenerateArgs& a, CLI::App* sub) {
    require_value(a.out, "--out");
    write_manifest(sub, a.out, "incomplete");
    for (std::size_t i = 0; i < a.count; ++i) {
        const GrfSpec spec = spec_from(a.cell, Rng::derive(a.seed, i));
        const UnitCell cell = generate_unit_cell(spec);
        const std::string name = "design_" + zfill(i, 5) + ".pbm";
        write_pbm((fs::path(a.out) / name).string(), cell.pixels);
        std::cout << name << " seed=" << spec.rng_seed << " fill=" << fmt(cell.fill_fraction)
                  << " rejections=" << cell.rejections << "\n";
        if ((i + 1) % 50 == 0) std::cerr << "generated " << i + 1 << "/" << a.count << "\n";
    }
    write_manifest(sub, a.out, "complete");
    return 0;
}

struct BuildArgs {
    std::size_t count = 8;
    std::string out;
    CellOpts cell{24};
    std::size_t frames = 3;
    double young = 100.0;
    double poisson = 0.3;
    std::uint64_t seed = 0;
    std::string config;
};

int run_build(const BuildArgs& a, CLI::App* sub) {
    require_value(a.out, "--out");
    MaterialParams mat;
    mat.youngs_modulus = a.young;
    mat.poisson_ratio = a.poisson;
    mat.validate();

    write_manifest(sub, a.out, "incomplete");
    std::vector<DatasetSample> samples;
    samples.reserve(a.count);
    for (std::size_t i = 0; i < a.count; ++i) {
        const GrfSpec spec = spec_from(a.cell, Rng::derive(a.seed, i));
        const UnitCell cell = generate_unit_cell(spec);
        SweepResult sweep = run_strain_sweep(cell.pixels, mat, a.frames);
        DatasetSample s;
        s.id = i;
        s.seed = spec.rng_seed;
        s.fill_fraction = cell.fill_fraction;
        s.design = cell.pixels;
        s.fields = std::move(sweep.fields);
        s.curve = std::move(sweep.curve);
        std::cout << "sample id=" << s.id << " seed=" << s.seed << " fill="
                  << fmt(s.fill_fraction) << " sigma_final=" << fmt(s.curve.sigma_eff.back())
                  << "\n";
        samples.push_back(std::move(s));
        std::cerr << "solved " << i + 1 << "/" << a.count << "\n";
    }
    build_dataset(samples, a.out);
    write_manifest(sub, a.out, "complete");
    return 0;
}

struct TrainArgs {
    std::string dataset, out;
    std::size_t steps = 2000, batch = 4;
    double lr = 1e-3;
    double dropout = 0.1;
    std::string loss = "l1";
    std::size_t timesteps = 1000;
    std::string schedule = "cosine";
    double beta_start = 1e-4, beta_end = 0.02;
    std::size_t base_channels = 32, levels = 2, heads = 4, head_dim = 16;
    std::size_t token_dim = 32, time_embed_dim = 0;  // 0 = 4 * base_channels
    bool no_temporal = false;
    std::size_t log_every = 50;
    std::uint64_t seed = 0;
    std::string config;
};

int run_train(const TrainArgs& a, CLI::App* sub) {
    require_value(a.dataset, "--dataset");
    require_value(a.out, "--out");
    const Dataset ds = open_dataset(a.dataset);
    if (ds.size() == 0) throw std::runtime_error("dataset is empty: " + a.dataset);
    if (!ds.has_stats) throw std::runtime_error("dataset has no normalization stats");

    std::vector<TrainingSample> data;
    data.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        data.push_back(make_training_sample(load_sample(ds, i), ds.stats));
    const Shape& shape = data.front().x0.shape();
    if (shape[2] != shape[3]) throw std::runtime_error("dataset fields must be square");

    if (a.levels == 0 || a.levels > 4)
        throw std::invalid_argument("--levels must lie in 1..4");
    DenoiserConfig dc;
    dc.in_channels = shape[1];
    dc.base_channels = a.base_channels;
    dc.channel_multipliers.assign({1, 2, 4, 8});
    dc.channel_multipliers.resize(a.levels);
    dc.attention_heads = a.heads;
    dc.head_dim = a.head_dim;
    dc.frames = shape[0];
    dc.input_size = shape[2];
    dc.token_dim = a.token_dim;
    dc.time_embed_dim = a.time_embed_dim ? a.time_embed_dim : 4 * a.base_channels;
    dc.temporal_attention = !a.no_temporal;
    dc.init_seed = a.seed;
    dc.validate();

    const DiffusionSchedule sched =
        a.schedule == "cosine" ? DiffusionSchedule::cosine(a.timesteps)
                               : DiffusionSchedule::linear(a.timesteps, a.beta_start, a.beta_end);

    TrainerConfig tc;
    tc.steps = a.steps;
    tc.batch_size = a.batch;
    tc.adam.lr = a.lr;
    tc.guidance.conditioning_dropout_prob = a.dropout;
    tc.loss = a.loss == "l1" ? LossType::l1 : LossType::l2;
    tc.seed = a.seed;

    write_manifest(sub, a.out, "incomplete");
    VideoUnet net(dc);
    std::cerr << "training " << net.params().scalar_count() << " parameters on " << data.size()
              << " samples\n";
    const TrainReport report =
        train_denoiser(net, sched, data, tc, [&](std::size_t step, double loss) {
            if (step == 0 || (step + 1) % a.log_every == 0 || step + 1 == a.steps)
                std::cerr << "step " << step + 1 << "/" << a.steps << " loss=" << fmt(loss)
                          << "\n";
        });

    const fs::path out(a.out);
    save_checkpoint(net, (out / "checkpoint.bin").string());
    spill(out / "schedule.txt", sched.serialize());
    spill(out / "stats.json", ds.stats.to_json());
    std::ostringstream losses;
    for (double l : report.losses) losses << fmt_exact(l) << "\n";
    spill(out / "losses.txt", losses.str());
    write_manifest(sub, a.out, "complete");

    const std::size_t window = std::min<std::size_t>(25, a.steps);
    const double head = report.mean_head(window), tail = report.mean_tail(window);
    std::cout << "samples=" << data.size() << "\n"
              << "parameters=" << net.params().scalar_count() << "\n"
              << "steps=" << a.steps << "\n"
              << "initial_loss=" << fmt_exact(head) << "\n"
              << "final_loss=" << fmt_exact(tail) << "\n"
              << "reduction=" << fmt(1.0 - tail / head) << "\n"
              << "checkpoint=" << (out / "checkpoint.bin").string() << "\n";
    return 0;
}

struct SampleArgs {
    std::string model, curve, out;
    std::size_t count = 10;
    double guidance = 5.0;
    double tolerance = 0.02;
    std::uint64_t seed = 0;
    std::string config;
};

int run_sample(const SampleArgs& a, CLI::App* sub) {
    require_value(a.model, "--model");
    require_value(a.curve, "--curve");
    require_value(a.out, "--out");
    const fs::path model(a.model);
    const std::unique_ptr<VideoUnet> net = load_checkpoint((model / "checkpoint.bin").string());
    const DiffusionSchedule sched =
        DiffusionSchedule::deserialize(slurp(model / "schedule.txt"));
    const NormalizationStats stats = NormalizationStats::from_json(slurp(model / "stats.json"));
    const DenoiserConfig& dc = net->config();

    const StressStrainCurve target = read_curve_text(a.curve);
    if (target.sigma_eff.size() != dc.frames)
        throw std::invalid_argument("target curve has " +
                                    std::to_string(target.sigma_eff.size()) +
                                    " stresses, model expects " + std::to_string(dc.frames));
    const std::vector<double> cond_values = normalize_curve(target.sigma_eff, stats);
    Tensor cond = Tensor::zeros({1, dc.frames});
    std::copy(cond_values.begin(), cond_values.end(), cond.data());

    GuidanceConfig guidance;
    guidance.weight = a.guidance;
    guidance.validate();

    write_manifest(sub, a.out, "incomplete");
    const fs::path out(a.out);
    write_curve_text((out / "target.txt").string(), target);

    std::size_t succeeded = 0;
    double err_sum = 0.0, err_best = 0.0;
    std::string best;
    for (std::size_t k = 0; k < a.count; ++k) {
        Rng rng(Rng::derive(a.seed, k));
        const Tensor x = sample(*net, cond, sched, guidance, rng,
                                {1, dc.frames, dc.in_channels, dc.input_size, dc.input_size});
        Tensor frames({dc.frames, dc.in_channels, dc.input_size, dc.input_size});
        std::copy_n(x.data(), x.numel(), frames.data());
        FieldSequence seq = fields_from_tensor(std::move(frames));
        seq = denormalize_fields(seq, stats);

        const std::string name = "sample_" + zfill(k, 2);
        const fs::path dir = out / name;
        fs::create_directories(dir);
        write_tensor_file(dir / "fields.bin", seq.frames);
        try {
            const UnitCell cell = extract_topology(seq, a.tolerance);
            write_pbm((dir / "design.pbm").string(), cell.pixels);
            const StressStrainCurve pred = predict_curve(seq, cell.pixels);
            write_curve_text((dir / "curve.txt").string(), pred);
            const double err = nrmse(pred.sigma_eff, target.sigma_eff);
            if (succeeded == 0 || err < err_best) {
                err_best = err;
                best = name;
            }
            ++succeeded;
            err_sum += err;
            std::cout << name << " nrmse=" << fmt(err) << " fill=" << fmt(cell.fill_fraction)
                      << "\n";
        } catch (const EmptyDesignError&) {
            std::cout << name << " failed=empty-design\n";
        }
        std::cerr << "sampled " << k + 1 << "/" << a.count << "\n";
    }
    std::cout << "summary succeeded=" << succeeded << "/" << a.count;
    if (succeeded > 0)
        std::cout << " mean_nrmse=" << fmt(err_sum / static_cast<double>(succeeded))
                  << " best=" << best << " best_nrmse=" << fmt(err_best);
    std::cout << "\n";
    write_manifest(sub, a.out, "complete");
    return succeeded == 0 ? 1 : 0;
}

struct ValidateArgs {
    std::string designs, out, config;
    std::size_t frames = kDefaultFrameCount;
    double young = 100.0;
    double poisson = 0.3;
};

int run_validate(const ValidateArgs& a, CLI::App* sub) {
    require_value(a.designs, "--designs");
    require_value(a.out, "--out");
    MaterialParams mat;
    mat.youngs_modulus = a.young;
    mat.poisson_ratio = a.poisson;
    mat.validate();

    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(a.designs))
        if (entry.is_regular_file() && entry.path().extension() == ".pbm")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("no .pbm designs under " + a.designs);

    write_manifest(sub, a.out, "incomplete");
    std::size_t done = 0;
    for (const fs::path& file : files) {
        const BinaryGrid design = read_pbm(file.string());
        const SweepResult sweep = run_strain_sweep(design, mat, a.frames);
        const std::string name = file.filename() == "design.pbm"
                                     ? file.parent_path().filename().string()
                                     : file.stem().string();
        write_curve_text(((fs::path(a.out)) / (name + ".txt")).string(), sweep.curve);
        const double spread = row_average_spread(sweep.fields, sweep.fields.frame_count() - 1);
        std::cout << name << " sigma_final=" << fmt(sweep.curve.sigma_eff.back())
                  << " row_spread=" << fmt(spread) << "\n";
        std::cerr << "validated " << ++done << "/" << files.size() << "\n";
    }
    write_manifest(sub, a.out, "complete");
    return 0;
}

struct EvaluateArgs {
    std::string pred, truth, config;
};

int run_evaluate(const EvaluateArgs& a) {
    require_value(a.pred, "--pred");
    require_value(a.truth, "--truth");
    const std::map<std::string, fs::path> pred = collect_curves(a.pred);
    const std::map<std::string, fs::path> truth = collect_curves(a.truth);
    if (pred.empty()) throw std::runtime_error("no curve files under " + a.pred);

    double sum = 0.0, worst = 0.0;
    for (const auto& [name, path] : pred) {
        const auto it = truth.find(name);
        if (it == truth.end())
            throw std::runtime_error("no matching truth curve for " + name);
        const StressStrainCurve p = read_curve_text(path.string());
        const StressStrainCurve t = read_curve_text(it->second.string());
        const double err = nrmse(p.sigma_eff, t.sigma_eff);
        sum += err;
        worst = std::max(worst, err);
        std::cout << name << " nrmse=" << fmt(err) << "\n";
    }
    std::cout << "summary pairs=" << pred.size() << " mean_nrmse="
              << fmt(sum / static_cast<double>(pred.size())) << " max_nrmse=" << fmt(worst)
              << "\n";
    return 0;
}

struct PlotArgs {
    std::string run, out, validated, config;
};

int run_plot(const PlotArgs& a, CLI::App* sub) {
    require_value(a.run, "--run");
    require_value(a.out, "--out");
    const fs::path run(a.run);
    const StressStrainCurve target = read_curve_text((run / "target.txt").string());
    std::map<std::string, fs::path> validated;
    if (!a.validated.empty()) validated = collect_curves(a.validated);

    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(run))
        if (entry.is_directory() && entry.path().filename().string().rfind("sample_", 0) == 0)
            dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw std::runtime_error("no sample_* directories under " + a.run);

    write_manifest(sub, a.out, "incomplete");
    const fs::path out(a.out);
    for (const fs::path& dir : dirs) {
        const std::string name = dir.filename().string();
        std::vector<Series> series;
        series.push_back({"target", target.sigma_eff, "#000000", ""});
        if (fs::exists(dir / "curve.txt"))
            series.push_back({"predicted", read_curve_text((dir / "curve.txt").string()).sigma_eff,
                              "#d62728", "7,4"});
        else
            std::cerr << name << ": no predicted curve (design extraction failed)\n";
        if (const auto it = validated.find(name); it != validated.end())
            series.push_back({"validator", read_curve_text(it->second.string()).sigma_eff,
                              "#1f77b4", "2,3"});

        const FieldSequence seq = fields_from_tensor(read_tensor_file(dir / "fields.bin"));
        spill(out / (name + "_curves.svg"), curve_svg(seq.strain_levels, series));

        const std::size_t F = seq.frame_count(), H = seq.height(), W = seq.width();
        Tensor sigma({F, H, W});
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) sigma.at({f, i, j}) = seq.at(f, 0, i, j);
        write_strip_pgm(out / (name + "_strip_sigma22.pgm"), sigma);

        std::optional<BinaryGrid> design;
        if (fs::exists(dir / "design.pbm")) design = read_pbm((dir / "design.pbm").string());
        const Tensor euler = to_eulerian(seq, design ? &*design : nullptr);
        write_strip_pgm(out / (name + "_strip_eulerian.pgm"), euler);

        std::cout << name << " curves=" << (out / (name + "_curves.svg")).string()
                  << " strips=2\n";
    }
    write_manifest(sub, a.out, "complete");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::ios::sync_with_stdio(false);
    CLI::App app{"Inverse design of nonlinear mechanical metamaterials with a video "
                 "diffusion model: dataset generation, training, sampling, validation."};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    GenerateArgs gen;
    CLI::App* sub_gen = app.add_subcommand("generate-designs", "Generate random unit cells");
    sub_gen->add_option("--count", gen.count, "Number of designs");
    sub_gen->add_option("--out", gen.out, "Output directory (required)");
    sub_gen->add_option("--seed", gen.seed, "Base seed");
    add_cell_opts(sub_gen, gen.cell);
    sub_gen->add_option("--config", gen.config, "Plain-text key=value defaults");

    BuildArgs build;
    CLI::App* sub_build =
        app.add_subcommand("build-dataset", "Generate designs and solve their strain sweeps");
    sub_build->add_option("--count", build.count, "Number of samples");
    sub_build->add_option("--out", build.out, "Output directory (required)");
    sub_build->add_option("--frames", build.frames, "Strain levels per sample");
    sub_build->add_option("--young", build.young, "Young's modulus (MPa)");
    sub_build->add_option("--poisson", build.poisson, "Poisson ratio");
    sub_build->add_option("--seed", build.seed, "Base seed");
    add_cell_opts(sub_build, build.cell);
    sub_build->add_option("--config", build.config, "Plain-text key=value defaults");

    TrainArgs train;
    CLI::App* sub_train = app.add_subcommand("train", "Train the denoiser on a dataset");
    sub_train->add_option("--dataset", train.dataset, "Dataset directory (required)");
    sub_train->add_option("--out", train.out, "Output directory (required)");
    sub_train->add_option("--steps", train.steps, "Optimizer steps");
    sub_train->add_option("--batch", train.batch, "Batch size");
    sub_train->add_option("--lr", train.lr, "Adam learning rate");
    sub_train->add_option("--dropout", train.dropout, "Conditioning dropout probability");
    sub_train->add_option("--loss", train.loss, "Loss type")
        ->check(CLI::IsMember({"l1", "l2"}));
    sub_train->add_option("--timesteps", train.timesteps, "Diffusion steps T");
    sub_train->add_option("--schedule", train.schedule, "Variance schedule family")
        ->check(CLI::IsMember({"cosine", "linear"}));
    sub_train->add_option("--beta-start", train.beta_start, "Linear schedule start");
    sub_train->add_option("--beta-end", train.beta_end, "Linear schedule end");
    sub_train->add_option("--base-channels", train.base_channels, "Channels at full resolution");
    sub_train->add_option("--levels", train.levels, "Resolution levels (1..4)");
    sub_train->add_option("--heads", train.heads, "Attention heads");
    sub_train->add_option("--head-dim", train.head_dim, "Attention head width");
    sub_train->add_option("--token-dim", train.token_dim, "Conditioning token width");
    sub_train->add_option("--time-embed-dim", train.time_embed_dim,
                          "Fused embedding width (0 = 4x base)");
    sub_train->add_flag("--no-temporal", train.no_temporal, "Disable temporal attention");
    sub_train->add_option("--log-every", train.log_every, "Progress cadence");
    sub_train->add_option("--seed", train.seed, "Training and init seed");
    sub_train->add_option("--config", train.config, "Plain-text key=value defaults");

    SampleArgs smp;
    CLI::App* sub_sample =
        app.add_subcommand("sample", "Sample designs conditioned on a target curve");
    sub_sample->add_option("--model", smp.model, "Training output directory (required)");
    sub_sample->add_option("--curve", smp.curve, "Target curve file (required)");
    sub_sample->add_option("--out", smp.out, "Output directory (required)");
    sub_sample->add_option("--count", smp.count, "Number of samples");
    sub_sample->add_option("--guidance", smp.guidance, "Guidance weight");
    sub_sample->add_option("--tolerance", smp.tolerance, "Topology extraction tolerance");
    sub_sample->add_option("--seed", smp.seed, "Base seed");
    sub_sample->add_option("--config", smp.config, "Plain-text key=value defaults");

    ValidateArgs val;
    CLI::App* sub_validate =
        app.add_subcommand("validate", "Re-solve designs with the linear validator");
    sub_validate->add_option("--designs", val.designs,
                             "Directory scanned for .pbm designs (required)");
    sub_validate->add_option("--out", val.out, "Output directory (required)");
    sub_validate->add_option("--frames", val.frames, "Strain levels");
    sub_validate->add_option("--young", val.young, "Young's modulus (MPa)");
    sub_validate->add_option("--poisson", val.poisson, "Poisson ratio");
    sub_validate->add_option("--config", val.config, "Plain-text key=value defaults");

    EvaluateArgs eval;
    CLI::App* sub_evaluate =
        app.add_subcommand("evaluate", "Curve error metrics between two directories");
    sub_evaluate->add_option("--pred", eval.pred, "Predicted curves directory (required)");
    sub_evaluate->add_option("--truth", eval.truth, "Reference curves directory (required)");
    sub_evaluate->add_option("--config", eval.config, "Plain-text key=value defaults");

    PlotArgs plot;
    CLI::App* sub_plot =
        app.add_subcommand("plot", "Render stress-strain charts and field strips");
    sub_plot->add_option("--run", plot.run, "Sampling output directory (required)");
    sub_plot->add_option("--out", plot.out, "Output directory (required)");
    sub_plot->add_option("--validated", plot.validated, "Validator curves directory");
    sub_plot->add_option("--config", plot.config, "Plain-text key=value defaults");

    int rc = 0;
    sub_gen->callback([&] {
        apply_config(sub_gen, gen.config);
        rc = run_generate(gen, sub_gen);
    });
    sub_build->callback([&] {
        apply_config(sub_build, build.config);
        rc = run_build(build, sub_build);
    });
    sub_train->callback([&] {
        apply_config(sub_train, train.config);
        rc = run_train(train, sub_train);
    });
    sub_sample->callback([&] {
        apply_config(sub_sample, smp.config);
        rc = run_sample(smp, sub_sample);
    });
    sub_validate->callback([&] {
        apply_config(sub_validate, val.config);
        rc = run_validate(val, sub_validate);
    });
    sub_evaluate->callback([&] {
        apply_config(sub_evaluate, eval.config);
        rc = run_evaluate(eval);
    });
    sub_plot->callback([&] {
        apply_config(sub_plot, plot.config);
        rc = run_plot(plot, sub_plot);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return rc;
}

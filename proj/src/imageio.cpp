#include "metamat/imageio.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "metamat/errors.hpp"

namespace metamat {

namespace {

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    return out;
}

// Next whitespace-delimited token with # comments stripped.
std::string next_token(std::istream& in) {
    std::string tok;
    char c;
    while (in.get(c)) {
        if (c == '#') {
            while (in.get(c) && c != '\n') {}
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(c);
    }
    return tok;
}

}  // namespace

void write_pbm(const std::string& path, const BinaryGrid& grid) {
    if (grid.rows == 0 || grid.cols == 0) throw std::invalid_argument("write_pbm: empty grid");
    std::ofstream out = open_out(path);
    out << "P1\n" << grid.cols << " " << grid.rows << "\n";
    for (std::size_t i = 0; i < grid.rows; ++i) {
        for (std::size_t j = 0; j < grid.cols; ++j) {
            if (j) out << ' ';
            out << static_cast<int>(grid.at(i, j) ? 1 : 0);
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("failed writing " + path);
}

BinaryGrid read_pbm(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    if (next_token(in) != "P1") throw CorruptRecordError(path + ": not a P1 bitmap");
    std::size_t cols = 0, rows = 0;
    try {
        cols = std::stoul(next_token(in));
        rows = std::stoul(next_token(in));
    } catch (const std::exception&) {
        throw CorruptRecordError(path + ": bad bitmap header");
    }
    if (rows == 0 || cols == 0) throw CorruptRecordError(path + ": empty bitmap");
    BinaryGrid grid(rows, cols);
    for (std::size_t k = 0; k < rows * cols; ++k) {
        const std::string tok = next_token(in);
        // P1 allows digits to run together; consume one digit at a time.
        if (tok.empty()) throw CorruptRecordError(path + ": truncated bitmap");
        for (std::size_t d = 0; d < tok.size(); ++d, ++k) {
            if (k >= rows * cols) throw CorruptRecordError(path + ": bitmap overflow");
            if (tok[d] != '0' && tok[d] != '1')
                throw CorruptRecordError(path + ": bad bitmap digit");
            grid.cells[k] = tok[d] == '1' ? 1 : 0;
        }
        --k;
    }
    return grid;
}

void write_pgm(const std::string& path, const Tensor& img, double lo, double hi) {
    if (img.rank() != 2) throw std::invalid_argument("write_pgm: need a [H, W] tensor");
    if (!(hi > lo)) throw std::invalid_argument("write_pgm: need hi > lo");
    const std::size_t H = img.dim(0), W = img.dim(1);
    std::ofstream out = open_out(path);
    out << "P2\n" << W << " " << H << "\n255\n";
    for (std::size_t i = 0; i < H; ++i) {
        for (std::size_t j = 0; j < W; ++j) {
            double v = (img.at({i, j}) - lo) / (hi - lo);
            v = std::min(1.0, std::max(0.0, v));
            if (j) out << ' ';
            out << static_cast<int>(std::lround(v * 255.0));
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("failed writing " + path);
}

}  // namespace metamat

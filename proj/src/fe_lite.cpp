#include "metamat/fe_lite.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "metamat/errors.hpp"

namespace metamat {

namespace {

constexpr double kXi[4] = {-1.0, 1.0, 1.0, -1.0};
constexpr double kEta[4] = {-1.0, -1.0, 1.0, 1.0};

struct Elastic {
    double d11, d12, d33;  // plane strain, d22 == d11
};

Elastic elastic_constants(const MaterialParams& mat) {
    const double E = mat.youngs_modulus, nu = mat.poisson_ratio;
    const double c = E / ((1.0 + nu) * (1.0 - 2.0 * nu));
    return {c * (1.0 - nu), c * nu, c * (1.0 - 2.0 * nu) / 2.0};
}

struct UnionFind {
    std::vector<std::size_t> parent;
    explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    std::size_t find(std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

void element_nodes(const fe::AssembledSystem& sys, std::size_t pixel, std::size_t nodes[4]) {
    const std::size_t i = pixel / sys.cols, j = pixel % sys.cols;
    nodes[0] = sys.node_id(i + 1, j);
    nodes[1] = sys.node_id(i + 1, j + 1);
    nodes[2] = sys.node_id(i, j + 1);
    nodes[3] = sys.node_id(i, j);
}

}  // namespace

void MaterialParams::validate() const {
    if (!(youngs_modulus > 0.0)) throw std::invalid_argument("youngs_modulus must be > 0");
    if (!(poisson_ratio > -1.0 && poisson_ratio < 0.5))
        throw std::invalid_argument("poisson_ratio must lie in (-1, 0.5)");
}

Eigen::Matrix<double, 8, 8> element_stiffness(const MaterialParams& mat) {
    mat.validate();
    const Elastic el = elastic_constants(mat);
    Eigen::Matrix3d D;
    D << el.d11, el.d12, 0.0, el.d12, el.d11, 0.0, 0.0, 0.0, el.d33;

    Eigen::Matrix<double, 8, 8> ke = Eigen::Matrix<double, 8, 8>::Zero();
    const double g = 1.0 / std::sqrt(3.0);
    for (double xi : {-g, g}) {
        for (double eta : {-g, g}) {
            Eigen::Matrix<double, 3, 8> B = Eigen::Matrix<double, 3, 8>::Zero();
            for (int a = 0; a < 4; ++a) {
                const double dNx = kXi[a] * (1.0 + kEta[a] * eta) / 2.0;
                const double dNy = kEta[a] * (1.0 + kXi[a] * xi) / 2.0;
                B(0, 2 * a) = dNx;
                B(1, 2 * a + 1) = dNy;
                B(2, 2 * a) = dNy;
                B(2, 2 * a + 1) = dNx;
            }
            ke += 0.25 * B.transpose() * D * B;
        }
    }
    return ke;
}

namespace fe {

AssembledSystem assemble(const BinaryGrid& pixels, const MaterialParams& mat) {
    mat.validate();
    const std::size_t R = pixels.rows, C = pixels.cols;
    if (R < 1 || C < 2) throw std::invalid_argument("grid must be at least 1x2");

    AssembledSystem sys;
    sys.rows = R;
    sys.cols = C;
    sys.ke = element_stiffness(mat);

    // Cylinder topology: the mesh wraps in x, so the load-path analysis must
    // treat seam-crossing material as one component.
    const auto comps = connected_components(pixels, true);
    std::vector<std::uint8_t> top(comps.count, 0), bottom(comps.count, 0);
    for (std::size_t j = 0; j < C; ++j) {
        if (int l = comps.labels[j]; l >= 0) top[l] = 1;
        if (int l = comps.labels[(R - 1) * C + j]; l >= 0) bottom[l] = 1;
    }
    sys.included.assign(R * C, 0);
    for (std::size_t p = 0; p < R * C; ++p) {
        const int l = comps.labels[p];
        if (l >= 0 && top[l] && bottom[l]) {
            sys.included[p] = 1;
            sys.element_pixels.push_back(p);
        }
    }
    if (sys.element_pixels.empty())
        throw SingularSystemError("no material component spans top to bottom");

    const std::size_t n_nodes = (R + 1) * C;
    std::vector<std::uint8_t> active(n_nodes, 0);
    UnionFind uf(n_nodes);
    for (std::size_t p : sys.element_pixels) {
        std::size_t n[4];
        element_nodes(sys, p, n);
        for (int a = 0; a < 4; ++a) {
            active[n[a]] = 1;
            uf.unite(n[0], n[a]);
        }
    }

    sys.kind.assign(2 * n_nodes, DofKind::inactive);
    for (std::size_t node = 0; node < n_nodes; ++node) {
        if (!active[node]) continue;
        const std::size_t r = node / C;
        sys.kind[2 * node] = DofKind::free_dof;
        sys.kind[2 * node + 1] = r == 0   ? DofKind::platen_top
                                 : r == R ? DofKind::fixed_zero
                                          : DofKind::free_dof;
    }

    // One u1 pin per node-connected group; mirror-axis columns preferred so a
    // symmetric cell keeps its antisymmetric u1 solution.
    std::vector<std::size_t> pin(n_nodes, n_nodes);
    auto rank = [&](std::size_t node) {
        const std::size_t c = node % C;
        if (c == 0) return 0;
        if (c == C / 2) return 1;
        return 2;
    };
    for (std::size_t node = 0; node < n_nodes; ++node) {
        if (!active[node]) continue;
        const std::size_t root = uf.find(node);
        if (pin[root] == n_nodes || rank(node) < rank(pin[root])) pin[root] = node;
    }
    for (std::size_t root = 0; root < n_nodes; ++root)
        if (pin[root] != n_nodes) sys.kind[2 * pin[root]] = DofKind::fixed_zero;

    sys.free_index.assign(2 * n_nodes, -1);
    for (std::size_t d = 0; d < 2 * n_nodes; ++d)
        if (sys.kind[d] == DofKind::free_dof)
            sys.free_index[d] = static_cast<std::ptrdiff_t>(sys.n_free++);

    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(64 * sys.element_pixels.size());
    for (std::size_t p : sys.element_pixels) {
        std::size_t n[4];
        element_nodes(sys, p, n);
        std::size_t dofs[8];
        for (int a = 0; a < 4; ++a) {
            dofs[2 * a] = 2 * n[a];
            dofs[2 * a + 1] = 2 * n[a] + 1;
        }
        for (int a = 0; a < 8; ++a) {
            const auto fi = sys.free_index[dofs[a]];
            if (fi < 0) continue;
            for (int b = 0; b < 8; ++b) {
                const auto fj = sys.free_index[dofs[b]];
                if (fj >= 0) trips.emplace_back(fi, fj, sys.ke(a, b));
            }
        }
    }
    sys.K.resize(static_cast<Eigen::Index>(sys.n_free), static_cast<Eigen::Index>(sys.n_free));
    sys.K.setFromTriplets(trips.begin(), trips.end());
    return sys;
}

}  // namespace fe

FeSolution solve_compression(const BinaryGrid& pixels, const MaterialParams& mat,
                             double applied_strain) {
    const fe::AssembledSystem sys = fe::assemble(pixels, mat);
    const std::size_t R = sys.rows, C = sys.cols;
    const std::size_t n_nodes = (R + 1) * C;
    const double u_top = -applied_strain * static_cast<double>(R);

    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sys.n_free));
    for (std::size_t p : sys.element_pixels) {
        std::size_t n[4];
        element_nodes(sys, p, n);
        std::size_t dofs[8];
        for (int a = 0; a < 4; ++a) {
            dofs[2 * a] = 2 * n[a];
            dofs[2 * a + 1] = 2 * n[a] + 1;
        }
        for (int a = 0; a < 8; ++a) {
            const auto fi = sys.free_index[dofs[a]];
            if (fi < 0) continue;
            for (int b = 0; b < 8; ++b)
                if (sys.kind[dofs[b]] == fe::DofKind::platen_top)
                    rhs[fi] -= sys.ke(a, b) * u_top;
        }
    }

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(sys.K);
    if (ldlt.info() != Eigen::Success) throw SingularSystemError("stiffness factorization failed");
    Eigen::VectorXd uf = ldlt.solve(rhs);
    const double rhs_norm = std::max(rhs.norm(), 1e-300);
    double residual = (sys.K * uf - rhs).norm() / rhs_norm;
    if (!uf.allFinite() || residual > 1e-8) {
        Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper> cg(sys.K);
        cg.setTolerance(1e-13);
        uf = cg.solve(rhs);
        residual = (sys.K * uf - rhs).norm() / rhs_norm;
        if (!uf.allFinite() || residual > 1e-6)
            throw SingularSystemError("solve residual " + std::to_string(residual));
    }

    Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * n_nodes));
    for (std::size_t d = 0; d < 2 * n_nodes; ++d) {
        if (sys.kind[d] == fe::DofKind::platen_top) u[static_cast<Eigen::Index>(d)] = u_top;
        else if (sys.free_index[d] >= 0) u[static_cast<Eigen::Index>(d)] = uf[sys.free_index[d]];
    }

    Eigen::VectorXd f_int = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(2 * n_nodes));
    const Elastic el = elastic_constants(mat);
    FeSolution sol;
    sol.sigma22 = Tensor::zeros({R, C});
    sol.u1 = Tensor::zeros({R, C});
    sol.u2 = Tensor::zeros({R, C});
    for (std::size_t p : sys.element_pixels) {
        std::size_t n[4];
        element_nodes(sys, p, n);
        Eigen::Matrix<double, 8, 1> ue;
        for (int a = 0; a < 4; ++a) {
            ue[2 * a] = u[static_cast<Eigen::Index>(2 * n[a])];
            ue[2 * a + 1] = u[static_cast<Eigen::Index>(2 * n[a] + 1)];
        }
        const Eigen::Matrix<double, 8, 1> fe_vec = sys.ke * ue;
        for (int a = 0; a < 4; ++a) {
            f_int[static_cast<Eigen::Index>(2 * n[a])] += fe_vec[2 * a];
            f_int[static_cast<Eigen::Index>(2 * n[a] + 1)] += fe_vec[2 * a + 1];
        }
        double exx = 0.0, eyy = 0.0, mu1 = 0.0, mu2 = 0.0;
        for (int a = 0; a < 4; ++a) {
            exx += kXi[a] / 2.0 * ue[2 * a];
            eyy += kEta[a] / 2.0 * ue[2 * a + 1];
            mu1 += 0.25 * ue[2 * a];
            mu2 += 0.25 * ue[2 * a + 1];
        }
        sol.sigma22[p] = el.d12 * exx + el.d11 * eyy;
        sol.u1[p] = mu1;
        sol.u2[p] = mu2;
    }

    for (std::size_t node = 0; node < n_nodes; ++node) {
        const std::size_t d2 = 2 * node + 1;
        if (sys.kind[d2] == fe::DofKind::platen_top)
            sol.reaction_top += f_int[static_cast<Eigen::Index>(d2)];
        else if (sys.kind[d2] == fe::DofKind::fixed_zero && node / C == R)
            sol.reaction_bottom += f_int[static_cast<Eigen::Index>(d2)];
    }
    sol.effective_stress = sol.reaction_top / static_cast<double>(C);
    return sol;
}

SweepResult run_strain_sweep(const BinaryGrid& pixels, const MaterialParams& mat,
                             std::size_t frames) {
    const std::vector<double> levels = strain_levels_for(frames);
    const double ref = levels.back();
    const FeSolution base = solve_compression(pixels, mat, ref);
    const std::size_t R = pixels.rows, C = pixels.cols;

    SweepResult out;
    out.fields = make_field_sequence(frames, R, C);
    out.curve.sigma_eff.resize(frames);
    for (std::size_t f = 0; f < frames; ++f) {
        const double s = levels[f] / ref;
        for (std::size_t p = 0; p < R * C; ++p) {
            const std::size_t i = p / C, j = p % C;
            out.fields.at(f, 0, i, j) = s * base.sigma22[p];
            out.fields.at(f, 1, i, j) = s * base.u1[p];
            out.fields.at(f, 2, i, j) = s * base.u2[p];
        }
        out.curve.sigma_eff[f] = s * base.effective_stress;
    }
    return out;
}

}  // namespace metamat

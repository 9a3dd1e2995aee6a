#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>

#include "tandem/config.hpp"

namespace tandem {

using Vec2 = std::array<double, 2>;
using Vec4 = std::array<double, 4>;
using Vec5 = std::array<double, 5>;

inline bool finite(const Vec5& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

/// Joint state of one arm: four revolute joints plus a gripper channel.
/// q[4] is the gripper opening in [0,1]; dq[4] its rate.
struct ArmState {
    Vec5 q{};
    Vec5 dq{};
};

/// Planar serial chain with point masses at the link tips and a kinematic
/// first-order gripper. Joints rotate in the vertical x-y plane; gravity acts
/// along -y.
class ArmModel {
public:
    Vec4 length{0.12, 0.10, 0.08, 0.05};   // m
    Vec4 mass{0.25, 0.20, 0.15, 0.10};     // kg
    Vec4 viscous{0.05, 0.04, 0.03, 0.02};  // N*m*s/rad
    Vec4 limit_lo{-3.0, -2.7, -2.7, -2.7};
    Vec4 limit_hi{3.0, 2.7, 2.7, 2.7};
    double gravity = 9.81;    // m/s^2, along -y
    double grip_rate = 15.0;  // 1/s first-order gripper pole

    static ArmModel from_config(const Config& c) {
        ArmModel m;
        auto v4 = [&](const std::string& key, const Vec4& dflt) {
            auto xs = c.get_reals(key, {dflt[0], dflt[1], dflt[2], dflt[3]});
            if (xs.size() != 4) throw std::runtime_error("config: " + key + " needs 4 values");
            return Vec4{xs[0], xs[1], xs[2], xs[3]};
        };
        m.length = v4("sim.link_lengths", m.length);
        m.mass = v4("sim.link_masses", m.mass);
        m.viscous = v4("sim.link_viscous", m.viscous);
        m.limit_lo = v4("sim.limit_lo", m.limit_lo);
        m.limit_hi = v4("sim.limit_hi", m.limit_hi);
        m.gravity = c.get_real("sim.gravity", m.gravity);
        m.grip_rate = c.get_real("sim.grip_rate", m.grip_rate);
        return m;
    }

    /// Cumulative joint angles th[i] = q0 + ... + qi.
    Vec4 cumulative(const Vec5& q) const {
        Vec4 th{};
        double acc = 0.0;
        for (int i = 0; i < 4; ++i) {
            acc += q[i];
            th[i] = acc;
        }
        return th;
    }

    /// Positions of the five chain points: base, then each link tip.
    std::array<Vec2, 5> chain_points(const Vec5& q) const {
        std::array<Vec2, 5> p{};
        const Vec4 th = cumulative(q);
        p[0] = {0.0, 0.0};
        for (int i = 0; i < 4; ++i)
            p[i + 1] = {p[i][0] + length[i] * std::cos(th[i]),
                        p[i][1] + length[i] * std::sin(th[i])};
        return p;
    }

    Vec2 ee_position(const Vec5& q) const { return chain_points(q)[4]; }

    double ee_orientation(const Vec5& q) const { return q[0] + q[1] + q[2] + q[3]; }

    /// Positional Jacobian of the end effector, 2x4 row-major.
    std::array<double, 8> ee_jacobian(const Vec5& q) const {
        const Vec4 th = cumulative(q);
        std::array<double, 8> J{};
        for (int i = 0; i < 4; ++i) {
            double jx = 0.0, jy = 0.0;
            for (int j = i; j < 4; ++j) {
                jx -= length[j] * std::sin(th[j]);
                jy += length[j] * std::cos(th[j]);
            }
            J[i] = jx;
            J[4 + i] = jy;
        }
        return J;
    }

    /// Inertia matrix of the revolute subchain, 4x4 row-major.
    std::array<double, 16> mass_matrix(const Vec5& q) const {
        const Vec4 th = cumulative(q);
        // tail mass beyond both links a and b
        auto tail = [&](int a, int b) {
            double s = 0.0;
            for (int k = std::max(a, b); k < 4; ++k) s += mass[k];
            return s;
        };
        std::array<double, 16> M{};
        for (int i = 0; i < 4; ++i) {
            for (int j = i; j < 4; ++j) {
                double m = 0.0;
                for (int a = i; a < 4; ++a)
                    for (int b = j; b < 4; ++b)
                        m += tail(a, b) * length[a] * length[b] * std::cos(th[a] - th[b]);
                M[i * 4 + j] = m;
                M[j * 4 + i] = m;
            }
        }
        return M;
    }

    /// Coriolis/centrifugal torque vector via Christoffel symbols.
    Vec4 coriolis(const Vec5& q, const Vec5& dq) const {
        const Vec4 th = cumulative(q);
        auto tail = [&](int a, int b) {
            double s = 0.0;
            for (int k = std::max(a, b); k < 4; ++k) s += mass[k];
            return s;
        };
        // dM[i][j][l] = d M_ij / d q_l
        double dM[4][4][4] = {};
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j)
                for (int a = i; a < 4; ++a)
                    for (int b = j; b < 4; ++b) {
                        const double base = tail(a, b) * length[a] * length[b] *
                                            -std::sin(th[a] - th[b]);
                        if (base == 0.0) continue;
                        for (int l = 0; l < 4; ++l) {
                            const double sel = (l <= a ? 1.0 : 0.0) - (l <= b ? 1.0 : 0.0);
                            if (sel != 0.0) dM[i][j][l] += base * sel;
                        }
                    }
        Vec4 h{};
        for (int i = 0; i < 4; ++i) {
            double acc = 0.0;
            for (int j = 0; j < 4; ++j)
                for (int l = 0; l < 4; ++l) {
                    const double gamma =
                        0.5 * (dM[i][j][l] + dM[i][l][j] - dM[j][l][i]);
                    acc += gamma * dq[j] * dq[l];
                }
            h[i] = acc;
        }
        return h;
    }

    /// Torque required to hold pose q against gravity; gripper entry is 0.
    Vec5 gravity_torque(const ArmState& s) const {
        const Vec4 th = cumulative(s.q);
        Vec5 g{};
        for (int i = 0; i < 4; ++i) {
            double acc = 0.0;
            for (int k = i; k < 4; ++k) {
                // d y_k / d q_i summed over masses beyond joint i
                double dy = 0.0;
                for (int j = i; j <= k; ++j) dy += length[j] * std::cos(th[j]);
                acc += mass[k] * gravity * dy;
            }
            g[i] = acc;
        }
        g[4] = 0.0;
        return g;
    }

    /// Total mechanical energy with the potential zero at the base plane.
    double energy(const ArmState& s) const {
        const auto M = mass_matrix(s.q);
        double T = 0.0;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) T += 0.5 * s.dq[i] * M[i * 4 + j] * s.dq[j];
        const auto pts = chain_points(s.q);
        double V = 0.0;
        for (int k = 0; k < 4; ++k) V += mass[k] * gravity * pts[k + 1][1];
        return T + V;
    }

    /// Semi-implicit Euler step. tau_cmd[0..3] are joint torques; tau_cmd[4]
    /// is the commanded gripper opening. tau_ext acts on the revolute joints
    /// only.
    ArmState step(const ArmState& s, const Vec5& tau_cmd, const Vec5& tau_ext, double dt) const {
        if (!finite(s.q) || !finite(s.dq) || !finite(tau_cmd) || !finite(tau_ext) ||
            !std::isfinite(dt))
            throw std::invalid_argument("arm step: non-finite input");
        const auto M = mass_matrix(s.q);
        const Vec4 h = coriolis(s.q, s.dq);
        const Vec5 g = gravity_torque(s);
        Vec4 rhs{};
        for (int i = 0; i < 4; ++i)
            rhs[i] = tau_cmd[i] + tau_ext[i] - h[i] - g[i] - viscous[i] * s.dq[i];
        const Vec4 a = solve_spd(M, rhs);

        ArmState n = s;
        for (int i = 0; i < 4; ++i) {
            n.dq[i] = s.dq[i] + dt * a[i];
            n.q[i] = s.q[i] + dt * n.dq[i];
            if (n.q[i] < limit_lo[i]) {
                n.q[i] = limit_lo[i];
                n.dq[i] = 0.0;
            } else if (n.q[i] > limit_hi[i]) {
                n.q[i] = limit_hi[i];
                n.dq[i] = 0.0;
            }
        }
        const double cmd = std::min(1.0, std::max(0.0, tau_cmd[4]));
        n.dq[4] = grip_rate * (cmd - s.q[4]);
        n.q[4] = std::min(1.0, std::max(0.0, s.q[4] + dt * n.dq[4]));
        return n;
    }

    /// Damped least-squares inverse kinematics to a planar pose
    /// (position + end-effector orientation). Throws when the target cannot
    /// be reached.
    Vec5 solve_ik(const Vec2& target, double orient, const Vec5& seed,
                  double tol = 1e-9, int max_iter = 300) const {
        Vec5 q = seed;
        const double lambda2 = 0.002;
        for (int it = 0; it < max_iter; ++it) {
            const Vec2 p = ee_position(q);
            const double o = ee_orientation(q);
            const double ex = target[0] - p[0];
            const double ey = target[1] - p[1];
            const double eo = wrap_pi(orient - o);
            if (ex * ex + ey * ey + eo * eo < tol * tol) return clamp_q(q);
            const auto J = ee_jacobian(q);
            // rows: [Jx; Jy; ones]
            double A[9];  // J J^T + lambda^2 I, 3x3
            double e[3] = {ex, ey, 0.35 * eo};
            double Jr[3][4];
            for (int i = 0; i < 4; ++i) {
                Jr[0][i] = J[i];
                Jr[1][i] = J[4 + i];
                Jr[2][i] = 0.35;  // orientation row shares the error weight
            }
            for (int r = 0; r < 3; ++r)
                for (int c = 0; c < 3; ++c) {
                    double s = 0.0;
                    for (int k = 0; k < 4; ++k) s += Jr[r][k] * Jr[c][k];
                    A[r * 3 + c] = s + (r == c ? lambda2 : 0.0);
                }
            double y[3];
            solve3(A, e, y);
            for (int i = 0; i < 4; ++i) {
                double dq = 0.0;
                for (int r = 0; r < 3; ++r) dq += Jr[r][i] * y[r];
                q[i] += dq;
            }
        }
        const Vec2 p = ee_position(q);
        const double err = std::hypot(target[0] - p[0], target[1] - p[1]);
        if (err > 1e-5) throw std::runtime_error("ik: unreachable target");
        return clamp_q(q);
    }

private:
    static double wrap_pi(double a) {
        while (a > M_PI) a -= 2.0 * M_PI;
        while (a < -M_PI) a += 2.0 * M_PI;
        return a;
    }

    Vec5 clamp_q(Vec5 q) const {
        for (int i = 0; i < 4; ++i)
            q[i] = std::min(limit_hi[i], std::max(limit_lo[i], q[i]));
        return q;
    }

    static Vec4 solve_spd(std::array<double, 16> M, Vec4 b) {
        // Cholesky, 4x4
        double L[16] = {};
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j <= i; ++j) {
                double s = M[i * 4 + j];
                for (int k = 0; k < j; ++k) s -= L[i * 4 + k] * L[j * 4 + k];
                if (i == j) {
                    if (s <= 0.0) throw std::runtime_error("mass matrix not positive definite");
                    L[i * 4 + i] = std::sqrt(s);
                } else {
                    L[i * 4 + j] = s / L[j * 4 + j];
                }
            }
        }
        Vec4 y{};
        for (int i = 0; i < 4; ++i) {
            double s = b[i];
            for (int k = 0; k < i; ++k) s -= L[i * 4 + k] * y[k];
            y[i] = s / L[i * 4 + i];
        }
        Vec4 x{};
        for (int i = 3; i >= 0; --i) {
            double s = y[i];
            for (int k = i + 1; k < 4; ++k) s -= L[k * 4 + i] * x[k];
            x[i] = s / L[i * 4 + i];
        }
        return x;
    }

    static void solve3(double A[9], const double b[3], double x[3]) {
        // Gaussian elimination with partial pivoting
        double m[9];
        double r[3];
        for (int i = 0; i < 9; ++i) m[i] = A[i];
        for (int i = 0; i < 3; ++i) r[i] = b[i];
        int piv[3] = {0, 1, 2};
        for (int c = 0; c < 3; ++c) {
            int best = c;
            for (int i = c + 1; i < 3; ++i)
                if (std::abs(m[piv[i] * 3 + c]) > std::abs(m[piv[best] * 3 + c])) best = i;
            std::swap(piv[c], piv[best]);
            const double d = m[piv[c] * 3 + c];
            for (int i = c + 1; i < 3; ++i) {
                const double f = m[piv[i] * 3 + c] / d;
                for (int j = c; j < 3; ++j) m[piv[i] * 3 + j] -= f * m[piv[c] * 3 + j];
                r[piv[i]] -= f * r[piv[c]];
            }
        }
        for (int c = 2; c >= 0; --c) {
            double s = r[piv[c]];
            for (int j = c + 1; j < 3; ++j) s -= m[piv[c] * 3 + j] * x[j];
            x[c] = s / m[piv[c] * 3 + c];
        }
    }
};

}  // namespace tandem

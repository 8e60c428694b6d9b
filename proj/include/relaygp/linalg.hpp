#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <stdexcept>
#include <string>

namespace relaygp {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Thrown when a matrix stays numerically non-SPD after bounded jitter escalation.
class singularity_error : public std::runtime_error {
public:
    singularity_error(const std::string& what, double final_jitter)
        : std::runtime_error(what + " (final jitter tried: " + std::to_string(final_jitter) + ")"),
          final_jitter_(final_jitter) {}
    double final_jitter() const noexcept { return final_jitter_; }

private:
    double final_jitter_;
};

// Thrown on degenerate incremental-update pivots (callers may escalate jitter and rebuild).
class degeneracy_error : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double kJitterFloor = 1e-8;
inline constexpr double kJitterCeiling = 1e-2;

// Cholesky factor of A + jitter*I. On factorization failure the jitter is
// escalated tenfold (from at least kJitterFloor) up to kJitterCeiling before
// giving up; `jitter` records the value that actually succeeded.
struct SpdChol {
    Eigen::LLT<Mat> llt;
    double jitter = 0.0;

    double log_det() const {
        return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    }
    Vec solve(const Vec& b) const { return llt.solve(b); }
    Mat solve(const Mat& B) const { return llt.solve(B); }
    Mat inverse() const {
        const Eigen::Index n = llt.matrixLLT().rows();
        return llt.solve(Mat::Identity(n, n));
    }
};

inline SpdChol spd_factor(const Mat& A, double jitter, bool escalate = true) {
    const Eigen::Index n = A.rows();
    double j = jitter;
    for (;;) {
        SpdChol f;
        f.jitter = j;
        if (j == 0.0)
            f.llt.compute(A);
        else
            f.llt.compute(A + j * Mat::Identity(n, n));
        if (f.llt.info() == Eigen::Success) return f;
        if (!escalate || j >= kJitterCeiling)
            throw singularity_error("matrix not SPD after jitter escalation", j);
        j = (j < kJitterFloor) ? kJitterFloor : std::min(10.0 * j, kJitterCeiling);
    }
}

inline double max_norm(const Mat& A) { return A.cwiseAbs().maxCoeff(); }

}  // namespace relaygp

#pragma once

// Evaluation mathematics: genuine/impostor score assembly, EER, TMR@FMR,
// DET curves, FID, SSIM and intra-subject diversity.
//
// Scores are distances: a comparison is accepted when score <= threshold.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crease/embedding.hpp"
#include "crease/image.hpp"

namespace crease {

struct ScoreSet {
    std::vector<double> genuine;
    std::vector<double> impostor;
};

struct SubjectSamples {
    std::vector<Embedding> enrol;
    std::vector<Embedding> probe;
};

/// Genuine: every enrol-probe distance within a subject. Impostor: every
/// enrol-probe distance across subjects (ordered, so each subject pair
/// contributes in both directions).
inline ScoreSet assemble_scores(const std::map<int, SubjectSamples>& by_subject) {
    if (by_subject.size() < 2) throw ValidationError("assemble_scores: need at least 2 subjects");
    for (const auto& [sid, s] : by_subject)
        if (s.enrol.empty() || s.probe.empty())
            throw ValidationError("assemble_scores: subject " + std::to_string(sid) + " lacks enrol or probe samples");
    ScoreSet out;
    for (const auto& [a, sa] : by_subject)
        for (const auto& [b, sb] : by_subject)
            for (const auto& e : sa.enrol)
                for (const auto& p : sb.probe) (a == b ? out.genuine : out.impostor).push_back(score(e, p));
    return out;
}

namespace detail {

inline void require_scores(const ScoreSet& s, const char* what) {
    if (s.genuine.empty() || s.impostor.empty())
        throw ValidationError(std::string(what) + ": genuine and impostor sets must both be non-empty");
    for (double v : s.genuine)
        if (!std::isfinite(v)) throw ValidationError(std::string(what) + ": non-finite genuine score");
    for (double v : s.impostor)
        if (!std::isfinite(v)) throw ValidationError(std::string(what) + ": non-finite impostor score");
}

struct OperatingPoint {
    double threshold;
    double fmr;
    double fnmr;
};

/// Operating points at "reject everything" and at every distinct pooled score.
inline std::vector<OperatingPoint> operating_points(const ScoreSet& s) {
    std::vector<double> g = s.genuine, im = s.impostor, pooled;
    std::sort(g.begin(), g.end());
    std::sort(im.begin(), im.end());
    pooled.reserve(g.size() + im.size());
    std::merge(g.begin(), g.end(), im.begin(), im.end(), std::back_inserter(pooled));
    pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());
    const double ng = static_cast<double>(g.size()), ni = static_cast<double>(im.size());
    std::vector<OperatingPoint> pts;
    pts.reserve(pooled.size() + 1);
    pts.push_back({std::nextafter(pooled.front(), -std::numeric_limits<double>::infinity()), 0.0, 1.0});
    std::size_t gi = 0, ii = 0;
    for (double t : pooled) {
        while (gi < g.size() && g[gi] <= t) ++gi;
        while (ii < im.size() && im[ii] <= t) ++ii;
        pts.push_back({t, ii / ni, 1.0 - gi / ng});
    }
    return pts;
}

}  // namespace detail

struct EerResult {
    double eer = 0.0;
    double threshold = 0.0;
};

/// Every unordered comparison among labelled embeddings.
inline ScoreSet all_pairs_scores(const std::vector<Embedding>& emb, const std::vector<int>& labels) {
    if (emb.size() != labels.size()) throw ValidationError("all_pairs_scores: one label per embedding required");
    ScoreSet s;
    for (std::size_t i = 0; i < emb.size(); ++i)
        for (std::size_t j = i + 1; j < emb.size(); ++j)
            (labels[i] == labels[j] ? s.genuine : s.impostor).push_back(score(emb[i], emb[j]));
    return s;
}

/// Equal error rate by linear interpolation between adjacent operating points
/// of the lower convex hull of the empirical (FMR, FNMR) staircase; the
/// first hull vertex at or past the crossing wins ties (lowest threshold).
inline EerResult eer(const ScoreSet& s) {
    detail::require_scores(s, "eer");
    const auto pts = detail::operating_points(s);
    // points arrive with FMR non-decreasing and FNMR non-increasing
    std::vector<detail::OperatingPoint> hull;
    auto cross = [](const detail::OperatingPoint& o, const detail::OperatingPoint& a, const detail::OperatingPoint& b) {
        return (a.fmr - o.fmr) * (b.fnmr - o.fnmr) - (a.fnmr - o.fnmr) * (b.fmr - o.fmr);
    };
    for (const auto& p : pts) {
        if (!hull.empty() && hull.back().fmr == p.fmr) {
            // same FMR: keep the lower FNMR (later point), which has the higher threshold
            if (p.fnmr < hull.back().fnmr) hull.pop_back();
            else continue;
        }
        while (hull.size() >= 2 && cross(hull[hull.size() - 2], hull.back(), p) <= 0.0) hull.pop_back();
        hull.push_back(p);
    }
    for (std::size_t i = 0; i < hull.size(); ++i) {
        const auto& q = hull[i];
        const double dq = q.fnmr - q.fmr;
        if (dq > 0.0) continue;
        if (dq == 0.0 || i == 0) return {q.fmr, q.threshold};
        const auto& p = hull[i - 1];
        const double dp = p.fnmr - p.fmr;
        const double lambda = dp / (dp - dq);
        return {p.fmr + lambda * (q.fmr - p.fmr), p.threshold + lambda * (q.threshold - p.threshold)};
    }
    return {hull.back().fmr, hull.back().threshold};  // unreachable: last point is (1, 0)
}

struct TmrResult {
    double target_fmr = 0.0;
    double tmr = 0.0;
    double threshold = 0.0;  // acceptance is score < threshold (exclusive) when resolved below the max
    bool resolvable = true;  // false when |impostor| < 10 / target
};

/// TMR at the largest threshold whose empirical FMR stays <= target.
inline std::vector<TmrResult> tmr_at_fmr(const ScoreSet& s, const std::vector<double>& targets) {
    detail::require_scores(s, "tmr_at_fmr");
    std::vector<double> g = s.genuine, im = s.impostor;
    std::sort(g.begin(), g.end());
    std::sort(im.begin(), im.end());
    const double ni = static_cast<double>(im.size());
    std::vector<TmrResult> out;
    for (double target : targets) {
        if (!(target > 0.0 && target <= 1.0)) throw ValidationError("tmr_at_fmr: target FMR must be in (0, 1]");
        TmrResult r;
        r.target_fmr = target;
        r.resolvable = ni >= 10.0 / target;
        // at most k impostors may be accepted
        const auto k = static_cast<std::size_t>(std::floor(target * ni + 1e-9));
        if (k >= im.size()) {
            r.threshold = std::max(g.back(), im.back());
            r.tmr = 1.0;
        } else {
            // accept scores strictly below the (k+1)-th smallest impostor
            r.threshold = im[k];
            const auto accepted = std::lower_bound(g.begin(), g.end(), im[k]) - g.begin();
            r.tmr = static_cast<double>(accepted) / static_cast<double>(g.size());
        }
        out.push_back(r);
    }
    return out;
}

struct DetCurve {
    std::vector<double> thresholds;
    std::vector<double> fmr_at;
    std::vector<double> fnmr_at;
};

/// DET samples at `points` thresholds spanning the score support. The first
/// threshold rejects every comparison, the last accepts every comparison.
inline DetCurve det_curve(const ScoreSet& s, int points) {
    detail::require_scores(s, "det_curve");
    if (points < 2) throw ValidationError("det_curve: need at least 2 points");
    std::vector<double> g = s.genuine, im = s.impostor;
    std::sort(g.begin(), g.end());
    std::sort(im.begin(), im.end());
    const double lo = std::min(g.front(), im.front()), hi = std::max(g.back(), im.back());
    DetCurve c;
    for (int i = 0; i < points; ++i) {
        double t = i == 0 ? std::nextafter(lo, -std::numeric_limits<double>::infinity())
                          : (i == points - 1 ? hi : lo + (hi - lo) * i / (points - 1));
        const auto acc_g = std::upper_bound(g.begin(), g.end(), t) - g.begin();
        const auto acc_i = std::upper_bound(im.begin(), im.end(), t) - im.begin();
        c.thresholds.push_back(t);
        c.fmr_at.push_back(static_cast<double>(acc_i) / static_cast<double>(im.size()));
        c.fnmr_at.push_back(1.0 - static_cast<double>(acc_g) / static_cast<double>(g.size()));
    }
    return c;
}

/// FNMR sampled on a log-spaced FMR grid [fmr_min, 1], for log-x DET plots.
inline std::vector<std::pair<double, double>> det_log_grid(const ScoreSet& s, double fmr_min = 1e-4, int points = 41) {
    if (!(fmr_min > 0.0 && fmr_min < 1.0) || points < 2) throw ValidationError("det_log_grid: bad grid");
    std::vector<double> targets;
    for (int i = 0; i < points; ++i)
        targets.push_back(std::pow(10.0, std::log10(fmr_min) * (1.0 - static_cast<double>(i) / (points - 1))));
    std::vector<std::pair<double, double>> out;
    for (const auto& r : tmr_at_fmr(s, targets)) out.emplace_back(r.target_fmr, 1.0 - r.tmr);
    return out;
}

// ---------------------------------------------------------------------------
// Image-set quality

/// Frechet distance between Gaussian fits of two feature matrices (rows = samples).
inline double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() == 0 || b.rows() == 0) throw ValidationError("fid: empty feature set");
    if (a.cols() != b.cols()) throw ValidationError("fid: feature dimensions differ");
    if (a.rows() < a.cols() || b.rows() < b.cols())
        std::cerr << "warning: fid: fewer samples than feature dimensions (" << std::min(a.rows(), b.rows()) << " < "
                  << a.cols() << "); covariance is rank deficient\n";
    auto stats = [](const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
        mu = x.colwise().mean();
        const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
        cov = x.rows() > 1 ? Eigen::MatrixXd((c.transpose() * c) / static_cast<double>(x.rows() - 1))
                           : Eigen::MatrixXd::Zero(x.cols(), x.cols());
    };
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    stats(a, mu_a, cov_a);
    stats(b, mu_b, cov_b);

    auto clipped = [](Eigen::VectorXd ev) {
        const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
        for (Eigen::Index i = 0; i < ev.size(); ++i) {
            if (ev[i] < -1e-6 * scale)
                std::cerr << "warning: fid: clipping negative eigenvalue " << ev[i] << "\n";
            ev[i] = std::max(ev[i], 0.0);
        }
        return ev;
    };
    // tr((A B)^1/2) = tr((A^1/2 B A^1/2)^1/2) for symmetric PSD A, B
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
    const Eigen::MatrixXd sqrt_a =
        ea.eigenvectors() * clipped(ea.eigenvalues()).cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
    const Eigen::MatrixXd m = sqrt_a * cov_b * sqrt_a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    const double tr_sqrt = clipped(em.eigenvalues()).cwiseSqrt().sum();
    const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    return std::max(d, 0.0);
}

template <class Extractor>
Eigen::MatrixXd feature_matrix(const std::vector<ImageTensor>& images, Extractor&& extract) {
    if (images.empty()) throw ValidationError("feature_matrix: empty image set");
    Eigen::MatrixXd out;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const auto f = extract(images[i]);
        if (i == 0) out.resize(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(f.size()));
        if (static_cast<Eigen::Index>(f.size()) != out.cols()) throw ValidationError("feature_matrix: ragged features");
        for (std::size_t j = 0; j < f.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[j];
    }
    return out;
}

/// Extractor: ImageTensor -> random-access container of reals.
template <class Extractor>
double fid(const std::vector<ImageTensor>& set_a, const std::vector<ImageTensor>& set_b, Extractor&& extract) {
    if (set_a.empty() || set_b.empty()) throw ValidationError("fid: empty image set");
    return frechet_distance(feature_matrix(set_a, extract), feature_matrix(set_b, extract));
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size));
    const int r = size / 2;
    double sum = 0.0;
    for (int i = 0; i < size; ++i) sum += w[static_cast<std::size_t>(i)] = std::exp(-(i - r) * (i - r) / (2.0 * sigma * sigma));
    for (auto& v : w) v /= sum;
    return w;
}

}  // namespace detail

/// Mean SSIM over valid 11x11 Gaussian (sigma 1.5) windows with K1 = 0.01,
/// K2 = 0.03 and dynamic range 2 (pixels in [-1, 1]). Images smaller than
/// the window use the largest odd window that fits.
inline double ssim(const ImageTensor& a, const ImageTensor& b) {
    ImageTensor::require_same_shape(a, b, "ssim");
    int win = std::min({11, a.height(), a.width()});
    if (win % 2 == 0) --win;
    const auto w = detail::gaussian_window(win, 1.5);
    constexpr double L = 2.0;
    const double c1 = (0.01 * L) * (0.01 * L), c2 = (0.03 * L) * (0.03 * L);
    double total = 0.0;
    long count = 0;
    for (int ch = 0; ch < a.channels(); ++ch)
        for (int y = 0; y + win <= a.height(); ++y)
            for (int x = 0; x + win <= a.width(); ++x) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        const double k = w[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(j)];
                        const double va = a.at(y + i, x + j, ch), vb = b.at(y + i, x + j, ch);
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
                total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / count;
}

/// Mean over groups of the mean pairwise feature-space Euclidean distance.
template <class Extractor>
double intra_subject_diversity(const std::vector<std::vector<ImageTensor>>& groups, Extractor&& extract) {
    if (groups.empty()) throw ValidationError("intra_subject_diversity: no groups");
    double total = 0.0;
    for (const auto& g : groups) {
        if (g.size() < 2) throw ValidationError("intra_subject_diversity: every group needs >= 2 images");
        const auto f = feature_matrix(g, extract);
        double s = 0.0;
        long n = 0;
        for (Eigen::Index i = 0; i < f.rows(); ++i)
            for (Eigen::Index j = i + 1; j < f.rows(); ++j) {
                s += (f.row(i) - f.row(j)).norm();
                ++n;
            }
        total += s / n;
    }
    return total / static_cast<double>(groups.size());
}

// ---------------------------------------------------------------------------
// score file: one "genuine|impostor <distance>" per line, '#' comments

inline void write_score_file(const std::filesystem::path& file, const ScoreSet& s) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write score file " + file.string());
    out << std::setprecision(17);
    for (double v : s.genuine) out << "genuine " << v << '\n';
    for (double v : s.impostor) out << "impostor " << v << '\n';
}

inline ScoreSet read_score_file(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ValidationError("cannot open score file " + file.string());
    ScoreSet s;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string label;
        double v = 0.0;
        if (!(ls >> label >> v) || !std::isfinite(v))
            throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": malformed score record");
        if (label == "genuine") s.genuine.push_back(v);
        else if (label == "impostor") s.impostor.push_back(v);
        else throw ValidationError(file.string() + ":" + std::to_string(lineno) + ": unknown label '" + label + "'");
    }
    return s;
}

struct VerificationReport {
    EerResult eer;
    std::vector<TmrResult> tmr;
    std::size_t genuine_count = 0;
    std::size_t impostor_count = 0;
};

inline VerificationReport make_report(const ScoreSet& s, const std::vector<double>& fmr_targets = {1e-3, 1e-4}) {
    return {eer(s), tmr_at_fmr(s, fmr_targets), s.genuine.size(), s.impostor.size()};
}

inline std::string format_report(const VerificationReport& r) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(2);
    out << "genuine_scores: " << r.genuine_count << "\n";
    out << "impostor_scores: " << r.impostor_count << "\n";
    out << "EER: " << 100.0 * r.eer.eer << "%\n";
    out << std::setprecision(6) << "EER_threshold: " << r.eer.threshold << "\n";
    for (const auto& t : r.tmr) {
        out << std::setprecision(2) << "TMR@FMR=" << std::defaultfloat << 100.0 * t.target_fmr << "%: " << std::fixed
            << 100.0 * t.tmr << "%";
        if (!t.resolvable) out << " (unresolved: fewer than " << static_cast<long>(10.0 / t.target_fmr) << " impostor scores)";
        out << "\n";
    }
    return out.str();
}

inline void write_det_csv(const std::filesystem::path& file, const DetCurve& c) {
    if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
    std::ofstream out(file);
    if (!out) throw std::runtime_error("cannot write DET csv " + file.string());
    out << "threshold,fmr,fnmr\n" << std::setprecision(10);
    for (std::size_t i = 0; i < c.thresholds.size(); ++i)
        out << c.thresholds[i] << ',' << c.fmr_at[i] << ',' << c.fnmr_at[i] << '\n';
}

}  // namespace crease

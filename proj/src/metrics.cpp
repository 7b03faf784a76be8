#include "dirforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "dirforge/container.hpp"
#include "dirforge/errors.hpp"
#include "dirforge/sampling.hpp"

namespace dirforge {

using nlohmann::json;

namespace {

void require_same_dims(const Dims &a, const Dims &b, const char *what) {
    if (!(a == b)) {
        throw DataError(std::string(what) + ": dims " + to_string(a) + " and " + to_string(b) + " differ");
    }
}

Vec3 sample_dvf(const DVF &dvf, const Vec3 &p) {
    const Dims &d = dvf.dims();
    const auto st = sampling::stencil3(d, p[0], p[1], p[2]);
    return {sampling::sample(dvf.component(0).data(), d, st), sampling::sample(dvf.component(1).data(), d, st),
            sampling::sample(dvf.component(2).data(), d, st)};
}

double mean_of(const std::vector<double> &v) {
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double sample_std(const std::vector<double> &v) {
    if (v.size() < 2) {
        return 0.0;
    }
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) {
        s += (x - m) * (x - m);
    }
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

} // namespace

std::vector<TreEntry> tre(const LandmarkSet &deformed, const LandmarkSet &target) {
    deformed.validate();
    target.validate();
    std::map<int, Vec3> t;
    for (const auto &l : target.entries) {
        t[l.id] = l.mm;
    }
    if (deformed.size() != target.size()) {
        throw DataError("landmark id mismatch: set sizes differ");
    }
    std::vector<TreEntry> out;
    for (const auto &l : deformed.entries) {
        const auto it = t.find(l.id);
        if (it == t.end()) {
            throw DataError("landmark id mismatch: " + std::to_string(l.id) + " has no target");
        }
        const double dx = l.mm[0] - it->second[0];
        const double dy = l.mm[1] - it->second[1];
        const double dz = l.mm[2] - it->second[2];
        out.push_back({l.id, std::sqrt(dx * dx + dy * dy + dz * dz)});
    }
    std::sort(out.begin(), out.end(), [](const TreEntry &a, const TreEntry &b) { return a.id < b.id; });
    return out;
}

LandmarkSet map_landmarks(const LandmarkSet &moving, const DVF &dvf, const Vec3 &spacing) {
    validate_spacing(spacing);
    constexpr int kMaxIterations = 100;
    constexpr double kTolerance = 1e-9;
    LandmarkSet out;
    for (const auto &l : moving.entries) {
        const Vec3 x{l.mm[0] / spacing[0], l.mm[1] / spacing[1], l.mm[2] / spacing[2]};
        Vec3 p = x;
        for (int it = 0; it < kMaxIterations; ++it) {
            const Vec3 u = sample_dvf(dvf, p);
            const Vec3 next{x[0] - u[0], x[1] - u[1], x[2] - u[2]};
            const double step = std::max({std::abs(next[0] - p[0]), std::abs(next[1] - p[1]), std::abs(next[2] - p[2])});
            p = next;
            if (step < kTolerance) {
                break;
            }
        }
        out.entries.push_back({l.id, {p[0] * spacing[0], p[1] * spacing[1], p[2] * spacing[2]}});
    }
    return out;
}

double mae(const Volume &deformed, const Volume &target, const Mask &body) {
    require_same_dims(deformed.dims(), target.dims(), "mae");
    require_same_dims(deformed.dims(), body.dims(), "mae mask");
    double s = 0.0;
    std::size_t n = 0;
    const auto a = deformed.voxels();
    const auto b = target.voxels();
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (body.test(i)) {
            s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
            ++n;
        }
    }
    if (n == 0) {
        throw DataError("mae: body mask is empty");
    }
    return s / static_cast<double>(n);
}

double ncc_metric(const Volume &deformed, const Volume &target, const Mask &body) {
    require_same_dims(deformed.dims(), target.dims(), "ncc");
    require_same_dims(deformed.dims(), body.dims(), "ncc mask");
    const auto a = deformed.voxels();
    const auto b = target.voxels();
    double ma = 0.0, mb = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (body.test(i)) {
            ma += a[i];
            mb += b[i];
            ++n;
        }
    }
    if (n == 0) {
        throw DataError("ncc: body mask is empty");
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (body.test(i)) {
            const double da = a[i] - ma;
            const double db = b[i] - mb;
            saa += da * da;
            sbb += db * db;
            sab += da * db;
        }
    }
    if (saa == 0.0 || sbb == 0.0) {
        throw DataError("ncc: zero masked variance");
    }
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

double dsc(const Mask &a, const Mask &b) {
    require_same_dims(a.dims(), b.dims(), "dsc");
    std::size_t both = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.bits().size(); ++i) {
        const bool x = a.test(i);
        const bool y = b.test(i);
        na += x;
        nb += y;
        both += x && y;
    }
    if (na + nb == 0) {
        throw DataError("dsc: both masks are empty");
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

JacobianReport jacobian_report(const DVF &dvf) {
    const Dims &d = dvf.dims();
    const bool interior = d.nx >= 3 && d.ny >= 3 && d.nz >= 3;
    const int lo = interior ? 1 : 0;
    auto deriv = [&](int c, int axis, int x, int y, int z) {
        const auto comp = dvf.component(c);
        const int n = d[axis];
        if (n < 2) {
            return 0.0;
        }
        int idx[3] = {x, y, z};
        const int i = idx[axis];
        const int lo_i = std::max(i - 1, 0);
        const int hi_i = std::min(i + 1, n - 1);
        idx[axis] = hi_i;
        const double hi = comp[d.index(idx[0], idx[1], idx[2])];
        idx[axis] = lo_i;
        const double lo_v = comp[d.index(idx[0], idx[1], idx[2])];
        return (hi - lo_v) / (hi_i - lo_i);
    };
    JacobianReport r;
    r.min_det = std::numeric_limits<double>::infinity();
    std::size_t folds = 0, count = 0;
    for (int z = lo; z < d.nz - lo; ++z) {
        for (int y = lo; y < d.ny - lo; ++y) {
            for (int x = lo; x < d.nx - lo; ++x) {
                double j[3][3];
                for (int c = 0; c < 3; ++c) {
                    for (int a = 0; a < 3; ++a) {
                        j[c][a] = (c == a ? 1.0 : 0.0) + deriv(c, a, x, y, z);
                    }
                }
                const double det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                                   j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                                   j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                r.min_det = std::min(r.min_det, det);
                folds += det <= 0.0;
                ++count;
            }
        }
    }
    r.fold_fraction = static_cast<double>(folds) / static_cast<double>(count);
    return r;
}

json MetricReport::to_json() const {
    json per = json::array();
    for (const auto &t : tre_per_landmark) {
        per.push_back({{"id", t.id}, {"tre_mm", t.mm}});
    }
    return {{"fraction", fraction},  {"tre_per_landmark", per},     {"tre_mean", tre_mean},
            {"tre_std", tre_std},    {"mae", mae},                  {"ncc", ncc},
            {"dsc", dsc},            {"jacobian_min", jacobian_min}, {"fold_fraction", fold_fraction},
            {"body_hu", body_hu},    {"bone_hu", bone_hu}};
}

MetricReport evaluate(const EvaluationInputs &in) {
    require_same_dims(in.deformed.dims(), in.target.dims(), "evaluate");
    require_same_dims(in.dvf.dims(), in.target.dims(), "evaluate dvf");
    MetricReport r;
    r.body_hu = in.body_hu;
    r.bone_hu = in.bone_hu;
    const LandmarkSet mapped = map_landmarks(in.landmarks_moving, in.dvf, in.target.spacing());
    r.tre_per_landmark = tre(mapped, in.landmarks_target);
    std::vector<double> d;
    for (const auto &t : r.tre_per_landmark) {
        d.push_back(t.mm);
    }
    r.tre_mean = mean_of(d);
    r.tre_std = sample_std(d);
    const Mask body = threshold_mask(in.target, in.body_hu);
    r.mae = mae(in.deformed, in.target, body);
    r.ncc = ncc_metric(in.deformed, in.target, body);
    r.dsc = dsc(threshold_mask(in.deformed, in.bone_hu), threshold_mask(in.target, in.bone_hu));
    const JacobianReport j = jacobian_report(in.dvf);
    r.jacobian_min = j.min_det;
    r.fold_fraction = j.fold_fraction;
    return r;
}

std::string report_csv_header() { return "fraction,tre_mean,tre_std,mae,ncc,dsc,jac_min,fold_frac"; }

std::string report_csv(const std::vector<MetricReport> &rows) {
    std::ostringstream out;
    out << report_csv_header() << "\n";
    auto emit = [&](const std::string &label, double tm, double ts, double m, double n, double ds, double jm, double ff) {
        out << label << "," << format_double(tm) << "," << format_double(ts) << "," << format_double(m) << ","
            << format_double(n) << "," << format_double(ds) << "," << format_double(jm) << "," << format_double(ff)
            << "\n";
    };
    std::vector<double> all_tre;
    double m = 0.0, n = 0.0, ds = 0.0, ff = 0.0;
    double jm = std::numeric_limits<double>::infinity();
    for (const auto &r : rows) {
        emit(r.fraction, r.tre_mean, r.tre_std, r.mae, r.ncc, r.dsc, r.jacobian_min, r.fold_fraction);
        for (const auto &t : r.tre_per_landmark) {
            all_tre.push_back(t.mm);
        }
        m += r.mae;
        n += r.ncc;
        ds += r.dsc;
        ff += r.fold_fraction;
        jm = std::min(jm, r.jacobian_min);
    }
    if (!rows.empty()) {
        const double k = 1.0 / static_cast<double>(rows.size());
        emit("overall", mean_of(all_tre), sample_std(all_tre), m * k, n * k, ds * k, jm, ff * k);
    }
    return out.str();
}

} // namespace dirforge

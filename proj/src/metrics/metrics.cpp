#include "recticast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "recticast/datagen.hpp"

namespace recticast::metrics {

namespace {

std::pair<std::size_t, std::size_t> frame_dims(const Tensor& frame) {
    const auto& s = frame.shape();
    if (s.size() < 2) throw DimensionError("metrics: frame needs two spatial axes, got " + shape_to_string(s));
    for (std::size_t i = 0; i + 2 < s.size(); ++i) {
        if (s[i] != 1) throw DimensionError("metrics: expected a single frame, got " + shape_to_string(s));
    }
    return {s[s.size() - 2], s[s.size() - 1]};
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
    std::vector<double> g(size);
    const double c = (static_cast<double>(size) - 1.0) / 2.0;
    double sum = 0;
    for (std::size_t i = 0; i < size; ++i) {
        const double d = static_cast<double>(i) - c;
        g[i] = std::exp(-d * d / (2 * sigma * sigma));
        sum += g[i];
    }
    for (auto& v : g) v /= sum;
    return g;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

std::string fmt_threshold(double t) {
    std::ostringstream os;
    os << t;
    return os.str();
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

BoolGrid binarize(const Tensor& frame, double threshold_raw) {
    const auto [h, w] = frame_dims(frame);
    const double level = threshold_raw / data::kFullScale;
    BoolGrid g{h, w, std::vector<std::uint8_t>(h * w)};
    const auto v = frame.span();
    for (std::size_t i = 0; i < h * w; ++i) g.cells[i] = static_cast<double>(v[i]) >= level ? 1 : 0;
    return g;
}

ContingencyCounts& ContingencyCounts::operator+=(const ContingencyCounts& o) {
    hits += o.hits;
    misses += o.misses;
    false_alarms += o.false_alarms;
    correct_negatives += o.correct_negatives;
    return *this;
}

ContingencyCounts contingency(const BoolGrid& pred, const BoolGrid& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw DimensionError("contingency: grids differ in shape (" + std::to_string(pred.height) + "x" +
                             std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                             std::to_string(gt.width) + ")");
    }
    ContingencyCounts c;
    for (std::size_t i = 0; i < pred.cells.size(); ++i) {
        const bool p = pred.cells[i] != 0;
        const bool o = gt.cells[i] != 0;
        if (p && o) ++c.hits;
        else if (o) ++c.misses;
        else if (p) ++c.false_alarms;
        else ++c.correct_negatives;
    }
    return c;
}

double csi(const ContingencyCounts& c) {
    if (c.vacuous()) return 1.0;
    return static_cast<double>(c.hits) / static_cast<double>(c.hits + c.misses + c.false_alarms);
}

double hss(const ContingencyCounts& c) {
    const double h = static_cast<double>(c.hits), m = static_cast<double>(c.misses);
    const double f = static_cast<double>(c.false_alarms), n = static_cast<double>(c.correct_negatives);
    const double den = (h + m) * (m + n) + (h + f) * (f + n);
    if (den == 0) return 0.0;
    return 2 * (h * n - m * f) / den;
}

Tensor max_pool(const Tensor& frame, std::size_t k) {
    if (k == 0) throw std::invalid_argument("max_pool: window must be positive");
    const auto [h, w] = frame_dims(frame);
    const std::size_t ph = (h + k - 1) / k, pw = (w + k - 1) / k;
    Tensor out = Tensor::zeros({ph, pw});
    const auto in = frame.span();
    auto o = out.span();
    for (std::size_t r = 0; r < ph; ++r) {
        for (std::size_t c = 0; c < pw; ++c) {
            // Padding cells are zero, so a partial block starts from 0.
            const bool partial = (r + 1) * k > h || (c + 1) * k > w;
            float best = partial ? 0.0f : -std::numeric_limits<float>::infinity();
            for (std::size_t i = r * k; i < std::min(h, (r + 1) * k); ++i) {
                for (std::size_t j = c * k; j < std::min(w, (c + 1) * k); ++j) best = std::max(best, in[i * w + j]);
            }
            o[r * pw + c] = best;
        }
    }
    return out;
}

double pooled_csi(const Tensor& pred, const Tensor& gt, std::size_t k, const std::vector<double>& thresholds) {
    require_same_shape(pred, gt, "pooled_csi");
    if (pred.dim() != 4) throw DimensionError("pooled_csi: expected [L,1,H,W], got " + shape_to_string(pred.shape()));
    std::vector<double> cells;
    for (std::size_t l = 0; l < pred.shape()[0]; ++l) {
        const Tensor p = max_pool(pred.slice0(l, l + 1), k);
        const Tensor g = max_pool(gt.slice0(l, l + 1), k);
        for (double th : thresholds) {
            const auto c = contingency(binarize(p, th), binarize(g, th));
            if (!c.vacuous()) cells.push_back(csi(c));
        }
    }
    return cells.empty() ? 1.0 : mean_of(cells);
}

double ssim_frame(const Tensor& a, const Tensor& b) {
    const auto [h, w] = frame_dims(a);
    const auto [hb, wb] = frame_dims(b);
    if (h != hb || w != wb) throw DimensionError("ssim: frame shapes differ");
    const std::size_t wh = std::min<std::size_t>(11, h), ww = std::min<std::size_t>(11, w);
    const auto gy = gaussian_window(wh, 1.5);
    const auto gx = gaussian_window(ww, 1.5);
    constexpr double c1 = (0.01 * 1.0) * (0.01 * 1.0);
    constexpr double c2 = (0.03 * 1.0) * (0.03 * 1.0);
    const auto x = a.span();
    const auto y = b.span();
    double total = 0;
    std::size_t count = 0;
    for (std::size_t r = 0; r + wh <= h; ++r) {
        for (std::size_t c = 0; c + ww <= w; ++c) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (std::size_t i = 0; i < wh; ++i) {
                for (std::size_t j = 0; j < ww; ++j) {
                    const double g = gy[i] * gx[j];
                    const double xv = x[(r + i) * w + c + j], yv = y[(r + i) * w + c + j];
                    mx += g * xv;
                    my += g * yv;
                    sxx += g * xv * xv;
                    syy += g * yv * yv;
                    sxy += g * xv * yv;
                }
            }
            const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
            total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

double ssim(const Tensor& pred, const Tensor& gt) {
    require_same_shape(pred, gt, "ssim");
    if (pred.dim() != 4) throw DimensionError("ssim: expected [L,1,H,W], got " + shape_to_string(pred.shape()));
    double sum = 0;
    for (std::size_t l = 0; l < pred.shape()[0]; ++l) sum += ssim_frame(pred.slice0(l, l + 1), gt.slice0(l, l + 1));
    return sum / static_cast<double>(pred.shape()[0]);
}

double MetricReport::csi_mean(std::size_t pool_index) const {
    std::vector<double> cells;
    for (const auto& per_t : counts.at(pool_index)) {
        for (const auto& c : per_t) {
            if (!c.vacuous()) cells.push_back(csi(c));
        }
    }
    return cells.empty() ? 1.0 : mean_of(cells);
}

double MetricReport::hss_mean() const {
    std::vector<double> cells;
    for (const auto& per_t : counts.at(0)) {
        for (const auto& c : per_t) {
            if (!c.vacuous()) cells.push_back(hss(c));
        }
    }
    return cells.empty() ? 1.0 : mean_of(cells);
}

double MetricReport::ssim_mean() const { return mean_of(ssim_per_lead); }

double MetricReport::csi_at_lead(std::size_t pool_index, std::size_t lead) const {
    std::vector<double> cells;
    for (const auto& per_t : counts.at(pool_index)) {
        if (!per_t.at(lead).vacuous()) cells.push_back(csi(per_t[lead]));
    }
    return mean_of(cells);
}

double MetricReport::hss_at_lead(std::size_t lead) const {
    std::vector<double> cells;
    for (const auto& per_t : counts.at(0)) {
        if (!per_t.at(lead).vacuous()) cells.push_back(hss(per_t[lead]));
    }
    return mean_of(cells);
}

double MetricReport::csi_at_threshold(std::size_t pool_index, std::size_t threshold) const {
    std::vector<double> cells;
    for (const auto& c : counts.at(pool_index).at(threshold)) {
        if (!c.vacuous()) cells.push_back(csi(c));
    }
    return mean_of(cells);
}

nlohmann::json MetricReport::to_json() const {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json j;
    j["samples"] = samples;
    j["leads"] = leads;
    j["thresholds"] = thresholds;
    j["csi"] = num(csi_mean(0));
    j["csi4"] = num(csi_mean(1));
    j["csi16"] = num(csi_mean(2));
    j["hss"] = num(hss_mean());
    j["ssim"] = num(ssim_mean());
    j["mse"] = num(mean_of(mse_per_lead));
    auto& per_t = j["per_threshold"];
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        per_t.push_back({{"threshold", thresholds[t]},
                         {"csi", num(csi_at_threshold(0, t))},
                         {"csi4", num(csi_at_threshold(1, t))},
                         {"csi16", num(csi_at_threshold(2, t))}});
    }
    auto& per_l = j["per_lead"];
    for (std::size_t l = 0; l < leads; ++l) {
        per_l.push_back({{"lead", l + 1},
                         {"csi", num(csi_at_lead(0, l))},
                         {"csi4", num(csi_at_lead(1, l))},
                         {"csi16", num(csi_at_lead(2, l))},
                         {"hss", num(hss_at_lead(l))},
                         {"ssim", num(ssim_per_lead[l])},
                         {"mse", num(mse_per_lead[l])}});
    }
    return j;
}

std::string MetricReport::to_csv() const {
    static const char* kNames[] = {"csi", "csi4", "csi16"};
    std::ostringstream os;
    os << "lead,threshold,metric,value\n";
    for (std::size_t l = 0; l < leads; ++l) {
        for (std::size_t p = 0; p < kPoolSizes.size(); ++p) {
            for (std::size_t t = 0; t < thresholds.size(); ++t) {
                const auto& c = counts[p][t][l];
                if (c.vacuous()) continue;
                os << l + 1 << ',' << fmt_threshold(thresholds[t]) << ',' << kNames[p] << ',' << fmt(csi(c)) << '\n';
            }
            const double m = csi_at_lead(p, l);
            if (std::isfinite(m)) os << l + 1 << ",mean," << kNames[p] << ',' << fmt(m) << '\n';
        }
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            const auto& c = counts[0][t][l];
            if (c.vacuous()) continue;
            os << l + 1 << ',' << fmt_threshold(thresholds[t]) << ",hss," << fmt(hss(c)) << '\n';
        }
        const double hm = hss_at_lead(l);
        if (std::isfinite(hm)) os << l + 1 << ",mean,hss," << fmt(hm) << '\n';
        os << l + 1 << ",mean,ssim," << fmt(ssim_per_lead[l]) << '\n';
        os << l + 1 << ",mean,mse," << fmt(mse_per_lead[l]) << '\n';
    }
    return os.str();
}

MetricReport evaluate(const std::vector<Tensor>& forecasts, const std::vector<Tensor>& truths,
                      const std::vector<double>& thresholds) {
    if (forecasts.empty()) throw std::invalid_argument("evaluate: no forecasts");
    if (forecasts.size() != truths.size()) {
        throw DimensionError("evaluate: " + std::to_string(forecasts.size()) + " forecasts vs " +
                             std::to_string(truths.size()) + " ground truths");
    }
    if (thresholds.empty()) throw std::invalid_argument("evaluate: no thresholds");
    MetricReport r;
    r.thresholds = thresholds;
    r.samples = forecasts.size();
    r.leads = forecasts.front().shape().empty() ? 0 : forecasts.front().shape()[0];
    r.counts.assign(kPoolSizes.size(),
                    std::vector<std::vector<ContingencyCounts>>(thresholds.size(),
                                                                std::vector<ContingencyCounts>(r.leads)));
    r.ssim_per_lead.assign(r.leads, 0.0);
    r.mse_per_lead.assign(r.leads, 0.0);
    for (std::size_t s = 0; s < forecasts.size(); ++s) {
        const auto& f = forecasts[s];
        const auto& g = truths[s];
        if (f.shape() != g.shape() || f.dim() != 4 || f.shape()[0] != r.leads) {
            throw DimensionError("evaluate: sample " + std::to_string(s) + " forecast " + shape_to_string(f.shape()) +
                                 " does not align with ground truth " + shape_to_string(g.shape()));
        }
        for (std::size_t l = 0; l < r.leads; ++l) {
            const Tensor fl = f.slice0(l, l + 1), gl = g.slice0(l, l + 1);
            for (std::size_t p = 0; p < kPoolSizes.size(); ++p) {
                const Tensor fp = kPoolSizes[p] == 1 ? fl : max_pool(fl, kPoolSizes[p]);
                const Tensor gp = kPoolSizes[p] == 1 ? gl : max_pool(gl, kPoolSizes[p]);
                for (std::size_t t = 0; t < thresholds.size(); ++t) {
                    r.counts[p][t][l] += contingency(binarize(fp, thresholds[t]), binarize(gp, thresholds[t]));
                }
            }
            r.ssim_per_lead[l] += ssim_frame(fl, gl);
            double se = 0;
            for (std::size_t i = 0; i < fl.numel(); ++i) {
                const double d = static_cast<double>(fl.span()[i]) - gl.span()[i];
                se += d * d;
            }
            r.mse_per_lead[l] += se / static_cast<double>(fl.numel());
        }
    }
    for (std::size_t l = 0; l < r.leads; ++l) {
        r.ssim_per_lead[l] /= static_cast<double>(r.samples);
        r.mse_per_lead[l] /= static_cast<double>(r.samples);
    }
    return r;
}

LeadTimeCurves leadtime_curves(const std::vector<Tensor>& forecasts, const std::vector<Tensor>& truths,
                               const std::vector<double>& thresholds) {
    const auto r = evaluate(forecasts, truths, thresholds);
    LeadTimeCurves out;
    for (std::size_t l = 0; l < r.leads; ++l) {
        out.csi.push_back(r.csi_at_lead(0, l));
        out.csi4.push_back(r.csi_at_lead(1, l));
        out.csi16.push_back(r.csi_at_lead(2, l));
    }
    return out;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two aligned series");
    auto ranks = [](const std::vector<double>& v) {
        std::vector<std::size_t> order(v.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < order.size();) {
            std::size_t j = i;
            while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto rx = ranks(x), ry = ranks(y);
    const double mx = mean_of(rx), my = mean_of(ry);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace recticast::metrics

#include "transflower/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <vector>

#include "transflower/csv.hpp"
#include "transflower/errors.hpp"

namespace transflower {

namespace {

/// Visits (predicted, real) over the sorted key union.
void for_each_pair(const ODMap& predicted, const ODMap& real, const std::function<void(double, double)>& fn) {
    auto p = predicted.begin();
    auto r = real.begin();
    while (p != predicted.end() || r != real.end()) {
        double vp = 0.0, vr = 0.0;
        if (r == real.end() || (p != predicted.end() && p->first < r->first)) {
            vp = (p++)->second;
        } else if (p == predicted.end() || r->first < p->first) {
            vr = (r++)->second;
        } else {
            vp = (p++)->second;
            vr = (r++)->second;
        }
        if (!(vp >= 0) || !(vr >= 0)) throw ValidationError("metrics: volumes must be non-negative and finite");
        fn(vp, vr);
    }
}

std::size_t union_size(const ODMap& predicted, const ODMap& real) {
    std::size_t n = 0;
    for_each_pair(predicted, real, [&](double, double) { ++n; });
    if (n == 0) throw ValidationError("metrics: no origin-destination pairs to score");
    return n;
}

}  // namespace

std::optional<double> cpc(const ODMap& predicted, const ODMap& real) {
    double common = 0.0, total = 0.0;
    std::size_t n = 0;
    for_each_pair(predicted, real, [&](double vp, double vr) {
        common += std::min(vp, vr);
        total += vp + vr;
        ++n;
    });
    if (n == 0) throw ValidationError("cpc: no origin-destination pairs to score");
    if (!(total > 0)) return std::nullopt;
    return 2.0 * common / total;
}

double mae(const ODMap& predicted, const ODMap& real) {
    const std::size_t n = union_size(predicted, real);
    double s = 0.0;
    for_each_pair(predicted, real, [&](double vp, double vr) { s += std::abs(vp - vr); });
    return s / static_cast<double>(n);
}

double rmse(const ODMap& predicted, const ODMap& real) {
    const std::size_t n = union_size(predicted, real);
    double s = 0.0;
    for_each_pair(predicted, real, [&](double vp, double vr) { s += (vp - vr) * (vp - vr); });
    return std::sqrt(s / static_cast<double>(n));
}

EvalReport evaluate(const ODMap& predicted, const ODMap& real, std::string model, std::string dataset,
                    std::string split) {
    EvalReport r;
    r.model = std::move(model);
    r.dataset = std::move(dataset);
    r.split = std::move(split);
    r.n_pairs = union_size(predicted, real);
    r.cpc = cpc(predicted, real);
    r.mae = mae(predicted, real);
    r.rmse = rmse(predicted, real);
    r.scope = "observed pairs of " + r.split + " origins plus pairs with nonzero predicted volume";
    return r;
}

std::string report_header() { return "model,dataset,split,cpc,mae,rmse,n_pairs"; }

std::string report_row(const EvalReport& r) {
    return r.model + ',' + r.dataset + ',' + r.split + ',' + (r.cpc ? csv::format_double(*r.cpc) : "nan") + ',' +
           csv::format_double(r.mae) + ',' + csv::format_double(r.rmse) + ',' + std::to_string(r.n_pairs);
}

void append_report(const std::filesystem::path& path, const EvalReport& report) {
    std::error_code ec;
    const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::app);
    if (!out) throw ValidationError("cannot open " + path.string() + " for appending");
    if (fresh) out << report_header() << '\n';
    out << report_row(report) << '\n';
}

}  // namespace transflower

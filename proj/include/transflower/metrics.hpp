#ifndef TRANSFLOWER_METRICS_HPP
#define TRANSFLOWER_METRICS_HPP

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>

namespace transflower {

/// (origin id, destination id) -> volume. Missing keys count as 0.
using ODMap = std::map<std::pair<std::string, std::string>, double>;

/// Common part of commuters, 2·Σ min(p, r) / (Σ p + Σ r). Empty when both
/// maps sum to zero (the ratio is undefined). Throws ValidationError on a
/// negative volume or an empty key union.
std::optional<double> cpc(const ODMap& predicted, const ODMap& real);
/// Mean absolute error over the key union.
double mae(const ODMap& predicted, const ODMap& real);
/// Root mean squared error over the key union.
double rmse(const ODMap& predicted, const ODMap& real);

struct EvalReport {
    std::string model;
    std::string dataset;
    std::string split;
    /// Empty when both maps are zero.
    std::optional<double> cpc;
    double mae = 0.0;
    double rmse = 0.0;
    std::size_t n_pairs = 0;
    /// Which OD universe was scored.
    std::string scope;
};

EvalReport evaluate(const ODMap& predicted, const ODMap& real, std::string model, std::string dataset,
                    std::string split);

/// `model,dataset,split,cpc,mae,rmse,n_pairs`. An undefined cpc is written as "nan".
std::string report_header();
std::string report_row(const EvalReport& report);
/// Appends one row, writing the header first when the file is new or empty.
void append_report(const std::filesystem::path& path, const EvalReport& report);

}  // namespace transflower

#endif  // TRANSFLOWER_METRICS_HPP

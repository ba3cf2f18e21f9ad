#ifndef TRANSFLOWER_CLI_HPP
#define TRANSFLOWER_CLI_HPP

#include <iosfwd>

#include "transflower/geodata.hpp"
#include "transflower/kvconfig.hpp"
#include "transflower/model.hpp"
#include "transflower/train.hpp"

namespace transflower::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

/// Every run-config key with its default.
KeyValues default_run_config();

/// defaults <- file <- flags, rightmost wins. Throws ValidationError on an
/// unknown key. `command` and `result.*` keys in the file are ignored so a
/// run_config.txt echo can be fed back in.
KeyValues resolve_run_config(const KeyValues& file, const KeyValues& flags);

SynthConfig synth_config_from(const KeyValues& kv);
/// `model.lambda_max = auto` takes the dataset's maximum pairwise distance.
ModelConfig model_config_from(const KeyValues& kv, double dataset_lambda_max);
TrainConfig train_config_from(const KeyValues& kv);
SplitRatios split_ratios_from(const KeyValues& kv);

/// Full command line. Returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace transflower::cli

#endif  // TRANSFLOWER_CLI_HPP

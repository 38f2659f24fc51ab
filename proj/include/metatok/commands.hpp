#pragma once

// Subcommand pipelines behind the command-line entry point. Each run writes
// into a fresh directory under <out>/<command>/ and echoes the resolved
// configuration there as config.txt.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "metatok/run_config.hpp"
#include "metatok/tasks.hpp"
#include "metatok/vocab.hpp"

namespace metatok {

struct CommandResult {
    std::filesystem::path run_dir;
    bool passed = true;  // false when a probe check failed
};

/// Throws ConfigError for an unknown command or bad settings; module errors
/// propagate with the command name prefixed.
CommandResult run_command(const std::string& command, const RunConfig& cfg, std::ostream& log);

/// Instances for one task and phase; split 0 is training data, 1 is evaluation.
std::vector<TaskInstance> generate_split(Task task, int phase, std::size_t count, std::uint64_t seed, int split);

/// --vocab file, else the checkpoint's copy, else the built-in vocabulary.
Vocab resolve_vocab(const RunConfig& cfg);

}  // namespace metatok

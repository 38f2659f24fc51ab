#pragma once

// Flat key=value run configuration shared by every command-line subcommand.
//
// File format: one `key = value` per line, `#` starts a comment. Every key
// has a default, unknown keys are errors and values are type-checked on set.
// Model keys carry the checkpoint manifest names; `seed` drives data
// generation, model initialisation and training order.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "metatok/ablation.hpp"
#include "metatok/model.hpp"
#include "metatok/probes.hpp"
#include "metatok/tasks.hpp"
#include "metatok/train.hpp"

namespace metatok {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class RunConfig {
  public:
    enum class Kind { Uint, Double, Bool, String, UintList, DoubleList };

    struct Entry {
        std::string key;
        Kind kind;
        std::string value;
        std::string help;
    };

    RunConfig();

    /// Throws ConfigError for an unknown key or a value of the wrong type.
    void set(const std::string& key, const std::string& value);
    const std::string& get(const std::string& key) const;
    bool has(const std::string& key) const;

    /// Applies a key=value file; errors name the file and line.
    void load_file(const std::filesystem::path& path);
    /// Parses `key=value` text with the file rules.
    void load_text(const std::string& text, const std::string& origin = "<text>");

    std::uint64_t get_uint(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<std::size_t> get_uint_list(const std::string& key) const;
    std::vector<double> get_double_list(const std::string& key) const;
    std::vector<std::string> get_string_list(const std::string& key) const;

    const std::vector<Entry>& entries() const { return entries_; }
    /// Every key in declaration order, one `key=value` per line.
    std::string render() const;

    // Typed views; vocab-dependent model fields are filled by the caller.
    ModelConfig model() const;
    TrainConfig train() const;
    VibOptions vib() const;
    std::vector<Task> tasks() const;
    std::vector<int> phases() const;
    std::vector<AblationMode> ablation_modes() const;
    MetaKernel kernel(const std::string& key) const;

  private:
    Entry& find(const std::string& key);
    const Entry& find(const std::string& key) const;
    std::vector<Entry> entries_;
};

inline const std::vector<std::string> kCommands = {"gen-data", "pretrain", "finetune", "eval",
                                                   "ablate",   "bench",    "probe",    "rd-sweep"};

/// Creates <out>/<command>/<UTC timestamp>[-N]/ without reusing an existing directory.
std::filesystem::path make_run_dir(const std::filesystem::path& out, const std::string& command);

}  // namespace metatok

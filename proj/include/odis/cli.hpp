#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "odis/data.hpp"
#include "odis/distill.hpp"

namespace odis {

/// Thrown for bad configuration files or flag values (exit code 1).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ValueKind { Size, Real, Bool, Text, SizeList, RealList };

struct KeySpec {
  std::string key;
  std::string default_value;
  ValueKind kind;
  std::string doc;
};

/// Flat `key = value` configuration over a fixed key set. One pair per line,
/// '#' starts a comment. Unknown keys and malformed values are rejected.
class FlatConfig {
 public:
  explicit FlatConfig(const std::vector<KeySpec>* schema);

  static FlatConfig parse(const std::vector<KeySpec>* schema, const std::string& text,
                          const std::string& origin = "<config>");
  static FlatConfig load(const std::vector<KeySpec>* schema,
                         const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  const std::string& text(const std::string& key) const;
  std::size_t size_value(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<std::size_t> sizes(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;

  /// Every key with its current value, documented, in schema order.
  std::string resolved() const;

  const std::map<std::string, std::string>& values() const { return values_; }
  friend bool operator==(const FlatConfig& a, const FlatConfig& b) {
    return a.values_ == b.values_;
  }

 private:
  const KeySpec& spec(const std::string& key) const;

  const std::vector<KeySpec>* schema_;
  std::map<std::string, std::string> values_;
};

/// Keys of a training / evaluation run.
const std::vector<KeySpec>& run_schema();
/// Keys of a scene-generation spec file.
const std::vector<KeySpec>& scene_schema();

FlatConfig default_run_config();
TrainConfig to_train_config(const FlatConfig& run);
SceneSpec to_scene_spec(const FlatConfig& spec);

/// Dataset of a run: samples plus the train/val split of the config.
struct RunData {
  std::vector<SceneSample> samples;
  Split split;
};
RunData load_run_data(const FlatConfig& run, const std::filesystem::path& dataset_dir);

/// Subcommands. Each returns the process exit code: 0 success, 1 usage or
/// configuration error, 2 numeric failure. Messages go to `err`.
int cmd_gen_data(const std::optional<std::filesystem::path>& spec_file,
                 const std::filesystem::path& out, std::size_t count, std::uint64_t seed,
                 std::ostream& err);

struct TrainCommand {
  std::filesystem::path config;
  std::filesystem::path out;
  std::optional<std::filesystem::path> resume;
  std::vector<std::string> overrides;  // key=value applied after the file
  std::uint64_t stop_after = 0;
};
int cmd_train(const TrainCommand& cmd, std::ostream& log, std::ostream& err);

struct EvalCommand {
  std::filesystem::path checkpoint;
  std::string protocol;
  bool use_masks = false;
  std::filesystem::path dataset;
  std::filesystem::path out;
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> features_out;
};
int cmd_eval(const EvalCommand& cmd, std::ostream& log, std::ostream& err);

inline const std::vector<std::string> kProtocols = {"knn", "linear", "dense"};

struct GradCheckEntry {
  std::string op;
  double max_rel_error = 0.0;
};

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double tolerance = 1e-4;
  /// Adds an op whose adjoint is deliberately wrong (negative control).
  bool corrupt_adjoint = false;
};

/// Central finite differences in double precision for every primitive and
/// the full training loss of a micro model (depth 2, D = 16, 4 x 4 grid).
std::vector<GradCheckEntry> run_grad_check(const GradCheckOptions& options);
int cmd_grad_check(const std::optional<std::filesystem::path>& config,
                   const GradCheckOptions& options, std::ostream& out, std::ostream& err);

}  // namespace odis

#pragma once

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "svmqch/config.hpp"
#include "svmqch/experiments.hpp"
#include "svmqch/io.hpp"

// Run bookkeeping: output directories, manifests and parameter sweeps.
namespace svmqch::runner {

using nlohmann::json;

inline constexpr const char* kVersion = "0.3.0";
inline constexpr const char* kOutputRootVariable = "SVMQCH_OUTPUT_ROOT";

enum ExitCode : int { kPass = 0, kAcceptanceFail = 1, kConfigError = 2, kRuntimeError = 3 };

inline std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// The configured directory, placed under $SVMQCH_OUTPUT_ROOT when that is set and the
/// directory is relative.
inline std::filesystem::path outputDirectory(const config::ExperimentConfig& c) {
  std::filesystem::path dir(c.output.directory);
  if (const char* root = std::getenv(kOutputRootVariable); root && *root && dir.is_relative())
    return std::filesystem::path(root) / dir;
  return dir;
}

struct RunOutcome {
  std::filesystem::path directory;
  json manifest;
  bool passed = false;
};

inline bool wants(const config::ExperimentConfig& c, const std::string& format) {
  return std::find(c.output.formats.begin(), c.output.formats.end(), format) != c.output.formats.end();
}

/// Runs one experiment and writes its outputs, then the manifest (last, atomically).
inline RunOutcome runExperiment(const config::ExperimentConfig& c, std::optional<std::filesystem::path> dir = {}) {
  config::validate(c);
  RunOutcome o;
  o.directory = dir ? *dir : outputDirectory(c);
  const std::string started = timestamp();
  const auto result = experiments::runFamily(c);
  std::filesystem::create_directories(o.directory);
  json files = json::object();
  if (wants(c, "csv"))
    for (const auto& [name, content] : result.files) {
      io::writeFileAtomic(o.directory / name, content);
      files[name] = io::hex64(io::fnv1a64(content));
    }
  if (wants(c, "json")) {
    const std::string s = result.summary.dump(2) + "\n";
    io::writeFileAtomic(o.directory / "summary.json", s);
    files["summary.json"] = io::hex64(io::fnv1a64(s));
  }
  io::writeFileAtomic(o.directory / "config.ini", config::serialize(c));

  json crit = json::array();
  for (const auto& k : result.criteria)
    crit.push_back({{"name", k.name}, {"value", k.value}, {"relation", k.relation}, {"threshold", k.threshold}, {"pass", k.pass}});
  o.passed = result.passed();
  o.manifest = {{"experiment", config::toString(c.family)},
                {"name", c.name},
                {"config_hash", io::hex64(config::hash(c))},
                {"seed", c.ensemble.seed},
                {"code_version", kVersion},
                {"started", started},
                {"finished", timestamp()},
                {"criteria", crit},
                {"passed", o.passed},
                {"residuals", result.summary},
                {"files", files}};
  io::writeFileAtomic(o.directory / "manifest.json", o.manifest.dump(2) + "\n");
  return o;
}

struct SweepChild {
  std::string value;
  int status = kPass;
  std::string error;
  RunOutcome outcome;
};

struct SweepOutcome {
  std::filesystem::path directory;
  std::vector<SweepChild> children;
  std::string summaryCsv;
  int status() const {
    int s = kPass;
    for (const auto& c : children) s = std::max(s, c.status);
    return s;
  }
};

/// One run per value of a scalar field, each in its own subdirectory, run concurrently.
/// A failing child is recorded and the others continue; the summary lists children in value order.
inline SweepOutcome sweep(const config::ExperimentConfig& base, const std::string& axis, const std::vector<std::string>& values,
                          unsigned concurrency = 0) {
  config::validate(base);
  {
    auto probe = base;
    (void)config::getField(probe, axis);
    if (!values.empty()) config::setScalar(probe, axis, values.front());
  }
  SweepOutcome out;
  out.directory = outputDirectory(base);
  if (values.empty()) {
    out.summaryCsv = axis + ",status\n";
    return out;
  }
  out.children.resize(values.size());
  auto job = [&](std::size_t i) {
    auto& child = out.children[i];
    child.value = values[i];
    try {
      auto c = base;
      config::setScalar(c, axis, values[i]);
      config::validate(c);
      child.outcome = runExperiment(c, out.directory / (axis + "=" + values[i]));
      child.status = child.outcome.passed ? kPass : kAcceptanceFail;
    } catch (const ConfigError& e) {
      child.status = kConfigError;
      child.error = e.what();
    } catch (const std::exception& e) {
      child.status = kRuntimeError;
      child.error = e.what();
    }
  };
  if (concurrency == 0) concurrency = std::max(1u, std::thread::hardware_concurrency());
  const unsigned nw = std::max(1u, std::min<unsigned>(concurrency, static_cast<unsigned>(std::max<std::size_t>(values.size(), 1))));
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < nw; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < values.size(); i += nw) job(i);
    });
  for (auto& t : pool) t.join();

  // Columns: value, status, then every criterion value seen, in first-seen order.
  std::vector<std::string> names;
  for (const auto& ch : out.children)
    if (ch.outcome.manifest.contains("criteria"))
      for (const auto& k : ch.outcome.manifest["criteria"]) {
        const std::string n = k["name"];
        if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
      }
  std::string csv = axis + ",status";
  for (const auto& n : names) csv += "," + n;
  csv += "\n";
  for (const auto& ch : out.children) {
    csv += ch.value + "," + std::to_string(ch.status);
    for (const auto& n : names) {
      std::string cell;
      if (ch.outcome.manifest.contains("criteria"))
        for (const auto& k : ch.outcome.manifest["criteria"])
          if (k["name"] == n) cell = io::formatDouble(k["value"].get<double>());
      csv += "," + cell;
    }
    csv += "\n";
  }
  out.summaryCsv = csv;
  std::filesystem::create_directories(out.directory);
  io::writeFileAtomic(out.directory / "sweep_summary.csv", csv);
  json errs = json::array();
  for (const auto& ch : out.children)
    errs.push_back({{"value", ch.value}, {"status", ch.status}, {"error", ch.error}});
  io::writeFileAtomic(out.directory / "sweep_manifest.json",
                      json{{"axis", axis}, {"config_hash", io::hex64(config::hash(base))}, {"children", errs}}.dump(2) + "\n");
  return out;
}

}  // namespace svmqch::runner

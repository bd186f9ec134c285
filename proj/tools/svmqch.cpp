#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "svmqch/runner.hpp"

using namespace svmqch;
using nlohmann::json;

namespace {

config::ExperimentConfig load(const std::string& path) {
  std::string text;
  try {
    text = io::readFile(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  return config::parse(text);
}

void report(const json& manifest) {
  for (const auto& k : manifest["criteria"])
    std::cout << (k["pass"].get<bool>() ? "PASS " : "FAIL ") << k["name"].get<std::string>() << " = "
              << io::formatDouble(k["value"].get<double>()) << " " << k["relation"].get<std::string>() << " "
              << io::formatDouble(k["threshold"].get<double>()) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"svmqch: stochastic-variational quantization and quantum-classical hybrid experiments"};
  app.require_subcommand(1);
  std::string configPath, axis;
  std::vector<std::string> values;
  unsigned concurrency = 0;

  auto* run = app.add_subcommand("run", "run one experiment");
  run->add_option("config", configPath, "INI config file")->required();
  auto* sweep = app.add_subcommand("sweep", "run one experiment per value of a scalar field");
  sweep->add_option("config", configPath, "INI config file")->required();
  sweep->add_option("--axis", axis, "field to vary, as section.key")->required();
  sweep->add_option("--values", values, "comma-separated values")->delimiter(',');
  sweep->add_option("--jobs", concurrency, "concurrent children (default: hardware threads)");
  auto* validate = app.add_subcommand("validate", "check a config without running it");
  validate->add_option("config", configPath, "INI config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : runner::kConfigError;
  }

  try {
    const auto cfg = load(configPath);
    if (*validate) {
      std::cout << "valid " << config::toString(cfg.family) << " config, hash " << io::hex64(config::hash(cfg)) << "\n";
      return runner::kPass;
    }
    if (*run) {
      const auto o = runner::runExperiment(cfg);
      report(o.manifest);
      std::cout << "outputs in " << o.directory.string() << "\n";
      return o.passed ? runner::kPass : runner::kAcceptanceFail;
    }
    const auto s = runner::sweep(cfg, axis, values, concurrency);
    std::cout << s.summaryCsv;
    for (const auto& ch : s.children)
      if (!ch.error.empty()) std::cerr << axis << "=" << ch.value << ": " << ch.error << "\n";
    return s.status();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return runner::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return runner::kRuntimeError;
  }
}

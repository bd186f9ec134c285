#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "svmqch/core.hpp"
#include "svmqch/geomphase.hpp"
#include "svmqch/io.hpp"

// Experiment configuration: INI text with sections. Every key has a default; the sections a
// family needs must still be present so a config states what it runs.
namespace svmqch::config {

enum class Family { SvmClosure, FieldQuantization, HybridDynamics, Ehrenfest, BerryLoop };

inline const std::vector<std::pair<Family, std::string>>& familyNames() {
  static const std::vector<std::pair<Family, std::string>> names{{Family::SvmClosure, "svm-closure"},
                                                                 {Family::FieldQuantization, "field-quantization"},
                                                                 {Family::HybridDynamics, "hybrid-dynamics"},
                                                                 {Family::Ehrenfest, "ehrenfest"},
                                                                 {Family::BerryLoop, "berry-loop"}};
  return names;
}

inline std::string toString(Family f) {
  for (const auto& [k, v] : familyNames())
    if (k == f) return v;
  return "?";
}

inline Family familyFromString(const std::string& s) {
  for (const auto& [k, v] : familyNames())
    if (v == s) return k;
  throw ConfigError("experiment.family: unknown family '" + s + "'");
}

inline std::string toString(geomphase::Curve c) {
  switch (c) {
    case geomphase::Curve::Circle: return "circle";
    case geomphase::Curve::Ellipse: return "ellipse";
    case geomphase::Curve::Segment: return "segment";
  }
  return "?";
}

inline geomphase::Curve curveFromString(const std::string& s) {
  if (s == "circle") return geomphase::Curve::Circle;
  if (s == "ellipse") return geomphase::Curve::Ellipse;
  if (s == "segment") return geomphase::Curve::Segment;
  throw ConfigError("protocol.curve: expected circle, ellipse or segment, got '" + s + "'");
}

struct ExperimentConfig {
  Family family = Family::SvmClosure;
  std::string name = "run";

  struct {
    double hbar = 1, c = 1, mass = 1, charge = 1, omega = 1;
  } physical;
  struct {
    int dimension = 3, n = 4;
    double spacing = 1;
  } lattice;
  struct {
    int keep = 0;  // 0: every mode (field-quantization) or the standing wave (hybrid families)
    int pointsPerMode = 40;
    double halfWidth = 10;
  } modes;
  struct {
    double dt = 1e-3;
    long steps = 1500;
    double tolerance = 1e-6;
    int substeps = 8;
    bool halving = false;
    long recordStride = 1;
  } integrator;
  struct {
    long paths = 100000;
    std::uint64_t seed = 1;
    int workers = 1;
  } ensemble;
  struct {
    double x0 = 1.0, p0 = 0.5, squeeze = 0.7;  // svm-closure initial Gaussian
    Vec3 position{0.32, 1.5, 0.5}, momentum{0.5, 0.0, 0.0};
    Vec3 trap{0, 0, 0};                        // trap frequencies, all 0 = free particle
    Vec3 trapCenter{0, 0, 0};
    double fieldA = 0.8, fieldPi = -0.3;       // coherent field amplitude
    double nodesLo = 0.3, nodesHi = 0.5;       // ehrenfest slice interval along x
    int nodes = 8;
  } state;
  struct {
    geomphase::Curve curve = geomphase::Curve::Circle;
    double radius = 0.7, radius2 = 0.7;
    double tGap = 100;  // loop duration times the level gap
    int samples = 256, turns = 1;
    bool reversed = false;
    double leakageTarget = 1e-2;
    double width = 0;  // > 0 adds the configuration-resolved table
    std::vector<double> offsets{-2, -1, 0, 1, 2};
  } protocol;
  struct {
    std::string directory = "out";
    std::vector<std::string> formats{"csv", "json"};
  } output;

  std::set<std::string> sections;  // sections present in the source text
};

namespace detail {

inline double parseNumber(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  if (used != text.size() || !std::isfinite(v)) throw ConfigError(key + ": expected a finite number, got '" + text + "'");
  return v;
}

inline long parseInteger(const std::string& key, const std::string& text) {
  const double v = parseNumber(key, text);
  if (v != std::floor(v) || std::abs(v) > 9e15) throw ConfigError(key + ": expected an integer, got '" + text + "'");
  return static_cast<long>(v);
}

inline bool parseBool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

inline std::vector<std::string> splitList(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

inline std::vector<double> parseNumbers(const std::string& key, const std::string& text) {
  std::vector<double> out;
  for (const auto& s : splitList(text)) out.push_back(parseNumber(key, s));
  return out;
}

inline Vec3 parseVec3(const std::string& key, const std::string& text) {
  const auto v = parseNumbers(key, text);
  if (v.size() != 3) throw ConfigError(key + ": expected 3 comma-separated numbers");
  return {v[0], v[1], v[2]};
}

inline std::string joinNumbers(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + io::formatDouble(v[i]);
  return s;
}

struct Field {
  std::string section, key;
  bool scalar;  // sweepable
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::string path() const { return section + "." + key; }
};

inline std::string num(double v) { return io::formatDouble(v); }

#define SVMQCH_REAL(sec, k, member)                                                                            \
  Field{sec, k, true, [](const ExperimentConfig& c) { return num(c.member); },                                 \
        [](ExperimentConfig& c, const std::string& t) { c.member = parseNumber(std::string(sec) + "." + k, t); }}
#define SVMQCH_INT(sec, k, member)                                                                             \
  Field{sec, k, true, [](const ExperimentConfig& c) { return std::to_string(c.member); },                      \
        [](ExperimentConfig& c, const std::string& t) {                                                        \
          c.member = static_cast<decltype(c.member)>(parseInteger(std::string(sec) + "." + k, t));             \
        }}
#define SVMQCH_BOOL(sec, k, member)                                                                            \
  Field{sec, k, true, [](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); },      \
        [](ExperimentConfig& c, const std::string& t) { c.member = parseBool(std::string(sec) + "." + k, t); }}
#define SVMQCH_VEC(sec, k, member)                                                                             \
  Field{sec, k, false, [](const ExperimentConfig& c) { return joinNumbers({c.member[0], c.member[1], c.member[2]}); }, \
        [](ExperimentConfig& c, const std::string& t) { c.member = parseVec3(std::string(sec) + "." + k, t); }}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      Field{"experiment", "family", false, [](const ExperimentConfig& c) { return toString(c.family); },
            [](ExperimentConfig& c, const std::string& t) { c.family = familyFromString(t); }},
      Field{"experiment", "name", false, [](const ExperimentConfig& c) { return c.name; },
            [](ExperimentConfig& c, const std::string& t) { c.name = t; }},
      SVMQCH_REAL("physical", "hbar", physical.hbar),
      SVMQCH_REAL("physical", "c", physical.c),
      SVMQCH_REAL("physical", "mass", physical.mass),
      SVMQCH_REAL("physical", "charge", physical.charge),
      SVMQCH_REAL("physical", "omega", physical.omega),
      SVMQCH_INT("lattice", "dimension", lattice.dimension),
      SVMQCH_INT("lattice", "n", lattice.n),
      SVMQCH_REAL("lattice", "spacing", lattice.spacing),
      SVMQCH_INT("modes", "keep", modes.keep),
      SVMQCH_INT("modes", "points_per_mode", modes.pointsPerMode),
      SVMQCH_REAL("modes", "half_width", modes.halfWidth),
      SVMQCH_REAL("integrator", "dt", integrator.dt),
      SVMQCH_INT("integrator", "steps", integrator.steps),
      SVMQCH_REAL("integrator", "tolerance", integrator.tolerance),
      SVMQCH_INT("integrator", "substeps", integrator.substeps),
      SVMQCH_BOOL("integrator", "halving", integrator.halving),
      SVMQCH_INT("integrator", "record_stride", integrator.recordStride),
      SVMQCH_INT("ensemble", "paths", ensemble.paths),
      SVMQCH_INT("ensemble", "seed", ensemble.seed),
      SVMQCH_INT("ensemble", "workers", ensemble.workers),
      SVMQCH_REAL("state", "x0", state.x0),
      SVMQCH_REAL("state", "p0", state.p0),
      SVMQCH_REAL("state", "squeeze", state.squeeze),
      SVMQCH_VEC("state", "position", state.position),
      SVMQCH_VEC("state", "momentum", state.momentum),
      SVMQCH_VEC("state", "trap", state.trap),
      SVMQCH_VEC("state", "trap_center", state.trapCenter),
      SVMQCH_REAL("state", "field_a", state.fieldA),
      SVMQCH_REAL("state", "field_pi", state.fieldPi),
      SVMQCH_REAL("state", "nodes_lo", state.nodesLo),
      SVMQCH_REAL("state", "nodes_hi", state.nodesHi),
      SVMQCH_INT("state", "nodes", state.nodes),
      Field{"protocol", "curve", false, [](const ExperimentConfig& c) { return toString(c.protocol.curve); },
            [](ExperimentConfig& c, const std::string& t) { c.protocol.curve = curveFromString(t); }},
      SVMQCH_REAL("protocol", "radius", protocol.radius),
      SVMQCH_REAL("protocol", "radius2", protocol.radius2),
      SVMQCH_REAL("protocol", "t_gap", protocol.tGap),
      SVMQCH_INT("protocol", "samples", protocol.samples),
      SVMQCH_INT("protocol", "turns", protocol.turns),
      SVMQCH_BOOL("protocol", "reversed", protocol.reversed),
      SVMQCH_REAL("protocol", "leakage_target", protocol.leakageTarget),
      SVMQCH_REAL("protocol", "width", protocol.width),
      Field{"protocol", "offsets", false, [](const ExperimentConfig& c) { return joinNumbers(c.protocol.offsets); },
            [](ExperimentConfig& c, const std::string& t) { c.protocol.offsets = parseNumbers("protocol.offsets", t); }},
      Field{"output", "directory", false, [](const ExperimentConfig& c) { return c.output.directory; },
            [](ExperimentConfig& c, const std::string& t) { c.output.directory = t; }},
      Field{"output", "formats", false,
            [](const ExperimentConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.output.formats.size(); ++i) s += (i ? ", " : "") + c.output.formats[i];
              return s;
            },
            [](ExperimentConfig& c, const std::string& t) { c.output.formats = splitList(t); }},
  };
  return table;
}

#undef SVMQCH_REAL
#undef SVMQCH_INT
#undef SVMQCH_BOOL
#undef SVMQCH_VEC

inline const Field& field(const std::string& path) {
  for (const auto& f : fields())
    if (f.path() == path) return f;
  throw ConfigError("unknown config field '" + path + "'");
}

}  // namespace detail

inline std::vector<std::string> requiredSections(Family f) {
  switch (f) {
    case Family::SvmClosure: return {"physical", "integrator", "ensemble", "state"};
    case Family::FieldQuantization: return {"lattice"};
    case Family::HybridDynamics: return {"physical", "lattice", "integrator", "state"};
    case Family::Ehrenfest: return {"physical", "lattice", "integrator", "state"};
    case Family::BerryLoop: return {"physical", "protocol"};
  }
  return {};
}

inline void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  for (const auto& s : requiredSections(c.family))
    need(c.sections.count(s) > 0, "missing section [" + s + "] required by family " + toString(c.family));
  need(c.physical.hbar > 0, "physical.hbar must be > 0");
  need(c.physical.c > 0, "physical.c must be > 0");
  need(c.physical.mass > 0, "physical.mass must be > 0");
  need(c.physical.omega > 0, "physical.omega must be > 0");
  need(c.lattice.dimension >= 1 && c.lattice.dimension <= 3, "lattice.dimension must be 1, 2 or 3");
  need(c.lattice.n >= 3, "lattice.n must be >= 3");
  need(c.lattice.spacing > 0, "lattice.spacing must be > 0");
  need(c.modes.keep >= 0, "modes.keep must be >= 0");
  need(c.modes.pointsPerMode >= 4, "modes.points_per_mode must be >= 4");
  need(c.modes.halfWidth > 0, "modes.half_width must be > 0");
  need(c.integrator.dt > 0, "integrator.dt must be > 0");
  need(c.integrator.steps >= 1, "integrator.steps must be >= 1");
  need(c.integrator.tolerance > 0, "integrator.tolerance must be > 0");
  need(c.integrator.substeps >= 1, "integrator.substeps must be >= 1");
  need(c.integrator.recordStride >= 1, "integrator.record_stride must be >= 1");
  need(c.ensemble.workers >= 1, "ensemble.workers must be >= 1");
  need(c.ensemble.paths >= 1, "ensemble.paths must be >= 1");
  need(c.state.squeeze > 0, "state.squeeze must be > 0");
  need(c.state.nodes >= 3, "state.nodes must be >= 3");
  need(c.state.nodesHi > c.state.nodesLo, "state.nodes_hi must exceed state.nodes_lo");
  need(c.protocol.radius > 0 && c.protocol.radius2 > 0, "protocol.radius and protocol.radius2 must be > 0");
  need(c.protocol.tGap > 0, "protocol.t_gap must be > 0");
  need(c.protocol.samples >= 16, "protocol.samples must be >= 16");
  need(c.protocol.turns >= 1, "protocol.turns must be >= 1");
  need(c.protocol.leakageTarget > 0 && c.protocol.leakageTarget < 1, "protocol.leakage_target must lie in (0, 1)");
  need(c.protocol.width >= 0, "protocol.width must be >= 0");
  need(!c.output.directory.empty(), "output.directory must not be empty");
  for (const auto& f : c.output.formats) need(f == "csv" || f == "json", "output.formats: unknown format '" + f + "'");
  if (c.family == Family::SvmClosure) {
    need(c.ensemble.paths >= 100, "ensemble.paths must be >= 100 for svm-closure");
    need(c.integrator.steps % 3 == 0, "integrator.steps must be a multiple of 3 for svm-closure");
  }
  if (c.family == Family::HybridDynamics || c.family == Family::Ehrenfest)
    need(c.lattice.dimension == 3, "lattice.dimension must be 3 for the hybrid families");
}

inline ExperimentConfig parse(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.message() + " at line " + std::to_string(e.line()));
  }
  ExperimentConfig c;
  bool haveFamily = false;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("key '" + section + "' must belong to a section");
    c.sections.insert(section);
    for (const auto& [key, value] : body) {
      const auto& f = detail::field(section + "." + key);
      f.set(c, value.get_value<std::string>());
      if (f.path() == "experiment.family") haveFamily = true;
    }
  }
  if (!haveFamily) throw ConfigError("experiment.family is required");
  validate(c);
  return c;
}

/// Canonical INI text: every field, fixed order, shortest round-trip numbers.
inline std::string serialize(const ExperimentConfig& c) {
  std::string out, current;
  for (const auto& f : detail::fields()) {
    if (f.section != current) {
      out += (current.empty() ? "" : "\n") + std::string("[") + f.section + "]\n";
      current = f.section;
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

inline std::uint64_t hash(const ExperimentConfig& c) { return io::fnv1a64(serialize(c)); }

/// Sets a scalar field named "section.key" from text; used by sweeps.
inline void setScalar(ExperimentConfig& c, const std::string& path, const std::string& value) {
  const auto& f = detail::field(path);
  if (!f.scalar) throw ConfigError("'" + path + "' is not a scalar config field");
  f.set(c, value);
}

inline std::string getField(const ExperimentConfig& c, const std::string& path) { return detail::field(path).get(c); }

}  // namespace svmqch::config

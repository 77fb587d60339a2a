#include "lsst/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "lsst/errors.hpp"

namespace lsst {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  try {
    if (!v.empty() && v.front() == '-') throw std::invalid_argument("negative");
    const auto x = std::stoull(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  try {
    const double x = std::stod(v, &used);
    if (used == v.size()) return x;
  } catch (const std::exception&) {
  }
  throw ConfigError(key + ": expected a number, got '" + v + "'");
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (model.vocab != 256) throw ConfigError("byte corpora need vocab = 256");
  if (steps == 0) throw ConfigError("steps must be positive");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (sequence_parallel == 0 || data_parallel == 0) {
    throw ConfigError("sequence_parallel and data_parallel must be positive");
  }
  if (model.seq_len % sequence_parallel != 0) {
    throw ConfigError("seq_len " + std::to_string(model.seq_len) +
                      " is not divisible by sequence_parallel " +
                      std::to_string(sequence_parallel));
  }
  if (engine == EngineKind::kSequential && (sequence_parallel != 1 || data_parallel != 1)) {
    throw ConfigError("the sequential engine runs on one worker: set sequence_parallel = 1");
  }
  if (engine != EngineKind::kHybrid && data_parallel != 1) {
    throw ConfigError("data_parallel > 1 needs the hybrid engine");
  }
  if (!fuse && engine == EngineKind::kBaseline) {
    throw ConfigError("fuse applies to the lss and hybrid engines only");
  }
}

TrainOptions RunConfig::train_options() const {
  TrainOptions o;
  o.steps = steps;
  o.lr = lr;
  o.optimizer = optimizer;
  o.fuse = fuse;
  o.dropout.rate = model.dropout;
  o.dropout.enabled = model.dropout > 0.0;
  o.dropout.master_seed = seed;
  return o;
}

void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  const std::string v = trim(value);
  if (key == "engine") {
    c.engine = parse_engine(v);
  } else if (key == "embed") {
    c.model.embed = parse_uint(key, v);
  } else if (key == "layers") {
    c.model.layers = parse_uint(key, v);
  } else if (key == "heads") {
    c.model.heads = parse_uint(key, v);
  } else if (key == "ffn_hidden") {
    c.model.ffn_hidden = parse_uint(key, v);
  } else if (key == "vocab") {
    c.model.vocab = parse_uint(key, v);
  } else if (key == "seq_len") {
    c.model.seq_len = parse_uint(key, v);
  } else if (key == "batch") {
    c.model.batch = parse_uint(key, v);
  } else if (key == "causal") {
    c.model.causal = parse_bool(key, v);
  } else if (key == "precision") {
    c.model.precision = parse_precision(v);
  } else if (key == "dropout") {
    c.model.dropout = parse_double(key, v);
  } else if (key == "sequence_parallel") {
    c.sequence_parallel = parse_uint(key, v);
  } else if (key == "data_parallel") {
    c.data_parallel = parse_uint(key, v);
  } else if (key == "fuse") {
    c.fuse = parse_bool(key, v);
  } else if (key == "seed") {
    c.seed = parse_uint(key, v);
  } else if (key == "steps") {
    c.steps = parse_uint(key, v);
  } else if (key == "lr") {
    c.lr = parse_double(key, v);
  } else if (key == "optimizer") {
    c.optimizer = parse_optimizer(v);
  } else if (key == "dataset") {
    c.dataset = v;
  } else if (key == "synthetic_bytes") {
    c.synthetic_bytes = parse_uint(key, v);
  } else if (key == "output_dir") {
    c.output_dir = v;
  } else {
    throw ConfigError("unknown config key '" + key + "'");
  }
}

void apply_config_stream(RunConfig& config, std::istream& in) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    }
    apply_setting(config, trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  apply_config_stream(config, in);
}

void apply_environment(RunConfig& config) {
  if (const char* dir = std::getenv(kOutputDirEnv); dir != nullptr && *dir != '\0') {
    config.output_dir = dir;
  }
}

void write_run_config(std::ostream& out, const RunConfig& c) {
  out << "engine = " << to_string(c.engine) << '\n'
      << "embed = " << c.model.embed << '\n'
      << "layers = " << c.model.layers << '\n'
      << "heads = " << c.model.heads << '\n'
      << "ffn_hidden = " << c.model.ffn_hidden << '\n'
      << "vocab = " << c.model.vocab << '\n'
      << "seq_len = " << c.model.seq_len << '\n'
      << "batch = " << c.model.batch << '\n'
      << "causal = " << (c.model.causal ? "true" : "false") << '\n'
      << "precision = " << to_string(c.model.precision) << '\n'
      << "dropout = " << format_double(c.model.dropout) << '\n'
      << "sequence_parallel = " << c.sequence_parallel << '\n'
      << "data_parallel = " << c.data_parallel << '\n'
      << "fuse = " << (c.fuse ? "true" : "false") << '\n'
      << "seed = " << c.seed << '\n'
      << "steps = " << c.steps << '\n'
      << "lr = " << format_double(c.lr) << '\n'
      << "optimizer = " << to_string(c.optimizer) << '\n'
      << "dataset = " << c.dataset.string() << '\n'
      << "synthetic_bytes = " << c.synthetic_bytes << '\n'
      << "output_dir = " << c.output_dir.string() << '\n';
}

}  // namespace lsst

#include "glimpse/config.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace glimpse {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw std::invalid_argument("config: bad value '" + value + "' for key '" + key + "'");
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(value, &pos);
    if (pos != value.size()) bad_value(key, value);
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, value);
  } catch (const std::out_of_range&) {
    bad_value(key, value);
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) bad_value(key, value);
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, value);
  } catch (const std::out_of_range&) {
    bad_value(key, value);
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) bad_value(key, value);
    return v;
  } catch (const std::invalid_argument&) {
    bad_value(key, value);
  } catch (const std::out_of_range&) {
    bad_value(key, value);
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "no") return false;
  bad_value(key, value);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "full_side") model.full_side = parse_int(key, value);
  else if (key == "low_side") model.low_side = parse_int(key, value);
  else if (key == "patch_side") model.patch_side = parse_int(key, value);
  else if (key == "scales") model.scales = parse_int(key, value);
  else if (key == "classes") model.classes = parse_int(key, value);
  else if (key == "hidden") model.hidden = parse_int(key, value);
  else if (key == "glimpses") model.num_glimpses = parse_int(key, value);
  else if (key == "weight_sharing") model.weight_sharing = parse_bool(key, value);
  else if (key == "lambda") hyper.lambda = parse_double(key, value);
  else if (key == "gamma") hyper.gamma = parse_double(key, value);
  else if (key == "sigma_sq") hyper.sigma_sq = parse_double(key, value);
  else if (key == "lr") hyper.lr = parse_double(key, value);
  else if (key == "momentum") hyper.momentum = parse_double(key, value);
  else if (key == "batch") hyper.batch = parse_int(key, value);
  else if (key == "epochs") hyper.epochs = parse_int(key, value);
  else if (key == "grid_side") hyper.grid_side = parse_int(key, value);
  else if (key == "grid_step") hyper.grid_step = parse_int(key, value);
  else if (key == "fine_tune") hyper.fine_tune_enabled = parse_bool(key, value);
  else if (key == "fine_tune_epochs") hyper.fine_tune_epochs = parse_int(key, value);
  else if (key == "diversity") hyper.diversity_enabled = parse_bool(key, value);
  else if (key == "contrastive") hyper.contrastive_enabled = parse_bool(key, value);
  else if (key == "workers") hyper.workers = parse_int(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "baseline_side") baseline_side = parse_int(key, value);
  else if (key == "train_images") train_images = value;
  else if (key == "train_labels") train_labels = value;
  else if (key == "test_images") test_images = value;
  else if (key == "test_labels") test_labels = value;
  else if (key == "out_dir") out_dir = value;
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

void RunConfig::validate() const {
  model.validate();
  hyper.validate();
  GLIMPSE_REQUIRE(baseline_side >= 0, "config: baseline_side must be >= 0");
  GLIMPSE_REQUIRE(!out_dir.empty(), "config: out_dir must not be empty");
}

std::string RunConfig::to_kv() const {
  std::ostringstream os;
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "full_side=" << model.full_side << "\n";
  os << "low_side=" << model.low_side << "\n";
  os << "patch_side=" << model.patch_side << "\n";
  os << "scales=" << model.scales << "\n";
  os << "classes=" << model.classes << "\n";
  os << "hidden=" << model.hidden << "\n";
  os << "glimpses=" << model.num_glimpses << "\n";
  os << "weight_sharing=" << (model.weight_sharing ? 1 : 0) << "\n";
  os << "lambda=" << num(hyper.lambda) << "\n";
  os << "gamma=" << num(hyper.gamma) << "\n";
  os << "sigma_sq=" << num(hyper.sigma_sq) << "\n";
  os << "lr=" << num(hyper.lr) << "\n";
  os << "momentum=" << num(hyper.momentum) << "\n";
  os << "batch=" << hyper.batch << "\n";
  os << "epochs=" << hyper.epochs << "\n";
  os << "grid_side=" << hyper.grid_side << "\n";
  os << "grid_step=" << hyper.grid_step << "\n";
  os << "fine_tune=" << (hyper.fine_tune_enabled ? 1 : 0) << "\n";
  os << "fine_tune_epochs=" << hyper.fine_tune_epochs << "\n";
  os << "diversity=" << (hyper.diversity_enabled ? 1 : 0) << "\n";
  os << "contrastive=" << (hyper.contrastive_enabled ? 1 : 0) << "\n";
  os << "workers=" << hyper.workers << "\n";
  os << "seed=" << seed << "\n";
  os << "baseline_side=" << baseline_side << "\n";
  os << "train_images=" << train_images << "\n";
  os << "train_labels=" << train_labels << "\n";
  os << "test_images=" << test_images << "\n";
  os << "test_labels=" << test_labels << "\n";
  os << "out_dir=" << out_dir << "\n";
  return os.str();
}

RunConfig RunConfig::from_string(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  " is not key=value: '" + line + "'");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return from_string(os.str());
}

}  // namespace glimpse

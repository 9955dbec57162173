#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace cacl {

/// Training configuration. Serialized as flat `key = value` text; every field
/// below is a documented key.
struct TrainConfig {
  // loss weights
  double w_recon = 1.0;
  double w_commit = 1.0;
  double w_codebook = 0.3;
  double w_map = 0.1;
  double w_cls = 1.0;
  double beta = 0.25;
  double margin = 1.0;
  std::string codebook_loss_form = "hinge";  // hinge | signed

  // optimization
  double lr_generator = 2e-4;
  double lr_classifier = 2e-4;
  int batch_size = 8;
  int steps = 2000;
  std::uint64_t seed = 42;
  int checkpoint_interval = 500;
  int eval_interval = 100;

  // model
  int num_shared = 32;
  int num_class = 32;
  int dim = 64;
  int hidden = 64;
  double ema_decay = 0.99;
  std::string classifier = "desk";  // desk | resnet18

  // pools, dead codes, augmentation
  int pool_capacity = 50;
  int dead_code_threshold = 0;
  int dead_code_interval = 250;
  int feature_bank_capacity = 1024;
  bool augment_flips = true;
  bool class_aware_ema = true;

  void validate() const {
    auto nonneg = [](double v, const char* n) {
      if (v < 0) throw std::invalid_argument(std::string("config: ") + n + " must be >= 0");
    };
    nonneg(w_recon, "w_recon");
    nonneg(w_commit, "w_commit");
    nonneg(w_codebook, "w_codebook");
    nonneg(w_map, "w_map");
    nonneg(w_cls, "w_cls");
    nonneg(beta, "beta");
    nonneg(margin, "margin");
    if (codebook_loss_form != "hinge" && codebook_loss_form != "signed")
      throw std::invalid_argument("config: codebook_loss_form must be hinge or signed");
    if (classifier != "desk" && classifier != "resnet18")
      throw std::invalid_argument("config: classifier must be desk or resnet18");
    if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
    if (steps < 1) throw std::invalid_argument("config: steps must be >= 1");
    if (num_shared < 1 || num_class < 1 || dim < 1 || hidden < 1)
      throw std::invalid_argument("config: model sizes must be >= 1");
    if (!(ema_decay > 0.0 && ema_decay < 1.0))
      throw std::invalid_argument("config: ema_decay must lie in (0,1)");
    if (pool_capacity < 1) throw std::invalid_argument("config: pool_capacity must be >= 1");
    if (checkpoint_interval < 1 || eval_interval < 1 || dead_code_interval < 1 ||
        feature_bank_capacity < 1)
      throw std::invalid_argument("config: intervals and capacities must be >= 1");
    if (dead_code_threshold < 0)
      throw std::invalid_argument("config: dead_code_threshold must be >= 0");
  }

  template <class F>
  void visit_fields(F&& f) {
    f("w_recon", w_recon);
    f("w_commit", w_commit);
    f("w_codebook", w_codebook);
    f("w_map", w_map);
    f("w_cls", w_cls);
    f("beta", beta);
    f("margin", margin);
    f("codebook_loss_form", codebook_loss_form);
    f("lr_generator", lr_generator);
    f("lr_classifier", lr_classifier);
    f("batch_size", batch_size);
    f("steps", steps);
    f("seed", seed);
    f("checkpoint_interval", checkpoint_interval);
    f("eval_interval", eval_interval);
    f("num_shared", num_shared);
    f("num_class", num_class);
    f("dim", dim);
    f("hidden", hidden);
    f("ema_decay", ema_decay);
    f("classifier", classifier);
    f("pool_capacity", pool_capacity);
    f("dead_code_threshold", dead_code_threshold);
    f("dead_code_interval", dead_code_interval);
    f("feature_bank_capacity", feature_bank_capacity);
    f("augment_flips", augment_flips);
    f("class_aware_ema", class_aware_ema);
  }

  void set(const std::string& key, const std::string& value) {
    bool found = false;
    visit_fields([&](const char* name, auto& field) {
      if (key != name) return;
      found = true;
      using T = std::decay_t<decltype(field)>;
      std::istringstream ss(value);
      if constexpr (std::is_same_v<T, bool>) {
        if (value == "true" || value == "1") field = true;
        else if (value == "false" || value == "0") field = false;
        else throw std::invalid_argument("config: bad boolean for " + key + ": " + value);
      } else if constexpr (std::is_same_v<T, std::string>) {
        field = value;
      } else {
        if (!(ss >> field) || !(ss >> std::ws).eof())
          throw std::invalid_argument("config: bad value for " + key + ": " + value);
      }
    });
    if (!found) throw std::invalid_argument("config: unknown key: " + key);
  }

  std::string snapshot() {
    std::ostringstream out;
    out.precision(17);
    visit_fields([&](const char* name, auto& field) {
      if constexpr (std::is_same_v<std::decay_t<decltype(field)>, bool>)
        out << name << " = " << (field ? "true" : "false") << '\n';
      else
        out << name << " = " << field << '\n';
    });
    return out.str();
  }

  void apply_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        const auto b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
      };
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config: expected key = value at line " +
                                    std::to_string(lineno));
      set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
  }

  static TrainConfig from_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    TrainConfig cfg;
    cfg.apply_text(buf.str());
    return cfg;
  }
};

}  // namespace cacl

#include "leakprobe/toylab/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "leakprobe/error.hpp"

namespace leakprobe::toylab {

using ojson = nlohmann::ordered_json;

namespace {

ojson matrix_to_json(const Matrix& m) {
  ojson rows = ojson::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    ojson row = ojson::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

ojson vector_to_json(const RowVector& v) {
  ojson out = ojson::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

Matrix matrix_from_json(const ojson& j, Eigen::Index rows, Eigen::Index cols, const char* name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows) {
    throw ConfigError(std::string("checkpoint: ") + name + " has wrong row count");
  }
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto& row = j[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw ConfigError(std::string("checkpoint: ") + name + " has wrong column count");
    }
    for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = row[static_cast<std::size_t>(k)].get<double>();
  }
  return m;
}

RowVector vector_from_json(const ojson& j, Eigen::Index size, const char* name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != size) {
    throw ConfigError(std::string("checkpoint: ") + name + " has wrong length");
  }
  RowVector v(size);
  for (Eigen::Index i = 0; i < size; ++i) v(i) = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

void check_format(const ojson& j, std::string_view expected) {
  if (!j.is_object() || !j.contains("format") || j["format"] != expected) {
    throw ConfigError("checkpoint: expected format '" + std::string(expected) + "'");
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

ojson parse_json(const std::string& text, const std::string& path) {
  try {
    return ojson::parse(text);
  } catch (const ojson::parse_error& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

}  // namespace

ojson model_to_json(const ToyLM& model) {
  ojson j = ojson::object();
  j["format"] = kModelFormat;
  ojson cfg = ojson::object();
  cfg["vocab"] = model.config.vocab;
  cfg["embed"] = model.config.embed;
  cfg["hidden"] = model.config.hidden;
  cfg["window"] = model.config.window;
  cfg["seed"] = model.config.seed;
  j["config"] = std::move(cfg);
  j["E"] = matrix_to_json(model.E);
  j["W_a"] = matrix_to_json(model.W_a);
  j["W_u"] = matrix_to_json(model.W_u);
  j["b_u"] = vector_to_json(model.b_u);
  j["W_d"] = matrix_to_json(model.W_d);
  j["b_o"] = vector_to_json(model.b_o);
  return j;
}

ToyLM model_from_json(const ojson& j) {
  check_format(j, kModelFormat);
  try {
    ToyLMConfig cfg;
    const auto& c = j.at("config");
    cfg.vocab = c.at("vocab").get<int>();
    cfg.embed = c.at("embed").get<int>();
    cfg.hidden = c.at("hidden").get<int>();
    cfg.window = c.at("window").get<int>();
    cfg.seed = c.at("seed").get<std::uint64_t>();
    cfg.validate();
    ToyLM m;
    m.config = cfg;
    m.E = matrix_from_json(j.at("E"), cfg.vocab, cfg.embed, "E");
    m.W_a = matrix_from_json(j.at("W_a"), cfg.embed, cfg.embed, "W_a");
    m.W_u = matrix_from_json(j.at("W_u"), cfg.embed, cfg.hidden, "W_u");
    m.b_u = vector_from_json(j.at("b_u"), cfg.hidden, "b_u");
    m.W_d = matrix_from_json(j.at("W_d"), cfg.hidden, cfg.embed, "W_d");
    m.b_o = vector_from_json(j.at("b_o"), cfg.vocab, "b_o");
    if (!m.finite()) throw ConfigError("checkpoint: non-finite parameters");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
}

ojson adapters_to_json(const LoRAAdapterSet& adapters) {
  ojson j = ojson::object();
  j["format"] = kAdapterFormat;
  j["rank"] = adapters.rank;
  j["alpha"] = adapters.alpha;
  ojson mods = ojson::object();
  for (Module m : kAllModules) {
    const LoRAFactor* f = adapters.find(m);
    if (!f) continue;
    ojson e = ojson::object();
    e["A"] = matrix_to_json(f->A);
    e["B"] = matrix_to_json(f->B);
    mods[std::string(to_string(m))] = std::move(e);
  }
  j["modules"] = std::move(mods);
  return j;
}

LoRAAdapterSet adapters_from_json(const ojson& j) {
  check_format(j, kAdapterFormat);
  try {
    LoRAAdapterSet ad;
    ad.rank = j.at("rank").get<int>();
    ad.alpha = j.at("alpha").get<double>();
    if (ad.rank < 1) throw ConfigError("checkpoint: rank must be >= 1");
    for (const auto& [name, e] : j.at("modules").items()) {
      Module m = parse_module(name);
      const auto& A = e.at("A");
      const auto& B = e.at("B");
      auto in = static_cast<Eigen::Index>(A.size());
      auto out = B.empty() ? Eigen::Index{0} : static_cast<Eigen::Index>(B[0].size());
      ad.factors[static_cast<int>(m)] =
          LoRAFactor{matrix_from_json(A, in, ad.rank, "A"), matrix_from_json(B, ad.rank, out, "B")};
    }
    return ad;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("checkpoint: ") + e.what());
  }
}

void save_model(const std::string& path, const ToyLM& model) {
  write_file(path, model_to_json(model).dump() + "\n");
}

ToyLM load_model(const std::string& path) { return model_from_json(parse_json(read_file(path), path)); }

void save_adapters(const std::string& path, const LoRAAdapterSet& adapters) {
  write_file(path, adapters_to_json(adapters).dump() + "\n");
}

LoRAAdapterSet load_adapters(const std::string& path) {
  return adapters_from_json(parse_json(read_file(path), path));
}

}  // namespace leakprobe::toylab

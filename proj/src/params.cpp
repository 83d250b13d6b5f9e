#include "advtpp/params.hpp"

#include "advtpp/errors.hpp"
#include "advtpp/io.hpp"
#include "json.hpp"

namespace advtpp {

using nlohmann::json;

void accumulate(GradList& into, const GradList& g, double weight) {
  if (into.size() != g.size()) throw ShapeError("gradient lists differ in size");
  for (std::size_t k = 0; k < g.size(); ++k) {
    for (std::size_t i = 0; i < g[k].size(); ++i) into[k][i] += weight * g[k][i];
  }
}

double global_norm(const GradList& g) {
  double s = 0.0;
  for (const auto& v : g) {
    for (double x : v) s += x * x;
  }
  return std::sqrt(s);
}

bool all_finite(const GradList& g) {
  for (const auto& v : g) {
    for (double x : v) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

void Adam::clip(GradList& grads) const {
  if (cfg_.clip <= 0) return;
  const double norm = global_norm(grads);
  if (norm <= cfg_.clip) return;
  const double f = cfg_.clip / norm;
  for (auto& v : grads) {
    for (double& x : v) x *= f;
  }
}

ad::Tensor Initializer::normal(ad::Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  ad::Tensor z = ad::Tensor::zeros(shape);
  std::vector<double> v(z.size());
  for (double& x : v) x = stddev > 0 ? dist(rng_) : 0.0;
  return ad::Tensor(std::move(shape), std::move(v));
}

void save_checkpoint(const RawCheckpoint& ckpt,
                     const std::filesystem::path& path) {
  json params = json::object();
  for (const auto& [name, t] : ckpt.tensors) {
    params[name] = {{"shape", t.shape()},
                    {"values", std::vector<double>(t.values().begin(),
                                                   t.values().end())}};
  }
  json doc{{"version", kCheckpointVersion},
           {"kind", ckpt.kind},
           {"meta", ckpt.meta},
           {"params", std::move(params)}};
  write_atomic(path, doc.dump(1) + "\n");
}

RawCheckpoint load_checkpoint(const std::filesystem::path& path,
                              const std::string& expected_kind) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": invalid checkpoint: " + e.what());
  }
  if (doc.value("version", -1) != kCheckpointVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version");
  }
  RawCheckpoint c;
  c.kind = doc.value("kind", std::string{});
  if (c.kind != expected_kind) {
    throw DataError(path.string() + ": expected a " + expected_kind +
                    " checkpoint, found '" + c.kind + "'");
  }
  try {
    c.meta = doc.at("meta").get<std::map<std::string, double>>();
    for (const auto& [name, entry] : doc.at("params").items()) {
      c.tensors.emplace(name,
                        ad::Tensor(entry.at("shape").get<ad::Shape>(),
                                   entry.at("values").get<std::vector<double>>()));
    }
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed checkpoint: " + e.what());
  } catch (const ShapeError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return c;
}

void assign_from(const RawCheckpoint& ckpt, const std::string& name,
                 ad::Tensor& target) {
  auto it = ckpt.tensors.find(name);
  if (it == ckpt.tensors.end()) {
    throw DataError("checkpoint is missing parameter '" + name + "'");
  }
  if (it->second.shape() != target.shape()) {
    throw DataError("checkpoint parameter '" + name + "' has shape " +
                    ad::shape_string(it->second.shape()) + ", expected " +
                    ad::shape_string(target.shape()));
  }
  target = it->second;
}

}  // namespace advtpp

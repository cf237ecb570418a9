#include "latentpilot/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace lp {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["hyperparameters"] = ckpt.hyperparameters;
  manifest["components"] = nlohmann::json::object();

  std::ofstream bin(dir / "tensors.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("save_checkpoint: cannot write " + (dir / "tensors.bin").string());
  std::int64_t offset = 0;
  for (const auto& [component, params] : ckpt.components) {
    nlohmann::json entries = nlohmann::json::array();
    for (int i = 0; i < params.size(); ++i) {
      const Matrix& v = params.value(i);
      entries.push_back({{"name", params.name(i)},
                         {"shape", {v.rows(), v.cols()}},
                         {"offset", offset}});
      const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = v;
      bin.write(reinterpret_cast<const char*>(rm.data()),
                static_cast<std::streamsize>(rm.size() * sizeof(double)));
      offset += rm.size();
    }
    manifest["components"][component] = std::move(entries);
  }
  if (!bin) throw std::runtime_error("save_checkpoint: write failed");
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("load_checkpoint: missing " + (dir / "manifest.json").string());
  const nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format_version", -1) != kCheckpointFormatVersion) {
    throw std::runtime_error("load_checkpoint: unsupported format version");
  }
  std::ifstream bin(dir / "tensors.bin", std::ios::binary);
  if (!bin) throw std::runtime_error("load_checkpoint: missing tensors.bin");
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const std::size_t n_doubles = bytes.size() / sizeof(double);

  Checkpoint ckpt;
  ckpt.hyperparameters = manifest.value("hyperparameters", nlohmann::json::object());
  for (const auto& [component, entries] : manifest.at("components").items()) {
    ParamSet params;
    for (const auto& e : entries) {
      const auto rows = e.at("shape").at(0).get<Eigen::Index>();
      const auto cols = e.at("shape").at(1).get<Eigen::Index>();
      const auto off = e.at("offset").get<std::int64_t>();
      if (off < 0 || static_cast<std::size_t>(off + rows * cols) > n_doubles) {
        throw std::runtime_error("load_checkpoint: tensor " + e.at("name").get<std::string>() +
                                 " exceeds tensors.bin");
      }
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
      std::memcpy(rm.data(), bytes.data() + off * sizeof(double),
                  static_cast<std::size_t>(rows * cols) * sizeof(double));
      params.add(e.at("name").get<std::string>(), Matrix(rm));
    }
    ckpt.components.emplace(component, std::move(params));
  }
  return ckpt;
}

void restore_component(const Checkpoint& ckpt, const std::string& component, ParamSet& params) {
  const auto it = ckpt.components.find(component);
  if (it == ckpt.components.end()) {
    throw std::runtime_error("checkpoint has no component '" + component + "'");
  }
  const ParamSet& stored = it->second;
  if (!stored.same_layout(params)) {
    for (int i = 0; i < std::min(stored.size(), params.size()); ++i) {
      if (stored.name(i) != params.name(i) || stored.value(i).rows() != params.value(i).rows() ||
          stored.value(i).cols() != params.value(i).cols()) {
        throw std::runtime_error("checkpoint component '" + component + "': tensor " +
                                 params.name(i) + " does not match stored " + stored.name(i) +
                                 " (" + std::to_string(stored.value(i).rows()) + "x" +
                                 std::to_string(stored.value(i).cols()) + ")");
      }
    }
    throw std::runtime_error("checkpoint component '" + component + "': tensor count differs");
  }
  for (int i = 0; i < params.size(); ++i) params.value(i) = stored.value(i);
}

}  // namespace lp

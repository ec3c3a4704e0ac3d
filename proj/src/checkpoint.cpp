#include "metarec/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace metarec {

namespace {

constexpr char kMagic[8] = {'M', 'R', 'E', 'C', 'C', 'K', 'P', '1'};

std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

uint64_t hash_from_hex(const std::string& s) {
  return std::stoull(s, nullptr, 16);
}

void append_tensors(nlohmann::json& list, std::vector<const Tensor*>& payload,
                    const std::string& prefix, const std::map<std::string, Tensor>& tensors) {
  for (const auto& [name, t] : tensors) {
    list.push_back({{"name", prefix + name}, {"rows", t.rows}, {"cols", t.cols}});
    payload.push_back(&t);
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["version"] = 1;
  header["step"] = checkpoint.step;
  header["mode"] = checkpoint.mode;
  header["config_hash"] = hash_hex(checkpoint.config_hash);
  header["opt"] = {{"step", checkpoint.opt.step},
                   {"beta1", checkpoint.opt.beta1},
                   {"beta2", checkpoint.opt.beta2},
                   {"eps", checkpoint.opt.eps}};
  auto tensors = nlohmann::json::array();
  std::vector<const Tensor*> payload;
  append_tensors(tensors, payload, "", checkpoint.model);
  append_tensors(tensors, payload, "", checkpoint.encoder);
  append_tensors(tensors, payload, "opt/m/", checkpoint.opt.m);
  append_tensors(tensors, payload, "opt/v/", checkpoint.opt.v);
  header["tensors"] = std::move(tensors);
  const std::string head = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  out.write(kMagic, sizeof kMagic);
  const uint64_t head_len = head.size();
  out.write(reinterpret_cast<const char*>(&head_len), sizeof head_len);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  for (const Tensor* t : payload)
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");

  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
  uint64_t head_len = 0;
  in.read(reinterpret_cast<char*>(&head_len), sizeof head_len);
  if (!in || head_len == 0 || head_len > (1ull << 30))
    throw std::runtime_error("checkpoint: '" + path + "' has a corrupt header length");
  std::string head(head_len, '\0');
  in.read(head.data(), static_cast<std::streamsize>(head_len));
  if (!in) throw std::runtime_error("checkpoint: '" + path + "' is truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(head);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: bad header in '" + path + "': " + e.what());
  }
  if (header.value("version", 0) != 1)
    throw std::runtime_error("checkpoint: unsupported version in '" + path + "'");

  Checkpoint c;
  c.step = header.value("step", int64_t{0});
  c.mode = header.value("mode", std::string{});
  c.config_hash = hash_from_hex(header.value("config_hash", std::string{"0"}));
  const auto& opt = header.at("opt");
  c.opt.step = opt.value("step", int64_t{0});
  c.opt.beta1 = opt.value("beta1", 0.9);
  c.opt.beta2 = opt.value("beta2", 0.999);
  c.opt.eps = opt.value("eps", 1e-8);

  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const int64_t rows = entry.at("rows").get<int64_t>();
    const int64_t cols = entry.at("cols").get<int64_t>();
    if (rows < 0 || cols < 0)
      throw std::runtime_error("checkpoint: bad shape for '" + name + "' in '" + path + "'");
    Tensor t(rows, cols);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: '" + path + "' is truncated");
    if (name.rfind("opt/m/", 0) == 0)
      c.opt.m.emplace(name.substr(6), std::move(t));
    else if (name.rfind("opt/v/", 0) == 0)
      c.opt.v.emplace(name.substr(6), std::move(t));
    else if (name.rfind("encoder/", 0) == 0)
      c.encoder.emplace(name, std::move(t));
    else
      c.model.emplace(name, std::move(t));
  }
  return c;
}

}  // namespace metarec

#include "lindit/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "lindit/serialization.hpp"

namespace lindit {

namespace {

namespace fs = std::filesystem;

struct Entry {
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::size_t offset = 0;
  std::size_t length = 0;
};

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "u8") return 1;
  throw InputError("checkpoint: unsupported dtype '" + dtype + "'");
}

class PayloadWriter {
 public:
  void f32(const std::string& name, const float* data, std::int64_t rows, std::int64_t cols) {
    begin(name, "f32", {rows, cols});
    for (std::int64_t i = 0; i < rows * cols; ++i) {
      std::uint32_t u = std::bit_cast<std::uint32_t>(data[i]);
      for (int b = 0; b < 4; ++b) bytes_.push_back(static_cast<std::uint8_t>(u >> (8 * b)));
    }
    end(name);
  }
  template <typename Derived>
  void f32(const std::string& name, const Eigen::PlainObjectBase<Derived>& m) {
    f32(name, m.data(), m.rows(), m.cols());
  }
  void u8(const std::string& name, const std::vector<std::uint8_t>& data) {
    begin(name, "u8", {static_cast<std::int64_t>(data.size())});
    bytes_.insert(bytes_.end(), data.begin(), data.end());
    end(name);
  }

  nlohmann::json directory() const {
    nlohmann::json d = nlohmann::json::object();
    for (const auto& [name, e] : entries_) {
      d[name] = {{"dtype", e.dtype}, {"shape", e.shape}, {"offset", e.offset}, {"length", e.length}};
    }
    return d;
  }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  void begin(const std::string& name, const std::string& dtype, std::vector<std::int64_t> shape) {
    if (entries_.count(name)) throw ContractError("checkpoint: duplicate tensor name " + name);
    entries_[name] = Entry{dtype, std::move(shape), bytes_.size(), 0};
  }
  void end(const std::string& name) { entries_[name].length = bytes_.size() - entries_[name].offset; }

  std::vector<std::uint8_t> bytes_;
  std::map<std::string, Entry> entries_;
};

class PayloadReader {
 public:
  PayloadReader(const nlohmann::json& directory, std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& [name, j] : directory.items()) {
      Entry e;
      e.dtype = j.at("dtype").get<std::string>();
      e.shape = j.at("shape").get<std::vector<std::int64_t>>();
      e.offset = j.at("offset").get<std::size_t>();
      e.length = j.at("length").get<std::size_t>();
      std::int64_t n = 1;
      for (auto s : e.shape) {
        if (s < 0) throw InputError("checkpoint: negative dimension in " + name);
        n *= s;
      }
      if (static_cast<std::size_t>(n) * dtype_size(e.dtype) != e.length) {
        throw InputError("checkpoint: length of " + name + " does not match its shape");
      }
      if (e.offset > bytes_.size() || e.length > bytes_.size() - e.offset) {
        throw InputError("checkpoint: tensor " + name + " extends past the payload");
      }
      spans.emplace_back(e.offset, e.length);
      entries_[name] = std::move(e);
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
      if (spans[i - 1].first + spans[i - 1].second > spans[i].first) {
        throw InputError("checkpoint: overlapping tensors in manifest");
      }
    }
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  MatrixF f32(const std::string& name) const {
    const Entry& e = get(name, "f32");
    const std::int64_t rows = e.shape.size() == 2 ? e.shape[0] : 1;
    const std::int64_t cols = e.shape.size() == 2 ? e.shape[1] : (e.shape.empty() ? 1 : e.shape[0]);
    MatrixF m(rows, cols);
    const std::uint8_t* p = bytes_.data() + e.offset;
    for (std::int64_t i = 0; i < rows * cols; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
      m.data()[i] = std::bit_cast<float>(u);
    }
    return m;
  }

  std::vector<std::uint8_t> u8(const std::string& name) const {
    const Entry& e = get(name, "u8");
    return {bytes_.begin() + static_cast<std::ptrdiff_t>(e.offset),
            bytes_.begin() + static_cast<std::ptrdiff_t>(e.offset + e.length)};
  }

 private:
  const Entry& get(const std::string& name, const char* dtype) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw InputError("checkpoint: missing tensor " + name);
    if (it->second.dtype != dtype) throw InputError("checkpoint: tensor " + name + " is not " + dtype);
    return it->second;
  }

  std::vector<std::uint8_t> bytes_;
  std::map<std::string, Entry> entries_;
};

const char* mode_name(StateMode m) { return m == StateMode::Quantized ? "quantized" : "full"; }

void write_state(PayloadWriter& w, const ParamState& st) {
  const std::string p = "optim." + st.name + ".";
  if (st.mode == StateMode::Quantized) {
    std::vector<std::uint8_t> codes;
    MatrixF lohi(static_cast<Eigen::Index>(st.m_blocks.size()), 2);
    for (std::size_t i = 0; i < st.m_blocks.size(); ++i) {
      codes.insert(codes.end(), st.m_blocks[i].codes.begin(), st.m_blocks[i].codes.end());
      lohi(static_cast<Eigen::Index>(i), 0) = st.m_blocks[i].lo;
      lohi(static_cast<Eigen::Index>(i), 1) = st.m_blocks[i].hi;
    }
    w.u8(p + "codes", codes);
    w.f32(p + "lohi", lohi);
  } else {
    w.f32(p + "m", st.m);
  }
  if (st.factored) {
    w.f32(p + "r", st.r);
    w.f32(p + "c", st.c);
    w.f32(p + "R", st.R);
    w.f32(p + "C", st.C);
  } else {
    w.f32(p + "v", st.v);
    w.f32(p + "s", st.s);
  }
}

ParamState read_state(const PayloadReader& r, const nlohmann::json& j, const CameConfig& cfg) {
  ParamState st;
  st.name = j.at("name").get<std::string>();
  const std::string mode = j.at("mode").get<std::string>();
  if (mode != "quantized" && mode != "full") throw InputError("checkpoint: unknown optimizer mode " + mode);
  st.mode = mode == "quantized" ? StateMode::Quantized : StateMode::FullPrecision;
  st.factored = j.at("factored").get<bool>();
  st.rows = j.at("rows").get<Eigen::Index>();
  st.cols = j.at("cols").get<Eigen::Index>();
  st.step = j.at("step").get<std::int64_t>();
  const std::string p = "optim." + st.name + ".";
  if (st.mode == StateMode::Quantized) {
    const auto codes = r.u8(p + "codes");
    const MatrixF lohi = r.f32(p + "lohi");
    if (static_cast<std::int64_t>(codes.size()) != st.elements()) {
      throw InputError("checkpoint: code count mismatch for " + st.name);
    }
    const std::size_t bs = static_cast<std::size_t>(cfg.block_size);
    const std::size_t nblocks = (codes.size() + bs - 1) / bs;
    if (static_cast<std::size_t>(lohi.rows()) != nblocks) {
      throw InputError("checkpoint: block count mismatch for " + st.name);
    }
    for (std::size_t b = 0; b < nblocks; ++b) {
      const std::size_t start = b * bs, stop = std::min(codes.size(), start + bs);
      st.m_blocks.push_back(QuantizedBlock{{codes.begin() + static_cast<std::ptrdiff_t>(start),
                                            codes.begin() + static_cast<std::ptrdiff_t>(stop)},
                                           lohi(static_cast<Eigen::Index>(b), 0),
                                           lohi(static_cast<Eigen::Index>(b), 1)});
    }
  } else {
    st.m = r.f32(p + "m");
  }
  if (st.factored) {
    st.r = r.f32(p + "r");
    st.c = r.f32(p + "c");
    st.R = r.f32(p + "R");
    st.C = r.f32(p + "C");
  } else {
    st.v = r.f32(p + "v");
    st.s = r.f32(p + "s");
  }
  return st;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Checkpoint& ckpt) {
  fs::create_directories(dir);
  PayloadWriter w;
  for (const auto& s : named_slots(ckpt.model.params)) w.f32("model." + s.name, *s.slot);
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["model_config"] = to_json(ckpt.model.config);
  manifest["meta"] = ckpt.meta;
  if (ckpt.optimizer) {
    nlohmann::json states = nlohmann::json::array();
    for (const auto& st : ckpt.optimizer->states) {
      write_state(w, st);
      states.push_back({{"name", st.name},
                        {"mode", mode_name(st.mode)},
                        {"factored", st.factored},
                        {"rows", st.rows},
                        {"cols", st.cols},
                        {"step", st.step}});
    }
    manifest["optimizer"] = {{"config", to_json(ckpt.optimizer->config)}, {"states", states}};
  }
  manifest["payload"] = "payload.bin";
  manifest["payload_bytes"] = w.bytes().size();
  manifest["tensors"] = w.directory();

  // Write to temporaries then rename so a crash never leaves a half-written checkpoint.
  const fs::path payload_tmp = dir / "payload.bin.tmp", manifest_tmp = dir / "manifest.json.tmp";
  {
    std::ofstream out(payload_tmp, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw Error("checkpoint: failed writing " + payload_tmp.string());
  }
  {
    std::ofstream out(manifest_tmp, std::ios::trunc);
    out << manifest.dump(1) << "\n";
    if (!out) throw Error("checkpoint: failed writing " + manifest_tmp.string());
  }
  fs::rename(payload_tmp, dir / "payload.bin");
  fs::rename(manifest_tmp, dir / "manifest.json");
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw ConfigError("checkpoint: no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(min);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint: malformed manifest: " + std::string(e.what()));
  }
  if (manifest.value("format_version", -1) != kCheckpointVersion) {
    throw InputError("checkpoint: unsupported format version");
  }
  std::ifstream pin(dir / manifest.at("payload").get<std::string>(), std::ios::binary);
  if (!pin) throw InputError("checkpoint: missing payload in " + dir.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(pin)), std::istreambuf_iterator<char>());
  if (bytes.size() != manifest.at("payload_bytes").get<std::size_t>()) {
    throw InputError("checkpoint: payload size does not match manifest");
  }
  PayloadReader r(manifest.at("tensors"), std::move(bytes));

  Checkpoint ckpt;
  ckpt.model.config = model_config_from_json(manifest.at("model_config"));
  ckpt.model.params.blocks.resize(static_cast<std::size_t>(ckpt.model.config.depth));
  for (auto& s : named_slots(ckpt.model.params)) *s.slot = r.f32("model." + s.name);
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  if (manifest.contains("optimizer")) {
    OptimizerSnapshot snap;
    snap.config = came_config_from_json(manifest["optimizer"].at("config"));
    for (const auto& j : manifest["optimizer"].at("states")) snap.states.push_back(read_state(r, j, snap.config));
    ckpt.optimizer = std::move(snap);
  }
  return ckpt;
}

bool bit_identical(const LinearDiT<float>& a, const LinearDiT<float>& b) {
  if (!(a.config == b.config) || a.depth() != b.depth()) return false;
  const auto sa = named_slots(a.params);
  const auto sb = named_slots(b.params);
  for (std::size_t i = 0; i < sa.size(); ++i) {
    const MatrixF& x = *sa[i].slot;
    const MatrixF& y = *sb[i].slot;
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), static_cast<std::size_t>(x.size()) * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace lindit

#pragma once

// Binary containers: tracked-trajectory store, the windowed training dataset
// (little-endian, 32-bit floats, length-prefixed records), and a generic
// named-entry checkpoint used for model/aligner snapshots.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/curation.hpp"
#include "chainflow/tensor.hpp"

namespace chainflow {

namespace io {

inline void fail(const std::string& what, const std::string& path) {
  throw std::runtime_error(what + ": " + path);
}

class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) fail("cannot open for write", path);
  }
  template <typename T>
  void raw(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void u32(uint32_t v) { raw(v); }
  void u64(uint64_t v) { raw(v); }
  void i32(int32_t v) { raw(v); }
  void i64(int64_t v) { raw(v); }
  void f32(float v) { raw(v); }
  void f64(double v) { raw(v); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  template <typename T>
  void array(const std::vector<T>& v) {
    out_.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(T)));
  }
  void close() {
    out_.close();
    if (!out_) fail("write failed", path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail("cannot open for read", path);
  }
  template <typename T>
  T raw() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) fail("unexpected end of file", path_);
    return v;
  }
  uint32_t u32() { return raw<uint32_t>(); }
  uint64_t u64() { return raw<uint64_t>(); }
  int32_t i32() { return raw<int32_t>(); }
  int64_t i64() { return raw<int64_t>(); }
  float f32() { return raw<float>(); }
  double f64() { return raw<double>(); }
  std::string str() {
    const uint32_t n = u32();
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) fail("unexpected end of file", path_);
    return s;
  }
  template <typename T>
  void array(std::vector<T>& v) {
    in_.read(reinterpret_cast<char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
    if (!in_) fail("unexpected end of file", path_);
  }

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace io

// ---------------------------------------------------------------------------
// tracked trajectories (generate stage output, 64-bit)
// ---------------------------------------------------------------------------

inline constexpr uint32_t kTrajMagic = 0x4a54'4643;  // "CFTJ"
inline constexpr uint32_t kTrajVersion = 1;

struct TrajectoryFileHeader {
  int d_s = 0;
  int d_a = 0;
  int joint_count = 0;
  double fps = 30.0;
};

inline void save_trajectories(const std::string& path, const TrajectoryFileHeader& h,
                              const std::vector<TrackedTrajectory>& trajs) {
  io::BinWriter w(path);
  w.u32(kTrajMagic);
  w.u32(kTrajVersion);
  w.u32(static_cast<uint32_t>(h.d_s));
  w.u32(static_cast<uint32_t>(h.d_a));
  w.u32(static_cast<uint32_t>(h.joint_count));
  w.f64(h.fps);
  w.u32(static_cast<uint32_t>(trajs.size()));
  for (const auto& tr : trajs) {
    const uint32_t t_len = static_cast<uint32_t>(tr.states.size());
    w.i32(tr.instruction_id);
    w.u32(t_len);
    for (const auto& s : tr.states) w.array(s);
    for (const auto& a : tr.actions) w.array(a);
    for (const auto& f : tr.sites)
      for (const auto& p : f) {
        w.f64(p.x);
        w.f64(p.z);
      }
    for (const auto& q : tr.joint_angles) w.array(q);
  }
  w.close();
}

inline std::vector<TrackedTrajectory> load_trajectories(const std::string& path,
                                                        TrajectoryFileHeader* header = nullptr) {
  io::BinReader r(path);
  if (r.u32() != kTrajMagic) io::fail("not a trajectory file", path);
  if (r.u32() != kTrajVersion) io::fail("unsupported trajectory file version", path);
  TrajectoryFileHeader h;
  h.d_s = static_cast<int>(r.u32());
  h.d_a = static_cast<int>(r.u32());
  h.joint_count = static_cast<int>(r.u32());
  h.fps = r.f64();
  const uint32_t count = r.u32();
  std::vector<TrackedTrajectory> out(count);
  for (auto& tr : out) {
    tr.instruction_id = r.i32();
    const uint32_t t_len = r.u32();
    tr.states.assign(t_len, std::vector<double>(static_cast<size_t>(h.d_s)));
    tr.actions.assign(t_len, std::vector<double>(static_cast<size_t>(h.d_a)));
    tr.sites.assign(t_len, std::vector<Vec2>(static_cast<size_t>(h.joint_count) + 1));
    tr.joint_angles.assign(t_len, std::vector<double>(static_cast<size_t>(h.joint_count)));
    for (auto& s : tr.states) r.array(s);
    for (auto& a : tr.actions) r.array(a);
    for (auto& f : tr.sites)
      for (auto& p : f) {
        p.x = r.f64();
        p.z = r.f64();
      }
    for (auto& q : tr.joint_angles) r.array(q);
  }
  if (header) *header = h;
  return out;
}

// ---------------------------------------------------------------------------
// windowed dataset (little-endian, 32-bit floats, length-prefixed records)
// ---------------------------------------------------------------------------

inline constexpr uint32_t kDatasetMagic = 0x5344'4643;  // "CFDS"
inline constexpr uint32_t kDatasetVersion = 1;

struct DatasetHeader {
  int d_s = 0;
  int d_a = 0;
  int joint_count = 0;
  double fps = 30.0;
  int l_max = 0;
  int horizon = 0;
  uint32_t count = 0;
};

inline void save_dataset(const std::string& path, DatasetHeader h,
                         const std::vector<WindowSample>& samples) {
  h.count = static_cast<uint32_t>(samples.size());
  io::BinWriter w(path);
  w.u32(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(static_cast<uint32_t>(h.d_s));
  w.u32(static_cast<uint32_t>(h.d_a));
  w.u32(static_cast<uint32_t>(h.joint_count));
  w.f32(static_cast<float>(h.fps));
  w.u32(static_cast<uint32_t>(h.l_max));
  w.u32(static_cast<uint32_t>(h.horizon));
  w.u32(h.count);
  std::vector<float> buf;
  for (const auto& s : samples) {
    buf.clear();
    for (const auto& row : s.history)
      for (double v : row) buf.push_back(static_cast<float>(v));
    for (const auto& row : s.target_states)
      for (double v : row) buf.push_back(static_cast<float>(v));
    for (const auto& row : s.target_actions)
      for (double v : row) buf.push_back(static_cast<float>(v));
    const uint32_t bytes = 4 + static_cast<uint32_t>(buf.size() * sizeof(float));
    w.u32(bytes);
    w.i32(s.instruction_id);
    w.array(buf);
  }
  w.close();
}

inline std::vector<WindowSample> load_dataset(const std::string& path,
                                              DatasetHeader* header = nullptr) {
  io::BinReader r(path);
  if (r.u32() != kDatasetMagic) io::fail("not a dataset file", path);
  if (r.u32() != kDatasetVersion) io::fail("unsupported dataset version", path);
  DatasetHeader h;
  h.d_s = static_cast<int>(r.u32());
  h.d_a = static_cast<int>(r.u32());
  h.joint_count = static_cast<int>(r.u32());
  h.fps = static_cast<double>(r.f32());
  h.l_max = static_cast<int>(r.u32());
  h.horizon = static_cast<int>(r.u32());
  h.count = r.u32();
  std::vector<WindowSample> out(h.count);
  const size_t floats_expected = static_cast<size_t>(h.l_max + h.horizon) * h.d_s +
                                 static_cast<size_t>(h.horizon) * h.d_a;
  std::vector<float> buf(floats_expected);
  for (auto& s : out) {
    const uint32_t bytes = r.u32();
    if (bytes != 4 + floats_expected * sizeof(float)) io::fail("corrupt dataset record", path);
    s.instruction_id = r.i32();
    r.array(buf);
    size_t off = 0;
    s.history.assign(static_cast<size_t>(h.l_max), std::vector<double>(static_cast<size_t>(h.d_s)));
    for (auto& row : s.history)
      for (auto& v : row) v = static_cast<double>(buf[off++]);
    s.target_states.assign(static_cast<size_t>(h.horizon),
                           std::vector<double>(static_cast<size_t>(h.d_s)));
    for (auto& row : s.target_states)
      for (auto& v : row) v = static_cast<double>(buf[off++]);
    s.target_actions.assign(static_cast<size_t>(h.horizon),
                            std::vector<double>(static_cast<size_t>(h.d_a)));
    for (auto& row : s.target_actions)
      for (auto& v : row) v = static_cast<double>(buf[off++]);
  }
  if (header) *header = h;
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints: named f64 tensors, scalars, and strings
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointMagic = 0x4b43'4643;  // "CFCK"
inline constexpr uint32_t kCheckpointVersion = 1;

class Checkpoint {
 public:
  void put_array(const std::string& name, Shape shape, std::vector<double> data) {
    arrays_[name] = {std::move(shape), std::move(data)};
  }
  template <typename T>
  void put_tensor(const std::string& name, const Tensor<T>& t) {
    std::vector<double> d(t.data().begin(), t.data().end());
    put_array(name, t.shape(), std::move(d));
  }
  void put_int(const std::string& name, int64_t v) { ints_[name] = v; }
  void put_real(const std::string& name, double v) { reals_[name] = v; }
  void put_str(const std::string& name, std::string v) { strs_[name] = std::move(v); }

  bool has_array(const std::string& name) const { return arrays_.count(name) > 0; }
  bool has_int(const std::string& name) const { return ints_.count(name) > 0; }

  const std::pair<Shape, std::vector<double>>& array(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw std::runtime_error("checkpoint: missing array " + name);
    return it->second;
  }
  template <typename T>
  Tensor<T> tensor(const std::string& name) const {
    const auto& [shape, data] = array(name);
    std::vector<T> d(data.begin(), data.end());
    return Tensor<T>(shape, std::move(d));
  }
  int64_t integer(const std::string& name) const {
    auto it = ints_.find(name);
    if (it == ints_.end()) throw std::runtime_error("checkpoint: missing int " + name);
    return it->second;
  }
  double real(const std::string& name) const {
    auto it = reals_.find(name);
    if (it == reals_.end()) throw std::runtime_error("checkpoint: missing real " + name);
    return it->second;
  }
  std::string str(const std::string& name) const {
    auto it = strs_.find(name);
    if (it == strs_.end()) throw std::runtime_error("checkpoint: missing string " + name);
    return it->second;
  }

  void save(const std::string& path) const {
    io::BinWriter w(path);
    w.u32(kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<uint32_t>(arrays_.size()));
    for (const auto& [name, entry] : arrays_) {
      w.str(name);
      w.u32(static_cast<uint32_t>(entry.first.size()));
      for (int64_t d : entry.first) w.i64(d);
      w.array(entry.second);
    }
    w.u32(static_cast<uint32_t>(ints_.size()));
    for (const auto& [name, v] : ints_) {
      w.str(name);
      w.i64(v);
    }
    w.u32(static_cast<uint32_t>(reals_.size()));
    for (const auto& [name, v] : reals_) {
      w.str(name);
      w.f64(v);
    }
    w.u32(static_cast<uint32_t>(strs_.size()));
    for (const auto& [name, v] : strs_) {
      w.str(name);
      w.str(v);
    }
    w.close();
  }

  static Checkpoint load(const std::string& path) {
    io::BinReader r(path);
    if (r.u32() != kCheckpointMagic) io::fail("not a checkpoint file", path);
    if (r.u32() != kCheckpointVersion) io::fail("unsupported checkpoint version", path);
    Checkpoint ck;
    const uint32_t n_arrays = r.u32();
    for (uint32_t i = 0; i < n_arrays; ++i) {
      const std::string name = r.str();
      Shape shape(r.u32());
      for (auto& d : shape) d = r.i64();
      std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
      r.array(data);
      ck.arrays_[name] = {std::move(shape), std::move(data)};
    }
    const uint32_t n_ints = r.u32();
    for (uint32_t i = 0; i < n_ints; ++i) {
      const std::string name = r.str();
      ck.ints_[name] = r.i64();
    }
    const uint32_t n_reals = r.u32();
    for (uint32_t i = 0; i < n_reals; ++i) {
      const std::string name = r.str();
      ck.reals_[name] = r.f64();
    }
    const uint32_t n_strs = r.u32();
    for (uint32_t i = 0; i < n_strs; ++i) {
      const std::string name = r.str();
      ck.strs_[name] = r.str();
    }
    return ck;
  }

 private:
  std::map<std::string, std::pair<Shape, std::vector<double>>> arrays_;
  std::map<std::string, int64_t> ints_;
  std::map<std::string, double> reals_;
  std::map<std::string, std::string> strs_;
};

template <typename T>
void checkpoint_put_params(Checkpoint& ck, const ParamStore<T>& store,
                           const std::string& prefix = "param/") {
  for (const auto& p : store.params()) ck.put_tensor(prefix + p.name, p.tensor);
}

template <typename T>
void checkpoint_load_params(const Checkpoint& ck, ParamStore<T>& store,
                            const std::string& prefix = "param/") {
  for (auto& p : store.params()) {
    const auto& [shape, data] = ck.array(prefix + p.name);
    if (shape != p.tensor.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    auto& dst = p.tensor.data();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(data[i]);
  }
}

}  // namespace chainflow

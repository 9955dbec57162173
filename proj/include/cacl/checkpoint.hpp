#pragma once

#include "cacl/autoencoder.hpp"
#include "cacl/classifier.hpp"
#include "cacl/codebook.hpp"
#include "cacl/config.hpp"
#include "cacl/segmentation.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace cacl {

/// Adam accumulators aligned with a network's tensors() order.
template <class S>
struct AdamState {
  std::vector<MatX<S>> m, v;
  std::int64_t t = 0;

  static AdamState init_like(const std::vector<MatX<S>*>& tensors) {
    AdamState st;
    for (const auto* p : tensors) {
      st.m.push_back(MatX<S>::Zero(p->rows(), p->cols()));
      st.v.push_back(MatX<S>::Zero(p->rows(), p->cols()));
    }
    return st;
  }
};

template <class S>
void adam_step(const std::vector<MatX<S>*>& params, const std::vector<MatX<S>*>& grads,
               AdamState<S>& st, S lr, S beta1 = S(0.9), S beta2 = S(0.999), S eps = S(1e-8)) {
  if (params.size() != grads.size() || params.size() != st.m.size())
    throw std::invalid_argument("adam_step: tensor list mismatch");
  ++st.t;
  const S c1 = S(1) - S(std::pow(double(beta1), double(st.t)));
  const S c2 = S(1) - S(std::pow(double(beta2), double(st.t)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = *grads[i];
    m = beta1 * m + (S(1) - beta1) * g;
    v = (beta2 * v.array() + (S(1) - beta2) * g.array().square()).matrix();
    params[i]->array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

/// Full training state snapshot. A loaded checkpoint reproduces the next
/// train step bit for bit: parameters, EMA statistics, optimizer moments,
/// image pools, the recent-feature bank, the dead-code usage window, and
/// every rng state are all included.
template <class S>
struct Checkpoint {
  TrainConfig config;
  std::uint64_t step = 0;
  AutoencoderParams<S> gen;
  CodebookPartitioned<S> codebook;
  ClassifierParams<S> cls;
  AdamState<S> gen_opt, cls_opt;
  ImagePool<S> pool_pos, pool_neg;
  FeatureBank<S> bank;
  Eigen::VectorXi usage_window;
  std::string train_rng;
};

/// segment_image over a trained checkpoint.
template <class S>
SegmentationMask segment_image(const Checkpoint<S>& ck, const Grid<S>& image, int dilation_radius,
                               std::string provenance = {}) {
  return segment_image(ck.gen, ck.codebook, image, dilation_radius, std::move(provenance));
}

namespace ckio {

inline constexpr char kMagic[8] = {'C', 'A', 'C', 'L', 'C', 'K', 'P', '1'};

struct Writer {
  std::ofstream out;
  explicit Writer(const std::filesystem::path& p) : out(p, std::ios::binary) {
    if (!out) throw std::runtime_error("checkpoint: cannot open " + p.string());
  }
  void bytes(const void* p, std::size_t n) { out.write(static_cast<const char*>(p), std::streamsize(n)); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void i64(std::int64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  template <class S>
  void mat(const MatX<S>& m) {
    u32(std::uint32_t(m.rows()));
    u32(std::uint32_t(m.cols()));
    bytes(m.data(), sizeof(S) * std::size_t(m.size()));
  }
  template <class S>
  void vec(const VecX<S>& v) {
    u32(std::uint32_t(v.size()));
    bytes(v.data(), sizeof(S) * std::size_t(v.size()));
  }
  template <class S>
  void grid(const Grid<S>& g) {
    u32(std::uint32_t(g.h));
    u32(std::uint32_t(g.w));
    mat(g.m);
  }
};

struct Reader {
  std::ifstream in;
  explicit Reader(const std::filesystem::path& p) : in(p, std::ios::binary) {
    if (!in) throw std::runtime_error("checkpoint: cannot open " + p.string());
  }
  void bytes(void* p, std::size_t n) {
    if (!in.read(static_cast<char*>(p), std::streamsize(n)))
      throw std::runtime_error("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  std::int64_t i64() {
    std::int64_t v;
    bytes(&v, 8);
    return v;
  }
  std::string str() {
    std::string s(u64(), '\0');
    bytes(s.data(), s.size());
    return s;
  }
  template <class S>
  MatX<S> mat() {
    const auto r = u32(), c = u32();
    MatX<S> m(r, c);
    bytes(m.data(), sizeof(S) * std::size_t(m.size()));
    return m;
  }
  template <class S>
  VecX<S> vec() {
    VecX<S> v(u32());
    bytes(v.data(), sizeof(S) * std::size_t(v.size()));
    return v;
  }
  template <class S>
  Grid<S> grid() {
    Grid<S> g;
    g.h = int(u32());
    g.w = int(u32());
    g.m = mat<S>();
    return g;
  }
};

template <class S>
void write_tensors(Writer& w, const std::vector<MatX<S>*>& ts) {
  w.u32(std::uint32_t(ts.size()));
  for (const auto* t : ts) w.mat(*t);
}

template <class S>
void read_tensors_into(Reader& r, const std::vector<MatX<S>*>& ts) {
  const auto n = r.u32();
  if (n != ts.size()) throw std::runtime_error("checkpoint: tensor count mismatch");
  for (auto* t : ts) {
    MatX<S> m = r.template mat<S>();
    if (m.rows() != t->rows() || m.cols() != t->cols())
      throw std::runtime_error("checkpoint: tensor shape mismatch");
    *t = std::move(m);
  }
}

template <class S>
void write_adam(Writer& w, const AdamState<S>& st) {
  w.i64(st.t);
  w.u32(std::uint32_t(st.m.size()));
  for (const auto& m : st.m) w.mat(m);
  for (const auto& v : st.v) w.mat(v);
}

template <class S>
AdamState<S> read_adam(Reader& r) {
  AdamState<S> st;
  st.t = r.i64();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) st.m.push_back(r.template mat<S>());
  for (std::uint32_t i = 0; i < n; ++i) st.v.push_back(r.template mat<S>());
  return st;
}

template <class S>
void write_pool(Writer& w, const ImagePool<S>& pool) {
  w.u32(std::uint32_t(pool.capacity));
  std::ostringstream rs;
  rs << pool.rng;
  w.str(rs.str());
  w.u32(std::uint32_t(pool.stored.size()));
  for (const auto& g : pool.stored) w.grid(g);
}

template <class S>
ImagePool<S> read_pool(Reader& r) {
  ImagePool<S> pool;
  pool.capacity = int(r.u32());
  std::istringstream rs(r.str());
  rs >> pool.rng;
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) pool.stored.push_back(r.template grid<S>());
  return pool;
}

}  // namespace ckio

template <class S>
void save_checkpoint(const Checkpoint<S>& ck, const std::filesystem::path& path) {
  namespace io = ckio;
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    io::Writer w(tmp);
    w.bytes(io::kMagic, sizeof io::kMagic);
    const char scalar = sizeof(S) == 4 ? 'f' : 'd';
    w.bytes(&scalar, 1);
    TrainConfig cfg = ck.config;
    w.str(cfg.snapshot());
    w.u64(ck.step);

    auto gen = const_cast<AutoencoderParams<S>&>(ck.gen).tensors();
    io::write_tensors<S>(w, gen);
    w.u32(std::uint32_t(ck.codebook.n_shared));
    w.mat(ck.codebook.codes);
    w.vec(ck.codebook.ema_counts);
    w.mat(ck.codebook.ema_sums);
    const double decay = double(ck.codebook.decay);
    w.bytes(&decay, 8);

    auto cls = const_cast<ClassifierParams<S>&>(ck.cls).tensors();
    io::write_tensors<S>(w, cls);
    io::write_adam(w, ck.gen_opt);
    io::write_adam(w, ck.cls_opt);
    io::write_pool(w, ck.pool_pos);
    io::write_pool(w, ck.pool_neg);

    w.u32(std::uint32_t(ck.bank.capacity()));
    w.u32(std::uint32_t(ck.bank.size));
    w.u32(std::uint32_t(ck.bank.next));
    w.mat(ck.bank.feats);
    w.bytes(ck.bank.from_positive.data(), ck.bank.from_positive.size());

    w.u32(std::uint32_t(ck.usage_window.size()));
    w.bytes(ck.usage_window.data(), 4 * std::size_t(ck.usage_window.size()));
    w.str(ck.train_rng);
  }
  std::filesystem::rename(tmp, path);
}

template <class S>
Checkpoint<S> load_checkpoint(const std::filesystem::path& path) {
  namespace io = ckio;
  io::Reader r(path);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, io::kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad format tag in " + path.string());
  char scalar;
  r.bytes(&scalar, 1);
  if (scalar != (sizeof(S) == 4 ? 'f' : 'd'))
    throw std::runtime_error("checkpoint: scalar width mismatch in " + path.string());

  Checkpoint<S> ck;
  ck.config.apply_text(r.str());
  ck.step = r.u64();

  ck.gen = AutoencoderParams<S>::init(ck.config.dim, ck.config.hidden, 0);
  io::read_tensors_into<S>(r, ck.gen.tensors());

  ck.codebook.n_shared = int(r.u32());
  ck.codebook.codes = r.template mat<S>();
  ck.codebook.dim = int(ck.codebook.codes.rows());
  ck.codebook.ema_counts = r.template vec<S>();
  ck.codebook.ema_sums = r.template mat<S>();
  double decay;
  r.bytes(&decay, 8);
  ck.codebook.decay = S(decay);

  ck.cls = ClassifierParams<S>::init(ClassifierArch::named(ck.config.classifier), 0);
  io::read_tensors_into<S>(r, ck.cls.tensors());
  ck.gen_opt = io::read_adam<S>(r);
  ck.cls_opt = io::read_adam<S>(r);
  ck.pool_pos = io::read_pool<S>(r);
  ck.pool_neg = io::read_pool<S>(r);

  const int bank_cap = int(r.u32());
  ck.bank = FeatureBank<S>(ck.config.dim, bank_cap);
  ck.bank.size = int(r.u32());
  ck.bank.next = int(r.u32());
  ck.bank.feats = r.template mat<S>();
  r.bytes(ck.bank.from_positive.data(), ck.bank.from_positive.size());

  ck.usage_window.resize(r.u32());
  r.bytes(ck.usage_window.data(), 4 * std::size_t(ck.usage_window.size()));
  ck.train_rng = r.str();
  return ck;
}

}  // namespace cacl

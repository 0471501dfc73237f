#include "fsts/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fsts {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

namespace detail {

std::vector<double>& Storage::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local GradientTape* g_current_tape = nullptr;

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Right-aligned broadcast of two shapes; throws naming both on conflict.
Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcast-compatible");
    }
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

// Strides of `in` aligned to `out` (0 where the input broadcasts).
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out) {
  const auto st = contiguous_strides(in);
  std::vector<std::size_t> a(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    a[off + i] = (in[i] == 1 && out[off + i] != 1) ? 0 : st[i];
  }
  return a;
}

// Walks every position of `out`, maintaining flat offsets into two
// broadcast-aligned operands.
template <typename F>
void for_each_bcast(const Shape& out, const std::vector<std::size_t>& sa,
                    const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  if (out.empty()) {
    if (n) f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (std::size_t ax = out.size(); ax-- > 0;) {
      ++idx[ax];
      oa += sa[ax];
      ob += sb[ax];
      if (idx[ax] < out[ax]) break;
      oa -= sa[ax] * out[ax];
      ob -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

void check_finite(const char* op, const Tensor& t) {
  const auto& v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(op) + ": produced non-finite value " +
                         std::to_string(v[i]) + " at flat index " +
                         std::to_string(i) + " in output of shape " +
                         shape_str(t.shape()));
    }
  }
}

// Iterates the broadcast batch pairs of a batched matmul.
struct BatchPlan {
  Shape batch;
  std::vector<std::size_t> sa, sb;  // per-axis strides in units of matrices
  std::size_t count = 1;

  template <typename F>
  void for_each(F&& f) const {
    for_each_bcast(batch, sa, sb, f);
  }
};

BatchPlan make_batch_plan(const Shape& a, const Shape& b, std::size_t block_a,
                          std::size_t block_b, const char* op) {
  Shape ba(a.begin(), a.end() - 2), bb(b.begin(), b.end() - 2);
  BatchPlan p;
  p.batch = broadcast_shapes(ba, bb, op);
  p.count = shape_numel(p.batch);
  auto sa = aligned_strides(ba, p.batch);
  auto sb = aligned_strides(bb, p.batch);
  for (auto& s : sa) s *= block_a;
  for (auto& s : sb) s *= block_b;
  p.sa = std::move(sa);
  p.sb = std::move(sb);
  return p;
}

}  // namespace

// --- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " implies " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  st_ = std::make_shared<detail::Storage>();
  st_->shape = std::move(shape);
  st_->data = std::move(values);
  st_->requires_grad = requires_grad;
  st_->track = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::glorot(Shape shape, std::size_t fan_in, std::size_t fan_out,
                      std::mt19937_64& rng, bool requires_grad) {
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  return uniform(std::move(shape), -limit, limit, rng, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!st_) throw Error("tensor: use of undefined tensor");
  return st_->shape;
}

std::size_t Tensor::numel() const { return st_ ? st_->data.size() : 0; }

const std::vector<double>& Tensor::values() const {
  if (!st_) throw Error("tensor: use of undefined tensor");
  return st_->data;
}

std::vector<double>& Tensor::values() {
  if (!st_) throw Error("tensor: use of undefined tensor");
  return st_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("tensor: item() requires a scalar, got shape " +
                     shape_str(shape()));
  }
  return values()[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  const auto& sh = shape();
  if (idx.size() != sh.size()) {
    throw ShapeError("tensor: at() got " + std::to_string(idx.size()) +
                     " indices for shape " + shape_str(sh));
  }
  std::size_t off = 0, ax = 0;
  for (std::size_t i : idx) {
    if (i >= sh[ax]) throw IndexError("tensor: index out of range in at()");
    off = off * sh[ax] + i;
    ++ax;
  }
  return values()[off];
}

bool Tensor::requires_grad() const { return st_ && st_->requires_grad; }

bool Tensor::has_grad() const { return st_ && !st_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!st_ || st_->grad.empty()) {
    throw Error("tensor: gradient not populated (run backward first)");
  }
  return st_->grad;
}

void Tensor::clear_grad() {
  if (st_) st_->grad.clear();
}

Tensor Tensor::clone() const {
  if (!st_) return Tensor();
  return Tensor(st_->shape, st_->data, st_->requires_grad);
}

IntTensor::IntTensor(Shape s, std::vector<std::int64_t> v)
    : shape(std::move(s)), values(std::move(v)) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("int tensor: shape/value count mismatch");
  }
}

// --- GradientTape -----------------------------------------------------------

GradientTape::GradientTape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

GradientTape::~GradientTape() { g_current_tape = prev_; }

GradientTape* GradientTape::current() { return g_current_tape; }

bool GradientTape::recorded(const Tensor& t) const {
  return t.defined() && produced_.count(t.storage().get()) > 0;
}

void GradientTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error("backward: loss must be a scalar tensor, got shape " +
                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!produced_.count(loss.storage().get())) {
    throw Error(
        "backward: loss is not on the tape; the tape is cleared after each "
        "backward, so re-run the forward pass before calling backward again");
  }
  loss.storage()->grad_buffer()[0] = 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // nothing flowed into this output
    it->pull(it->out->grad);
  }
  records_.clear();
  produced_.clear();
}

void record_op(const char* name, std::initializer_list<Tensor> inputs,
               Tensor& out, std::function<void(const std::vector<double>&)> pull) {
  (void)name;
  GradientTape* tape = GradientTape::current();
  if (!tape) return;
  bool track = false;
  for (const auto& in : inputs) {
    if (in.defined() && in.storage()->track) {
      track = true;
      break;
    }
  }
  if (!track) return;
  out.storage()->track = true;
  tape->records_.push_back({out.storage(), std::move(pull)});
  tape->produced_.insert(out.storage().get());
}

void backward(const Tensor& loss) {
  GradientTape* tape = GradientTape::current();
  if (!tape) throw Error("backward: no active GradientTape");
  tape->backward(loss);
}

// --- elementwise / broadcast ops --------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* op) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
  Tensor out = Tensor::zeros(out_shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();

  if (a.shape() == b.shape()) {
    const std::size_t n = ov.size();
    switch (kind) {
      case BinKind::Add:
        for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
        break;
      case BinKind::Sub:
        for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
        break;
      case BinKind::Mul:
        for (std::size_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
        break;
    }
  } else {
    const auto sa = aligned_strides(a.shape(), out_shape);
    const auto sb = aligned_strides(b.shape(), out_shape);
    switch (kind) {
      case BinKind::Add:
        for_each_bcast(out_shape, sa, sb,
                       [&](std::size_t i, std::size_t oa, std::size_t ob) {
                         ov[i] = av[oa] + bv[ob];
                       });
        break;
      case BinKind::Sub:
        for_each_bcast(out_shape, sa, sb,
                       [&](std::size_t i, std::size_t oa, std::size_t ob) {
                         ov[i] = av[oa] - bv[ob];
                       });
        break;
      case BinKind::Mul:
        for_each_bcast(out_shape, sa, sb,
                       [&](std::size_t i, std::size_t oa, std::size_t ob) {
                         ov[i] = av[oa] * bv[ob];
                       });
        break;
    }
  }
  check_finite(op, out);

  auto pa = a.storage();
  auto pb = b.storage();
  const Shape shape_copy = out_shape;
  record_op(op, {a, b}, out, [pa, pb, shape_copy, kind](const std::vector<double>& og) {
    const auto sa = aligned_strides(pa->shape, shape_copy);
    const auto sb = aligned_strides(pb->shape, shape_copy);
    const bool need_a = pa->track;
    const bool need_b = pb->track;
    double* da = need_a ? pa->grad_buffer().data() : nullptr;
    double* db = need_b ? pb->grad_buffer().data() : nullptr;
    const double* avd = pa->data.data();
    const double* bvd = pb->data.data();
    for_each_bcast(shape_copy, sa, sb,
                   [&](std::size_t i, std::size_t oa, std::size_t ob) {
                     switch (kind) {
                       case BinKind::Add:
                         if (da) da[oa] += og[i];
                         if (db) db[ob] += og[i];
                         break;
                       case BinKind::Sub:
                         if (da) da[oa] += og[i];
                         if (db) db[ob] -= og[i];
                         break;
                       case BinKind::Mul:
                         if (da) da[oa] += og[i] * bvd[ob];
                         if (db) db[ob] += og[i] * avd[oa];
                         break;
                     }
                   });
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor hadamard(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "hadamard"); }

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  check_finite("relu", out);

  auto px = x.storage();
  record_op("relu", {x}, out, [px](const std::vector<double>& og) {
    if (!px->track) return;
    auto& dx = px->grad_buffer();
    const auto& xv = px->data;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += og[i];
    }
  });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = factor * xv[i];
  check_finite("scale", out);

  auto px = x.storage();
  record_op("scale", {x}, out, [px, factor](const std::vector<double>& og) {
    if (!px->track) return;
    auto& dx = px->grad_buffer();
    for (std::size_t i = 0; i < og.size(); ++i) dx[i] += factor * og[i];
  });
  return out;
}

Tensor abs_val(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = std::abs(xv[i]);
  check_finite("abs", out);

  auto px = x.storage();
  record_op("abs", {x}, out, [px](const std::vector<double>& og) {
    if (!px->track) return;
    auto& dx = px->grad_buffer();
    const auto& xv = px->data;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) dx[i] += og[i];
      else if (xv[i] < 0.0) dx[i] -= og[i];
      // exact tie: subgradient 0
    }
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " to " +
                     shape_str(new_shape) + " (element counts differ)");
  }
  Tensor out(std::move(new_shape), x.values());  // contiguous copy, no aliasing

  auto px = x.storage();
  record_op("reshape", {x}, out, [px](const std::vector<double>& og) {
    if (!px->track) return;
    auto& dx = px->grad_buffer();
    for (std::size_t i = 0; i < og.size(); ++i) dx[i] += og[i];
  });
  return out;
}

Tensor transpose_axes(const Tensor& x, const std::vector<std::size_t>& perm) {
  const auto& sh = x.shape();
  if (perm.size() != sh.size()) {
    throw ShapeError("transpose: permutation size " + std::to_string(perm.size()) +
                     " does not match rank of " + shape_str(sh));
  }
  std::vector<bool> seen(sh.size(), false);
  for (std::size_t p : perm) {
    if (p >= sh.size() || seen[p]) {
      throw ShapeError("transpose: invalid axis permutation");
    }
    seen[p] = true;
  }
  Shape out_shape(sh.size());
  for (std::size_t i = 0; i < sh.size(); ++i) out_shape[i] = sh[perm[i]];

  const auto x_strides = contiguous_strides(sh);
  std::vector<std::size_t> src_stride(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src_stride[i] = x_strides[perm[i]];

  Tensor out = Tensor::zeros(out_shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  const std::vector<std::size_t> zero(out_shape.size(), 0);
  for_each_bcast(out_shape, src_stride, zero,
                 [&](std::size_t i, std::size_t ox, std::size_t) { ov[i] = xv[ox]; });

  auto px = x.storage();
  record_op("transpose", {x}, out,
            [px, out_shape, src_stride](const std::vector<double>& og) {
              if (!px->track) return;
              auto& dx = px->grad_buffer();
              const std::vector<std::size_t> zero(out_shape.size(), 0);
              for_each_bcast(out_shape, src_stride, zero,
                             [&](std::size_t i, std::size_t ox, std::size_t) {
                               dx[ox] += og[i];
                             });
            });
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  check_finite("sum", out);

  auto px = x.storage();
  record_op("sum", {x}, out, [px](const std::vector<double>& og) {
    if (!px->track) return;
    auto& dx = px->grad_buffer();
    for (auto& g : dx) g += og[0];
  });
  return out;
}

Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / double(x.numel());
  Tensor out = Tensor::scalar(s * inv);
  check_finite("mean", out);

  auto px = x.storage();
  record_op("mean", {x}, out, [px, inv](const std::vector<double>& og) {
    if (!px->track) return;
    auto& dx = px->grad_buffer();
    for (auto& g : dx) g += og[0] * inv;
  });
  return out;
}

// --- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands must have rank >= 2, got " +
                     shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t M = sa[sa.size() - 2], K = sa[sa.size() - 1];
  const std::size_t Kb = sb[sb.size() - 2], P = sb[sb.size() - 1];
  if (K != Kb) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(sa) +
                     " x " + shape_str(sb));
  }
  const BatchPlan plan = make_batch_plan(sa, sb, M * K, K * P, "matmul");

  Shape out_shape = plan.batch;
  out_shape.push_back(M);
  out_shape.push_back(P);
  Tensor out = Tensor::zeros(out_shape);

  const double* A = a.values().data();
  const double* B = b.values().data();
  double* C = out.values().data();
  plan.for_each([&](std::size_t bi, std::size_t oa, std::size_t ob) {
    const double* As = A + oa;
    const double* Bs = B + ob;
    double* Cs = C + bi * M * P;
    for (std::size_t i = 0; i < M; ++i) {
      double* crow = Cs + i * P;
      for (std::size_t k = 0; k < K; ++k) {
        const double av = As[i * K + k];
        const double* brow = Bs + k * P;
        for (std::size_t j = 0; j < P; ++j) crow[j] += av * brow[j];
      }
    }
  });
  check_finite("matmul", out);

  auto pa = a.storage();
  auto pb = b.storage();
  record_op("matmul", {a, b}, out,
            [pa, pb, plan, M, K, P](const std::vector<double>& og) {
              const double* A = pa->data.data();
              const double* B = pb->data.data();
              double* da = pa->track ? pa->grad_buffer().data() : nullptr;
              double* db = pb->track ? pb->grad_buffer().data() : nullptr;
              plan.for_each([&](std::size_t bi, std::size_t oa, std::size_t ob) {
                const double* ogs = og.data() + bi * M * P;
                if (da) {
                  // dA = og . B^T
                  const double* Bs = B + ob;
                  double* das = da + oa;
                  for (std::size_t i = 0; i < M; ++i) {
                    const double* ogr = ogs + i * P;
                    for (std::size_t k = 0; k < K; ++k) {
                      const double* brow = Bs + k * P;
                      double s = 0.0;
                      for (std::size_t j = 0; j < P; ++j) s += ogr[j] * brow[j];
                      das[i * K + k] += s;
                    }
                  }
                }
                if (db) {
                  // dB = A^T . og
                  const double* As = A + oa;
                  double* dbs = db + ob;
                  for (std::size_t i = 0; i < M; ++i) {
                    const double* ogr = ogs + i * P;
                    for (std::size_t k = 0; k < K; ++k) {
                      const double av = As[i * K + k];
                      double* dbrow = dbs + k * P;
                      for (std::size_t j = 0; j < P; ++j) dbrow[j] += av * ogr[j];
                    }
                  }
                }
              });
            });
  return out;
}

// --- graph-structured contractions -------------------------------------------

namespace {

void require_rank4(const Tensor& x, const char* op) {
  if (x.rank() != 4) {
    throw ShapeError(std::string(op) + ": signal must be rank 4 [B,N,T,C], got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

Tensor contract_nodes(const Tensor& graph, const Tensor& x) {
  require_rank4(x, "contract_nodes");
  const std::size_t B = x.dim(0), N = x.dim(1), T = x.dim(2), C = x.dim(3);
  const auto& gs = graph.shape();
  const bool per_channel = gs.size() == 3;
  if (gs.size() != 2 && gs.size() != 3) {
    throw ShapeError("contract_nodes: graph must be [N,n] or [C,N,n], got " +
                     shape_str(gs));
  }
  const std::size_t gN = gs[gs.size() - 2], n = gs[gs.size() - 1];
  if (gN != N) {
    throw ShapeError("contract_nodes: node axis mismatch, graph " + shape_str(gs) +
                     " vs signal " + shape_str(x.shape()));
  }
  if (per_channel && gs[0] != C) {
    throw ShapeError("contract_nodes: per-channel axis of graph " + shape_str(gs) +
                     " must equal signal channels " + std::to_string(C));
  }

  Tensor out = Tensor::zeros({B, n, T, C});
  const double* G = graph.values().data();
  const double* X = x.values().data();
  double* O = out.values().data();

  // Channel-major scratch so the inner loop runs over contiguous channels.
  std::vector<double> gt;
  if (per_channel) {
    gt.resize(N * n * C);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t k = 0; k < n; ++k)
          gt[(i * n + k) * C + c] = G[(c * N + i) * n + k];
  }

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t t = 0; t < T; ++t) {
        const double* xr = X + ((b * N + i) * T + t) * C;
        for (std::size_t k = 0; k < n; ++k) {
          double* orow = O + ((b * n + k) * T + t) * C;
          if (per_channel) {
            const double* g = gt.data() + (i * n + k) * C;
            for (std::size_t c = 0; c < C; ++c) orow[c] += g[c] * xr[c];
          } else {
            const double gv = G[i * n + k];
            for (std::size_t c = 0; c < C; ++c) orow[c] += gv * xr[c];
          }
        }
      }
    }
  }
  check_finite("contract_nodes", out);

  auto pg = graph.storage();
  auto px = x.storage();
  record_op("contract_nodes", {graph, x}, out,
            [pg, px, B, N, T, C, n, per_channel](const std::vector<double>& og) {
              const double* G = pg->data.data();
              const double* X = px->data.data();
              const bool need_g = pg->track;
              const bool need_x = px->track;
              double* dgv = need_g ? pg->grad_buffer().data() : nullptr;
              double* dxv = need_x ? px->grad_buffer().data() : nullptr;
              std::vector<double> dgt;
              std::vector<double> gt;
              if (per_channel) {
                gt.resize(N * n * C);
                for (std::size_t c = 0; c < C; ++c)
                  for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t k = 0; k < n; ++k)
                      gt[(i * n + k) * C + c] = G[(c * N + i) * n + k];
                if (need_g) dgt.assign(N * n * C, 0.0);
              }
              for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t i = 0; i < N; ++i) {
                  for (std::size_t t = 0; t < T; ++t) {
                    const double* xr = X + ((b * N + i) * T + t) * C;
                    double* dxr = need_x ? dxv + ((b * N + i) * T + t) * C : nullptr;
                    for (std::size_t k = 0; k < n; ++k) {
                      const double* ogr = og.data() + ((b * n + k) * T + t) * C;
                      if (per_channel) {
                        const double* g = gt.data() + (i * n + k) * C;
                        double* dg = need_g ? dgt.data() + (i * n + k) * C : nullptr;
                        for (std::size_t c = 0; c < C; ++c) {
                          if (dg) dg[c] += xr[c] * ogr[c];
                          if (dxr) dxr[c] += g[c] * ogr[c];
                        }
                      } else {
                        const double gv = G[i * n + k];
                        double s = 0.0;
                        for (std::size_t c = 0; c < C; ++c) {
                          s += xr[c] * ogr[c];
                          if (dxr) dxr[c] += gv * ogr[c];
                        }
                        if (dgv) dgv[i * n + k] += s;
                      }
                    }
                  }
                }
              }
              if (per_channel && need_g) {
                for (std::size_t c = 0; c < C; ++c)
                  for (std::size_t i = 0; i < N; ++i)
                    for (std::size_t k = 0; k < n; ++k)
                      dgv[(c * N + i) * n + k] += dgt[(i * n + k) * C + c];
              }
            });
  return out;
}

Tensor project_nodes(const Tensor& weight, const Tensor& bias, const Tensor& agg) {
  require_rank4(agg, "project_nodes");
  const std::size_t B = agg.dim(0), n = agg.dim(1), T = agg.dim(2), C = agg.dim(3);
  const auto& ws = weight.shape();
  const bool per_channel = ws.size() == 3;
  if (ws.size() != 2 && ws.size() != 3) {
    throw ShapeError("project_nodes: weight must be [n,N] or [C,n,N], got " +
                     shape_str(ws));
  }
  const std::size_t wn = ws[ws.size() - 2], N = ws[ws.size() - 1];
  if (wn != n) {
    throw ShapeError("project_nodes: aggregated width mismatch, weight " +
                     shape_str(ws) + " vs signal " + shape_str(agg.shape()));
  }
  if (per_channel && ws[0] != C) {
    throw ShapeError("project_nodes: per-channel axis of weight " + shape_str(ws) +
                     " must equal signal channels " + std::to_string(C));
  }
  if (bias.rank() != 1 || bias.dim(0) != N) {
    throw ShapeError("project_nodes: bias must be [N] = [" + std::to_string(N) +
                     "], got " + shape_str(bias.shape()));
  }

  Tensor out = Tensor::zeros({B, N, T, C});
  const double* W = weight.values().data();
  const double* Bv = bias.values().data();
  const double* A = agg.values().data();
  double* O = out.values().data();
  const std::size_t F = T * C;

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 0; j < N; ++j) {
      double* orow = O + (b * N + j) * F;
      std::fill(orow, orow + F, Bv[j]);
    }
    for (std::size_t k = 0; k < n; ++k) {
      const double* ar = A + (b * n + k) * F;
      for (std::size_t j = 0; j < N; ++j) {
        double* orow = O + (b * N + j) * F;
        if (per_channel) {
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c)
              orow[t * C + c] += W[(c * n + k) * N + j] * ar[t * C + c];
        } else {
          const double coeff = W[k * N + j];
          for (std::size_t f = 0; f < F; ++f) orow[f] += coeff * ar[f];
        }
      }
    }
  }
  check_finite("project_nodes", out);

  auto pw = weight.storage();
  auto pbias = bias.storage();
  auto pa = agg.storage();
  record_op("project_nodes", {weight, bias, agg}, out,
            [pw, pbias, pa, B, n, N, T, C, per_channel](const std::vector<double>& og) {
              const std::size_t F = T * C;
              const double* W = pw->data.data();
              const double* A = pa->data.data();
              double* dw = pw->track ? pw->grad_buffer().data() : nullptr;
              double* dbias = pbias->track ? pbias->grad_buffer().data() : nullptr;
              double* da = pa->track ? pa->grad_buffer().data() : nullptr;
              for (std::size_t b = 0; b < B; ++b) {
                if (dbias) {
                  for (std::size_t j = 0; j < N; ++j) {
                    const double* ogr = og.data() + (b * N + j) * F;
                    double s = 0.0;
                    for (std::size_t f = 0; f < F; ++f) s += ogr[f];
                    dbias[j] += s;
                  }
                }
                for (std::size_t k = 0; k < n; ++k) {
                  const double* ar = A + (b * n + k) * F;
                  double* dar = da ? da + (b * n + k) * F : nullptr;
                  for (std::size_t j = 0; j < N; ++j) {
                    const double* ogr = og.data() + (b * N + j) * F;
                    if (per_channel) {
                      for (std::size_t t = 0; t < T; ++t)
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t f = t * C + c;
                          const double wv = W[(c * n + k) * N + j];
                          if (dw) dw[(c * n + k) * N + j] += ar[f] * ogr[f];
                          if (dar) dar[f] += wv * ogr[f];
                        }
                    } else {
                      const double coeff = W[k * N + j];
                      double s = 0.0;
                      for (std::size_t f = 0; f < F; ++f) {
                        s += ar[f] * ogr[f];
                        if (dar) dar[f] += coeff * ogr[f];
                      }
                      if (dw) dw[k * N + j] += s;
                    }
                  }
                }
              }
            });
  return out;
}

Tensor dense_graph_apply(const Tensor& adj, const Tensor& x) {
  require_rank4(x, "dense_graph_apply");
  const auto& as = adj.shape();
  if (as.size() != 2 || as[0] != as[1]) {
    throw ShapeError("dense_graph_apply: adjacency must be square [N,N], got " +
                     shape_str(as));
  }
  const std::size_t N = as[0];
  if (x.dim(1) != N) {
    throw ShapeError("dense_graph_apply: node axis mismatch, adjacency " +
                     shape_str(as) + " vs signal " + shape_str(x.shape()));
  }
  const std::size_t B = x.dim(0), T = x.dim(2), C = x.dim(3), F = T * C;

  Tensor out = Tensor::zeros({B, N, T, C});
  const double* Adj = adj.values().data();
  const double* X = x.values().data();
  double* O = out.values().data();
  for (std::size_t b = 0; b < B; ++b) {
    const double* Xs = X + b * N * F;
    double* Os = O + b * N * F;
    for (std::size_t j = 0; j < N; ++j) {
      double* orow = Os + j * F;
      const double* arow = Adj + j * N;
      for (std::size_t i = 0; i < N; ++i) {
        const double av = arow[i];
        const double* xrow = Xs + i * F;
        for (std::size_t f = 0; f < F; ++f) orow[f] += av * xrow[f];
      }
    }
  }
  check_finite("dense_graph_apply", out);

  auto padj = adj.storage();
  auto px = x.storage();
  record_op("dense_graph_apply", {adj, x}, out,
            [padj, px, B, N, F](const std::vector<double>& og) {
              const double* Adj = padj->data.data();
              const double* X = px->data.data();
              double* dadj = padj->track ? padj->grad_buffer().data() : nullptr;
              double* dx = px->track ? px->grad_buffer().data() : nullptr;
              for (std::size_t b = 0; b < B; ++b) {
                const double* Xs = X + b * N * F;
                const double* ogs = og.data() + b * N * F;
                double* dxs = dx ? dx + b * N * F : nullptr;
                for (std::size_t j = 0; j < N; ++j) {
                  const double* ogr = ogs + j * F;
                  const double* arow = Adj + j * N;
                  double* darow = dadj ? dadj + j * N : nullptr;
                  for (std::size_t i = 0; i < N; ++i) {
                    const double* xrow = Xs + i * F;
                    double s = 0.0;
                    if (dxs) {
                      const double av = arow[i];
                      double* dxrow = dxs + i * F;
                      for (std::size_t f = 0; f < F; ++f) {
                        s += ogr[f] * xrow[f];
                        dxrow[f] += av * ogr[f];
                      }
                    } else {
                      for (std::size_t f = 0; f < F; ++f) s += ogr[f] * xrow[f];
                    }
                    if (darow) darow[i] += s;
                  }
                }
              }
            });
  return out;
}

// --- softmax / layernorm -------------------------------------------------------

Tensor softmax_columns(const Tensor& z) {
  const auto& sh = z.shape();
  if (sh.size() < 2) {
    throw ShapeError("softmax_columns: need rank >= 2, got " + shape_str(sh));
  }
  const std::size_t R = sh[sh.size() - 2], C = sh[sh.size() - 1];
  const std::size_t nb = z.numel() / (R * C);

  Tensor out = Tensor::zeros(sh);
  const double* Z = z.values().data();
  double* O = out.values().data();
  for (std::size_t b = 0; b < nb; ++b) {
    const double* zs = Z + b * R * C;
    double* os = O + b * R * C;
    for (std::size_t c = 0; c < C; ++c) {
      double m = zs[c];
      for (std::size_t r = 1; r < R; ++r) m = std::max(m, zs[r * C + c]);
      double sum = 0.0;
      for (std::size_t r = 0; r < R; ++r) {
        const double e = std::exp(zs[r * C + c] - m);
        os[r * C + c] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::size_t r = 0; r < R; ++r) os[r * C + c] *= inv;
    }
  }
  check_finite("softmax_columns", out);

  auto pz = z.storage();
  auto po = out.storage();
  record_op("softmax_columns", {z}, out,
            [pz, po, nb, R, C](const std::vector<double>& og) {
              if (!pz->track) return;
              double* dz = pz->grad_buffer().data();
              const double* S = po->data.data();
              for (std::size_t b = 0; b < nb; ++b) {
                const std::size_t base = b * R * C;
                for (std::size_t c = 0; c < C; ++c) {
                  double dot = 0.0;
                  for (std::size_t r = 0; r < R; ++r) {
                    dot += og[base + r * C + c] * S[base + r * C + c];
                  }
                  for (std::size_t r = 0; r < R; ++r) {
                    const std::size_t k = base + r * C + c;
                    dz[k] += S[k] * (og[k] - dot);
                  }
                }
              }
            });
  return out;
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const auto& sh = x.shape();
  if (sh.empty()) throw ShapeError("layernorm: scalar input");
  const std::size_t C = sh.back();
  if (gain.rank() != 1 || gain.dim(0) != C || bias.rank() != 1 || bias.dim(0) != C) {
    throw ShapeError("layernorm: gain/bias must be [" + std::to_string(C) +
                     "], got " + shape_str(gain.shape()) + ", " +
                     shape_str(bias.shape()));
  }
  constexpr double kEps = 1e-5;
  const std::size_t rows = x.numel() / C;

  Tensor out = Tensor::zeros(sh);
  const double* X = x.values().data();
  const double* G = gain.values().data();
  const double* Bv = bias.values().data();
  double* O = out.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X + r * C;
    double* orow = O + r * C;
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= double(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = xr[c] - mean;
      var += d * d;
    }
    var /= double(C);
    const double inv = 1.0 / std::sqrt(var + kEps);
    for (std::size_t c = 0; c < C; ++c) {
      orow[c] = G[c] * (xr[c] - mean) * inv + Bv[c];
    }
  }
  check_finite("layernorm", out);

  auto px = x.storage();
  auto pg = gain.storage();
  auto pb = bias.storage();
  record_op("layernorm", {x, gain, bias}, out,
            [px, pg, pb, rows, C](const std::vector<double>& og) {
              constexpr double kEps = 1e-5;
              const double* X = px->data.data();
              const double* G = pg->data.data();
              double* dx = px->track ? px->grad_buffer().data() : nullptr;
              double* dg = pg->track ? pg->grad_buffer().data() : nullptr;
              double* db = pb->track ? pb->grad_buffer().data() : nullptr;
              std::vector<double> xhat(C);
              for (std::size_t r = 0; r < rows; ++r) {
                const double* xr = X + r * C;
                const double* ogr = og.data() + r * C;
                double mean = 0.0;
                for (std::size_t c = 0; c < C; ++c) mean += xr[c];
                mean /= double(C);
                double var = 0.0;
                for (std::size_t c = 0; c < C; ++c) {
                  const double d = xr[c] - mean;
                  var += d * d;
                }
                var /= double(C);
                const double inv = 1.0 / std::sqrt(var + kEps);
                for (std::size_t c = 0; c < C; ++c) xhat[c] = (xr[c] - mean) * inv;
                if (dg || db) {
                  for (std::size_t c = 0; c < C; ++c) {
                    if (dg) dg[c] += ogr[c] * xhat[c];
                    if (db) db[c] += ogr[c];
                  }
                }
                if (dx) {
                  double mg = 0.0, mgx = 0.0;
                  for (std::size_t c = 0; c < C; ++c) {
                    const double gc = G[c] * ogr[c];
                    mg += gc;
                    mgx += gc * xhat[c];
                  }
                  mg /= double(C);
                  mgx /= double(C);
                  double* dxr = dx + r * C;
                  for (std::size_t c = 0; c < C; ++c) {
                    const double gc = G[c] * ogr[c];
                    dxr[c] += inv * (gc - mg - xhat[c] * mgx);
                  }
                }
              }
            });
  return out;
}

Tensor embedding_lookup(const Tensor& table, const IntTensor& idx) {
  const auto& ts = table.shape();
  if (ts.size() != 2) {
    throw ShapeError("embedding_lookup: table must be [V,H], got " + shape_str(ts));
  }
  const std::size_t V = ts[0], H = ts[1];
  for (std::size_t p = 0; p < idx.values.size(); ++p) {
    const std::int64_t row = idx.values[p];
    if (row < 0 || std::size_t(row) >= V) {
      throw IndexError("embedding_lookup: index " + std::to_string(row) +
                       " at position " + std::to_string(p) +
                       " out of range [0, " + std::to_string(V) + ")");
    }
  }
  Shape out_shape = idx.shape;
  out_shape.push_back(H);
  Tensor out = Tensor::zeros(out_shape);
  const double* Tb = table.values().data();
  double* O = out.values().data();
  for (std::size_t p = 0; p < idx.values.size(); ++p) {
    const double* row = Tb + std::size_t(idx.values[p]) * H;
    std::copy(row, row + H, O + p * H);
  }
  check_finite("embedding_lookup", out);

  auto pt = table.storage();
  const std::vector<std::int64_t> rows = idx.values;
  record_op("embedding_lookup", {table}, out,
            [pt, rows, H](const std::vector<double>& og) {
              if (!pt->track) return;
              double* dt = pt->grad_buffer().data();
              for (std::size_t p = 0; p < rows.size(); ++p) {
                double* drow = dt + std::size_t(rows[p]) * H;
                const double* ogr = og.data() + p * H;
                for (std::size_t h = 0; h < H; ++h) drow[h] += ogr[h];
              }
            });
  return out;
}

}  // namespace fsts

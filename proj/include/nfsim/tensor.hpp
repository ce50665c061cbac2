// Copyright Contributors to the nfsim Project
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff over dense row-major matrices of doubles.
// A Tape records one forward pass; backward() replays it in exact reverse
// order. Parameters live outside the tape and are aliased by leaf nodes,
// so their gradients accumulate in place across a step.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nfsim/core.hpp"

namespace nfsim::ad {

enum class Op : uint8_t {
  kLeaf,
  kConst,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatmul,
  kRelu,
  kSigmoid,
  kExp,
  kLog,
  kSin,
  kCos,
  kSoftplus,
  kConcat,
  kSum,
  kBroadcast,
  kClamp,
  kRowGather,
  kSelectCol,
  kRowMax,
  kSegExCumsum,
  kSegSum,
  kGather8,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConst: return "const";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kMatmul: return "matmul";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSin: return "sin";
    case Op::kCos: return "cos";
    case Op::kSoftplus: return "softplus";
    case Op::kConcat: return "concat";
    case Op::kSum: return "sum";
    case Op::kBroadcast: return "broadcast";
    case Op::kClamp: return "clamp";
    case Op::kRowGather: return "row_gather";
    case Op::kSelectCol: return "select_col";
    case Op::kRowMax: return "row_max";
    case Op::kSegExCumsum: return "seg_excumsum";
    case Op::kSegSum: return "seg_sum";
    case Op::kGather8: return "gather8";
  }
  return "?";
}

// Plain host matrix (non-differentiable inputs: positions, encodings, ...).
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(size_t(r) * c, 0.0) {}
  Mat(int r, int c, std::vector<double> data) : rows(r), cols(c), v(std::move(data)) {}

  double& at(int r, int c) { return v[size_t(r) * cols + c]; }
  double at(int r, int c) const { return v[size_t(r) * cols + c]; }
  int64_t numel() const { return int64_t(rows) * cols; }
};

// A learnable parameter. Gradients accumulate into `grad` during backward.
struct Param {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;

  Param(std::string n, int r, int c)
      : name(std::move(n)), rows(r), cols(c), value(size_t(r) * c, 0.0), grad(size_t(r) * c, 0.0) {}

  int64_t numel() const { return int64_t(rows) * cols; }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

  void init_uniform(Rng& rng, double lo, double hi) {
    for (auto& x : value) x = rng.uniform(lo, hi);
  }

  // fan-in scaled uniform (rows = fan_in for weight matrices)
  void init_xavier(Rng& rng) {
    double a = std::sqrt(6.0 / double(rows + cols));
    init_uniform(rng, -a, a);
  }

  // grow by rows, zero-filled (object library growth during edits)
  void append_rows(int extra) {
    require(extra >= 0, "append_rows: negative");
    rows += extra;
    value.resize(size_t(rows) * cols, 0.0);
    grad.resize(size_t(rows) * cols, 0.0);
  }
};

// Named parameter registry; owns storage, iteration order is registration
// order (deterministic init, checkpoints, optimizer state).
class ParamStore {
 public:
  Param* create(const std::string& name, int rows, int cols) {
    require(find(name) == nullptr, "ParamStore: duplicate parameter '" + name + "'");
    params_.push_back(std::make_unique<Param>(name, rows, cols));
    return params_.back().get();
  }

  Param* find(const std::string& name) const {
    for (auto& p : params_)
      if (p->name == name) return p.get();
    return nullptr;
  }

  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

// Corner plan for one hash-grid level: 8 table rows and trilinear weights
// per sample. Owned by the tape node; indices are not differentiated.
struct GatherPlan {
  int n = 0;                  // samples
  std::vector<uint32_t> idx;  // n*8 table rows
  std::vector<double> w;      // n*8 weights, each row sums to 1
};

class Tape;

// Handle into the tape. Copyable, trivially small.
class Value {
 public:
  Value() = default;
  Value(Tape* t, int id) : tape_(t), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

  int rows() const;
  int cols() const;
  int64_t numel() const { return int64_t(rows()) * cols(); }
  std::span<const double> data() const;
  double scalar() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

struct Node {
  Op op = Op::kConst;
  int a = -1;
  int b = -1;
  int rows = 0;
  int cols = 0;
  bool rg = false;  // requires grad
  Param* param = nullptr;
  std::vector<double> buf;
  std::vector<double> gbuf;  // lazily allocated
  // op-specific payload
  double c0 = 0.0, c1 = 0.0;                    // clamp bounds
  int axis = -1;                                // sum / concat / broadcast
  std::vector<int> extra;                       // concat inputs beyond (a, b)
  std::shared_ptr<std::vector<int>> indices;    // row_gather / select_col
  std::shared_ptr<std::vector<int64_t>> segs;   // segment offsets, size R+1
  std::shared_ptr<GatherPlan> plan;             // gather8
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When false, newly recorded nodes never require grad (frozen evaluation).
  bool grad_enabled = true;

  // Test hook: negates the propagated gradient of one op kind so the
  // finite-difference checker can prove it catches broken rules.
  Op fault_op = Op::kLeaf;  // kLeaf means "no fault"

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

  const Node& node(int id) const { return nodes_[id]; }
  Node& node(int id) { return nodes_[id]; }

  std::span<const double> data(int id) const {
    const Node& n = nodes_[id];
    if (n.op == Op::kLeaf) return {n.param->value.data(), n.param->value.size()};
    return {n.buf.data(), n.buf.size()};
  }

  std::span<double> grad(int id) {
    Node& n = nodes_[id];
    if (n.op == Op::kLeaf) return {n.param->grad.data(), n.param->grad.size()};
    if (n.gbuf.empty()) n.gbuf.assign(size_t(n.rows) * n.cols, 0.0);
    return {n.gbuf.data(), n.gbuf.size()};
  }

  bool has_grad(int id) const {
    const Node& n = nodes_[id];
    if (n.op == Op::kLeaf) return true;
    return !n.gbuf.empty();
  }

  // ---- node creation -------------------------------------------------------

  Value leaf(Param* p) {
    Node n;
    n.op = Op::kLeaf;
    n.param = p;
    n.rows = p->rows;
    n.cols = p->cols;
    n.rg = grad_enabled;
    return push(std::move(n));
  }

  Value constant(Mat m) {
    Node n;
    n.op = Op::kConst;
    n.rows = m.rows;
    n.cols = m.cols;
    n.buf = std::move(m.v);
    n.rg = false;
    return push(std::move(n));
  }

  Value constant(int rows, int cols, std::vector<double> data) {
    require(int64_t(data.size()) == int64_t(rows) * cols, "constant: data size mismatch");
    return constant(Mat(rows, cols, std::move(data)));
  }

  Value scalar(double v) { return constant(1, 1, {v}); }

  Value full(int rows, int cols, double v) {
    return constant(Mat(rows, cols, std::vector<double>(size_t(rows) * cols, v)));
  }

  // ---- elementwise binary with {equal, 1}-dim broadcasting ----------------

  Value add(Value a, Value b) { return binary(Op::kAdd, a, b); }
  Value sub(Value a, Value b) { return binary(Op::kSub, a, b); }
  Value mul(Value a, Value b) { return binary(Op::kMul, a, b); }
  Value div(Value a, Value b) { return binary(Op::kDiv, a, b); }

  Value matmul(Value a, Value b) {
    const Node& na = nodes_[a.id()];
    const Node& nb = nodes_[b.id()];
    require(na.cols == nb.rows, "matmul: inner dims mismatch [" + shape_str(a.id()) + "] x [" +
                                    shape_str(b.id()) + "]");
    Node n;
    n.op = Op::kMatmul;
    n.a = a.id();
    n.b = b.id();
    n.rows = na.rows;
    n.cols = nb.cols;
    n.rg = grad_enabled && (na.rg || nb.rg);
    n.buf.assign(size_t(n.rows) * n.cols, 0.0);
    matmul_accum(data(a.id()).data(), data(b.id()).data(), n.buf.data(), na.rows, na.cols, nb.cols,
                 false, false);
    return push(std::move(n));
  }

  Value relu(Value a) { return unary(Op::kRelu, a); }
  Value sigmoid(Value a) { return unary(Op::kSigmoid, a); }
  Value exp(Value a) { return unary(Op::kExp, a); }
  Value log(Value a) { return unary(Op::kLog, a); }
  Value sin(Value a) { return unary(Op::kSin, a); }
  Value cos(Value a) { return unary(Op::kCos, a); }
  Value softplus(Value a) { return unary(Op::kSoftplus, a); }

  Value concat(const std::vector<Value>& parts, int axis) {
    require(!parts.empty(), "concat: no inputs");
    require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
    int rows = nodes_[parts[0].id()].rows;
    int cols = nodes_[parts[0].id()].cols;
    int total = axis == 0 ? rows : cols;
    bool rg = false;
    for (size_t i = 1; i < parts.size(); i++) {
      const Node& p = nodes_[parts[i].id()];
      if (axis == 0) {
        require(p.cols == cols, "concat: column mismatch");
        total += p.rows;
      } else {
        require(p.rows == rows, "concat: row mismatch");
        total += p.cols;
      }
    }
    for (auto& p : parts) rg = rg || nodes_[p.id()].rg;

    Node n;
    n.op = Op::kConcat;
    n.axis = axis;
    n.rows = axis == 0 ? total : rows;
    n.cols = axis == 0 ? cols : total;
    n.rg = grad_enabled && rg;
    n.a = parts[0].id();
    if (parts.size() > 1) n.b = parts[1].id();
    for (size_t i = 2; i < parts.size(); i++) n.extra.push_back(parts[i].id());
    n.buf.assign(size_t(n.rows) * n.cols, 0.0);

    if (axis == 0) {
      size_t off = 0;
      for (auto& p : parts) {
        auto d = data(p.id());
        std::copy(d.begin(), d.end(), n.buf.begin() + off);
        off += d.size();
      }
    } else {
      int coff = 0;
      for (auto& p : parts) {
        const Node& np = nodes_[p.id()];
        auto d = data(p.id());
        for (int r = 0; r < rows; r++)
          std::copy(d.begin() + size_t(r) * np.cols, d.begin() + size_t(r + 1) * np.cols,
                    n.buf.begin() + size_t(r) * n.cols + coff);
        coff += np.cols;
      }
    }
    return push(std::move(n));
  }

  // axis: -1 all -> [1,1]; 0 -> [1,cols]; 1 -> [rows,1]
  Value sum(Value a, int axis = -1) {
    const Node& na = nodes_[a.id()];
    require(axis >= -1 && axis <= 1, "sum: bad axis");
    Node n;
    n.op = Op::kSum;
    n.axis = axis;
    n.a = a.id();
    n.rows = axis == 1 ? na.rows : 1;
    n.cols = axis == 0 ? na.cols : 1;
    n.rg = grad_enabled && na.rg;
    n.buf.assign(size_t(n.rows) * n.cols, 0.0);
    auto d = data(a.id());
    if (axis == -1) {
      // fixed-chunk partials keep the result identical for any worker count
      n.buf[0] = chunked_sum(d.data(), d.size());
    } else if (axis == 0) {
      for (int r = 0; r < na.rows; r++)
        for (int c = 0; c < na.cols; c++) n.buf[c] += d[size_t(r) * na.cols + c];
    } else {
      for (int r = 0; r < na.rows; r++) {
        double s = 0;
        for (int c = 0; c < na.cols; c++) s += d[size_t(r) * na.cols + c];
        n.buf[r] = s;
      }
    }
    return push(std::move(n));
  }

  Value broadcast(Value a, int rows, int cols) {
    const Node& na = nodes_[a.id()];
    require((na.rows == rows || na.rows == 1) && (na.cols == cols || na.cols == 1),
            "broadcast: [" + shape_str(a.id()) + "] not expandable to [" + std::to_string(rows) +
                "x" + std::to_string(cols) + "]");
    Node n;
    n.op = Op::kBroadcast;
    n.a = a.id();
    n.rows = rows;
    n.cols = cols;
    n.rg = grad_enabled && na.rg;
    n.buf.assign(size_t(rows) * cols, 0.0);
    auto d = data(a.id());
    for (int r = 0; r < rows; r++) {
      int ar = na.rows == 1 ? 0 : r;
      for (int c = 0; c < cols; c++) {
        int ac = na.cols == 1 ? 0 : c;
        n.buf[size_t(r) * cols + c] = d[size_t(ar) * na.cols + ac];
      }
    }
    return push(std::move(n));
  }

  // gradient passes only strictly inside (lo, hi)
  Value clamp(Value a, double lo, double hi) {
    const Node& na = nodes_[a.id()];
    Node n;
    n.op = Op::kClamp;
    n.a = a.id();
    n.rows = na.rows;
    n.cols = na.cols;
    n.c0 = lo;
    n.c1 = hi;
    n.rg = grad_enabled && na.rg;
    n.buf.resize(size_t(n.rows) * n.cols);
    auto d = data(a.id());
    for (size_t i = 0; i < n.buf.size(); i++) n.buf[i] = std::min(hi, std::max(lo, d[i]));
    return push(std::move(n));
  }

  // constant copy; gradient stops here
  Value detach(Value a) {
    auto d = data(a.id());
    const Node& na = nodes_[a.id()];
    return constant(na.rows, na.cols, std::vector<double>(d.begin(), d.end()));
  }

  // out[i, :] = a[idx[i], :]
  Value row_gather(Value a, std::vector<int> idx) {
    const Node& na = nodes_[a.id()];
    for (int i : idx) require(i >= 0 && i < na.rows, "row_gather: index out of range");
    Node n;
    n.op = Op::kRowGather;
    n.a = a.id();
    n.rows = int(idx.size());
    n.cols = na.cols;
    n.rg = grad_enabled && na.rg;
    n.indices = std::make_shared<std::vector<int>>(std::move(idx));
    n.buf.resize(size_t(n.rows) * n.cols);
    auto d = data(a.id());
    for (int i = 0; i < n.rows; i++)
      std::copy(d.begin() + size_t((*n.indices)[i]) * na.cols,
                d.begin() + size_t((*n.indices)[i] + 1) * na.cols, n.buf.begin() + size_t(i) * n.cols);
    return push(std::move(n));
  }

  // out[i, 0] = a[i, idx[i]]
  Value select_col(Value a, std::vector<int> idx) {
    const Node& na = nodes_[a.id()];
    require(int(idx.size()) == na.rows, "select_col: one index per row required");
    for (int c : idx) require(c >= 0 && c < na.cols, "select_col: column out of range");
    Node n;
    n.op = Op::kSelectCol;
    n.a = a.id();
    n.rows = na.rows;
    n.cols = 1;
    n.rg = grad_enabled && na.rg;
    n.indices = std::make_shared<std::vector<int>>(std::move(idx));
    n.buf.resize(size_t(n.rows));
    auto d = data(a.id());
    for (int i = 0; i < n.rows; i++) n.buf[i] = d[size_t(i) * na.cols + (*n.indices)[i]];
    return push(std::move(n));
  }

  // [rows, 1] max per row; not differentiated (use detached, e.g. softmax shift)
  Value row_max(Value a) {
    const Node& na = nodes_[a.id()];
    Node n;
    n.op = Op::kRowMax;
    n.a = a.id();
    n.rows = na.rows;
    n.cols = 1;
    n.rg = false;
    n.buf.resize(size_t(n.rows));
    auto d = data(a.id());
    for (int r = 0; r < na.rows; r++) {
      double m = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < na.cols; c++) m = std::max(m, d[size_t(r) * na.cols + c]);
      n.buf[r] = m;
    }
    return push(std::move(n));
  }

  // exclusive prefix sums within segments; a is [N,1], segs has R+1 offsets
  Value seg_excumsum(Value a, std::shared_ptr<std::vector<int64_t>> segs) {
    const Node& na = nodes_[a.id()];
    require(na.cols == 1, "seg_excumsum: column vector required");
    require(!segs->empty() && segs->back() == na.rows, "seg_excumsum: offsets must end at N");
    Node n;
    n.op = Op::kSegExCumsum;
    n.a = a.id();
    n.rows = na.rows;
    n.cols = 1;
    n.rg = grad_enabled && na.rg;
    n.segs = std::move(segs);
    n.buf.resize(size_t(n.rows));
    auto d = data(a.id());
    const auto& off = *n.segs;
    for (size_t s = 0; s + 1 < off.size(); s++) {
      double acc = 0.0;
      for (int64_t i = off[s]; i < off[s + 1]; i++) {
        n.buf[i] = acc;
        acc += d[i];
      }
    }
    return push(std::move(n));
  }

  // per-segment sums: a is [N,C], result [R,C]
  Value seg_sum(Value a, std::shared_ptr<std::vector<int64_t>> segs) {
    const Node& na = nodes_[a.id()];
    require(!segs->empty() && segs->back() == na.rows, "seg_sum: offsets must end at N");
    Node n;
    n.op = Op::kSegSum;
    n.a = a.id();
    n.rows = int(segs->size()) - 1;
    n.cols = na.cols;
    n.rg = grad_enabled && na.rg;
    n.segs = std::move(segs);
    n.buf.assign(size_t(n.rows) * n.cols, 0.0);
    auto d = data(a.id());
    const auto& off = *n.segs;
    for (int s = 0; s < n.rows; s++)
      for (int64_t i = off[s]; i < off[s + 1]; i++)
        for (int c = 0; c < na.cols; c++) n.buf[size_t(s) * na.cols + c] += d[size_t(i) * na.cols + c];
    return push(std::move(n));
  }

  // 8-corner weighted gather out of a [T,F] table
  Value gather8(Value table, std::shared_ptr<GatherPlan> plan) {
    const Node& nt = nodes_[table.id()];
    Node n;
    n.op = Op::kGather8;
    n.a = table.id();
    n.rows = plan->n;
    n.cols = nt.cols;
    n.rg = grad_enabled && nt.rg;
    n.plan = std::move(plan);
    n.buf.assign(size_t(n.rows) * n.cols, 0.0);
    auto d = data(table.id());
    const GatherPlan& p = *n.plan;
    const int F = n.cols;
    double* out = n.buf.data();
    const double* tab = d.data();
    maybe_parallel_for(p.n, [&](int64_t lo, int64_t hi) {
      for (int64_t i = lo; i < hi; i++) {
        double* o = out + i * F;
        for (int c = 0; c < 8; c++) {
          const double w = p.w[i * 8 + c];
          const double* t = tab + size_t(p.idx[i * 8 + c]) * F;
          for (int f = 0; f < F; f++) o[f] += w * t[f];
        }
      }
    });
    return push(std::move(n));
  }

  // ---- backward ------------------------------------------------------------

  void backward(Value loss) {
    const Node& ln = nodes_[loss.id()];
    require(int64_t(ln.rows) * ln.cols == 1,
            "backward: loss must be scalar-shaped, got [" + shape_str(loss.id()) + "]");
    if (!ln.rg) return;
    grad(loss.id())[0] = 1.0;
    for (int i = loss.id(); i >= 0; i--) {
      Node& n = nodes_[i];
      if (!n.rg || n.op == Op::kLeaf || n.op == Op::kConst) continue;
      if (n.gbuf.empty()) continue;  // not reached from the loss
      backprop_node(i);
    }
  }

 private:
  std::vector<Node> nodes_;

  Value push(Node n) {
    nodes_.push_back(std::move(n));
    return Value(this, int(nodes_.size()) - 1);
  }

  std::string shape_str(int id) const {
    return std::to_string(nodes_[id].rows) + "x" + std::to_string(nodes_[id].cols);
  }

  static double chunked_sum(const double* d, size_t n) {
    constexpr size_t kChunk = 8192;
    double total = 0.0;
    for (size_t base = 0; base < n; base += kChunk) {
      size_t end = std::min(n, base + kChunk);
      double s = 0.0;
      for (size_t i = base; i < end; i++) s += d[i];
      total += s;
    }
    return total;
  }

  Value unary(Op op, Value a) {
    const Node& na = nodes_[a.id()];
    Node n;
    n.op = op;
    n.a = a.id();
    n.rows = na.rows;
    n.cols = na.cols;
    n.rg = grad_enabled && na.rg;
    n.buf.resize(size_t(n.rows) * n.cols);
    auto d = data(a.id());
    double* out = n.buf.data();
    const double* in = d.data();
    int64_t numel = int64_t(n.rows) * n.cols;
    maybe_parallel_for(numel, [&](int64_t lo, int64_t hi) {
      switch (op) {
        case Op::kRelu:
          for (int64_t i = lo; i < hi; i++) out[i] = in[i] > 0 ? in[i] : 0.0;
          break;
        case Op::kSigmoid:
          for (int64_t i = lo; i < hi; i++) out[i] = 1.0 / (1.0 + std::exp(-in[i]));
          break;
        case Op::kExp:
          for (int64_t i = lo; i < hi; i++) out[i] = std::exp(in[i]);
          break;
        case Op::kLog:
          for (int64_t i = lo; i < hi; i++) out[i] = std::log(in[i]);
          break;
        case Op::kSin:
          for (int64_t i = lo; i < hi; i++) out[i] = std::sin(in[i]);
          break;
        case Op::kCos:
          for (int64_t i = lo; i < hi; i++) out[i] = std::cos(in[i]);
          break;
        case Op::kSoftplus:
          // log(1+e^x); switches to x for large x to stay finite
          for (int64_t i = lo; i < hi; i++)
            out[i] = in[i] > 30.0 ? in[i] : std::log1p(std::exp(in[i]));
          break;
        default:
          break;
      }
    });
    return push(std::move(n));
  }

  Value binary(Op op, Value a, Value b) {
    const Node& na = nodes_[a.id()];
    const Node& nb = nodes_[b.id()];
    require((na.rows == nb.rows || na.rows == 1 || nb.rows == 1) &&
                (na.cols == nb.cols || na.cols == 1 || nb.cols == 1),
            std::string(op_name(op)) + ": shape mismatch [" + shape_str(a.id()) + "] vs [" +
                shape_str(b.id()) + "]");
    Node n;
    n.op = op;
    n.a = a.id();
    n.b = b.id();
    n.rows = std::max(na.rows, nb.rows);
    n.cols = std::max(na.cols, nb.cols);
    n.rg = grad_enabled && (na.rg || nb.rg);
    n.buf.resize(size_t(n.rows) * n.cols);

    auto da = data(a.id());
    auto db = data(b.id());
    const double* pa = da.data();
    const double* pb = db.data();
    double* out = n.buf.data();
    const int ac = na.cols, bc = nb.cols, oc = n.cols;
    const bool a1r = na.rows == 1, a1c = na.cols == 1, b1r = nb.rows == 1, b1c = nb.cols == 1;

    maybe_parallel_for(n.rows, [&](int64_t rlo, int64_t rhi) {
      for (int64_t r = rlo; r < rhi; r++) {
        const double* ar = pa + size_t(a1r ? 0 : r) * ac;
        const double* br = pb + size_t(b1r ? 0 : r) * bc;
        double* o = out + size_t(r) * oc;
        for (int c = 0; c < oc; c++) {
          double x = ar[a1c ? 0 : c];
          double y = br[b1c ? 0 : c];
          switch (op) {
            case Op::kAdd: o[c] = x + y; break;
            case Op::kSub: o[c] = x - y; break;
            case Op::kMul: o[c] = x * y; break;
            case Op::kDiv: o[c] = x / y; break;
            default: break;
          }
        }
      }
    });
    return push(std::move(n));
  }

  // C += op(A) x op(B); contiguous row-major panels
  static void matmul_accum(const double* A, const double* B, double* C, int m, int k, int n,
                           bool transA, bool transB) {
    if (!transA && !transB) {
      maybe_parallel_for(m, [&](int64_t ilo, int64_t ihi) {
        for (int64_t i = ilo; i < ihi; i++) {
          double* c = C + size_t(i) * n;
          for (int kk = 0; kk < k; kk++) {
            const double a = A[size_t(i) * k + kk];
            const double* b = B + size_t(kk) * n;
            for (int j = 0; j < n; j++) c[j] += a * b[j];
          }
        }
      });
    } else if (!transA && transB) {
      // C[m,n] += A[m,k] * B^T, B is [n,k]
      maybe_parallel_for(m, [&](int64_t ilo, int64_t ihi) {
        for (int64_t i = ilo; i < ihi; i++) {
          const double* a = A + size_t(i) * k;
          double* c = C + size_t(i) * n;
          for (int j = 0; j < n; j++) {
            const double* b = B + size_t(j) * k;
            double s = 0.0;
            for (int kk = 0; kk < k; kk++) s += a[kk] * b[kk];
            c[j] += s;
          }
        }
      });
    } else if (transA && !transB) {
      // C[m,n] += A^T * B, A is [k,m]
      maybe_parallel_for(m, [&](int64_t ilo, int64_t ihi) {
        for (int64_t i = ilo; i < ihi; i++) {
          double* c = C + size_t(i) * n;
          for (int kk = 0; kk < k; kk++) {
            const double a = A[size_t(kk) * m + i];
            const double* b = B + size_t(kk) * n;
            for (int j = 0; j < n; j++) c[j] += a * b[j];
          }
        }
      });
    } else {
      ensure(false, "matmul_accum: double transpose unused");
    }
  }

  void add_reduced(int target, const std::vector<double>& g, int grows, int gcols) {
    // reduce g [grows,gcols] onto target's shape (handles broadcast backward)
    Node& t = nodes_[target];
    auto tg = grad(target);
    if (t.rows == grows && t.cols == gcols) {
      maybe_parallel_for(int64_t(grows) * gcols, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; i++) tg[i] += g[i];
      });
      return;
    }
    for (int r = 0; r < grows; r++) {
      int tr = t.rows == 1 ? 0 : r;
      for (int c = 0; c < gcols; c++) {
        int tc = t.cols == 1 ? 0 : c;
        tg[size_t(tr) * t.cols + tc] += g[size_t(r) * gcols + c];
      }
    }
  }

  void backprop_node(int id) {
    Node& n = nodes_[id];
    std::vector<double> gout_store;
    const double* gout = n.gbuf.data();
    if (fault_op == n.op) {
      gout_store.assign(n.gbuf.begin(), n.gbuf.end());
      for (auto& v : gout_store) v = -v;
      gout = gout_store.data();
    }
    const int64_t numel = int64_t(n.rows) * n.cols;

    auto input_rg = [&](int in) { return in >= 0 && nodes_[in].rg; };

    switch (n.op) {
      case Op::kAdd:
      case Op::kSub:
      case Op::kMul:
      case Op::kDiv: {
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        auto da = data(n.a);
        auto db = data(n.b);
        const bool a1r = na.rows == 1, a1c = na.cols == 1, b1r = nb.rows == 1, b1c = nb.cols == 1;
        // local grads expanded to output shape, then reduced onto inputs
        if (input_rg(n.a)) {
          std::vector<double> ga(static_cast<size_t>(numel));
          for (int r = 0; r < n.rows; r++)
            for (int c = 0; c < n.cols; c++) {
              size_t i = size_t(r) * n.cols + c;
              double g = gout[i];
              if (n.op == Op::kMul) g *= db[size_t(b1r ? 0 : r) * nb.cols + (b1c ? 0 : c)];
              if (n.op == Op::kDiv) g /= db[size_t(b1r ? 0 : r) * nb.cols + (b1c ? 0 : c)];
              ga[i] = g;
            }
          add_reduced(n.a, ga, n.rows, n.cols);
        }
        if (input_rg(n.b)) {
          std::vector<double> gb(static_cast<size_t>(numel));
          for (int r = 0; r < n.rows; r++)
            for (int c = 0; c < n.cols; c++) {
              size_t i = size_t(r) * n.cols + c;
              double g = gout[i];
              if (n.op == Op::kSub) g = -g;
              if (n.op == Op::kMul) g *= da[size_t(a1r ? 0 : r) * na.cols + (a1c ? 0 : c)];
              if (n.op == Op::kDiv) {
                double x = da[size_t(a1r ? 0 : r) * na.cols + (a1c ? 0 : c)];
                double y = db[size_t(b1r ? 0 : r) * nb.cols + (b1c ? 0 : c)];
                g *= -x / (y * y);
              }
              gb[i] = g;
            }
          add_reduced(n.b, gb, n.rows, n.cols);
        }
        break;
      }
      case Op::kMatmul: {
        const Node& na = nodes_[n.a];
        const Node& nb = nodes_[n.b];
        // dA += dC * B^T ; dB += A^T * dC
        if (input_rg(n.a))
          matmul_accum(gout, data(n.b).data(), grad(n.a).data(), na.rows, n.cols, na.cols, false,
                       true);
        if (input_rg(n.b))
          matmul_accum(data(n.a).data(), gout, grad(n.b).data(), nb.rows, na.rows, nb.cols, true,
                       false);
        break;
      }
      case Op::kRelu:
      case Op::kSigmoid:
      case Op::kExp:
      case Op::kLog:
      case Op::kSin:
      case Op::kCos:
      case Op::kSoftplus: {
        if (!input_rg(n.a)) break;
        auto din = data(n.a);
        auto dout = std::span<const double>(n.buf.data(), n.buf.size());
        auto g = grad(n.a);
        const double* in = din.data();
        const double* out = dout.data();
        Op op = n.op;
        maybe_parallel_for(numel, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; i++) {
            double d = 0.0;
            switch (op) {
              case Op::kRelu: d = in[i] > 0 ? 1.0 : 0.0; break;
              case Op::kSigmoid: d = out[i] * (1.0 - out[i]); break;
              case Op::kExp: d = out[i]; break;
              case Op::kLog: d = 1.0 / in[i]; break;
              case Op::kSin: d = std::cos(in[i]); break;
              case Op::kCos: d = -std::sin(in[i]); break;
              case Op::kSoftplus: d = 1.0 / (1.0 + std::exp(-in[i])); break;
              default: break;
            }
            g[i] += gout[i] * d;
          }
        });
        break;
      }
      case Op::kConcat: {
        std::vector<int> parts = {n.a};
        if (n.b >= 0) parts.push_back(n.b);
        for (int e : n.extra) parts.push_back(e);
        if (n.axis == 0) {
          size_t off = 0;
          for (int p : parts) {
            Node& np = nodes_[p];
            size_t sz = size_t(np.rows) * np.cols;
            if (np.rg) {
              auto g = grad(p);
              for (size_t i = 0; i < sz; i++) g[i] += gout[off + i];
            }
            off += sz;
          }
        } else {
          int coff = 0;
          for (int p : parts) {
            Node& np = nodes_[p];
            if (np.rg) {
              auto g = grad(p);
              for (int r = 0; r < n.rows; r++)
                for (int c = 0; c < np.cols; c++)
                  g[size_t(r) * np.cols + c] += gout[size_t(r) * n.cols + coff + c];
            }
            coff += np.cols;
          }
        }
        break;
      }
      case Op::kSum: {
        if (!input_rg(n.a)) break;
        Node& na = nodes_[n.a];
        auto g = grad(n.a);
        if (n.axis == -1) {
          double gv = gout[0];
          maybe_parallel_for(int64_t(na.rows) * na.cols, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; i++) g[i] += gv;
          });
        } else if (n.axis == 0) {
          for (int r = 0; r < na.rows; r++)
            for (int c = 0; c < na.cols; c++) g[size_t(r) * na.cols + c] += gout[c];
        } else {
          for (int r = 0; r < na.rows; r++)
            for (int c = 0; c < na.cols; c++) g[size_t(r) * na.cols + c] += gout[r];
        }
        break;
      }
      case Op::kBroadcast: {
        if (!input_rg(n.a)) break;
        std::vector<double> gv(gout, gout + numel);
        add_reduced(n.a, gv, n.rows, n.cols);
        break;
      }
      case Op::kClamp: {
        if (!input_rg(n.a)) break;
        auto din = data(n.a);
        auto g = grad(n.a);
        for (int64_t i = 0; i < numel; i++)
          if (din[i] > n.c0 && din[i] < n.c1) g[i] += gout[i];
        break;
      }
      case Op::kRowGather: {
        if (!input_rg(n.a)) break;
        auto g = grad(n.a);
        const auto& idx = *n.indices;
        for (int i = 0; i < n.rows; i++)
          for (int c = 0; c < n.cols; c++)
            g[size_t(idx[i]) * n.cols + c] += gout[size_t(i) * n.cols + c];
        break;
      }
      case Op::kSelectCol: {
        if (!input_rg(n.a)) break;
        Node& na = nodes_[n.a];
        auto g = grad(n.a);
        const auto& idx = *n.indices;
        for (int i = 0; i < n.rows; i++) g[size_t(i) * na.cols + idx[i]] += gout[i];
        break;
      }
      case Op::kRowMax:
        break;  // never differentiated
      case Op::kSegExCumsum: {
        if (!input_rg(n.a)) break;
        auto g = grad(n.a);
        const auto& off = *n.segs;
        // d out_i / d a_k = 1 for k < i within a segment -> suffix sums
        for (size_t s = 0; s + 1 < off.size(); s++) {
          double acc = 0.0;
          for (int64_t i = off[s + 1] - 1; i >= off[s]; i--) {
            g[i] += acc;
            acc += gout[i];
          }
        }
        break;
      }
      case Op::kSegSum: {
        if (!input_rg(n.a)) break;
        auto g = grad(n.a);
        const auto& off = *n.segs;
        for (int s = 0; s < n.rows; s++)
          for (int64_t i = off[s]; i < off[s + 1]; i++)
            for (int c = 0; c < n.cols; c++)
              g[size_t(i) * n.cols + c] += gout[size_t(s) * n.cols + c];
        break;
      }
      case Op::kGather8: {
        if (!input_rg(n.a)) break;
        auto g = grad(n.a);
        const GatherPlan& p = *n.plan;
        const int F = n.cols;
        // serial scatter keeps backward bit-deterministic
        for (int i = 0; i < p.n; i++) {
          const double* go = gout + size_t(i) * F;
          for (int c = 0; c < 8; c++) {
            const double w = p.w[size_t(i) * 8 + c];
            double* t = g.data() + size_t(p.idx[size_t(i) * 8 + c]) * F;
            for (int f = 0; f < F; f++) t[f] += w * go[f];
          }
        }
        break;
      }
      case Op::kLeaf:
      case Op::kConst:
        break;
    }
  }
};

inline int Value::rows() const { return tape_->node(id_).rows; }
inline int Value::cols() const { return tape_->node(id_).cols; }
inline std::span<const double> Value::data() const { return tape_->data(id_); }
inline double Value::scalar() const {
  require(numel() == 1, "scalar(): value is not scalar-shaped");
  return data()[0];
}

// Frozen-evaluation scope: nodes recorded inside never require grad.
struct NoGradGuard {
  Tape& tape;
  bool prev;
  explicit NoGradGuard(Tape& t) : tape(t), prev(t.grad_enabled) { t.grad_enabled = false; }
  ~NoGradGuard() { tape.grad_enabled = prev; }
};

}  // namespace nfsim::ad

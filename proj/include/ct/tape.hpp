#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "ct/params.hpp"

namespace ct::ad {

struct Tensor {
  int rows = 0, cols = 0;
  std::vector<double> val;
  std::vector<double> grad;
  std::function<void()> back;  // accumulates into parent grads
  bool needs_grad = false;

  size_t size() const { return static_cast<size_t>(rows) * static_cast<size_t>(cols); }
  double& v(int r, int c) { return val[static_cast<size_t>(r) * cols + c]; }
  double v(int r, int c) const { return val[static_cast<size_t>(r) * cols + c]; }
  double& g(int r, int c) { return grad[static_cast<size_t>(r) * cols + c]; }
};

// Reverse-mode tape. The graph is built forward, so reverse allocation order
// is a valid topological order for backward(). One tape per training step.
class Tape {
 public:
  Tensor* alloc(int rows, int cols, bool needs_grad) {
    auto t = std::make_unique<Tensor>();
    t->rows = rows;
    t->cols = cols;
    t->val.assign(static_cast<size_t>(rows) * cols, 0.0);
    t->grad.assign(static_cast<size_t>(rows) * cols, 0.0);
    t->needs_grad = needs_grad;
    nodes_.push_back(std::move(t));
    return nodes_.back().get();
  }

  Tensor* input(std::span<const double> data, int rows, int cols) {
    if (data.size() != static_cast<size_t>(rows) * cols)
      throw std::invalid_argument("input size mismatch");
    Tensor* t = alloc(rows, cols, false);
    std::copy(data.begin(), data.end(), t->val.begin());
    return t;
  }

  // Parameter leaf; cached so every use within one tape shares the node and
  // gradient contributions accumulate. flush_param_grads() moves grads out.
  Tensor* param(ParamArray& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    Tensor* t = alloc(p.rows, p.cols, true);
    std::copy(p.val.begin(), p.val.end(), t->val.begin());
    param_nodes_[&p] = t;
    return t;
  }

  void backward(Tensor* loss) {
    if (loss->size() != 1) throw std::invalid_argument("backward needs a scalar loss");
    if (!std::isfinite(loss->val[0])) throw std::runtime_error("non-finite loss");
    loss->grad[0] = 1.0;
    for (size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i]->back) nodes_[i]->back();
    }
  }

  void flush_param_grads() {
    for (auto& [p, node] : param_nodes_) {
      for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += node->grad[i];
    }
  }

  // ---- ops ----------------------------------------------------------------

  Tensor* matmul(Tensor* a, Tensor* b) {
    if (a->cols != b->rows) throw std::invalid_argument("matmul shape mismatch");
    Tensor* out = alloc(a->rows, b->cols, a->needs_grad || b->needs_grad);
    const int n = a->rows, k = a->cols, m = b->cols;
    for (int i = 0; i < n; ++i) {
      for (int kk = 0; kk < k; ++kk) {
        const double av = a->v(i, kk);
        if (av == 0.0) continue;
        const double* brow = &b->val[static_cast<size_t>(kk) * m];
        double* orow = &out->val[static_cast<size_t>(i) * m];
        for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
      }
    }
    if (out->needs_grad) {
      out->back = [a, b, out, n, k, m] {
        if (a->needs_grad) {
          for (int i = 0; i < n; ++i) {
            for (int kk = 0; kk < k; ++kk) {
              const double* brow = &b->val[static_cast<size_t>(kk) * m];
              const double* grow = &out->grad[static_cast<size_t>(i) * m];
              double acc = 0.0;
              for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
              a->g(i, kk) += acc;
            }
          }
        }
        if (b->needs_grad) {
          for (int kk = 0; kk < k; ++kk) {
            for (int i = 0; i < n; ++i) {
              const double av = a->v(i, kk);
              if (av == 0.0) continue;
              const double* grow = &out->grad[static_cast<size_t>(i) * m];
              double* bg = &b->grad[static_cast<size_t>(kk) * m];
              for (int j = 0; j < m; ++j) bg[j] += av * grow[j];
            }
          }
        }
      };
    }
    return out;
  }

  Tensor* transpose(Tensor* a) {
    Tensor* out = alloc(a->cols, a->rows, a->needs_grad);
    for (int i = 0; i < a->rows; ++i)
      for (int j = 0; j < a->cols; ++j) out->v(j, i) = a->v(i, j);
    if (out->needs_grad) {
      out->back = [a, out] {
        for (int i = 0; i < a->rows; ++i)
          for (int j = 0; j < a->cols; ++j) a->g(i, j) += out->grad[static_cast<size_t>(j) * out->cols + i];
      };
    }
    return out;
  }

  Tensor* add(Tensor* a, Tensor* b) {
    check_same_shape(a, b, "add");
    Tensor* out = alloc(a->rows, a->cols, a->needs_grad || b->needs_grad);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = a->val[i] + b->val[i];
    if (out->needs_grad) {
      out->back = [a, b, out] {
        if (a->needs_grad)
          for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
        if (b->needs_grad)
          for (size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
      };
    }
    return out;
  }

  Tensor* add_n(const std::vector<Tensor*>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_n of nothing");
    bool ng = false;
    for (auto* x : xs) {
      check_same_shape(xs[0], x, "add_n");
      ng = ng || x->needs_grad;
    }
    Tensor* out = alloc(xs[0]->rows, xs[0]->cols, ng);
    for (auto* x : xs)
      for (size_t i = 0; i < out->size(); ++i) out->val[i] += x->val[i];
    if (ng) {
      auto list = xs;
      out->back = [list, out] {
        for (auto* x : list) {
          if (!x->needs_grad) continue;
          for (size_t i = 0; i < out->size(); ++i) x->grad[i] += out->grad[i];
        }
      };
    }
    return out;
  }

  Tensor* sub(Tensor* a, Tensor* b) { return add(a, scale(b, -1.0)); }

  Tensor* hadamard(Tensor* a, Tensor* b) {
    check_same_shape(a, b, "hadamard");
    Tensor* out = alloc(a->rows, a->cols, a->needs_grad || b->needs_grad);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = a->val[i] * b->val[i];
    if (out->needs_grad) {
      out->back = [a, b, out] {
        if (a->needs_grad)
          for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * b->val[i];
        if (b->needs_grad)
          for (size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i] * a->val[i];
      };
    }
    return out;
  }

  Tensor* div(Tensor* a, Tensor* b) {
    check_same_shape(a, b, "div");
    Tensor* out = alloc(a->rows, a->cols, a->needs_grad || b->needs_grad);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = a->val[i] / b->val[i];
    if (out->needs_grad) {
      out->back = [a, b, out] {
        for (size_t i = 0; i < out->size(); ++i) {
          const double inv = 1.0 / b->val[i];
          if (a->needs_grad) a->grad[i] += out->grad[i] * inv;
          if (b->needs_grad) b->grad[i] -= out->grad[i] * a->val[i] * inv * inv;
        }
      };
    }
    return out;
  }

  Tensor* scale(Tensor* a, double s) {
    Tensor* out = alloc(a->rows, a->cols, a->needs_grad);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = a->val[i] * s;
    if (out->needs_grad) {
      out->back = [a, out, s] {
        for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * s;
      };
    }
    return out;
  }

  Tensor* add_const(Tensor* a, double c) {
    Tensor* out = alloc(a->rows, a->cols, a->needs_grad);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = a->val[i] + c;
    if (out->needs_grad) {
      out->back = [a, out] {
        for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
      };
    }
    return out;
  }

  // broadcast a [1, m] row over every row of a
  Tensor* add_rowvec(Tensor* a, Tensor* row) {
    if (row->rows != 1 || row->cols != a->cols)
      throw std::invalid_argument("add_rowvec shape mismatch");
    Tensor* out = alloc(a->rows, a->cols, a->needs_grad || row->needs_grad);
    for (int i = 0; i < a->rows; ++i)
      for (int j = 0; j < a->cols; ++j) out->v(i, j) = a->v(i, j) + row->val[static_cast<size_t>(j)];
    if (out->needs_grad) {
      out->back = [a, row, out] {
        if (a->needs_grad)
          for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
        if (row->needs_grad) {
          for (int i = 0; i < out->rows; ++i)
            for (int j = 0; j < out->cols; ++j) row->grad[static_cast<size_t>(j)] += out->g(i, j);
        }
      };
    }
    return out;
  }

  Tensor* unary(Tensor* a, double (*f)(double), double (*df)(double)) {
    Tensor* out = alloc(a->rows, a->cols, a->needs_grad);
    for (size_t i = 0; i < out->size(); ++i) out->val[i] = f(a->val[i]);
    if (out->needs_grad) {
      out->back = [a, out, df] {
        for (size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * df(a->val[i]);
      };
    }
    return out;
  }

  Tensor* gelu(Tensor* a) {
    return unary(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); },
        [](double x) {
          return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) +
                 x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
        });
  }

  Tensor* tanh_op(Tensor* a) {
    return unary(
        a, [](double x) { return std::tanh(x); },
        [](double x) {
          const double t = std::tanh(x);
          return 1.0 - t * t;
        });
  }

  static double sigmoid_scalar(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }

  Tensor* sigmoid(Tensor* a) {
    return unary(
        a, [](double x) { return sigmoid_scalar(x); },
        [](double x) {
          const double s = sigmoid_scalar(x);
          return s * (1.0 - s);
        });
  }

  Tensor* softplus(Tensor* a) {
    return unary(
        a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
        [](double x) { return sigmoid_scalar(x); });
  }

  Tensor* log_op(Tensor* a) {
    return unary(
        a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
  }

  Tensor* square(Tensor* a) {
    return unary(
        a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
  }

  // Row-wise softmax restricted to mask==1 entries; fully-masked rows emit
  // zeros. Masked entries get probability 0 and zero gradient.
  Tensor* row_softmax_masked(Tensor* a, const std::vector<uint8_t>& mask) {
    if (mask.size() != a->size()) throw std::invalid_argument("softmax mask size mismatch");
    Tensor* out = alloc(a->rows, a->cols, a->needs_grad);
    for (int i = 0; i < a->rows; ++i) {
      double mx = -1e300;
      bool any = false;
      for (int j = 0; j < a->cols; ++j) {
        if (!mask[static_cast<size_t>(i) * a->cols + j]) continue;
        any = true;
        mx = std::max(mx, a->v(i, j));
      }
      if (!any) continue;
      double sum = 0.0;
      for (int j = 0; j < a->cols; ++j) {
        if (!mask[static_cast<size_t>(i) * a->cols + j]) continue;
        const double e = std::exp(a->v(i, j) - mx);
        out->v(i, j) = e;
        sum += e;
      }
      for (int j = 0; j < a->cols; ++j) {
        if (mask[static_cast<size_t>(i) * a->cols + j]) out->v(i, j) /= sum;
      }
    }
    if (out->needs_grad) {
      auto m = mask;  // keep alive
      out->back = [a, out, m = std::move(m)] {
        for (int i = 0; i < a->rows; ++i) {
          double dot = 0.0;
          for (int j = 0; j < a->cols; ++j) {
            if (!m[static_cast<size_t>(i) * a->cols + j]) continue;
            dot += out->g(i, j) * out->v(i, j);
          }
          for (int j = 0; j < a->cols; ++j) {
            if (!m[static_cast<size_t>(i) * a->cols + j]) continue;
            a->g(i, j) += out->v(i, j) * (out->g(i, j) - dot);
          }
        }
      };
    }
    return out;
  }

  // Per-row layer normalization with gain/bias, eps inside the sqrt.
  Tensor* layer_norm(Tensor* x, Tensor* gain, Tensor* bias, double eps = 1e-5) {
    if (gain->rows != 1 || gain->cols != x->cols || bias->rows != 1 || bias->cols != x->cols)
      throw std::invalid_argument("layer_norm shape mismatch");
    Tensor* out = alloc(x->rows, x->cols, x->needs_grad || gain->needs_grad || bias->needs_grad);
    const int n = x->rows, m = x->cols;
    // cache per-row (mu, inv_std) for backward
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * 2);
    for (int i = 0; i < n; ++i) {
      double mu = 0.0;
      for (int j = 0; j < m; ++j) mu += x->v(i, j);
      mu /= m;
      double var = 0.0;
      for (int j = 0; j < m; ++j) {
        const double d = x->v(i, j) - mu;
        var += d * d;
      }
      var /= m;
      const double inv = 1.0 / std::sqrt(var + eps);
      (*stats)[static_cast<size_t>(i) * 2] = mu;
      (*stats)[static_cast<size_t>(i) * 2 + 1] = inv;
      for (int j = 0; j < m; ++j)
        out->v(i, j) = (x->v(i, j) - mu) * inv * gain->val[static_cast<size_t>(j)] +
                       bias->val[static_cast<size_t>(j)];
    }
    if (out->needs_grad) {
      out->back = [x, gain, bias, out, stats, n, m] {
        for (int i = 0; i < n; ++i) {
          const double mu = (*stats)[static_cast<size_t>(i) * 2];
          const double inv = (*stats)[static_cast<size_t>(i) * 2 + 1];
          double mean_dyhat = 0.0, mean_dyhat_xhat = 0.0;
          for (int j = 0; j < m; ++j) {
            const double xhat = (x->v(i, j) - mu) * inv;
            const double dyhat = out->g(i, j) * gain->val[static_cast<size_t>(j)];
            mean_dyhat += dyhat;
            mean_dyhat_xhat += dyhat * xhat;
            if (gain->needs_grad) gain->grad[static_cast<size_t>(j)] += out->g(i, j) * xhat;
            if (bias->needs_grad) bias->grad[static_cast<size_t>(j)] += out->g(i, j);
          }
          mean_dyhat /= m;
          mean_dyhat_xhat /= m;
          if (x->needs_grad) {
            for (int j = 0; j < m; ++j) {
              const double xhat = (x->v(i, j) - mu) * inv;
              const double dyhat = out->g(i, j) * gain->val[static_cast<size_t>(j)];
              x->g(i, j) += (dyhat - mean_dyhat - xhat * mean_dyhat_xhat) * inv;
            }
          }
        }
      };
    }
    return out;
  }

  Tensor* select_rows(Tensor* a, const std::vector<int>& idx) {
    Tensor* out = alloc(static_cast<int>(idx.size()), a->cols, a->needs_grad);
    for (size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0 || idx[r] >= a->rows) throw std::out_of_range("select_rows index");
      for (int j = 0; j < a->cols; ++j) out->v(static_cast<int>(r), j) = a->v(idx[r], j);
    }
    if (out->needs_grad) {
      auto ids = idx;
      out->back = [a, out, ids = std::move(ids)] {
        for (size_t r = 0; r < ids.size(); ++r)
          for (int j = 0; j < a->cols; ++j) a->g(ids[r], j) += out->g(static_cast<int>(r), j);
      };
    }
    return out;
  }

  Tensor* select_cols(Tensor* a, int j0, int width) {
    if (j0 < 0 || j0 + width > a->cols) throw std::out_of_range("select_cols range");
    Tensor* out = alloc(a->rows, width, a->needs_grad);
    for (int i = 0; i < a->rows; ++i)
      for (int j = 0; j < width; ++j) out->v(i, j) = a->v(i, j0 + j);
    if (out->needs_grad) {
      out->back = [a, out, j0, width] {
        for (int i = 0; i < a->rows; ++i)
          for (int j = 0; j < width; ++j) a->g(i, j0 + j) += out->g(i, j);
      };
    }
    return out;
  }

  Tensor* concat_cols(const std::vector<Tensor*>& xs) {
    int cols = 0;
    bool ng = false;
    for (auto* x : xs) {
      if (x->rows != xs[0]->rows) throw std::invalid_argument("concat_cols row mismatch");
      cols += x->cols;
      ng = ng || x->needs_grad;
    }
    Tensor* out = alloc(xs[0]->rows, cols, ng);
    int off = 0;
    for (auto* x : xs) {
      for (int i = 0; i < x->rows; ++i)
        for (int j = 0; j < x->cols; ++j) out->v(i, off + j) = x->v(i, j);
      off += x->cols;
    }
    if (ng) {
      auto list = xs;
      out->back = [list, out] {
        int off2 = 0;
        for (auto* x : list) {
          if (x->needs_grad) {
            for (int i = 0; i < x->rows; ++i)
              for (int j = 0; j < x->cols; ++j) x->g(i, j) += out->g(i, off2 + j);
          }
          off2 += x->cols;
        }
      };
    }
    return out;
  }

  Tensor* concat_rows(const std::vector<Tensor*>& xs) {
    int rows = 0;
    bool ng = false;
    for (auto* x : xs) {
      if (x->cols != xs[0]->cols) throw std::invalid_argument("concat_rows col mismatch");
      rows += x->rows;
      ng = ng || x->needs_grad;
    }
    Tensor* out = alloc(rows, xs[0]->cols, ng);
    int off = 0;
    for (auto* x : xs) {
      for (int i = 0; i < x->rows; ++i)
        for (int j = 0; j < x->cols; ++j) out->v(off + i, j) = x->v(i, j);
      off += x->rows;
    }
    if (ng) {
      auto list = xs;
      out->back = [list, out] {
        int off2 = 0;
        for (auto* x : list) {
          if (x->needs_grad) {
            for (int i = 0; i < x->rows; ++i)
              for (int j = 0; j < x->cols; ++j) x->g(i, j) += out->g(off2 + i, j);
          }
          off2 += x->rows;
        }
      };
    }
    return out;
  }

  Tensor* sum_all(Tensor* a) {
    Tensor* out = alloc(1, 1, a->needs_grad);
    for (double v : a->val) out->val[0] += v;
    if (out->needs_grad) {
      out->back = [a, out] {
        for (size_t i = 0; i < a->size(); ++i) a->grad[i] += out->grad[0];
      };
    }
    return out;
  }

  Tensor* mean_all(Tensor* a) { return scale(sum_all(a), 1.0 / static_cast<double>(a->size())); }

  size_t node_count() const { return nodes_.size(); }

 private:
  static void check_same_shape(const Tensor* a, const Tensor* b, const char* op) {
    if (a->rows != b->rows || a->cols != b->cols)
      throw std::invalid_argument(std::string(op) + " shape mismatch");
  }

  std::vector<std::unique_ptr<Tensor>> nodes_;
  std::unordered_map<ParamArray*, Tensor*> param_nodes_;
};

}  // namespace ct::ad

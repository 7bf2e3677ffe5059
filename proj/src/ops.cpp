// SPDX-License-Identifier: Apache-2.0
#include "cpolab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cpolab::ops {
namespace {

template <typename T>
using Node = TensorNode<T>;

template <typename T>
Tensor<T> record(Shape shape, std::vector<T> data, std::initializer_list<const Tensor<T>*> inputs,
                 typename Node<T>::BackwardFn fn) {
    Tensor<T> out(std::move(shape), std::move(data));
    const bool any = grad_enabled() && std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
    if (any) {
        auto& node = *out.node();
        node.requires_grad = true;
        for (const Tensor<T>* t : inputs) {
            node.parents.push_back(t->node());
        }
        node.backward_fn = std::move(fn);
    }
    return out;
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

} // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> c(m * n, T{0});
    const T* A = a.data().data();
    const T* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = A[i * k + p];
            const T* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
    return record<T>({m, n}, std::move(c), {&a, &b}, [m, k, n](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        Node<T>& nb = *self.parents[1];
        const T* dC = self.grad.data();
        if (na.requires_grad) {
            T* dA = na.grad_buffer().data();
            const T* Bv = nb.data.data();
            for (std::size_t i = 0; i < m; ++i) {
                const T* drow = dC + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const T* brow = Bv + p * n;
                    T acc{0};
                    for (std::size_t j = 0; j < n; ++j) {
                        acc += drow[j] * brow[j];
                    }
                    dA[i * k + p] += acc;
                }
            }
        }
        if (nb.requires_grad) {
            T* dB = nb.grad_buffer().data();
            const T* Av = na.data.data();
            for (std::size_t i = 0; i < m; ++i) {
                const T* drow = dC + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = Av[i * k + p];
                    T* dbrow = dB + p * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        dbrow[j] += av * drow[j];
                    }
                }
            }
        }
    });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] + b.data()[i];
    }
    return record<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        for (auto& parent : self.parents) {
            if (parent->requires_grad) {
                auto& g = parent->grad_buffer();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    g[i] += self.grad[i];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
    require_rank(a, 2, "add_row");
    require_rank(row, 1, "add_row");
    const std::size_t m = a.dim(0);
    const std::size_t n = a.dim(1);
    if (row.dim(0) != n) {
        throw DimensionError("add_row: row of length " + std::to_string(row.dim(0)) + " for " + shape_str(a.shape()));
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] += row.data()[j];
        }
    }
    return record<T>(a.shape(), std::move(out), {&a, &row}, [m, n](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        Node<T>& nr = *self.parents[1];
        if (na.requires_grad) {
            auto& g = na.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i];
            }
        }
        if (nr.requires_grad) {
            auto& g = nr.grad_buffer();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    g[j] += self.grad[i * n + j];
                }
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    return record<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        Node<T>& nb = *self.parents[1];
        if (na.requires_grad) {
            auto& g = na.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * nb.data[i];
            }
        }
        if (nb.requires_grad) {
            auto& g = nb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] += self.grad[i] * na.data[i];
            }
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * factor;
    }
    return record<T>(a.shape(), std::move(out), {&a}, [factor](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * factor;
        }
    });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = static_cast<T>(0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x))));
    }
    return record<T>(a.shape(), std::move(out), {&a}, [](Node<T>& self) {
        Node<T>& na = *self.parents[0];
        auto& g = na.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = na.data[i];
            const double u = c * (x + 0.044715 * x * x * x);
            const double th = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
            const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
            g[i] += static_cast<T>(self.grad[i] * d);
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    require_rank(x, 2, "layer_norm");
    const std::size_t m = x.dim(0);
    const std::size_t n = x.dim(1);
    if (gain.numel() != n || bias.numel() != n) {
        throw DimensionError("layer_norm: gain/bias length must be " + std::to_string(n));
    }
    std::vector<T> out(m * n);
    std::vector<T> xhat(m * n);
    std::vector<T> rstd(m);
    for (std::size_t i = 0; i < m; ++i) {
        const T* row = x.data().data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mean += row[j];
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            var += (row[j] - mean) * (row[j] - mean);
        }
        var /= static_cast<double>(n);
        const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
        rstd[i] = static_cast<T>(rs);
        for (std::size_t j = 0; j < n; ++j) {
            const T xh = static_cast<T>((row[j] - mean) * rs);
            xhat[i * n + j] = xh;
            out[i * n + j] = xh * gain.data()[j] + bias.data()[j];
        }
    }
    return record<T>(x.shape(), std::move(out), {&x, &gain, &bias},
                     [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
                         Node<T>& nx = *self.parents[0];
                         Node<T>& ng = *self.parents[1];
                         Node<T>& nb = *self.parents[2];
                         const T* dy = self.grad.data();
                         if (ng.requires_grad) {
                             auto& g = ng.grad_buffer();
                             for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                     g[j] += dy[i * n + j] * xhat[i * n + j];
                                 }
                             }
                         }
                         if (nb.requires_grad) {
                             auto& g = nb.grad_buffer();
                             for (std::size_t i = 0; i < m; ++i) {
                                 for (std::size_t j = 0; j < n; ++j) {
                                     g[j] += dy[i * n + j];
                                 }
                             }
                         }
                         if (nx.requires_grad) {
                             auto& g = nx.grad_buffer();
                             for (std::size_t i = 0; i < m; ++i) {
                                 double mean_d = 0.0;
                                 double mean_dx = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) {
                                     const double d = static_cast<double>(dy[i * n + j]) * ng.data[j];
                                     mean_d += d;
                                     mean_dx += d * xhat[i * n + j];
                                 }
                                 mean_d /= static_cast<double>(n);
                                 mean_dx /= static_cast<double>(n);
                                 for (std::size_t j = 0; j < n; ++j) {
                                     const double d = static_cast<double>(dy[i * n + j]) * ng.data[j];
                                     g[i * n + j] +=
                                         static_cast<T>(rstd[i] * (d - mean_d - xhat[i * n + j] * mean_dx));
                                 }
                             }
                         }
                     });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
    require_rank(table, 2, "embedding");
    const std::size_t vocab = table.dim(0);
    const std::size_t d = table.dim(1);
    std::vector<T> out(ids.size() * d);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vocab) {
            throw InputError("token id " + std::to_string(ids[t]) + " outside vocabulary of " + std::to_string(vocab));
        }
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[t]) * d, d, out.data() + t * d);
    }
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return record<T>({ids.size(), d}, std::move(out), {&table}, [d, saved = std::move(saved)](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t t = 0; t < saved.size(); ++t) {
            T* row = g.data() + static_cast<std::size_t>(saved[t]) * d;
            for (std::size_t j = 0; j < d; ++j) {
                row[j] += self.grad[t * d + j];
            }
        }
    });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    require_rank(x, 2, "slice_rows");
    if (begin > end || end > x.dim(0)) {
        throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(1);
    std::vector<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                       x.data().begin() + static_cast<std::ptrdiff_t>(end * n));
    return record<T>({end - begin, n}, std::move(out), {&x}, [begin, n](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            g[begin * n + i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t n_heads) {
    require_rank(q, 2, "causal_attention");
    require_same_shape(q, k, "causal_attention");
    require_same_shape(q, v, "causal_attention");
    const std::size_t len = q.dim(0);
    const std::size_t width = q.dim(1);
    if (n_heads == 0 || width % n_heads != 0) {
        throw DimensionError("causal_attention: width " + std::to_string(width) + " not divisible into " +
                             std::to_string(n_heads) + " heads");
    }
    const std::size_t dh = width / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    // probs[h][t * len + s] for s <= t
    std::vector<T> probs(n_heads * len * len, T{0});
    std::vector<T> out(len * width, T{0});
    const T* Q = q.data().data();
    const T* K = k.data().data();
    const T* V = v.data().data();
    std::vector<double> scores(len);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * dh;
        T* P = probs.data() + h * len * len;
        for (std::size_t t = 0; t < len; ++t) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t s = 0; s <= t; ++s) {
                T dot{0};
                for (std::size_t j = 0; j < dh; ++j) {
                    dot += Q[t * width + off + j] * K[s * width + off + j];
                }
                scores[s] = static_cast<double>(dot) * inv_sqrt;
                mx = std::max(mx, scores[s]);
            }
            double total = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
                scores[s] = std::exp(scores[s] - mx);
                total += scores[s];
            }
            T* orow = out.data() + t * width + off;
            for (std::size_t s = 0; s <= t; ++s) {
                const T p = static_cast<T>(scores[s] / total);
                P[t * len + s] = p;
                const T* vrow = V + s * width + off;
                for (std::size_t j = 0; j < dh; ++j) {
                    orow[j] += p * vrow[j];
                }
            }
        }
    }
    return record<T>(
        {len, width}, std::move(out), {&q, &k, &v},
        [len, width, n_heads, dh, inv_sqrt, probs = std::move(probs)](Node<T>& self) {
            Node<T>& nq = *self.parents[0];
            Node<T>& nk = *self.parents[1];
            Node<T>& nv = *self.parents[2];
            const T* dO = self.grad.data();
            T* dQ = nq.requires_grad ? nq.grad_buffer().data() : nullptr;
            T* dK = nk.requires_grad ? nk.grad_buffer().data() : nullptr;
            T* dV = nv.requires_grad ? nv.grad_buffer().data() : nullptr;
            const T* Q = nq.data.data();
            const T* K = nk.data.data();
            const T* V = nv.data.data();
            std::vector<T> dP(len);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t off = h * dh;
                const T* P = probs.data() + h * len * len;
                for (std::size_t t = 0; t < len; ++t) {
                    const T* dorow = dO + t * width + off;
                    double weighted = 0.0;
                    for (std::size_t s = 0; s <= t; ++s) {
                        const T* vrow = V + s * width + off;
                        T dot{0};
                        for (std::size_t j = 0; j < dh; ++j) {
                            dot += dorow[j] * vrow[j];
                        }
                        dP[s] = dot;
                        weighted += static_cast<double>(P[t * len + s]) * dot;
                        if (dV) {
                            const T p = P[t * len + s];
                            T* dvrow = dV + s * width + off;
                            for (std::size_t j = 0; j < dh; ++j) {
                                dvrow[j] += p * dorow[j];
                            }
                        }
                    }
                    for (std::size_t s = 0; s <= t; ++s) {
                        const T ds = static_cast<T>(P[t * len + s] * (dP[s] - weighted) * inv_sqrt);
                        if (dQ) {
                            const T* krow = K + s * width + off;
                            T* dqrow = dQ + t * width + off;
                            for (std::size_t j = 0; j < dh; ++j) {
                                dqrow[j] += ds * krow[j];
                            }
                        }
                        if (dK) {
                            const T* qrow = Q + t * width + off;
                            T* dkrow = dK + s * width + off;
                            for (std::size_t j = 0; j < dh; ++j) {
                                dkrow[j] += ds * qrow[j];
                            }
                        }
                    }
                }
            }
        });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
    const std::size_t len = x.dim(axis);
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= x.shape()[i];
    }
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < x.rank(); ++i) {
        inner *= x.shape()[i];
    }
    std::vector<T> out(x.numel());
    const T* X = x.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < len; ++i) {
                mx = std::max(mx, static_cast<double>(X[base + i * inner]));
            }
            double total = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                total += std::exp(static_cast<double>(X[base + i * inner]) - mx);
            }
            const double lse = mx + std::log(total);
            for (std::size_t i = 0; i < len; ++i) {
                out[base + i * inner] = static_cast<T>(static_cast<double>(X[base + i * inner]) - lse);
            }
        }
    }
    return record<T>(x.shape(), std::move(out), {&x}, [outer, inner, len](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double gsum = 0.0;
                for (std::size_t i = 0; i < len; ++i) {
                    gsum += self.grad[base + i * inner];
                }
                if (gsum == 0.0) {
                    bool all_zero = true;
                    for (std::size_t i = 0; i < len && all_zero; ++i) {
                        all_zero = self.grad[base + i * inner] == T{0};
                    }
                    if (all_zero) {
                        continue;
                    }
                }
                for (std::size_t i = 0; i < len; ++i) {
                    const std::size_t at = base + i * inner;
                    g[at] += static_cast<T>(self.grad[at] - std::exp(static_cast<double>(self.data[at])) * gsum);
                }
            }
        }
    });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::span<const std::int32_t> index) {
    require_rank(x, 2, "pick");
    const std::size_t m = x.dim(0);
    const std::size_t n = x.dim(1);
    if (index.size() != m) {
        throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " + std::to_string(m) + " rows");
    }
    std::vector<T> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= n) {
            throw InputError("pick: index " + std::to_string(index[i]) + " out of range " + std::to_string(n));
        }
        out[i] = x.data()[i * n + static_cast<std::size_t>(index[i])];
    }
    std::vector<std::int32_t> saved(index.begin(), index.end());
    return record<T>({m}, std::move(out), {&x}, [n, saved = std::move(saved)](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < saved.size(); ++i) {
            g[i * n + static_cast<std::size_t>(saved[i])] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> log1m_exp(const Tensor<T>& x, T eps) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double complement = -std::expm1(static_cast<double>(x.data()[i]));
        out[i] = static_cast<T>(std::log(std::max(complement, static_cast<double>(eps))));
    }
    return record<T>(x.shape(), std::move(out), {&x}, [eps](Node<T>& self) {
        Node<T>& nx = *self.parents[0];
        auto& g = nx.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double xv = nx.data[i];
            const double complement = -std::expm1(xv);
            if (complement > static_cast<double>(eps)) {
                g[i] += static_cast<T>(self.grad[i] * (-std::exp(xv) / complement));
            }
        }
    });
}

template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::span<const T> weights) {
    if (weights.size() != x.numel()) {
        throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                             std::to_string(x.numel()) + " values");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (weights[i] != T{0}) {
            acc += static_cast<double>(weights[i]) * static_cast<double>(x.data()[i]);
        }
    }
    std::vector<T> saved(weights.begin(), weights.end());
    return record<T>({1}, {static_cast<T>(acc)}, {&x}, [saved = std::move(saved)](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[0] * saved[i];
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0.0;
    for (T v : x.data()) {
        acc += v;
    }
    return record<T>({1}, {static_cast<T>(acc)}, {&x}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) {
            v += self.grad[0];
        }
    });
}

#define CPOLAB_INSTANTIATE_OPS(T)                                                                     \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
    template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
    template Tensor<T> scale(const Tensor<T>&, T);                                                    \
    template Tensor<T> gelu(const Tensor<T>&);                                                        \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);           \
    template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>);                    \
    template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                        \
    template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t); \
    template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                    \
    template Tensor<T> pick(const Tensor<T>&, std::span<const std::int32_t>);                         \
    template Tensor<T> log1m_exp(const Tensor<T>&, T);                                                \
    template Tensor<T> weighted_sum(const Tensor<T>&, std::span<const T>);                            \
    template Tensor<T> sum(const Tensor<T>&);

CPOLAB_INSTANTIATE_OPS(float)
CPOLAB_INSTANTIATE_OPS(double)

#undef CPOLAB_INSTANTIATE_OPS

} // namespace cpolab::ops

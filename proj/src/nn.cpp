#include "mia/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace mia::nn {

DenseMatrix linear_forward(const DenseMatrix& x, const DenseMatrix& w,
                           const std::vector<double>& b) {
    if (x.cols != w.cols)
        throw std::invalid_argument("linear_forward: input width mismatch");
    if (static_cast<int>(b.size()) != w.rows)
        throw std::invalid_argument("linear_forward: bias size mismatch");
    DenseMatrix y(x.rows, w.rows);
    for (int r = 0; r < x.rows; ++r) {
        const double* xr = x.row(r);
        double* yr = y.row(r);
        for (int o = 0; o < w.rows; ++o) {
            const double* wr = w.row(o);
            double acc = b[o];
            for (int i = 0; i < x.cols; ++i) acc += xr[i] * wr[i];
            yr[o] = acc;
        }
    }
    return y;
}

Mlp make_mlp(const MlpSpec& spec, Rng& rng) {
    if (spec.widths.size() < 3)
        throw std::invalid_argument("make_mlp: need input, at least one hidden, output");
    for (int w : spec.widths)
        if (w <= 0) throw std::invalid_argument("make_mlp: widths must be positive");
    if (spec.head == OutputHead::kSoftmax2 && spec.widths.back() != 2)
        throw std::invalid_argument("make_mlp: softmax2 head needs output width 2");
    Mlp mlp;
    mlp.spec = spec;
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        int fan_in = spec.widths[l], fan_out = spec.widths[l + 1];
        LinearParams p;
        p.w = DenseMatrix(fan_out, fan_in);
        p.b.assign(fan_out, 0.0);
        double limit = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : p.w.data) v = (2.0 * rng.uniform() - 1.0) * limit;
        mlp.layers.push_back(std::move(p));
    }
    return mlp;
}

MlpCache mlp_forward(const Mlp& mlp, const DenseMatrix& x) {
    if (x.cols != mlp.spec.widths.front())
        throw std::invalid_argument("mlp_forward: input width mismatch");
    MlpCache cache;
    DenseMatrix cur = x;
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
        cache.inputs.push_back(cur);
        DenseMatrix z = linear_forward(cur, mlp.layers[l].w, mlp.layers[l].b);
        cache.preacts.push_back(z);
        if (l + 1 < mlp.layers.size()) {
            for (auto& v : z.data) v = v > 0.0 ? v : 0.0;  // ReLU
            cur = std::move(z);
        } else {
            cur = z;
        }
    }
    if (mlp.spec.head == OutputHead::kSoftmax2) {
        for (int r = 0; r < cur.rows; ++r) {
            double* p = cur.row(r);
            double mx = std::max(p[0], p[1]);
            double e0 = std::exp(p[0] - mx), e1 = std::exp(p[1] - mx);
            double s = e0 + e1;
            p[0] = e0 / s;
            p[1] = e1 / s;
        }
    }
    cache.output = cur;
    return cache;
}

MlpGrads mlp_backward(const Mlp& mlp, const MlpCache& cache, const DenseMatrix& upstream) {
    const int n = cache.output.rows;
    if (upstream.rows != n || upstream.cols != cache.output.cols)
        throw std::invalid_argument("mlp_backward: upstream shape mismatch");

    DenseMatrix dz(n, cache.output.cols);
    if (mlp.spec.head == OutputHead::kSoftmax2) {
        // dL/dlogit_j = p_j * (du_j - sum_k du_k p_k)
        for (int r = 0; r < n; ++r) {
            const double* p = cache.output.row(r);
            const double* du = upstream.row(r);
            double dot = du[0] * p[0] + du[1] * p[1];
            dz.row(r)[0] = p[0] * (du[0] - dot);
            dz.row(r)[1] = p[1] * (du[1] - dot);
        }
    } else {
        dz = upstream;
    }

    MlpGrads grads;
    grads.layers.resize(mlp.layers.size());
    for (int l = static_cast<int>(mlp.layers.size()) - 1; l >= 0; --l) {
        const DenseMatrix& xin = cache.inputs[l];
        const DenseMatrix& w = mlp.layers[l].w;
        LinearParams& g = grads.layers[l];
        g.w = DenseMatrix(w.rows, w.cols);
        g.b.assign(w.rows, 0.0);
        for (int r = 0; r < n; ++r) {
            const double* dzr = dz.row(r);
            const double* xr = xin.row(r);
            for (int o = 0; o < w.rows; ++o) {
                double d = dzr[o];
                if (d == 0.0) continue;
                g.b[o] += d;
                double* gw = g.w.row(o);
                for (int i = 0; i < w.cols; ++i) gw[i] += d * xr[i];
            }
        }
        DenseMatrix dx(n, w.cols);
        for (int r = 0; r < n; ++r) {
            const double* dzr = dz.row(r);
            double* dxr = dx.row(r);
            for (int o = 0; o < w.rows; ++o) {
                double d = dzr[o];
                if (d == 0.0) continue;
                const double* wr = w.row(o);
                for (int i = 0; i < w.cols; ++i) dxr[i] += d * wr[i];
            }
        }
        if (l > 0) {
            const DenseMatrix& pre = cache.preacts[l - 1];
            for (std::size_t i = 0; i < dx.data.size(); ++i)
                dx.data[i] = pre.data[i] > 0.0 ? dx.data[i] : 0.0;
            dz = std::move(dx);
        } else {
            grads.input = std::move(dx);
        }
    }
    return grads;
}

BceResult bce_loss(const DenseMatrix& probs, const std::vector<int>& labels,
                   const std::vector<double>& weights) {
    if (probs.cols != 2) throw std::invalid_argument("bce_loss: expects two columns");
    std::size_t n = static_cast<std::size_t>(probs.rows);
    if (labels.size() != n || weights.size() != n)
        throw std::invalid_argument("bce_loss: size mismatch");
    constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
    BceResult out;
    out.per_sample.resize(n);
    out.grad_probs = DenseMatrix(probs.rows, 2);
    for (std::size_t i = 0; i < n; ++i) {
        int y = labels[i];
        if (y != 0 && y != 1) throw std::invalid_argument("bce_loss: label outside {0,1}");
        double p1 = std::clamp(probs(static_cast<int>(i), 0), lo, hi);
        double p2 = std::clamp(probs(static_cast<int>(i), 1), lo, hi);
        double li = -(y * std::log(p1) + (1 - y) * std::log(p2));
        out.per_sample[i] = li;
        out.value += weights[i] * li;
        out.grad_probs(static_cast<int>(i), 0) = y ? -weights[i] / p1 : 0.0;
        out.grad_probs(static_cast<int>(i), 1) = y ? 0.0 : -weights[i] / p2;
    }
    return out;
}

std::vector<ParamRef> param_refs(Mlp& mlp, const MlpGrads& grads) {
    if (grads.layers.size() != mlp.layers.size())
        throw std::invalid_argument("param_refs: gradient layout mismatch");
    std::vector<ParamRef> refs;
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
        refs.push_back({mlp.layers[l].w.data.data(), grads.layers[l].w.data.data(),
                        mlp.layers[l].w.data.size()});
        refs.push_back({mlp.layers[l].b.data(), grads.layers[l].b.data(),
                        mlp.layers[l].b.size()});
    }
    return refs;
}

void optimizer_step(const OptimizerSpec& spec, OptState& state,
                    const std::vector<ParamRef>& params) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].n, 0.0);
            state.v[i].assign(params[i].n, 0.0);
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("optimizer_step: state/param layout mismatch");
    ++state.t;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ParamRef& p = params[i];
        if (state.m[i].size() != p.n)
            throw std::invalid_argument("optimizer_step: parameter size changed");
        if (spec.kind == OptKind::kSgdMomentum) {
            for (std::size_t j = 0; j < p.n; ++j) {
                state.m[i][j] = spec.momentum * state.m[i][j] - spec.lr * p.grad[j];
                p.value[j] += state.m[i][j];
            }
        } else {
            double bc1 = 1.0 - std::pow(spec.beta1, static_cast<double>(state.t));
            double bc2 = 1.0 - std::pow(spec.beta2, static_cast<double>(state.t));
            for (std::size_t j = 0; j < p.n; ++j) {
                double g = p.grad[j];
                state.m[i][j] = spec.beta1 * state.m[i][j] + (1.0 - spec.beta1) * g;
                state.v[i][j] = spec.beta2 * state.v[i][j] + (1.0 - spec.beta2) * g * g;
                double mh = state.m[i][j] / bc1;
                double vh = state.v[i][j] / bc2;
                p.value[j] -= spec.lr * mh / (std::sqrt(vh) + spec.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'M', 'I', 'A', 'T', 'N', 'S', '0', '1'};

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64_le(std::string& out, double d) {
    put_u64_le(out, std::bit_cast<std::uint64_t>(d));
}

std::uint64_t get_u64_le(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

}  // namespace

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors) {
    nlohmann::json header;
    header["dtype"] = "f64le";
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        std::size_t count = 1;
        for (int s : t.shape) count *= static_cast<std::size_t>(s);
        if (count != t.data.size())
            throw std::invalid_argument("save_tensors: shape/data mismatch for " + t.name);
        header["tensors"].push_back({{"name", t.name},
                                     {"shape", t.shape},
                                     {"offset", offset},
                                     {"count", t.data.size()}});
        offset += t.data.size() * 8;
    }
    std::string head = header.dump();
    std::string blob;
    blob.reserve(16 + head.size() + offset);
    blob.append(kMagic, 8);
    put_u64_le(blob, head.size());
    blob += head;
    for (const auto& t : tensors)
        for (double d : t.data) put_f64_le(blob, d);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_tensors: cannot open " + path);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("save_tensors: write failed for " + path);
}

std::vector<NamedTensor> load_tensors(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_tensors: cannot open " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (blob.size() < 16 || std::memcmp(blob.data(), kMagic, 8) != 0)
        throw std::runtime_error("load_tensors: bad magic in " + path);
    std::uint64_t head_len = get_u64_le(blob.data() + 8);
    if (16 + head_len > blob.size())
        throw std::runtime_error("load_tensors: truncated header in " + path);
    nlohmann::json header = nlohmann::json::parse(blob.substr(16, head_len));
    const char* payload = blob.data() + 16 + head_len;
    std::size_t payload_len = blob.size() - 16 - head_len;

    std::vector<NamedTensor> tensors;
    for (const auto& e : header.at("tensors")) {
        NamedTensor t;
        t.name = e.at("name").get<std::string>();
        t.shape = e.at("shape").get<std::vector<int>>();
        std::uint64_t offset = e.at("offset").get<std::uint64_t>();
        std::uint64_t count = e.at("count").get<std::uint64_t>();
        if (offset + count * 8 > payload_len)
            throw std::runtime_error("load_tensors: truncated payload in " + path);
        t.data.resize(count);
        for (std::uint64_t i = 0; i < count; ++i)
            t.data[i] = std::bit_cast<double>(get_u64_le(payload + offset + i * 8));
        tensors.push_back(std::move(t));
    }
    return tensors;
}

std::vector<NamedTensor> mlp_tensors(const Mlp& mlp, const std::string& prefix) {
    std::vector<NamedTensor> out;
    NamedTensor meta;
    meta.name = prefix + ".spec";
    meta.data.push_back(mlp.spec.head == OutputHead::kSoftmax2 ? 1.0 : 0.0);
    for (int w : mlp.spec.widths) meta.data.push_back(static_cast<double>(w));
    meta.shape = {static_cast<int>(meta.data.size())};
    out.push_back(std::move(meta));
    for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
        const auto& lp = mlp.layers[l];
        NamedTensor w{prefix + "." + std::to_string(l) + ".w",
                      {lp.w.rows, lp.w.cols}, lp.w.data};
        NamedTensor b{prefix + "." + std::to_string(l) + ".b",
                      {static_cast<int>(lp.b.size())}, lp.b};
        out.push_back(std::move(w));
        out.push_back(std::move(b));
    }
    return out;
}

void mlp_from_tensors(Mlp& mlp, const std::vector<NamedTensor>& tensors,
                      const std::string& prefix) {
    auto find = [&](const std::string& name) -> const NamedTensor& {
        for (const auto& t : tensors)
            if (t.name == name) return t;
        throw std::runtime_error("mlp_from_tensors: missing tensor " + name);
    };
    const NamedTensor& meta = find(prefix + ".spec");
    MlpSpec spec;
    spec.head = meta.data.at(0) != 0.0 ? OutputHead::kSoftmax2 : OutputHead::kIdentity;
    for (std::size_t i = 1; i < meta.data.size(); ++i)
        spec.widths.push_back(static_cast<int>(meta.data[i]));
    mlp.spec = spec;
    mlp.layers.clear();
    for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
        const NamedTensor& w = find(prefix + "." + std::to_string(l) + ".w");
        const NamedTensor& b = find(prefix + "." + std::to_string(l) + ".b");
        LinearParams p;
        p.w = DenseMatrix(w.shape.at(0), w.shape.at(1));
        p.w.data = w.data;
        p.b = b.data;
        if (p.w.rows != spec.widths[l + 1] || p.w.cols != spec.widths[l] ||
            static_cast<int>(p.b.size()) != spec.widths[l + 1])
            throw std::runtime_error("mlp_from_tensors: shape mismatch at layer " +
                                     std::to_string(l));
        mlp.layers.push_back(std::move(p));
    }
}

}  // namespace mia::nn

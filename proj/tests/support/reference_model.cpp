#include "support/reference_model.hpp"

#include <algorithm>
#include <cmath>

namespace oracle {

using templora::Projection;
using L = templora::Transformer<double>;

ReferenceDecoder::ReferenceDecoder(const templora::Transformer<double>& model, const templora::LoraAdapter<double>* adapter,
                                   double rope_base)
    : model_(model),
      adapter_(adapter),
      rope_base_(rope_base > 0.0 ? rope_base : model.config().rope_base),
      keys_(model.config().n_layers),
      values_(model.config().n_layers) {}

std::vector<double> ReferenceDecoder::matvec(const templora::Tensor<double>& w, const std::vector<double>& x) const {
    const std::size_t out = w.dim(0), in = w.dim(1);
    std::vector<double> y(out, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
        double s = 0.0;
        for (std::size_t i = 0; i < in; ++i) s += w.data()[o * in + i] * x[i];
        y[o] = s;
    }
    return y;
}

std::vector<double> ReferenceDecoder::project(std::size_t layer, std::size_t slot, Projection p, const std::vector<double>& x) const {
    std::vector<double> y = matvec(model_.parameters()[model_.layer_index(layer, static_cast<L::LayerSlot>(slot))].value, x);
    if (adapter_ != nullptr && adapter_->has(layer, p)) {
        const std::vector<double> low = matvec(adapter_->down(layer, p).value, x);
        const std::vector<double> delta = matvec(adapter_->up(layer, p).value, low);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += adapter_->scaling() * delta[i];
    }
    return y;
}

void ReferenceDecoder::rotate(std::vector<double>& v, double position) const {
    const std::size_t hd = model_.config().head_dim();
    for (std::size_t h = 0; h < model_.config().n_heads; ++h) {
        for (std::size_t i = 0; i < hd / 2; ++i) {
            const double theta = position * std::pow(rope_base_, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
            const double c = std::cos(theta), s = std::sin(theta);
            double& a = v[h * hd + 2 * i];
            double& b = v[h * hd + 2 * i + 1];
            const double x0 = a, x1 = b;
            a = x0 * c - x1 * s;
            b = x0 * s + x1 * c;
        }
    }
}

static std::vector<double> rmsnorm(const std::vector<double>& x, const templora::Tensor<double>& gamma, double eps) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(ms + eps);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * inv * gamma.data()[i];
    return y;
}

std::vector<double> ReferenceDecoder::step(TokenId token, const std::vector<Visible>& visible) {
    const auto& cfg = model_.config();
    const auto& P = model_.parameters();
    const std::size_t d = cfg.d_model, hd = cfg.head_dim();
    const std::size_t self = keys_[0].size();
    std::vector<double> x(P[L::embed_index()].value.row(static_cast<std::size_t>(token)).begin(),
                          P[L::embed_index()].value.row(static_cast<std::size_t>(token)).end());
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto h = rmsnorm(x, P[model_.layer_index(l, L::AttnNorm)].value, cfg.rms_eps);
        const auto q = project(l, L::Wq, Projection::Q, h);
        keys_[l].push_back(project(l, L::Wk, Projection::K, h));
        values_[l].push_back(project(l, L::Wv, Projection::V, h));

        std::vector<Visible> keys = visible;
        keys.push_back({self, 0});
        std::vector<double> attn(d, 0.0);
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            std::vector<double> scores(keys.size());
            for (std::size_t j = 0; j < keys.size(); ++j) {
                std::vector<double> qr = q;
                rotate(qr, static_cast<double>(keys[j].distance));
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += qr[head * hd + c] * keys_[l][keys[j].index][head * hd + c];
                scores[j] = s / std::sqrt(static_cast<double>(hd));
            }
            const double mx = *std::max_element(scores.begin(), scores.end());
            double z = 0.0;
            for (double& s : scores) z += (s = std::exp(s - mx));
            for (std::size_t j = 0; j < keys.size(); ++j) {
                for (std::size_t c = 0; c < hd; ++c) attn[head * hd + c] += scores[j] / z * values_[l][keys[j].index][head * hd + c];
            }
        }
        const auto o = project(l, L::Wo, Projection::O, attn);
        for (std::size_t i = 0; i < d; ++i) x[i] += o[i];

        const auto h2 = rmsnorm(x, P[model_.layer_index(l, L::FfnNorm)].value, cfg.rms_eps);
        auto gate = project(l, L::Wgate, Projection::Gate, h2);
        const auto up = project(l, L::Wup, Projection::Up, h2);
        for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
        const auto down = project(l, L::Wdown, Projection::Down, gate);
        for (std::size_t i = 0; i < d; ++i) x[i] += down[i];
    }
    return matvec(P[model_.head_index()].value, rmsnorm(x, P[model_.final_norm_index()].value, cfg.rms_eps));
}

std::vector<std::vector<double>> ReferenceDecoder::causal(std::span<const TokenId> tokens) {
    std::vector<std::vector<double>> out;
    const std::size_t offset = keys_[0].size();
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        std::vector<Visible> vis;
        for (std::size_t j = 0; j < t; ++j) vis.push_back({offset + j, static_cast<std::int64_t>(t - j)});
        out.push_back(step(tokens[t], vis));
    }
    return out;
}

}  // namespace oracle

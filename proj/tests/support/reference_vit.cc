#include "reference_vit.h"

#include <cmath>

#include "chili/rng.h"

namespace chili::testing {
namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

Vec LayerNorm(const Vec& x, const Tensor& g, const Tensor& b, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
  }
  return out;
}

// y = W x + b with W [rows, cols] row-major.
Vec Affine(const Tensor& w, const Tensor& b, const Vec& x) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  Vec y(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = b[r];
    for (std::size_t c = 0; c < cols; ++c) s += static_cast<double>(w[r * cols + c]) * x[c];
    y[r] = s;
  }
  return y;
}

double Act(double x, Activation a) {
  if (a == Activation::kGelu) return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  return x / (1.0 + std::exp(-1.702 * x));
}

}  // namespace

ReferenceForward RunReference(const WeightArchive& w, const Tensor& image) {
  const ModelSpec& s = w.spec;
  const std::size_t D = s.d_model, p = s.patch_size, G = s.grid_side(), S = s.image_size;
  const std::size_t T = G * G + 1, H = s.heads, dh = D / H;

  Mat z(T, Vec(D));
  for (std::size_t d = 0; d < D; ++d) z[0][d] = w.class_embedding[d];
  for (std::size_t gy = 0; gy < G; ++gy) {
    for (std::size_t gx = 0; gx < G; ++gx) {
      Vec& tok = z[1 + gy * G + gx];
      for (std::size_t d = 0; d < D; ++d) {
        double acc = 0.0;
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t i = 0; i < p; ++i) {
            for (std::size_t j = 0; j < p; ++j) {
              const double kernel = w.patch_weight[((d * 3 + c) * p + i) * p + j];
              acc += kernel * image[(c * S + gy * p + i) * S + gx * p + j];
            }
          }
        }
        tok[d] = acc;
      }
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t d = 0; d < D; ++d) z[t][d] += w.positional_embedding[t * D + d];
    z[t] = LayerNorm(z[t], w.ln_pre_gamma, w.ln_pre_beta, s.ln_eps);
  }

  ReferenceForward out;
  for (const LayerWeights& lw : w.layers) {
    Mat q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const Vec qkv = Affine(lw.qkv_weight, lw.qkv_bias,
                             LayerNorm(z[t], lw.ln1_gamma, lw.ln1_beta, s.ln_eps));
      q[t].assign(qkv.begin(), qkv.begin() + D);
      k[t].assign(qkv.begin() + D, qkv.begin() + 2 * D);
      v[t].assign(qkv.begin() + 2 * D, qkv.end());
    }
    Mat concat(T, Vec(D, 0.0));
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        Vec logits(T);
        double mx = -1e300;
        for (std::size_t j = 0; j < T; ++j) {
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * k[j][h * dh + e];
          logits[j] = dot / std::sqrt(static_cast<double>(dh));
          mx = std::max(mx, logits[j]);
        }
        double total = 0.0;
        for (double& l : logits) {
          l = std::exp(l - mx);
          total += l;
        }
        for (double& l : logits) l /= total;
        if (i == 0) out.attention.push_back(logits);
        for (std::size_t j = 0; j < T; ++j) {
          for (std::size_t e = 0; e < dh; ++e) concat[i][h * dh + e] += logits[j] * v[j][h * dh + e];
        }
      }
    }
    for (std::size_t t = 0; t < T; ++t) {
      const Vec o = Affine(lw.out_weight, lw.out_bias, concat[t]);
      for (std::size_t d = 0; d < D; ++d) z[t][d] += o[d];
    }
    for (std::size_t t = 0; t < T; ++t) {
      Vec hidden = Affine(lw.fc_weight, lw.fc_bias,
                          LayerNorm(z[t], lw.ln2_gamma, lw.ln2_beta, s.ln_eps));
      for (double& x : hidden) x = Act(x, s.activation);
      const Vec o = Affine(lw.proj_weight, lw.proj_bias, hidden);
      for (std::size_t d = 0; d < D; ++d) z[t][d] += o[d];
    }
  }
  out.final_cls = z[0];
  const Vec n = LayerNorm(z[0], w.ln_post_gamma, w.ln_post_beta, s.ln_eps);
  const std::size_t E = w.projection.dim(1);
  out.embedding.assign(E, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t e = 0; e < E; ++e) out.embedding[e] += n[d] * w.projection[d * E + e];
  }
  return out;
}

ModelSpec RandomTinySpec(std::uint64_t seed) {
  Rng rng(seed * 7919 + 13);
  const std::size_t layers[] = {1, 2, 3};
  const std::size_t heads[] = {1, 2, 4};
  const std::size_t widths[] = {8, 16};
  const std::size_t grids[] = {2, 4};  // N = 4 or 16
  ModelSpec s;
  s.model_id = "tiny-" + std::to_string(seed);
  s.layers = layers[rng.Index(3)];
  s.heads = heads[rng.Index(3)];
  s.d_model = widths[rng.Index(2)];
  s.patch_size = 2 + rng.Index(2);
  s.image_size = s.patch_size * grids[rng.Index(2)];
  s.d_embed = 4 + rng.Index(5);
  s.d_mlp = 2 * s.d_model;
  if (rng.Index(2) == 1) s.activation = Activation::kQuickGelu;
  return s;
}

}  // namespace chili::testing

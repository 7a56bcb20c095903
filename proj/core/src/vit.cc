#include "chili/vit.h"

#include <cmath>
#include <cstdio>

#include "chili/error.h"
#include "chili/parallel.h"
#include "chili/tensor_file.h"

namespace chili {
namespace {

// [N+1, D] token matrix: class embedding followed by patch projections.
Tensor EmbedTokens(const WeightArchive& w, const Tensor& image) {
  const ModelSpec& s = w.spec;
  const std::size_t S = s.image_size, p = s.patch_size, G = s.grid_side();
  const std::size_t D = s.d_model, P = s.patch_dim();
  std::vector<float> patches(s.tokens() * P);
  for (std::size_t pr = 0; pr < G; ++pr) {
    for (std::size_t pc = 0; pc < G; ++pc) {
      float* dst = patches.data() + (pr * G + pc) * P;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) {
            *dst++ = image[(ch * S + pr * p + dy) * S + pc * p + dx];
          }
        }
      }
    }
  }
  const Tensor patch_matrix({s.tokens(), P}, std::move(patches));
  const Tensor kernel = w.patch_weight.Reshaped({D, P});
  const Tensor projected = MatMul(patch_matrix, Transpose(kernel));

  std::vector<float> tokens((s.tokens() + 1) * D);
  for (std::size_t i = 0; i < s.tokens() + 1; ++i) {
    for (std::size_t d = 0; d < D; ++d) {
      const double base = i == 0 ? w.class_embedding[d] : projected.at(i - 1, d);
      tokens[i * D + d] =
          static_cast<float>(base + w.positional_embedding.at(i, d));
    }
  }
  return Tensor({s.tokens() + 1, D}, std::move(tokens));
}

Tensor Activate(const Tensor& x, Activation act) {
  if (act == Activation::kGelu) return Gelu(x);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(QuickGelu(x[i]));
  }
  return Tensor(x.shape(), std::move(out));
}

Tensor Add(const Tensor& a, const Tensor& b) {
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(a[i]) + b[i]);
  }
  return Tensor(a.shape(), std::move(out));
}

// Columns [begin, begin + count) of a matrix.
Tensor Columns(const Tensor& a, std::size_t begin, std::size_t count) {
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<float> out(m * count);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = a[i * n + begin + j];
  }
  return Tensor({m, count}, std::move(out));
}

// P^T x for x of width D, P [D, E].
std::vector<double> Project(const Tensor& proj, std::span<const double> x) {
  const std::size_t D = proj.dim(0), E = proj.dim(1);
  std::vector<double> out(E, 0.0);
  for (std::size_t d = 0; d < D; ++d) {
    const double xd = x[d];
    for (std::size_t e = 0; e < E; ++e) out[e] += xd * proj[d * E + e];
  }
  return out;
}

std::string FormatDouble(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

EncodedImage EncodeImage(const WeightArchive& w, const Tensor& image) {
  const ModelSpec& s = w.spec;
  if (image.shape() != Shape{3, s.image_size, s.image_size}) {
    throw ValidationError("image shape " + ShapeToString(image.shape()) +
                          " does not match model input [3," +
                          std::to_string(s.image_size) + "," +
                          std::to_string(s.image_size) + "]");
  }
  const std::size_t L = s.layers, H = s.heads, D = s.d_model, dh = s.d_head();
  const std::size_t T = s.tokens() + 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  EncodedImage out;
  ResidualRecord& rec = out.record;
  Tensor z = LayerNormRows(EmbedTokens(w, image), w.ln_pre_gamma, w.ln_pre_beta,
                           s.ln_eps);
  rec.initial_cls = Tensor({D}, {z.slice(0).begin(), z.slice(0).end()});

  std::vector<float> attention(L * H * T), values(L * H * T * dh);
  std::vector<float> attn_cls(L * D), mlp_cls(L * D);
  for (std::size_t l = 0; l < L; ++l) {
    const LayerWeights& lw = w.layers[l];
    rec.layer_inputs.push_back(z);

    const Tensor x = LayerNormRows(z, lw.ln1_gamma, lw.ln1_beta, s.ln_eps);
    const Tensor qkv = AddRowVector(MatMul(x, Transpose(lw.qkv_weight)), lw.qkv_bias);
    std::vector<float> heads_out(T * D);
    for (std::size_t h = 0; h < H; ++h) {
      const Tensor q = Columns(qkv, h * dh, dh);
      const Tensor k = Columns(qkv, D + h * dh, dh);
      const Tensor v = Columns(qkv, 2 * D + h * dh, dh);
      const Tensor logits = MatMul(q, Transpose(k));
      std::vector<float> scaled(logits.size());
      for (std::size_t i = 0; i < scaled.size(); ++i) {
        scaled[i] = static_cast<float>(logits[i] * scale);
      }
      const Tensor att = SoftmaxRows(Tensor(logits.shape(), std::move(scaled)));
      const Tensor o = MatMul(att, v);
      for (std::size_t i = 0; i < T; ++i) {
        attention[(l * H + h) * T + i] = att.at(0, i);
        for (std::size_t j = 0; j < dh; ++j) {
          values[((l * H + h) * T + i) * dh + j] = v.at(i, j);
          heads_out[i * D + h * dh + j] = o.at(i, j);
        }
      }
    }
    const Tensor attn_out = AddRowVector(
        MatMul(Tensor({T, D}, std::move(heads_out)), Transpose(lw.out_weight)),
        lw.out_bias);
    for (std::size_t d = 0; d < D; ++d) attn_cls[l * D + d] = attn_out.at(0, d);
    z = Add(z, attn_out);

    const Tensor y = LayerNormRows(z, lw.ln2_gamma, lw.ln2_beta, s.ln_eps);
    const Tensor hidden = Activate(
        AddRowVector(MatMul(y, Transpose(lw.fc_weight)), lw.fc_bias), s.activation);
    const Tensor mlp_out =
        AddRowVector(MatMul(hidden, Transpose(lw.proj_weight)), lw.proj_bias);
    for (std::size_t d = 0; d < D; ++d) mlp_cls[l * D + d] = mlp_out.at(0, d);
    z = Add(z, mlp_out);
  }
  rec.attention = Tensor({L, H, T}, std::move(attention));
  rec.values = Tensor({L, H, T, dh}, std::move(values));
  rec.attn_cls_out = Tensor({L, D}, std::move(attn_cls));
  rec.mlp_cls_out = Tensor({L, D}, std::move(mlp_cls));
  rec.final_cls = Tensor({D}, {z.slice(0).begin(), z.slice(0).end()});

  const std::vector<double> final_cls(rec.final_cls.data().begin(),
                                      rec.final_cls.data().end());
  const AdditiveLayerNorm ln(final_cls, w.ln_post_gamma.data(), s.ln_eps);
  rec.final_ln_mean = ln.total_mean();
  rec.final_ln_sigma = ln.sigma();
  std::vector<double> normed(D);
  for (std::size_t d = 0; d < D; ++d) {
    normed[d] = w.ln_post_gamma[d] * (final_cls[d] - ln.total_mean()) / ln.sigma() +
                w.ln_post_beta[d];
  }
  out.embedding =
      Tensor::FromDoubles({s.d_embed}, Project(w.projection, normed));
  return out;
}

std::span<const float> ContributionRecord::contribution(std::size_t l,
                                                        std::size_t h,
                                                        std::size_t i) const {
  const std::size_t E = m.dim(3);
  return m.data().subspan(((l * heads + h) * tokens + i) * E, E);
}

std::vector<double> ContributionRecord::Reconstruct() const {
  const std::size_t E = embedding.size();
  std::vector<double> total(E, 0.0);
  for (std::size_t k = 0; k < m.size(); ++k) total[k % E] += m[k];
  auto add = [&](const Tensor& t) {
    for (std::size_t k = 0; k < t.size(); ++k) total[k % E] += t[k];
  };
  add(eps.initial_cls);
  add(eps.attn_bias_per_layer);
  add(eps.mlp_per_layer);
  add(eps.ln_beta);
  return total;
}

ContributionRecord Decompose(const WeightArchive& w, const ResidualRecord& rec) {
  const ModelSpec& s = w.spec;
  const std::size_t L = s.layers, H = s.heads, D = s.d_model, dh = s.d_head();
  const std::size_t T = s.tokens() + 1, E = s.d_embed;
  if (rec.attention.shape() != Shape{L, H, T} ||
      rec.values.shape() != Shape{L, H, T, dh} ||
      rec.mlp_cls_out.shape() != Shape{L, D} || rec.initial_cls.size() != D) {
    throw ValidationError("residual record does not match the weight archive");
  }
  const AdditiveLayerNorm fold(rec.final_ln_sigma, w.ln_post_gamma.data());
  const Tensor& proj = w.projection;

  ContributionRecord out;
  out.model_id = s.model_id;
  out.layers = L;
  out.heads = H;
  out.tokens = T;

  std::vector<float> m(L * H * T * E);
  ParallelFor(L * H, [&](std::size_t lh) {
    const std::size_t l = lh / H, h = lh % H;
    const Tensor& wo = w.layers[l].out_weight;
    std::vector<double> head_cols(D * dh);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t j = 0; j < dh; ++j) head_cols[d * dh + j] = wo.at(d, h * dh + j);
    }
    // K = P^T fold(W_O^{l,h}), an E x d_head map from values to the
    // embedding space.
    const std::vector<double> folded = fold.FoldColumns(head_cols, dh);
    std::vector<double> k(E * dh, 0.0);
    for (std::size_t d = 0; d < D; ++d) {
      for (std::size_t e = 0; e < E; ++e) {
        const double pde = proj[d * E + e];
        for (std::size_t j = 0; j < dh; ++j) k[e * dh + j] += pde * folded[d * dh + j];
      }
    }
    for (std::size_t i = 0; i < T; ++i) {
      const double alpha = rec.attention[(l * H + h) * T + i];
      const float* v = rec.values.data().data() + ((l * H + h) * T + i) * dh;
      float* dst = m.data() + ((l * H + h) * T + i) * E;
      for (std::size_t e = 0; e < E; ++e) {
        double acc = 0.0;
        for (std::size_t j = 0; j < dh; ++j) acc += k[e * dh + j] * v[j];
        dst[e] = static_cast<float>(alpha * acc);
      }
    }
  });
  out.m = Tensor({L, H, T, E}, std::move(m));

  auto fold_project = [&](std::span<const float> part) {
    return Project(proj, fold.NormalizePart(part));
  };
  out.eps.initial_cls = Tensor::FromDoubles({E}, fold_project(rec.initial_cls.data()));
  std::vector<double> bias_terms, mlp_terms;
  for (std::size_t l = 0; l < L; ++l) {
    const auto b = fold_project(w.layers[l].out_bias.data());
    bias_terms.insert(bias_terms.end(), b.begin(), b.end());
    const auto mlp = fold_project(rec.mlp_cls_out.slice(l));
    mlp_terms.insert(mlp_terms.end(), mlp.begin(), mlp.end());
  }
  out.eps.attn_bias_per_layer = Tensor::FromDoubles({L, E}, bias_terms);
  out.eps.mlp_per_layer = Tensor::FromDoubles({L, E}, mlp_terms);
  const std::vector<double> beta(w.ln_post_beta.data().begin(),
                                 w.ln_post_beta.data().end());
  out.eps.ln_beta = Tensor::FromDoubles({E}, Project(proj, beta));

  // The embedding is recomputed from the recorded final class token, so a
  // record passed alongside different weights cannot masquerade as valid.
  std::vector<double> normed(D);
  for (std::size_t d = 0; d < D; ++d) {
    normed[d] = w.ln_post_gamma[d] * (rec.final_cls[d] - rec.final_ln_mean) /
                    rec.final_ln_sigma + w.ln_post_beta[d];
  }
  out.embedding = Tensor::FromDoubles({E}, Project(proj, normed));
  double norm = 0.0;
  for (float v : out.embedding.data()) norm += static_cast<double>(v) * v;
  out.image_norm = std::sqrt(norm);
  if (!(out.image_norm > 0.0)) {
    throw ValidationError("image embedding has zero norm");
  }
  return out;
}

double ScoredMaps::SumA() const {
  double s = 0.0;
  for (float v : A.data()) s += v;
  return s;
}

ScoredMaps ScoreDirection(const ContributionRecord& c,
                          std::span<const float> direction, double logit_scale,
                          const std::string& concept_name) {
  const std::size_t E = c.embedding.size();
  if (direction.size() != E) {
    throw ValidationError("concept dimension " + std::to_string(direction.size()) +
                          " does not match embedding dimension " +
                          std::to_string(E));
  }
  const double scale = logit_scale / c.image_norm;
  auto dot = [&](std::span<const float> v) {
    double acc = 0.0;
    for (std::size_t e = 0; e < E; ++e) acc += static_cast<double>(v[e]) * direction[e];
    return acc;
  };
  const std::size_t n = c.layers * c.heads * c.tokens;
  std::vector<double> a(n);
  for (std::size_t k = 0; k < n; ++k) {
    a[k] = scale * dot(c.m.data().subspan(k * E, E));
  }
  double eps = dot(c.eps.initial_cls.data()) + dot(c.eps.ln_beta.data());
  for (std::size_t l = 0; l < c.layers; ++l) {
    eps += dot(c.eps.attn_bias_per_layer.slice(l));
    eps += dot(c.eps.mlp_per_layer.slice(l));
  }
  ScoredMaps sm;
  sm.model_id = c.model_id;
  sm.concept_name = concept_name;
  sm.A = Tensor::FromDoubles({c.layers, c.heads, c.tokens}, a);
  sm.eps = scale * eps;
  sm.S = scale * dot(c.embedding.data());
  return sm;
}

ScoredMaps ScoreConcept(const ContributionRecord& c,
                        std::span<const float> concept_name, double logit_scale,
                        const std::string& name) {
  double norm = 0.0;
  for (float v : concept_name) norm += static_cast<double>(v) * v;
  if (std::abs(std::sqrt(norm) - 1.0) > 1e-5) {
    throw ValidationError("concept vector '" + name + "' is not unit norm");
  }
  return ScoreDirection(c, concept_name, logit_scale, name);
}

double SpatialMaps::ClsSum() const {
  double s = 0.0;
  for (float v : cls.data()) s += v;
  return s;
}

GridMap SpatialMaps::Summed() const {
  GridMap total = GridMap::Constant(maps.front().rows(), maps.front().cols(), 0.0);
  for (const GridMap& m : maps) total = total + m;
  return total;
}

SpatialMaps ToSpatialMaps(const ScoredMaps& sm, std::size_t rows,
                          std::size_t cols) {
  const std::size_t L = sm.layers(), H = sm.heads(), T = sm.tokens();
  if (rows * cols + 1 != T) {
    throw ValidationError("grid " + std::to_string(rows) + "x" +
                          std::to_string(cols) + " does not match " +
                          std::to_string(T - 1) + " spatial tokens");
  }
  SpatialMaps out;
  out.model_id = sm.model_id;
  out.concept_name = sm.concept_name;
  out.layers = L;
  out.heads = H;
  out.eps = sm.eps;
  out.S = sm.S;
  std::vector<float> cls(L * H);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t h = 0; h < H; ++h) {
      cls[l * H + h] = sm.A[(l * H + h) * T];
      std::vector<double> cells(rows * cols);
      for (std::size_t k = 0; k < cells.size(); ++k) {
        cells[k] = sm.A[(l * H + h) * T + 1 + k];
      }
      out.maps.emplace_back(rows, cols, std::move(cells));
    }
  }
  out.cls = Tensor({L, H}, std::move(cls));
  return out;
}

void SaveScoredMaps(const std::filesystem::path& path, const ScoredMaps& sm) {
  TensorFile f;
  f.tensors["A"] = sm.A;
  f.metadata = {{"model_id", sm.model_id},
                {"concept", sm.concept_name},
                {"eps", FormatDouble(sm.eps)},
                {"S", FormatDouble(sm.S)}};
  WriteTensorFile(path, f);
}

ScoredMaps LoadScoredMaps(const std::filesystem::path& path) {
  const TensorFile f = ReadTensorFile(path);
  const std::string src = path.string();
  auto it = f.tensors.find("A");
  if (it == f.tensors.end() || it->second.rank() != 3) {
    throw ValidationError(src + ": missing rank-3 tensor 'A'");
  }
  auto meta = [&](const std::string& key) -> std::string {
    auto m = f.metadata.find(key);
    if (m == f.metadata.end()) throw ValidationError(src + ": missing metadata " + key);
    return m->second;
  };
  ScoredMaps sm;
  sm.A = it->second;
  sm.model_id = meta("model_id");
  sm.concept_name = meta("concept");
  try {
    sm.eps = std::stod(meta("eps"));
    sm.S = std::stod(meta("S"));
  } catch (const std::logic_error&) {
    throw ValidationError(src + ": eps/S metadata is not numeric");
  }
  return sm;
}

}  // namespace chili

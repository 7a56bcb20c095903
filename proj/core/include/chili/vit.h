#ifndef CHILI_VIT_H_
#define CHILI_VIT_H_

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "chili/tensor.h"
#include "chili/weights_io.h"

namespace chili {

// Everything the recording forward pass keeps for the decomposition.
// Token index 0 is the class token; 1..N are patches in row-major order.
struct ResidualRecord {
  std::vector<Tensor> layer_inputs;  // L x [N+1, D], Z^{l-1}
  Tensor attention;                  // [L, H, N+1], class-query rows
  Tensor values;                     // [L, H, N+1, d_head]
  Tensor attn_cls_out;               // [L, D], MSA output at the class token
  Tensor mlp_cls_out;                // [L, D], MLP output at the class token
  Tensor initial_cls;                // [D], Z^0 class token
  Tensor final_cls;                  // [D], Z^L class token
  double final_ln_mean = 0.0;
  double final_ln_sigma = 1.0;
};

struct EncodedImage {
  Tensor embedding;  // [E], P * LN(Z^L_cls), unnormalized
  ResidualRecord record;
};

// Pre-LN ViT forward pass over a preprocessed [3, S, S] image.
EncodedImage EncodeImage(const WeightArchive& weights, const Tensor& image);

// Non-head terms of the class embedding, each already folded through the
// final LayerNorm and projected.
struct EpsilonComponents {
  Tensor initial_cls;          // [E]
  Tensor attn_bias_per_layer;  // [L, E], output-projection biases
  Tensor mlp_per_layer;        // [L, E]
  Tensor ln_beta;              // [E]
};

struct ContributionRecord {
  std::string model_id;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;  // N + 1
  Tensor m;                // [L, H, N+1, E]
  EpsilonComponents eps;
  Tensor embedding;        // [E], from the forward pass
  double image_norm = 0.0;

  std::span<const float> contribution(std::size_t l, std::size_t h,
                                      std::size_t i) const;
  // Sum of all m and eps components in fixed (l, h, i) order.
  std::vector<double> Reconstruct() const;
};

ContributionRecord Decompose(const WeightArchive& weights,
                             const ResidualRecord& record);

// Per-(layer, head, token) scalar contributions to one image-text score.
struct ScoredMaps {
  std::string model_id;
  std::string concept_name;
  Tensor A;          // [L, H, N+1]
  double eps = 0.0;  // eps-components projected onto the concept
  double S = 0.0;    // logit_scale * <embedding, concept> / |embedding|

  std::size_t layers() const { return A.dim(0); }
  std::size_t heads() const { return A.dim(1); }
  std::size_t tokens() const { return A.dim(2); }
  double at(std::size_t l, std::size_t h, std::size_t i) const {
    return A[(l * heads() + h) * tokens() + i];
  }
  double SumA() const;
};

// Scores an arbitrary direction; A and eps are linear in `direction`.
ScoredMaps ScoreDirection(const ContributionRecord& contrib,
                          std::span<const float> direction, double logit_scale,
                          const std::string& concept_name = "");
// Requires a unit-norm concept (1e-5).
ScoredMaps ScoreConcept(const ContributionRecord& contrib,
                        std::span<const float> concept_name, double logit_scale,
                        const std::string& name = "");

// Patch-grid view of a ScoredMaps: one GridMap per (l, h), with the class
// token split off.
struct SpatialMaps {
  std::string model_id;
  std::string concept_name;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::vector<GridMap> maps;  // index l * heads + h
  Tensor cls;                 // [L, H], A_{0,l,h}
  double eps = 0.0;
  double S = 0.0;

  const GridMap& map(std::size_t l, std::size_t h) const {
    return maps[l * heads + h];
  }
  double ClsSum() const;
  // Raw summed map sum_{l,h} A_{l,h}.
  GridMap Summed() const;
};

SpatialMaps ToSpatialMaps(const ScoredMaps& sm, std::size_t rows,
                          std::size_t cols);

// ScoredMaps files use the tensor container: tensor "A" [L,H,N+1]; metadata
// "model_id", "concept", "eps", "S" (doubles printed round-trip exact).
void SaveScoredMaps(const std::filesystem::path& path, const ScoredMaps& sm);
ScoredMaps LoadScoredMaps(const std::filesystem::path& path);

}  // namespace chili

#endif  // CHILI_VIT_H_

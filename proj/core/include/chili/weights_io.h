#ifndef CHILI_WEIGHTS_IO_H_
#define CHILI_WEIGHTS_IO_H_

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chili/image_io.h"
#include "chili/tensor.h"
#include "chili/tensor_file.h"

namespace chili {

enum class Activation { kGelu, kQuickGelu };

// Vision-transformer hyperparameters. Stored as string metadata in the weight
// archive; widths not present in metadata are inferred from tensor shapes.
struct ModelSpec {
  std::string model_id = "unknown";
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t patch_size = 0;
  std::size_t image_size = 0;
  std::size_t d_model = 0;
  std::size_t d_embed = 0;
  std::size_t d_mlp = 0;
  double logit_scale = 100.0;
  double ln_eps = 1e-5;
  Activation activation = Activation::kGelu;

  std::size_t grid_side() const { return image_size / patch_size; }
  // Spatial token count N (class token excluded).
  std::size_t tokens() const { return grid_side() * grid_side(); }
  std::size_t d_head() const { return d_model / heads; }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }

  // Throws ValidationError on a violated invariant.
  void Validate() const;
};

struct LayerWeights {
  Tensor ln1_gamma, ln1_beta;   // [D]
  Tensor qkv_weight;            // [3D, D], rows q | k | v
  Tensor qkv_bias;              // [3D]
  Tensor out_weight;            // [D, D]; columns h*dh..(h+1)*dh are W_O^{l,h}
  Tensor out_bias;              // [D]
  Tensor ln2_gamma, ln2_beta;   // [D]
  Tensor fc_weight;             // [F, D]
  Tensor fc_bias;               // [F]
  Tensor proj_weight;           // [D, F]
  Tensor proj_bias;             // [D]
};

// Canonical tensor names (OpenAI CLIP visual tower layout):
//   visual.conv1.weight                     [D, 3, p, p]
//   visual.class_embedding                  [D]
//   visual.positional_embedding             [N+1, D]
//   visual.ln_pre.{weight,bias}             [D]
//   visual.transformer.resblocks.<l>.ln_1.{weight,bias}
//   visual.transformer.resblocks.<l>.attn.in_proj_weight  [3D, D]
//   visual.transformer.resblocks.<l>.attn.in_proj_bias    [3D]
//     (or split: attn.{q,k,v}_proj.{weight,bias})
//   visual.transformer.resblocks.<l>.attn.out_proj.{weight,bias}
//   visual.transformer.resblocks.<l>.ln_2.{weight,bias}
//   visual.transformer.resblocks.<l>.mlp.c_fc.{weight,bias}   [F, D], [F]
//   visual.transformer.resblocks.<l>.mlp.c_proj.{weight,bias} [D, F], [D]
//   visual.ln_post.{weight,bias}            [D]
//   visual.proj                             [D, E]
struct WeightArchive {
  ModelSpec spec;
  Tensor patch_weight;
  Tensor class_embedding;
  Tensor positional_embedding;
  Tensor ln_pre_gamma, ln_pre_beta;
  std::vector<LayerWeights> layers;
  Tensor ln_post_gamma, ln_post_beta;
  Tensor projection;
};

WeightArchive WeightArchiveFromFile(const TensorFile& file);
TensorFile WeightArchiveToFile(const WeightArchive& archive);
WeightArchive LoadWeightArchive(const std::filesystem::path& path);
void SaveWeightArchive(const std::filesystem::path& path,
                       const WeightArchive& archive);

// CLIP preprocessing constants (RGB).
inline constexpr float kImageMean[3] = {0.48145466f, 0.4578275f, 0.40821073f};
inline constexpr float kImageStd[3] = {0.26862954f, 0.26130258f, 0.27577711f};

// Bilinear resize (half-pixel centres, edge clamp) of an RGB raster to
// image_size^2, scaled to [0,1] and channel-normalized. Result [3, S, S].
Tensor PreprocessImage(const Raster& rgb, std::size_t image_size);
Tensor LoadImage(const std::filesystem::path& path, std::size_t image_size);

// Max-pools a graymap onto a rows x cols grid: a cell is 1 when any covered
// pixel is nonzero.
GridMap PoolMask(const Raster& gray, std::size_t rows, std::size_t cols);
GridMap LoadMask(const std::filesystem::path& path, std::size_t rows,
                 std::size_t cols);

// One manifest entry. Paths are resolved relative to the manifest directory.
struct ProbeSample {
  std::filesystem::path image;
  std::string concept_name;
  std::optional<std::filesystem::path> mask;
  std::optional<std::string> label;
  bool present = true;
  // Precomputed score maps per concept (bypasses the encoder).
  std::map<std::string, std::filesystem::path> maps;
};

struct Manifest {
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  std::vector<ProbeSample> samples;
};

// {"grid":[R,C], "samples":[{"image", "concept", "mask"?, "class"?,
//  "present"?, "maps"?: path | {concept: path}}]}
Manifest LoadProbeManifest(const std::filesystem::path& path);

struct ConceptEmbedding {
  std::string name;
  std::vector<float> vector;  // unit norm
};

class ConceptEmbeddingSet {
 public:
  ConceptEmbeddingSet() = default;
  // Normalizes every vector; rejects duplicate names and zero vectors.
  explicit ConceptEmbeddingSet(std::vector<ConceptEmbedding> concepts);

  std::size_t size() const { return concepts_.size(); }
  std::size_t dim() const {
    return concepts_.empty() ? 0 : concepts_.front().vector.size();
  }
  const std::vector<ConceptEmbedding>& concepts() const { return concepts_; }
  const ConceptEmbedding& at(std::size_t i) const { return concepts_.at(i); }
  // Throws ValidationError for an unknown name.
  const ConceptEmbedding& Find(const std::string& name) const;
  bool Contains(const std::string& name) const;

 private:
  std::vector<ConceptEmbedding> concepts_;
};

// {"dim": D, "concepts": {name: [floats]}}. expected_dim 0 skips the check.
ConceptEmbeddingSet ParseConceptEmbeddings(const std::string& text,
                                           std::size_t expected_dim,
                                           const std::string& source);
ConceptEmbeddingSet LoadConceptEmbeddings(const std::filesystem::path& path,
                                          std::size_t expected_dim = 0);
void SaveConceptEmbeddings(const std::filesystem::path& path,
                           const ConceptEmbeddingSet& set);

}  // namespace chili

#endif  // CHILI_WEIGHTS_IO_H_

#ifndef CHILI_FIXTURE_H_
#define CHILI_FIXTURE_H_

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "chili/image_io.h"
#include "chili/tensor.h"
#include "chili/vit.h"
#include "chili/weights_io.h"

namespace chili {

struct HeadIndex {
  std::size_t layer = 0;
  std::size_t head = 0;
  friend bool operator==(const HeadIndex&, const HeadIndex&) = default;
};

// Desk-scale stand-in for CLIP activations. Object heads light up the
// planted object region, context heads light up the surroundings (keeping a
// one-cell gap), and one head additionally carries a pseudo-register spike.
struct FixtureSpec {
  std::string model_id = "synthetic-fixture";
  std::string concept_name = "beak";
  std::string c1 = "finch";
  std::string c2 = "airplane";
  std::size_t grid_rows = 10;
  std::size_t grid_cols = 10;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::vector<HeadIndex> object_heads = {{0, 1}, {1, 2}};
  HeadIndex register_head = {1, 3};
  GridMap planted_mask;  // empty: 4x4 block at (3, 3)
  std::size_t probe_samples = 24;
  std::size_t eval_present = 30;
  std::size_t eval_absent = 30;
  std::size_t other_samples = 30;
  // Uniform noise half-width relative to the unit signal amplitude.
  double noise = 0.1;
  std::size_t cell_pixels = 4;

  // CBM fixture: classes defined by which concepts are physically present.
  std::vector<std::string> cbm_concepts = {"beak", "wing", "tail", "crest"};
  std::vector<std::string> cbm_classes = {"finch", "jay", "oriole"};
  std::vector<std::vector<bool>> cbm_presence = {
      {true, true, false, false},
      {false, false, true, true},
      {true, false, false, true}};
  std::size_t cbm_per_class = 12;

  bool IsObjectHead(std::size_t l, std::size_t h) const;
  GridMap Mask() const;
  void Validate() const;
};

struct FixtureSample {
  std::string label;
  bool present = true;
  GridMap mask;  // object region (all zero when absent)
  GridMap context_region;
  double context_strength = 0.0;
  ScoredMaps maps;
};

struct CbmFixtureImage {
  std::string label;
  std::vector<FixtureSample> per_concept;  // FixtureSpec::cbm_concepts order
};

struct Fixture {
  FixtureSpec spec;
  std::uint64_t seed = 0;
  std::vector<FixtureSample> probe;  // c1, concept present, with masks
  std::vector<FixtureSample> eval;   // c1, concept present / absent
  std::vector<FixtureSample> other;  // c2, concept absent
  std::vector<CbmFixtureImage> cbm_train;  // context correlated with presence
  std::vector<CbmFixtureImage> cbm_test;   // context anti-correlated
};

Fixture GenerateFixture(std::uint64_t seed, const FixtureSpec& spec);

// Writes images/, masks/, maps/ and the manifests probe.json, eval.json,
// triplet.json, cbm_train.json, cbm_test.json plus fixture.json.
void WriteFixture(const Fixture& fixture, const std::filesystem::path& dir);

Raster RenderFixtureImage(const FixtureSpec& spec, const FixtureSample& sample);

// Random tiny ViT with weights scaled to keep activations O(1).
WeightArchive RandomArchive(std::uint64_t seed, const ModelSpec& spec);
Raster RandomRaster(std::uint64_t seed, std::size_t width, std::size_t height);
ConceptEmbeddingSet RandomConcepts(std::uint64_t seed,
                                   const std::vector<std::string>& names,
                                   std::size_t dim);

}  // namespace chili

#endif  // CHILI_FIXTURE_H_

#include "chili/fixture.h"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "chili/error.h"
#include "chili/rng.h"
#include "chili/tensor_file.h"
#include "json.hpp"

namespace chili {

using nlohmann::json;

bool FixtureSpec::IsObjectHead(std::size_t l, std::size_t h) const {
  return std::find(object_heads.begin(), object_heads.end(), HeadIndex{l, h}) !=
         object_heads.end();
}

GridMap FixtureSpec::Mask() const {
  if (planted_mask.size() != 0) return planted_mask;
  std::vector<double> cells(grid_rows * grid_cols, 0.0);
  for (std::size_t r = 3; r < std::min<std::size_t>(7, grid_rows); ++r) {
    for (std::size_t c = 3; c < std::min<std::size_t>(7, grid_cols); ++c) {
      cells[r * grid_cols + c] = 1.0;
    }
  }
  return GridMap(grid_rows, grid_cols, std::move(cells));
}

void FixtureSpec::Validate() const {
  if (layers == 0 || heads == 0) throw ValidationError("fixture: empty model");
  if (grid_rows == 0 || grid_cols == 0) throw ValidationError("fixture: empty grid");
  const GridMap mask = Mask();
  if (mask.rows() != grid_rows || mask.cols() != grid_cols) {
    throw ValidationError("fixture: planted mask does not match the grid");
  }
  if (mask.Sum() == 0.0) throw ValidationError("fixture: planted mask is empty");
  if (object_heads.empty()) throw ValidationError("fixture: no object heads");
  for (const HeadIndex& h : object_heads) {
    if (h.layer >= layers || h.head >= heads) {
      throw ValidationError("fixture: object head out of range");
    }
  }
  if (register_head.layer >= layers || register_head.head >= heads) {
    throw ValidationError("fixture: register head out of range");
  }
  if (object_heads.size() == layers * heads) {
    throw ValidationError("fixture: at least one context head is required");
  }
  if (cbm_presence.size() != cbm_classes.size()) {
    throw ValidationError("fixture: CBM presence table needs one row per class");
  }
  for (const auto& row : cbm_presence) {
    if (row.size() != cbm_concepts.size()) {
      throw ValidationError("fixture: CBM presence row width mismatch");
    }
  }
}

namespace {

GridMap Shift(const GridMap& mask, long dr, long dc) {
  std::vector<double> out(mask.size(), 0.0);
  const long rows = static_cast<long>(mask.rows()), cols = static_cast<long>(mask.cols());
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      const long sr = r - dr, sc = c - dc;
      if (sr >= 0 && sr < rows && sc >= 0 && sc < cols) {
        out[static_cast<std::size_t>(r * cols + c)] =
            mask.at(static_cast<std::size_t>(sr), static_cast<std::size_t>(sc));
      }
    }
  }
  return GridMap(mask.rows(), mask.cols(), std::move(out));
}

// Cells at Chebyshev distance >= 2 from the mask.
GridMap ContextRegion(const GridMap& mask) {
  const long rows = static_cast<long>(mask.rows()), cols = static_cast<long>(mask.cols());
  std::vector<double> out(mask.size(), 1.0);
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      if (mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) == 0.0) continue;
      for (long dr = -1; dr <= 1; ++dr) {
        for (long dc = -1; dc <= 1; ++dc) {
          const long rr = r + dr, cc = c + dc;
          if (rr >= 0 && rr < rows && cc >= 0 && cc < cols) {
            out[static_cast<std::size_t>(rr * cols + cc)] = 0.0;
          }
        }
      }
    }
  }
  return GridMap(mask.rows(), mask.cols(), std::move(out));
}

struct Generator {
  const FixtureSpec& spec;
  Rng& rng;
  GridMap planted;

  // Context strength compensation that equalises expected raw scores of
  // concept-present and concept-absent samples.
  double Compensation() const {
    const double object_heads = static_cast<double>(spec.object_heads.size());
    const double context_heads =
        static_cast<double>(spec.layers * spec.heads) - object_heads;
    const double ctx_cells = ContextRegion(planted).Sum();
    if (ctx_cells == 0.0) return 0.0;
    return object_heads * planted.Sum() / (context_heads * ctx_cells);
  }

  FixtureSample Make(const std::string& concept_name, const std::string& label,
                     bool present, double ctx_lo, double ctx_hi) {
    const long dr = static_cast<long>(rng.Index(3)) - 1;
    const long dc = static_cast<long>(rng.Index(3)) - 1;
    GridMap region = Shift(planted, dr, dc);
    if (region.Sum() == 0.0) region = planted;

    FixtureSample s;
    s.label = label;
    s.present = present;
    s.context_region = ContextRegion(region);
    s.mask = present ? region : GridMap::Constant(region.rows(), region.cols(), 0.0);
    s.context_strength = rng.Uniform(ctx_lo, ctx_hi);
    const double object_strength = rng.Uniform(0.8, 1.2);

    const std::size_t L = spec.layers, H = spec.heads;
    const std::size_t N = spec.grid_rows * spec.grid_cols, T = N + 1;
    std::vector<float> a(L * H * T);
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t h = 0; h < H; ++h) {
        float* dst = a.data() + (l * H + h) * T;
        dst[0] = static_cast<float>(rng.Uniform(-0.05, 0.05));
        const bool object = spec.IsObjectHead(l, h);
        for (std::size_t k = 0; k < N; ++k) {
          double v = rng.Uniform(-spec.noise, spec.noise);
          if (object) {
            v += s.mask[k] * object_strength;
          } else {
            v += s.context_region[k] * s.context_strength;
          }
          dst[1 + k] = static_cast<float>(v);
        }
        if (l == spec.register_head.layer && h == spec.register_head.head) {
          dst[1 + rng.Index(N)] += static_cast<float>(rng.Uniform(5.0, 10.0));
        }
      }
    }
    s.maps.model_id = spec.model_id;
    s.maps.concept_name = concept_name;
    s.maps.A = Tensor({L, H, T}, std::move(a));
    s.maps.eps = rng.Uniform(-0.5, 0.5);
    s.maps.S = s.maps.SumA() + s.maps.eps;
    return s;
  }
};

std::string FormatIndex(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s_%03zu", prefix, i);
  return buf;
}

}  // namespace

Fixture GenerateFixture(std::uint64_t seed, const FixtureSpec& spec) {
  spec.Validate();
  Rng rng(seed);
  Generator gen{spec, rng, spec.Mask()};
  const double delta = gen.Compensation();

  Fixture f;
  f.spec = spec;
  f.seed = seed;
  for (std::size_t i = 0; i < spec.probe_samples; ++i) {
    f.probe.push_back(gen.Make(spec.concept_name, spec.c1, true, 0.4, 1.6));
  }
  for (std::size_t i = 0; i < spec.eval_present + spec.eval_absent; ++i) {
    const bool present = i < spec.eval_present;
    const double shift = present ? 0.0 : delta;
    f.eval.push_back(gen.Make(spec.concept_name, spec.c1, present, 0.4 + shift, 1.6 + shift));
  }
  for (std::size_t i = 0; i < spec.other_samples; ++i) {
    f.other.push_back(gen.Make(spec.concept_name, spec.c2, false, 0.1, 0.5));
  }
  for (const bool train : {true, false}) {
    auto& out = train ? f.cbm_train : f.cbm_test;
    for (std::size_t n = 0; n < spec.cbm_per_class; ++n) {
      for (std::size_t c = 0; c < spec.cbm_classes.size(); ++c) {
        CbmFixtureImage img;
        img.label = spec.cbm_classes[c];
        for (std::size_t k = 0; k < spec.cbm_concepts.size(); ++k) {
          const bool present = spec.cbm_presence[c][k];
          // Train: context accompanies the concept. Test: it accompanies the
          // concept's absence.
          const bool strong = train ? present : !present;
          img.per_concept.push_back(gen.Make(spec.cbm_concepts[k], img.label, present,
                                             strong ? 1.0 : 0.2, strong ? 1.6 : 0.6));
        }
        out.push_back(std::move(img));
      }
    }
  }
  return f;
}

Raster RenderFixtureImage(const FixtureSpec& spec, const FixtureSample& s) {
  const std::size_t px = spec.cell_pixels;
  Raster r;
  r.width = spec.grid_cols * px;
  r.height = spec.grid_rows * px;
  r.channels = 3;
  r.pixels.resize(r.width * r.height * 3);
  const auto green = static_cast<std::uint8_t>(
      std::clamp(60.0 + 100.0 * s.context_strength, 0.0, 255.0));
  for (std::size_t y = 0; y < r.height; ++y) {
    for (std::size_t x = 0; x < r.width; ++x) {
      const std::size_t cell = (y / px) * spec.grid_cols + x / px;
      std::uint8_t* p = r.pixels.data() + (y * r.width + x) * 3;
      if (s.mask[cell] != 0.0) {
        p[0] = 200; p[1] = 40; p[2] = 40;
      } else if (s.context_region[cell] != 0.0) {
        p[0] = 40; p[1] = green; p[2] = 40;
      } else {
        p[0] = 128; p[1] = 128; p[2] = 128;
      }
    }
  }
  return r;
}

namespace {

Raster RenderMask(const FixtureSpec& spec, const GridMap& mask) {
  const std::size_t px = spec.cell_pixels;
  Raster r;
  r.width = spec.grid_cols * px;
  r.height = spec.grid_rows * px;
  r.channels = 1;
  r.pixels.resize(r.width * r.height);
  for (std::size_t y = 0; y < r.height; ++y) {
    for (std::size_t x = 0; x < r.width; ++x) {
      r.pixels[y * r.width + x] =
          mask[(y / px) * spec.grid_cols + x / px] != 0.0 ? 255 : 0;
    }
  }
  return r;
}

void WriteJson(const std::filesystem::path& path, const json& doc) {
  WriteFileBytes(path, doc.dump(2) + "\n");
}

}  // namespace

void WriteFixture(const Fixture& f, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const char* sub : {"images", "masks", "maps"}) {
    fs::create_directories(dir / sub, ec);
    if (ec) throw IoError("cannot create " + (dir / sub).string() + ": " + ec.message());
  }
  const FixtureSpec& spec = f.spec;
  const json grid = {spec.grid_rows, spec.grid_cols};

  // Writes one sample's files and returns its manifest entry.
  auto emit = [&](const FixtureSample& s, const std::string& stem, bool with_mask) {
    const std::string image = "images/" + stem + ".ppm";
    const std::string maps = "maps/" + stem + ".st";
    WritePnm(dir / image, RenderFixtureImage(spec, s));
    SaveScoredMaps(dir / maps, s.maps);
    json e = {{"image", image},
              {"concept", s.maps.concept_name},
              {"class", s.label},
              {"present", s.present},
              {"maps", maps}};
    if (with_mask && s.present) {
      const std::string mask = "masks/" + stem + ".pgm";
      WritePnm(dir / mask, RenderMask(spec, s.mask));
      e["mask"] = mask;
    }
    return e;
  };

  json probe = json::array();
  for (std::size_t i = 0; i < f.probe.size(); ++i) {
    probe.push_back(emit(f.probe[i], FormatIndex("probe", i), true));
  }
  WriteJson(dir / "probe.json", {{"grid", grid}, {"samples", probe}});

  json eval = json::array();
  for (std::size_t i = 0; i < f.eval.size(); ++i) {
    eval.push_back(emit(f.eval[i], FormatIndex("eval", i), true));
  }
  WriteJson(dir / "eval.json", {{"grid", grid}, {"samples", eval}});

  json triplet = eval;
  for (std::size_t i = 0; i < f.other.size(); ++i) {
    triplet.push_back(emit(f.other[i], FormatIndex("other", i), false));
  }
  WriteJson(dir / "triplet.json", {{"grid", grid}, {"samples", triplet}});

  for (const bool train : {true, false}) {
    const auto& images = train ? f.cbm_train : f.cbm_test;
    const char* prefix = train ? "cbm_train" : "cbm_test";
    json samples = json::array();
    for (std::size_t i = 0; i < images.size(); ++i) {
      const CbmFixtureImage& img = images[i];
      const std::string stem = FormatIndex(prefix, i);
      json maps = json::object();
      for (std::size_t k = 0; k < img.per_concept.size(); ++k) {
        const std::string path = "maps/" + stem + "_" + spec.cbm_concepts[k] + ".st";
        SaveScoredMaps(dir / path, img.per_concept[k].maps);
        maps[spec.cbm_concepts[k]] = path;
      }
      // The image shows the first concept's layout.
      const std::string image = "images/" + stem + ".ppm";
      WritePnm(dir / image, RenderFixtureImage(spec, img.per_concept.front()));
      samples.push_back({{"image", image}, {"class", img.label}, {"maps", maps}});
    }
    WriteJson(dir / (std::string(prefix) + ".json"),
              {{"grid", grid}, {"samples", samples}});
  }

  json object_heads = json::array();
  for (const HeadIndex& h : spec.object_heads) object_heads.push_back({h.layer, h.head});
  WriteJson(dir / "fixture.json",
            {{"seed", f.seed},
             {"model_id", spec.model_id},
             {"concept", spec.concept_name},
             {"c1", spec.c1},
             {"c2", spec.c2},
             {"grid", grid},
             {"L", spec.layers},
             {"H", spec.heads},
             {"object_heads", object_heads},
             {"register_head", {spec.register_head.layer, spec.register_head.head}},
             {"cbm_concepts", spec.cbm_concepts},
             {"cbm_classes", spec.cbm_classes}});
}

WeightArchive RandomArchive(std::uint64_t seed, const ModelSpec& spec) {
  spec.Validate();
  Rng rng(seed);
  auto normal = [&](Shape shape, double stddev, double mean = 0.0) {
    std::vector<float> v(ShapeProduct(shape));
    for (float& x : v) x = static_cast<float>(mean + stddev * rng.Normal());
    return Tensor(std::move(shape), std::move(v));
  };
  const std::size_t D = spec.d_model, F = spec.d_mlp, E = spec.d_embed;
  const std::size_t p = spec.patch_size;
  const double inv_d = 1.0 / std::sqrt(static_cast<double>(D));
  WeightArchive w;
  w.spec = spec;
  w.patch_weight = normal({D, 3, p, p}, 1.0 / std::sqrt(static_cast<double>(spec.patch_dim())));
  w.class_embedding = normal({D}, 0.5);
  w.positional_embedding = normal({spec.tokens() + 1, D}, 0.2);
  w.ln_pre_gamma = normal({D}, 0.1, 1.0);
  w.ln_pre_beta = normal({D}, 0.1);
  for (std::size_t l = 0; l < spec.layers; ++l) {
    LayerWeights lw;
    lw.ln1_gamma = normal({D}, 0.1, 1.0);
    lw.ln1_beta = normal({D}, 0.1);
    lw.qkv_weight = normal({3 * D, D}, inv_d * 1.5);
    lw.qkv_bias = normal({3 * D}, 0.1);
    lw.out_weight = normal({D, D}, inv_d);
    lw.out_bias = normal({D}, 0.1);
    lw.ln2_gamma = normal({D}, 0.1, 1.0);
    lw.ln2_beta = normal({D}, 0.1);
    lw.fc_weight = normal({F, D}, inv_d);
    lw.fc_bias = normal({F}, 0.1);
    lw.proj_weight = normal({D, F}, 1.0 / std::sqrt(static_cast<double>(F)));
    lw.proj_bias = normal({D}, 0.1);
    w.layers.push_back(std::move(lw));
  }
  w.ln_post_gamma = normal({D}, 0.1, 1.0);
  w.ln_post_beta = normal({D}, 0.1);
  w.projection = normal({D, E}, inv_d);
  return w;
}

Raster RandomRaster(std::uint64_t seed, std::size_t width, std::size_t height) {
  Rng rng(seed);
  Raster r;
  r.width = width;
  r.height = height;
  r.channels = 3;
  r.pixels.resize(width * height * 3);
  for (auto& px : r.pixels) px = static_cast<std::uint8_t>(rng.Index(256));
  return r;
}

ConceptEmbeddingSet RandomConcepts(std::uint64_t seed,
                                   const std::vector<std::string>& names,
                                   std::size_t dim) {
  Rng rng(seed);
  std::vector<ConceptEmbedding> out;
  for (const auto& name : names) {
    ConceptEmbedding c{name, std::vector<float>(dim)};
    for (float& v : c.vector) v = static_cast<float>(rng.Normal());
    out.push_back(std::move(c));
  }
  return ConceptEmbeddingSet(std::move(out));
}

}  // namespace chili

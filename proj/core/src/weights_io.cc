#include "chili/weights_io.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "chili/error.h"
#include "json.hpp"

namespace chili {

using nlohmann::json;

namespace {

std::string FormatDouble(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::size_t ParseSize(const std::map<std::string, std::string>& meta,
                      const std::string& key, std::size_t fallback,
                      bool required) {
  auto it = meta.find(key);
  if (it == meta.end()) {
    if (required) throw ValidationError("archive metadata missing '" + key + "'");
    return fallback;
  }
  try {
    std::size_t used = 0;
    const long long v = std::stoll(it->second, &used);
    if (used != it->second.size() || v < 0) throw std::invalid_argument(key);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ValidationError("archive metadata '" + key + "' is not a count: " +
                          it->second);
  }
}

double ParseReal(const std::map<std::string, std::string>& meta,
                 const std::string& key, double fallback) {
  auto it = meta.find(key);
  if (it == meta.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("archive metadata '" + key + "' is not a number: " +
                          it->second);
  }
}

class TensorLookup {
 public:
  explicit TensorLookup(const TensorFile& file) : file_(file) {}

  bool Has(const std::string& name) const {
    return file_.tensors.count(name) > 0;
  }

  const Tensor& Get(const std::string& name) const {
    auto it = file_.tensors.find(name);
    if (it == file_.tensors.end()) {
      throw ValidationError("weight archive missing tensor '" + name + "'");
    }
    return it->second;
  }

  Tensor Expect(const std::string& name, const Shape& shape) const {
    const Tensor& t = Get(name);
    if (t.shape() != shape) {
      throw ValidationError("tensor '" + name + "' has shape " +
                            ShapeToString(t.shape()) + ", expected " +
                            ShapeToString(shape));
    }
    return t;
  }

 private:
  const TensorFile& file_;
};

std::string BlockName(std::size_t l, const std::string& suffix) {
  return "visual.transformer.resblocks." + std::to_string(l) + "." + suffix;
}

Tensor Concat(std::span<const Tensor> parts, Shape shape) {
  std::vector<float> data;
  data.reserve(ShapeProduct(shape));
  for (const Tensor& t : parts) {
    data.insert(data.end(), t.data().begin(), t.data().end());
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

void ModelSpec::Validate() const {
  if (layers < 1) throw ValidationError("model spec: layers must be >= 1");
  if (heads < 1) throw ValidationError("model spec: heads must be >= 1");
  if (patch_size < 1 || image_size < patch_size ||
      image_size % patch_size != 0) {
    throw ValidationError("model spec: image_size must be a multiple of patch_size");
  }
  if (d_model == 0 || d_model % heads != 0) {
    throw ValidationError("model spec: d_model must equal heads * d_head");
  }
  if (d_embed == 0 || d_mlp == 0) {
    throw ValidationError("model spec: zero embedding or MLP width");
  }
  if (!(logit_scale > 0.0) || !std::isfinite(logit_scale)) {
    throw ValidationError("model spec: logit_scale must be > 0");
  }
  if (!(ln_eps > 0.0)) throw ValidationError("model spec: ln_eps must be > 0");
}

WeightArchive WeightArchiveFromFile(const TensorFile& file) {
  const auto& meta = file.metadata;
  const TensorLookup lookup(file);
  WeightArchive w;
  ModelSpec& s = w.spec;
  if (auto it = meta.find("model_id"); it != meta.end()) s.model_id = it->second;
  s.layers = ParseSize(meta, "layers", 0, true);
  s.heads = ParseSize(meta, "heads", 0, true);
  s.patch_size = ParseSize(meta, "patch_size", 0, true);
  s.image_size = ParseSize(meta, "image_size", 0, true);
  s.d_model = ParseSize(meta, "d_model",
                        lookup.Get("visual.class_embedding").size(), false);
  const Tensor& proj = lookup.Get("visual.proj");
  s.d_embed = ParseSize(meta, "d_embed", proj.rank() == 2 ? proj.dim(1) : 0, false);
  const Tensor& fc0 = lookup.Get(BlockName(0, "mlp.c_fc.weight"));
  s.d_mlp = ParseSize(meta, "d_mlp", fc0.rank() == 2 ? fc0.dim(0) : 0, false);
  s.logit_scale = ParseReal(meta, "logit_scale", 100.0);
  s.ln_eps = ParseReal(meta, "ln_eps", 1e-5);
  if (auto it = meta.find("activation"); it != meta.end()) {
    if (it->second == "gelu") {
      s.activation = Activation::kGelu;
    } else if (it->second == "quick_gelu") {
      s.activation = Activation::kQuickGelu;
    } else {
      throw ValidationError("unknown activation '" + it->second + "'");
    }
  }
  s.Validate();

  const std::size_t D = s.d_model, p = s.patch_size, F = s.d_mlp;
  w.patch_weight = lookup.Expect("visual.conv1.weight", {D, 3, p, p});
  w.class_embedding = lookup.Expect("visual.class_embedding", {D});
  w.positional_embedding =
      lookup.Expect("visual.positional_embedding", {s.tokens() + 1, D});
  w.ln_pre_gamma = lookup.Expect("visual.ln_pre.weight", {D});
  w.ln_pre_beta = lookup.Expect("visual.ln_pre.bias", {D});
  for (std::size_t l = 0; l < s.layers; ++l) {
    LayerWeights lw;
    lw.ln1_gamma = lookup.Expect(BlockName(l, "ln_1.weight"), {D});
    lw.ln1_beta = lookup.Expect(BlockName(l, "ln_1.bias"), {D});
    if (lookup.Has(BlockName(l, "attn.in_proj_weight"))) {
      lw.qkv_weight = lookup.Expect(BlockName(l, "attn.in_proj_weight"), {3 * D, D});
      lw.qkv_bias = lookup.Expect(BlockName(l, "attn.in_proj_bias"), {3 * D});
    } else {
      std::vector<Tensor> ws, bs;
      for (const char* part : {"q", "k", "v"}) {
        const std::string base = std::string("attn.") + part + "_proj.";
        ws.push_back(lookup.Expect(BlockName(l, base + "weight"), {D, D}));
        bs.push_back(lookup.Expect(BlockName(l, base + "bias"), {D}));
      }
      lw.qkv_weight = Concat(ws, {3 * D, D});
      lw.qkv_bias = Concat(bs, {3 * D});
    }
    lw.out_weight = lookup.Expect(BlockName(l, "attn.out_proj.weight"), {D, D});
    lw.out_bias = lookup.Expect(BlockName(l, "attn.out_proj.bias"), {D});
    lw.ln2_gamma = lookup.Expect(BlockName(l, "ln_2.weight"), {D});
    lw.ln2_beta = lookup.Expect(BlockName(l, "ln_2.bias"), {D});
    lw.fc_weight = lookup.Expect(BlockName(l, "mlp.c_fc.weight"), {F, D});
    lw.fc_bias = lookup.Expect(BlockName(l, "mlp.c_fc.bias"), {F});
    lw.proj_weight = lookup.Expect(BlockName(l, "mlp.c_proj.weight"), {D, F});
    lw.proj_bias = lookup.Expect(BlockName(l, "mlp.c_proj.bias"), {D});
    w.layers.push_back(std::move(lw));
  }
  w.ln_post_gamma = lookup.Expect("visual.ln_post.weight", {D});
  w.ln_post_beta = lookup.Expect("visual.ln_post.bias", {D});
  w.projection = lookup.Expect("visual.proj", {D, s.d_embed});
  return w;
}

TensorFile WeightArchiveToFile(const WeightArchive& w) {
  const ModelSpec& s = w.spec;
  s.Validate();
  TensorFile f;
  f.metadata = {
      {"model_id", s.model_id},
      {"layers", std::to_string(s.layers)},
      {"heads", std::to_string(s.heads)},
      {"patch_size", std::to_string(s.patch_size)},
      {"image_size", std::to_string(s.image_size)},
      {"d_model", std::to_string(s.d_model)},
      {"d_embed", std::to_string(s.d_embed)},
      {"d_mlp", std::to_string(s.d_mlp)},
      {"logit_scale", FormatDouble(s.logit_scale)},
      {"ln_eps", FormatDouble(s.ln_eps)},
      {"activation", s.activation == Activation::kGelu ? "gelu" : "quick_gelu"},
  };
  auto& t = f.tensors;
  t["visual.conv1.weight"] = w.patch_weight;
  t["visual.class_embedding"] = w.class_embedding;
  t["visual.positional_embedding"] = w.positional_embedding;
  t["visual.ln_pre.weight"] = w.ln_pre_gamma;
  t["visual.ln_pre.bias"] = w.ln_pre_beta;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const LayerWeights& lw = w.layers[l];
    t[BlockName(l, "ln_1.weight")] = lw.ln1_gamma;
    t[BlockName(l, "ln_1.bias")] = lw.ln1_beta;
    t[BlockName(l, "attn.in_proj_weight")] = lw.qkv_weight;
    t[BlockName(l, "attn.in_proj_bias")] = lw.qkv_bias;
    t[BlockName(l, "attn.out_proj.weight")] = lw.out_weight;
    t[BlockName(l, "attn.out_proj.bias")] = lw.out_bias;
    t[BlockName(l, "ln_2.weight")] = lw.ln2_gamma;
    t[BlockName(l, "ln_2.bias")] = lw.ln2_beta;
    t[BlockName(l, "mlp.c_fc.weight")] = lw.fc_weight;
    t[BlockName(l, "mlp.c_fc.bias")] = lw.fc_bias;
    t[BlockName(l, "mlp.c_proj.weight")] = lw.proj_weight;
    t[BlockName(l, "mlp.c_proj.bias")] = lw.proj_bias;
  }
  t["visual.ln_post.weight"] = w.ln_post_gamma;
  t["visual.ln_post.bias"] = w.ln_post_beta;
  t["visual.proj"] = w.projection;
  return f;
}

WeightArchive LoadWeightArchive(const std::filesystem::path& path) {
  try {
    return WeightArchiveFromFile(ReadTensorFile(path));
  } catch (const ValidationError& e) {
    const std::string what = e.what();
    if (what.rfind(path.string(), 0) == 0) throw;
    throw ValidationError(path.string() + ": " + what);
  }
}

void SaveWeightArchive(const std::filesystem::path& path,
                       const WeightArchive& archive) {
  WriteTensorFile(path, WeightArchiveToFile(archive));
}

Tensor PreprocessImage(const Raster& rgb, std::size_t image_size) {
  if (rgb.channels != 3) throw ValidationError("expected an RGB pixmap");
  if (image_size == 0) throw ValidationError("image_size must be > 0");
  const std::size_t S = image_size;
  std::vector<float> out(3 * S * S);
  const double sy_scale = static_cast<double>(rgb.height) / static_cast<double>(S);
  const double sx_scale = static_cast<double>(rgb.width) / static_cast<double>(S);
  auto source_coord = [](std::size_t dst, double scale, std::size_t extent,
                         std::size_t& lo, std::size_t& hi, double& frac) {
    double s = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
    lo = static_cast<std::size_t>(std::floor(s));
    hi = std::min(lo + 1, extent - 1);
    frac = s - static_cast<double>(lo);
  };
  for (std::size_t y = 0; y < S; ++y) {
    std::size_t y0, y1;
    double fy;
    source_coord(y, sy_scale, rgb.height, y0, y1, fy);
    for (std::size_t x = 0; x < S; ++x) {
      std::size_t x0, x1;
      double fx;
      source_coord(x, sx_scale, rgb.width, x0, x1, fx);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double top = (1 - fx) * rgb.at(x0, y0, ch) + fx * rgb.at(x1, y0, ch);
        const double bottom = (1 - fx) * rgb.at(x0, y1, ch) + fx * rgb.at(x1, y1, ch);
        const double v = ((1 - fy) * top + fy * bottom) / 255.0;
        out[(ch * S + y) * S + x] =
            static_cast<float>((v - kImageMean[ch]) / kImageStd[ch]);
      }
    }
  }
  return Tensor({3, S, S}, std::move(out));
}

Tensor LoadImage(const std::filesystem::path& path, std::size_t image_size) {
  const Raster r = ReadPnm(path);
  if (r.channels != 3) {
    throw ValidationError(path.string() + ": expected a P6 pixmap");
  }
  return PreprocessImage(r, image_size);
}

GridMap PoolMask(const Raster& gray, std::size_t rows, std::size_t cols) {
  if (gray.channels != 1) throw ValidationError("mask must be a graymap");
  if (rows == 0 || cols == 0) throw ValidationError("empty mask grid");
  std::vector<double> cells(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t y0 = r * gray.height / rows;
    const std::size_t y1 = ((r + 1) * gray.height + rows - 1) / rows;
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t x0 = c * gray.width / cols;
      const std::size_t x1 = ((c + 1) * gray.width + cols - 1) / cols;
      bool any = false;
      for (std::size_t y = y0; y < y1 && !any; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
          if (gray.at(x, y) != 0) {
            any = true;
            break;
          }
        }
      }
      cells[r * cols + c] = any ? 1.0 : 0.0;
    }
  }
  return GridMap(rows, cols, std::move(cells));
}

GridMap LoadMask(const std::filesystem::path& path, std::size_t rows,
                 std::size_t cols) {
  const Raster r = ReadPnm(path);
  if (r.channels != 1) {
    throw ValidationError(path.string() + ": expected a P5 graymap");
  }
  return PoolMask(r, rows, cols);
}

Manifest LoadProbeManifest(const std::filesystem::path& path) {
  const std::string text = ReadFileBytes(path);
  const std::string src = path.string();
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(src + ": invalid JSON: " + e.what());
  }
  const std::filesystem::path base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  Manifest m;
  try {
    const auto grid = doc.at("grid").get<std::vector<std::size_t>>();
    if (grid.size() != 2 || grid[0] == 0 || grid[1] == 0) {
      throw ValidationError(src + ": \"grid\" must be [rows, cols] with positive entries");
    }
    m.grid_rows = grid[0];
    m.grid_cols = grid[1];
    const json& samples = doc.at("samples");
    if (!samples.is_array()) throw ValidationError(src + ": \"samples\" must be an array");
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const json& e = samples[i];
      const std::string where = src + ": sample " + std::to_string(i);
      auto require_file = [&](const std::filesystem::path& p, const char* what) {
        if (!std::filesystem::exists(p)) {
          throw ValidationError(where + ": " + what + " file not found: " + p.string());
        }
      };
      try {
        ProbeSample s;
        s.image = resolve(e.at("image").get<std::string>());
        require_file(s.image, "image");
        if (e.contains("concept")) s.concept_name = e["concept"].get<std::string>();
        if (e.contains("mask") && !e["mask"].is_null()) {
          s.mask = resolve(e["mask"].get<std::string>());
          require_file(*s.mask, "mask");
        }
        if (e.contains("class") && !e["class"].is_null()) {
          s.label = e["class"].get<std::string>();
        }
        if (e.contains("present")) s.present = e["present"].get<bool>();
        if (e.contains("maps")) {
          const json& maps = e["maps"];
          if (maps.is_string()) {
            if (s.concept_name.empty()) {
              throw ValidationError(where + ": \"maps\" path given without \"concept\"");
            }
            s.maps[s.concept_name] = resolve(maps.get<std::string>());
          } else if (maps.is_object()) {
            for (const auto& [concept_name, p] : maps.items()) {
              s.maps[concept_name] = resolve(p.get<std::string>());
            }
          } else {
            throw ValidationError(where + ": \"maps\" must be a path or an object");
          }
          for (const auto& [concept_name, p] : s.maps) require_file(p, "maps");
        }
        m.samples.push_back(std::move(s));
      } catch (const json::exception& ex) {
        throw ValidationError(where + ": schema violation: " + ex.what());
      }
    }
  } catch (const json::exception& ex) {
    throw ValidationError(src + ": schema violation: " + ex.what());
  }
  return m;
}

ConceptEmbeddingSet::ConceptEmbeddingSet(std::vector<ConceptEmbedding> concepts) {
  std::set<std::string> seen;
  for (auto& c : concepts) {
    if (!seen.insert(c.name).second) {
      throw ValidationError("duplicate concept name '" + c.name + "'");
    }
    if (!concepts.empty() && c.vector.size() != concepts.front().vector.size()) {
      throw ValidationError("concept '" + c.name + "' has a different dimension");
    }
    double norm = 0.0;
    for (float v : c.vector) {
      if (!std::isfinite(v)) {
        throw ValidationError("concept '" + c.name + "' has a non-finite entry");
      }
      norm += static_cast<double>(v) * v;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ValidationError("concept '" + c.name + "' is a zero vector");
    for (float& v : c.vector) v = static_cast<float>(v / norm);
  }
  concepts_ = std::move(concepts);
}

const ConceptEmbedding& ConceptEmbeddingSet::Find(const std::string& name) const {
  for (const auto& c : concepts_) {
    if (c.name == name) return c;
  }
  throw ValidationError("unknown concept '" + name + "'");
}

bool ConceptEmbeddingSet::Contains(const std::string& name) const {
  return std::any_of(concepts_.begin(), concepts_.end(),
                     [&](const ConceptEmbedding& c) { return c.name == name; });
}

ConceptEmbeddingSet ParseConceptEmbeddings(const std::string& text,
                                           std::size_t expected_dim,
                                           const std::string& source) {
  // JSON objects silently keep the last duplicate key, so duplicates are
  // caught while parsing.
  std::string top_key;
  std::set<std::string> names;
  std::string duplicate;
  json::parser_callback_t callback = [&](int depth, json::parse_event_t event,
                                         json& parsed) {
    if (event == json::parse_event_t::key) {
      if (depth == 1) {
        top_key = parsed.get<std::string>();
      } else if (depth == 2 && top_key == "concepts") {
        const std::string name = parsed.get<std::string>();
        if (!names.insert(name).second && duplicate.empty()) duplicate = name;
      }
    }
    return true;
  };
  json doc;
  try {
    doc = json::parse(text, callback);
  } catch (const json::exception& e) {
    throw ValidationError(source + ": invalid JSON: " + e.what());
  }
  if (!duplicate.empty()) {
    throw ValidationError(source + ": duplicate concept name '" + duplicate + "'");
  }
  std::vector<ConceptEmbedding> concepts;
  std::size_t dim = 0;
  try {
    dim = doc.at("dim").get<std::size_t>();
    for (const auto& [name, values] : doc.at("concepts").items()) {
      ConceptEmbedding c{name, values.get<std::vector<float>>()};
      if (c.vector.size() != dim) {
        throw ValidationError(source + ": concept '" + name + "' has " +
                              std::to_string(c.vector.size()) +
                              " entries, \"dim\" is " + std::to_string(dim));
      }
      concepts.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw ValidationError(source + ": schema violation: " + e.what());
  }
  if (expected_dim != 0 && dim != expected_dim) {
    throw ValidationError(source + ": embedding dimension " + std::to_string(dim) +
                          " does not match model d_embed " +
                          std::to_string(expected_dim));
  }
  try {
    return ConceptEmbeddingSet(std::move(concepts));
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
}

ConceptEmbeddingSet LoadConceptEmbeddings(const std::filesystem::path& path,
                                          std::size_t expected_dim) {
  return ParseConceptEmbeddings(ReadFileBytes(path), expected_dim, path.string());
}

void SaveConceptEmbeddings(const std::filesystem::path& path,
                           const ConceptEmbeddingSet& set) {
  json concepts = json::object();
  for (const auto& c : set.concepts()) concepts[c.name] = c.vector;
  const json doc = {{"dim", set.dim()}, {"concepts", concepts}};
  WriteFileBytes(path, doc.dump(1) + "\n");
}

}  // namespace chili

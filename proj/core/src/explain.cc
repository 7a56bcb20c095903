#include "chili/explain.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "chili/error.h"
#include "chili/rng.h"
#include "chili/tensor_file.h"
#include "json.hpp"

namespace chili {

using nlohmann::json;

std::vector<double> ShapLinear(const CbmModel& model, std::span<const double> row,
                               std::span<const double> background,
                               std::size_t class_index) {
  if (class_index >= model.classes.size()) throw ValidationError("shap: class index out of range");
  const std::vector<double> z = model.Features(row);
  const std::vector<double> zb = model.Features(background);
  std::vector<double> phi(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    phi[j] = model.weight(class_index, j) * (z[j] - zb[j]);
  }
  return phi;
}

ShapEstimate ShapPermutation(const ScoreFunction& f, std::span<const double> row,
                             std::span<const double> background,
                             std::size_t permutations, std::uint64_t seed) {
  if (permutations < 1) throw ValidationError("shap: at least one permutation is required");
  if (row.size() != background.size()) throw ValidationError("shap: row and background widths differ");
  const std::size_t d = row.size();
  Rng rng(seed);
  std::vector<double> sum(d, 0.0), sum_sq(d, 0.0);
  std::vector<std::size_t> order(d);
  std::vector<double> x(d);
  for (std::size_t p = 0; p < permutations; ++p) {
    std::iota(order.begin(), order.end(), 0);
    rng.Shuffle(order.begin(), order.end());
    std::copy(background.begin(), background.end(), x.begin());
    double prev = f(x);
    for (std::size_t j : order) {
      x[j] = row[j];
      const double next = f(x);
      const double delta = next - prev;
      sum[j] += delta;
      sum_sq[j] += delta * delta;
      prev = next;
    }
  }
  const double n = static_cast<double>(permutations);
  ShapEstimate est;
  est.values.resize(d);
  est.stderr_.resize(d);
  for (std::size_t j = 0; j < d; ++j) {
    const double mean = sum[j] / n;
    est.values[j] = mean;
    if (permutations > 1) {
      const double var = std::max(0.0, (sum_sq[j] - n * mean * mean) / (n - 1.0));
      est.stderr_[j] = std::sqrt(var / n);
    }
  }
  return est;
}

namespace {

std::vector<RankedConcept> Pair(std::span<const double> values,
                                const std::vector<std::string>& concepts) {
  if (values.size() != concepts.size()) throw ValidationError("rank: value and concept counts differ");
  std::vector<RankedConcept> out;
  for (std::size_t j = 0; j < values.size(); ++j) out.push_back({concepts[j], values[j]});
  return out;
}

}  // namespace

std::vector<RankedConcept> TopK(std::span<const double> values,
                                const std::vector<std::string>& concepts, std::size_t k) {
  if (k > concepts.size()) {
    throw ValidationError("top-k: k=" + std::to_string(k) + " exceeds " +
                          std::to_string(concepts.size()) + " concepts");
  }
  std::vector<RankedConcept> out = Pair(values, concepts);
  std::stable_sort(out.begin(), out.end(), [](const RankedConcept& a, const RankedConcept& b) {
    const double x = std::abs(a.value), y = std::abs(b.value);
    if (x != y) return x > y;
    return a.concept_name < b.concept_name;
  });
  out.resize(k);
  return out;
}

std::vector<RankedConcept> RankSigned(std::span<const double> values,
                                      const std::vector<std::string>& concepts) {
  std::vector<RankedConcept> out = Pair(values, concepts);
  std::stable_sort(out.begin(), out.end(), [](const RankedConcept& a, const RankedConcept& b) {
    if (a.value != b.value) return a.value > b.value;
    return a.concept_name < b.concept_name;
  });
  return out;
}

Explanation Explain(const CbmModel& model, std::span<const double> row,
                    std::vector<GridMap> object_maps, std::size_t k) {
  if (model.background.size() != model.concepts.size()) {
    throw ValidationError("explain: model has no background vector");
  }
  if (object_maps.size() != model.concepts.size()) {
    throw ValidationError("explain: one object map per concept is required");
  }
  for (const GridMap& m : object_maps) {
    if (!m.SameShape(object_maps.front()) || m.size() == 0) {
      throw ValidationError("explain: object maps must share one nonempty grid");
    }
  }
  Explanation e;
  e.class_index = Predict(model, row).class_index;
  e.predicted_class = model.classes[e.class_index];
  e.concepts = model.concepts;
  e.background = model.background;
  e.shap = ShapLinear(model, row, model.background, e.class_index);
  e.ranked = TopK(e.shap, e.concepts, k);
  e.object_maps = std::move(object_maps);
  return e;
}

Raster RenderHeatmap(const GridMap& map, std::size_t width, std::size_t height) {
  if (map.size() == 0 || width == 0 || height == 0) {
    throw ValidationError("heatmap: empty map or image");
  }
  const auto values = map.values();
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double min = *lo, max = *hi;
  Raster r;
  r.width = width;
  r.height = height;
  r.channels = 1;
  r.pixels.resize(width * height);
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t row = y * map.rows() / height;
    for (std::size_t x = 0; x < width; ++x) {
      const double v = map.at(row, x * map.cols() / width);
      r.pixels[y * width + x] = max == min
                                    ? 128
                                    : static_cast<std::uint8_t>(
                                          std::lround(255.0 * (v - min) / (max - min)));
    }
  }
  return r;
}

namespace {

std::string SafeName(const std::string& name) {
  std::string out;
  for (unsigned char ch : name) {
    out.push_back(std::isalnum(ch) || ch == '-' || ch == '_' ? static_cast<char>(ch) : '_');
  }
  return out.empty() ? "concept" : out;
}

std::size_t ConceptIndex(const Explanation& e, const std::string& name) {
  auto it = std::find(e.concepts.begin(), e.concepts.end(), name);
  if (it == e.concepts.end()) throw ValidationError("explain: unknown concept '" + name + "'");
  return static_cast<std::size_t>(it - e.concepts.begin());
}

json RankingJson(const std::vector<RankedConcept>& ranking) {
  json out = json::array();
  for (const auto& r : ranking) out.push_back({{"concept", r.concept_name}, {"shap", r.value}});
  return out;
}

}  // namespace

RenderedExplanation RenderExplanation(const Explanation& expl, const Raster& image,
                                      const std::filesystem::path& out_dir) {
  if (image.width == 0 || image.height == 0 || (image.channels != 1 && image.channels != 3)) {
    throw ValidationError("explain: image must be a nonempty graymap or pixmap");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  RenderedExplanation out;
  std::vector<Raster> heatmaps;
  json entries = json::array();
  for (std::size_t rank = 0; rank < expl.ranked.size(); ++rank) {
    const RankedConcept& rc = expl.ranked[rank];
    const std::size_t j = ConceptIndex(expl, rc.concept_name);
    char prefix[32];
    std::snprintf(prefix, sizeof(prefix), "heatmap_%02zu_", rank);
    const std::string file = prefix + SafeName(rc.concept_name) + ".pgm";
    heatmaps.push_back(RenderHeatmap(expl.object_maps.at(j), image.width, image.height));
    WritePnm(out_dir / file, heatmaps.back());
    out.heatmaps.push_back(out_dir / file);
    entries.push_back({{"concept", rc.concept_name},
                       {"shap", rc.value},
                       {"abs_shap", std::abs(rc.value)},
                       {"rank", rank},
                       {"file", file}});
  }

  Raster sheet;
  sheet.width = image.width * (1 + heatmaps.size());
  sheet.height = image.height;
  sheet.channels = 3;
  sheet.pixels.resize(sheet.width * sheet.height * 3);
  auto put = [&](std::size_t panel, const Raster& src) {
    for (std::size_t y = 0; y < src.height; ++y) {
      for (std::size_t x = 0; x < src.width; ++x) {
        std::uint8_t* p = sheet.pixels.data() + (y * sheet.width + panel * image.width + x) * 3;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          p[ch] = src.at(x, y, src.channels == 3 ? ch : 0);
        }
      }
    }
  };
  put(0, image);
  for (std::size_t i = 0; i < heatmaps.size(); ++i) put(i + 1, heatmaps[i]);
  out.contact_sheet = out_dir / "contact_sheet.ppm";
  WritePnm(out.contact_sheet, sheet);

  json doc = {{"predicted_class", expl.predicted_class},
              {"entries", entries},
              {"ranking_abs", RankingJson(expl.ranked)},
              {"ranking_signed", RankingJson(RankSigned(expl.shap, expl.concepts))},
              {"background", expl.background},
              {"contact_sheet", "contact_sheet.ppm"}};
  out.sidecar = out_dir / "explanation.json";
  WriteFileBytes(out.sidecar, doc.dump(2) + "\n");
  return out;
}

std::vector<RankedConcept> LoadExplanationRanking(const std::filesystem::path& path) {
  const std::string text = ReadFileBytes(path);
  std::vector<RankedConcept> out;
  try {
    const json doc = json::parse(text);
    for (const auto& e : doc.at("entries")) {
      out.push_back({e.at("concept").get<std::string>(), e.at("shap").get<double>()});
    }
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": malformed explanation: " + e.what());
  }
  return out;
}

}  // namespace chili

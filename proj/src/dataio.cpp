#include "tsseg/dataio.hpp"

#include "tsseg/archive.hpp"
#include "tsseg/config.hpp"
#include "tsseg/seeding.hpp"

#include <zlib.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

namespace tsseg {

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("synthetic." + field + ": " + why);
  };
  if (count < 1) fail("count", "must be >= 1");
  if (height < 8 || width < 8) fail("height", "spatial size must be at least 8x8");
  if (modalities < 1) fail("modalities", "must be >= 1");
  if (!(labeled_fraction > 0 && labeled_fraction <= 1)) fail("labeled_fraction", "must lie in (0, 1]");
  if (!(val_fraction >= 0 && val_fraction < 1)) fail("val_fraction", "must lie in [0, 1)");
  if (labeled_fraction + val_fraction > 1) fail("val_fraction", "labeled + val fractions exceed 1");
  if (!(noise_sigma >= 0)) fail("noise_sigma", "must be >= 0");
  if (!(edema_radius_min > 0 && edema_radius_min <= edema_radius_max)) fail("edema_radius_min", "need 0 < min <= max");
  if (2 * edema_radius_max + 2 > std::min(height, width))
    fail("edema_radius_max", "disk of radius " + std::to_string(edema_radius_max) + " does not fit in " +
                                 std::to_string(height) + "x" + std::to_string(width));
  if (!(core_ratio_min > 0 && core_ratio_min <= core_ratio_max && core_ratio_max < 1))
    fail("core_ratio_min", "need 0 < min <= max < 1 so the core stays nested");
  if (!(enhancing_ratio_min > 0 && enhancing_ratio_min <= enhancing_ratio_max && enhancing_ratio_max < 1))
    fail("enhancing_ratio_min", "need 0 < min <= max < 1 so the enhancing disk stays nested");
}

namespace {

bool inside(const DiskLayout& d, int y, int x) {
  const double dy = y + 0.5 - d.cy, dx = x + 0.5 - d.cx;
  return dy * dy + dx * dx <= d.radius * d.radius;
}

// Mean intensity per modality (rows) for tissue, NCR/NET, edema, enhancing.
constexpr double kContrast[4][4] = {
    {0.55, 0.35, 0.45, 0.50},  // T1
    {0.55, 0.35, 0.50, 0.85},  // T1ce
    {0.45, 0.75, 0.85, 0.65},  // T2
    {0.45, 0.65, 0.90, 0.70},  // FLAIR
};

std::vector<std::string> synthetic_roles(int n) {
  std::vector<std::string> roles;
  for (int m = 0; m < n; ++m) roles.push_back(m < 4 ? default_modalities()[m] : "M" + std::to_string(m));
  return roles;
}

DiskLayout nested_disk(const DiskLayout& outer, double ratio, std::mt19937_64& rng) {
  DiskLayout d;
  d.radius = outer.radius * ratio;
  const double slack = outer.radius - d.radius;
  std::uniform_real_distribution<double> u(0, 1);
  const double r = slack * std::sqrt(u(rng)) * 0.9, a = 2 * std::numbers::pi * u(rng);
  d.cy = outer.cy + r * std::sin(a);
  d.cx = outer.cx + r * std::cos(a);
  return d;
}

struct GeneratedSample {
  Volume volume;
  LabelMask mask;
  TumorLayout layout;
};

GeneratedSample generate_one(const SyntheticSpec& spec, int index) {
  std::mt19937_64 rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(index)}));
  std::uniform_real_distribution<double> u(0, 1);
  const int H = spec.height, W = spec.width;

  // Brain ellipse, then the tumour inside it.
  const double by = H / 2.0 + (u(rng) - 0.5) * 0.06 * H, bx = W / 2.0 + (u(rng) - 0.5) * 0.06 * W;
  const double ay = H * (0.40 + 0.05 * u(rng)), ax = W * (0.34 + 0.05 * u(rng));
  TumorLayout L;
  L.edema.radius = spec.edema_radius_min + (spec.edema_radius_max - spec.edema_radius_min) * u(rng);
  const double m = L.edema.radius + 1;
  L.edema.cy = m + (H - 2 * m) * u(rng);
  L.edema.cx = m + (W - 2 * m) * u(rng);
  L.core = nested_disk(L.edema, spec.core_ratio_min + (spec.core_ratio_max - spec.core_ratio_min) * u(rng), rng);
  L.enhancing =
      nested_disk(L.core, spec.enhancing_ratio_min + (spec.enhancing_ratio_max - spec.enhancing_ratio_min) * u(rng), rng);
  LabelMask mask = rasterize_layout(L, H, W);

  std::vector<double> gain(spec.modalities);
  for (auto& g : gain) g = 0.85 + 0.3 * u(rng);
  // Smooth multiplicative field; amplitude follows the noise level.
  const double fy = 1 + 2 * u(rng), fx = 1 + 2 * u(rng), ph = 2 * std::numbers::pi * u(rng);
  std::normal_distribution<double> noise(0.0, 1.0);

  Tensor<float> image(spec.modalities, H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double ey = (y + 0.5 - by) / ay, ex = (x + 0.5 - bx) / ax;
      const int cls = mask.classes(y, x);
      const bool brain = ey * ey + ex * ex <= 1.0 || cls != 0;
      const double field =
          1 + spec.noise_sigma * std::sin(std::numbers::pi * (fy * y / H + fx * x / W) + ph);
      for (int c = 0; c < spec.modalities; ++c) {
        const double n = noise(rng);  // drawn for every pixel so streams do not depend on masks
        if (!brain) continue;
        const double base = kContrast[c % 4][cls] * gain[c];
        image(c, y, x) = float(std::max(1e-3, base * field + spec.noise_sigma * n));
      }
    }
  const std::string id = "syn-" + std::string(4 - std::min<size_t>(4, std::to_string(index).size()), '0') +
                         std::to_string(index);
  return {make_volume(id, std::move(image), synthetic_roles(spec.modalities), std::vector<float>{1.f, 1.f}),
          std::move(mask), L};
}

struct SplitSizes {
  int labeled, val, unlabeled;
};

SplitSizes split_sizes(const SyntheticSpec& spec) {
  const int nl = std::max(1, static_cast<int>(std::lround(spec.count * spec.labeled_fraction)));
  const int nv = std::min(spec.count - nl, static_cast<int>(std::lround(spec.count * spec.val_fraction)));
  return {nl, nv, spec.count - nl - nv};
}

}  // namespace

LabelMask rasterize_layout(const TumorLayout& layout, int height, int width) {
  IndexGrid g = IndexGrid::Zero(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (inside(layout.enhancing, y, x)) g(y, x) = 3;
      else if (inside(layout.core, y, x)) g(y, x) = 1;
      else if (inside(layout.edema, y, x)) g(y, x) = 2;
    }
  return LabelMask{std::move(g), 4};
}

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const SplitSizes n = split_sizes(spec);
  SyntheticCorpus corpus;
  for (int i = 0; i < spec.count; ++i) {
    GeneratedSample s = generate_one(spec, i);
    corpus.layouts[s.volume.id] = s.layout;
    if (i < n.labeled) {
      corpus.labeled.push_back({std::move(s.volume), std::move(s.mask)});
    } else if (i < n.labeled + n.val) {
      corpus.val.push_back({std::move(s.volume), std::move(s.mask)});
    } else {
      corpus.unlabeled.push_back(std::move(s.volume));
      corpus.unlabeled_truth.push_back(std::move(s.mask));
    }
  }
  return corpus;
}

namespace {

nlohmann::json layout_json(const TumorLayout& L) {
  auto disk = [](const DiskLayout& d) { return nlohmann::json{{"cy", d.cy}, {"cx", d.cx}, {"radius", d.radius}}; };
  return {{"edema", disk(L.edema)}, {"core", disk(L.core)}, {"enhancing", disk(L.enhancing)}};
}

TumorLayout layout_from(const nlohmann::json& j) {
  auto disk = [](const nlohmann::json& d) { return DiskLayout{d.at("cy"), d.at("cx"), d.at("radius")}; };
  return {disk(j.at("edema")), disk(j.at("core")), disk(j.at("enhancing"))};
}

std::string write_sample(const std::filesystem::path& dir, const Volume& v, const LabelMask* mask,
                         const std::string& split, const TumorLayout* layout) {
  Archive a;
  a.meta = {{"kind", "tsseg-sample"}, {"id", v.id}, {"split", split}, {"roles", v.channel_roles},
            {"height", v.height()}, {"width", v.width()}};
  if (v.spacing) a.meta["spacing"] = *v.spacing;
  if (layout) a.meta["layout"] = layout_json(*layout);
  a.put("image", v.image.data);
  if (mask) a.put("mask", mask->classes);
  const auto bytes = a.serialize();
  write_file_atomic(dir / (v.id + ".tsa"), bytes);
  return sha256_hex(bytes);
}

}  // namespace

void save_corpus(const SyntheticCorpus& corpus, const SyntheticSpec& spec, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json samples = nlohmann::json::array();
  auto layout_of = [&](const std::string& id) -> const TumorLayout* {
    auto it = corpus.layouts.find(id);
    return it == corpus.layouts.end() ? nullptr : &it->second;
  };
  auto record = [&](const Volume& v, const LabelMask* m, const std::string& split) {
    samples.push_back({{"id", v.id}, {"split", split}, {"file", v.id + ".tsa"},
                       {"sha256", write_sample(dir, v, m, split, layout_of(v.id))}});
  };
  for (const auto& s : corpus.labeled) record(s.volume, &s.mask, "labeled");
  for (const auto& s : corpus.val) record(s.volume, &s.mask, "val");
  for (size_t i = 0; i < corpus.unlabeled.size(); ++i)
    record(corpus.unlabeled[i], i < corpus.unlabeled_truth.size() ? &corpus.unlabeled_truth[i] : nullptr, "unlabeled");
  write_text_atomic(dir / "manifest.json", nlohmann::json{{"spec", spec}, {"samples", samples}}.dump(2));
}

bool corpus_matches(const std::filesystem::path& dir, const SyntheticSpec& spec) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) return false;
  try {
    return nlohmann::json::parse(read_text(path)).at("spec").get<SyntheticSpec>() == spec;
  } catch (const std::exception&) {
    return false;
  }
}

SyntheticCorpus load_corpus(const std::filesystem::path& dir, SyntheticSpec* spec_out) {
  const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  if (spec_out) *spec_out = manifest.at("spec").get<SyntheticSpec>();
  SyntheticCorpus corpus;
  for (const auto& item : manifest.at("samples")) {
    const auto file = dir / item.at("file").get<std::string>();
    if (file_digest(file) != item.at("sha256").get<std::string>())
      throw std::runtime_error("corpus: digest mismatch for '" + file.string() + "'");
    const Archive a = Archive::load(file);
    const int h = a.meta.at("height"), w = a.meta.at("width");
    std::optional<std::vector<float>> spacing;
    if (a.meta.contains("spacing")) spacing = a.meta.at("spacing").get<std::vector<float>>();
    Volume v = make_volume(a.meta.at("id"), Tensor<float>(a.get<float>("image"), h, w),
                           a.meta.at("roles").get<std::vector<std::string>>(), spacing);
    if (a.meta.contains("layout")) corpus.layouts[v.id] = layout_from(a.meta.at("layout"));
    const std::string split = item.at("split");
    std::optional<LabelMask> mask;
    if (a.contains("mask")) mask = make_label_mask(a.get_index("mask"), 4);
    if (split == "unlabeled") {
      corpus.unlabeled.push_back(std::move(v));
      if (mask) corpus.unlabeled_truth.push_back(std::move(*mask));
    } else {
      if (!mask) throw std::runtime_error("corpus: labeled sample '" + v.id + "' has no mask");
      (split == "val" ? corpus.val : corpus.labeled).push_back({std::move(v), std::move(*mask)});
    }
  }
  return corpus;
}

// ---------------------------------------------------------------- real data

std::int32_t remap_brats_label(std::int32_t raw) {
  switch (raw) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default: throw std::out_of_range("unexpected BraTS label value " + std::to_string(raw));
  }
}

std::int32_t unmap_brats_label(std::int32_t contiguous) {
  switch (contiguous) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 3: return 4;
    default: throw std::out_of_range("class id " + std::to_string(contiguous) + " has no BraTS label");
  }
}

void normalize_nonzero(Eigen::Ref<Eigen::Matrix<float, 1, Eigen::Dynamic>> channel, double var_floor) {
  double sum = 0, sq = 0;
  long long n = 0;
  for (Eigen::Index i = 0; i < channel.size(); ++i)
    if (channel(i) != 0) {
      sum += channel(i);
      ++n;
    }
  if (n == 0) return;
  const double mean = sum / double(n);
  for (Eigen::Index i = 0; i < channel.size(); ++i)
    if (channel(i) != 0) sq += (channel(i) - mean) * (channel(i) - mean);
  const double var = sq / double(n);
  for (Eigen::Index i = 0; i < channel.size(); ++i) {
    if (channel(i) == 0) continue;
    channel(i) = var < var_floor ? 0.0f : float((channel(i) - mean) / std::sqrt(var));
  }
}

namespace {

std::string expand(const std::string& pattern, const std::string& case_name) {
  std::string out = pattern;
  for (size_t pos; (pos = out.find("{case}")) != std::string::npos;) out.replace(pos, 6, case_name);
  return out;
}

template <typename T>
void convert(const std::vector<unsigned char>& raw, size_t n, std::vector<float>& out) {
  for (size_t i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<float>(v);
  }
}

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes;
  unsigned char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + n);
  const bool failed = n < 0;
  gzclose(f);
  if (failed) throw std::runtime_error("read error in '" + path.string() + "'");
  return bytes;
}

}  // namespace

NiftiVolume read_nifti(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < 352) throw std::runtime_error("'" + path.string() + "' is too small for a NIfTI-1 file");
  auto get = [&](size_t off, auto& v) { std::memcpy(&v, bytes.data() + off, sizeof(v)); };
  std::int32_t sizeof_hdr = 0;
  get(0, sizeof_hdr);
  if (sizeof_hdr != 348) throw std::runtime_error("'" + path.string() + "': not a little-endian NIfTI-1 header");
  std::int16_t dim[8], datatype = 0;
  float pixdim[8], vox_offset = 0, slope = 0, inter = 0;
  get(40, dim);
  get(70, datatype);
  get(76, pixdim);
  get(108, vox_offset);
  get(112, slope);
  get(116, inter);
  if (dim[0] < 2 || dim[0] > 4 || (dim[0] == 4 && dim[4] > 1))
    throw std::runtime_error("'" + path.string() + "': only 2D/3D scalar volumes are supported");
  NiftiVolume v;
  for (int i = 0; i < 3; ++i) {
    v.dims[i] = i < dim[0] ? std::max<int>(1, dim[i + 1]) : 1;
    v.spacing[i] = i < dim[0] && pixdim[i + 1] > 0 ? pixdim[i + 1] : 1.0f;
  }
  const size_t n = static_cast<size_t>(v.dims[0]) * v.dims[1] * v.dims[2];
  size_t elem = 0;
  switch (datatype) {
    case 2: elem = 1; break;    // uint8
    case 4: elem = 2; break;    // int16
    case 8: elem = 4; break;    // int32
    case 16: elem = 4; break;   // float32
    case 64: elem = 8; break;   // float64
    case 512: elem = 2; break;  // uint16
    default: throw std::runtime_error("'" + path.string() + "': unsupported datatype " + std::to_string(datatype));
  }
  const auto offset = static_cast<size_t>(vox_offset);
  if (offset + n * elem > bytes.size()) throw std::runtime_error("'" + path.string() + "': truncated voxel data");
  std::vector<unsigned char> raw(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(offset + n * elem));
  v.voxels.resize(n);
  switch (datatype) {
    case 2: convert<std::uint8_t>(raw, n, v.voxels); break;
    case 4: convert<std::int16_t>(raw, n, v.voxels); break;
    case 8: convert<std::int32_t>(raw, n, v.voxels); break;
    case 16: convert<float>(raw, n, v.voxels); break;
    case 64: convert<double>(raw, n, v.voxels); break;
    case 512: convert<std::uint16_t>(raw, n, v.voxels); break;
  }
  if (slope != 0 && std::isfinite(slope) && (slope != 1 || inter != 0))
    for (auto& x : v.voxels) x = x * slope + inter;
  return v;
}

void write_nifti(const std::filesystem::path& path, const NiftiVolume& v) {
  unsigned char hdr[352] = {};
  auto put = [&](size_t off, const auto& val) { std::memcpy(hdr + off, &val, sizeof(val)); };
  put(0, std::int32_t{348});
  std::int16_t dim[8] = {3, static_cast<std::int16_t>(v.dims[0]), static_cast<std::int16_t>(v.dims[1]),
                         static_cast<std::int16_t>(v.dims[2]), 1, 1, 1, 1};
  put(40, dim);
  put(70, std::int16_t{16});
  put(72, std::int16_t{32});
  float pixdim[8] = {1, v.spacing[0], v.spacing[1], v.spacing[2], 0, 0, 0, 0};
  put(76, pixdim);
  put(108, 352.0f);
  put(112, 1.0f);
  std::memcpy(hdr + 344, "n+1\0", 4);
  const bool gz = path.extension() == ".gz";
  gzFile f = gzopen(path.string().c_str(), gz ? "wb" : "wbT");
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  const bool ok = gzwrite(f, hdr, sizeof(hdr)) == int(sizeof(hdr)) &&
                  gzwrite(f, v.voxels.data(), static_cast<unsigned>(v.voxels.size() * sizeof(float))) ==
                      int(v.voxels.size() * sizeof(float));
  gzclose(f);
  if (!ok) throw std::runtime_error("short write to '" + path.string() + "'");
}

VolumeStack load_volume_stack(const std::filesystem::path& case_dir, const LayoutDescriptor& layout) {
  if (layout.slice_step < 1) throw std::invalid_argument("layout.slice_step: must be >= 1");
  const std::string case_name = case_dir.filename().string();
  std::vector<std::string> missing;
  for (const auto& role : layout.roles) {
    auto it = layout.modality_patterns.find(role);
    if (it == layout.modality_patterns.end() || !std::filesystem::exists(case_dir / expand(it->second, case_name)))
      missing.push_back(role);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw std::runtime_error("case '" + case_name + "': missing modality " + list);
  }
  std::vector<NiftiVolume> mods;
  for (const auto& role : layout.roles) mods.push_back(read_nifti(case_dir / expand(layout.modality_patterns.at(role), case_name)));
  for (const auto& m : mods)
    if (m.dims != mods.front().dims) throw ShapeError("case '" + case_name + "': modality shapes differ");
  std::optional<NiftiVolume> seg;
  if (layout.label_pattern) {
    const auto p = case_dir / expand(*layout.label_pattern, case_name);
    if (std::filesystem::exists(p)) {
      seg = read_nifti(p);
      if (seg->dims != mods.front().dims) throw ShapeError("case '" + case_name + "': label shape differs from images");
    }
  }
  const int W = mods.front().dims[0], H = mods.front().dims[1], D = mods.front().dims[2];
  const size_t plane = static_cast<size_t>(H) * W;
  // Normalise each modality over its nonzero voxels in 3D.
  for (auto& m : mods) {
    Eigen::Map<Eigen::Matrix<float, 1, Eigen::Dynamic>> all(m.voxels.data(), static_cast<Eigen::Index>(m.voxels.size()));
    normalize_nonzero(all);
  }
  VolumeStack stack;
  if (seg) stack.labels.emplace();
  for (int z = 0; z < D; z += layout.slice_step) {
    std::optional<LabelMask> mask;
    if (seg) {
      IndexGrid g(H, W);
      for (size_t i = 0; i < plane; ++i)
        g.data()[i] = remap_brats_label(static_cast<std::int32_t>(std::lround(seg->voxels[z * plane + i])));
      if (layout.drop_empty_slices && g.maxCoeff() == 0) continue;
      mask = make_label_mask(std::move(g), 4);
    }
    Tensor<float> image(static_cast<int>(mods.size()), H, W);
    for (size_t c = 0; c < mods.size(); ++c)
      for (size_t i = 0; i < plane; ++i) image.data(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i)) = mods[c].voxels[z * plane + i];
    const std::string id = case_name + "/z" + std::string(3 - std::min<size_t>(3, std::to_string(z).size()), '0') + std::to_string(z);
    stack.slices.push_back(make_volume(id, std::move(image), layout.roles,
                                       std::vector<float>{mods.front().spacing[1], mods.front().spacing[0]}));
    if (mask) stack.labels->push_back(std::move(*mask));
  }
  return stack;
}

}  // namespace tsseg

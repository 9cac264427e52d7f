#include "dign/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dign/errors.hpp"

namespace dign {

void Dataset::validate() const {
  if (images.rank() != 4) {
    throw ValidationError("dataset '" + id + "': images must be [B,C,H,W], got " +
                          images.shape_str());
  }
  if (images.extent(0) != size()) {
    throw ValidationError("dataset '" + id + "': " + std::to_string(images.extent(0)) +
                          " images for " + std::to_string(size()) + " labels");
  }
  if (num_classes < 2) throw ValidationError("dataset '" + id + "': num_classes must be >= 2");
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ValidationError("dataset '" + id + "': label " + std::to_string(labels[i]) +
                            " at index " + std::to_string(i) + " outside [0," +
                            std::to_string(num_classes) + ")");
    }
  }
  for (int64_t i = 0; i < images.size(); ++i) {
    if (!(images[i] >= 0.0 && images[i] <= 1.0)) {
      throw ValidationError("dataset '" + id + "': pixel " + std::to_string(i) +
                            " outside [0,1]");
    }
  }
}

Dataset Dataset::subset(const std::vector<int64_t>& indices, const std::string& new_id) const {
  const int64_t per_example = images.size() / images.extent(0);
  Shape shape = images.shape();
  shape[0] = static_cast<int64_t>(indices.size());
  Dataset out;
  out.images = Tensor(shape);
  out.labels.resize(indices.size());
  out.num_classes = num_classes;
  out.id = new_id;
  for (size_t i = 0; i < indices.size(); ++i) {
    const double* src = images.data() + indices[i] * per_example;
    std::copy(src, src + per_example, out.images.data() + i * per_example);
    out.labels[i] = labels[indices[i]];
  }
  return out;
}

void SynthSpec::validate() const {
  if (num_classes < 2) throw ValidationError("synth: num_classes must be >= 2");
  if (num_classes > 16) {
    throw ValidationError("synth: at most 16 classes (distinct frequency pairs in {1..4}^2)");
  }
  if (height < 2 || width < 2) throw ValidationError("synth: image extents must be >= 2");
  if (train_per_class < 1 || val_per_class < 1 || test_per_class < 1) {
    throw ValidationError("synth: per-class counts must be >= 1");
  }
  if (jitter < 0.0) throw ValidationError("synth: jitter must be >= 0");
}

std::string SynthSpec::id() const {
  std::ostringstream os;
  os << "synth-k" << num_classes << "-" << height << "x" << width << "-seed" << seed;
  return os.str();
}

namespace {

constexpr uint64_t kTemplateStream = 0x74656D70ULL;
constexpr uint64_t kSplitStreamBase = 0x73706C30ULL;
constexpr int kMaxFreqRetries = 1000;

struct ClassTemplate {
  int fx, fy;
  double phase;
};

std::vector<ClassTemplate> draw_templates(const SynthSpec& spec) {
  Rng rng = Rng(spec.seed).derive(kTemplateStream);
  std::vector<ClassTemplate> out;
  std::set<std::pair<int, int>> used;
  for (int c = 0; c < spec.num_classes; ++c) {
    int fx = 0, fy = 0;
    bool ok = false;
    for (int attempt = 0; attempt < kMaxFreqRetries; ++attempt) {
      fx = 1 + static_cast<int>(rng.next_u64() % 4);
      fy = 1 + static_cast<int>(rng.next_u64() % 4);
      if (used.insert({fx, fy}).second) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ValidationError("synth: could not draw a distinct frequency pair for class " +
                            std::to_string(c));
    }
    out.push_back({fx, fy, rng.uniform(0.0, 2.0 * M_PI)});
  }
  return out;
}

Tensor render_template(const ClassTemplate& t, int64_t height, int64_t width) {
  Tensor img({height, width});
  for (int64_t i = 0; i < height; ++i) {
    for (int64_t j = 0; j < width; ++j) {
      const double arg =
          2.0 * M_PI * (t.fx * static_cast<double>(i) + t.fy * static_cast<double>(j)) /
              static_cast<double>(height) +
          t.phase;
      img.at2(i, j) = 0.5 + 0.35 * std::sin(arg);
    }
  }
  return img;
}

Dataset render_split(const SynthSpec& spec, const std::vector<ClassTemplate>& templates,
                     int per_class, Rng rng, const std::string& split_name) {
  const int64_t total = static_cast<int64_t>(per_class) * spec.num_classes;
  Dataset out;
  out.images = Tensor({total, 1, spec.height, spec.width});
  out.labels.resize(total);
  out.num_classes = spec.num_classes;
  out.id = spec.id() + "-" + split_name;
  const int64_t hw = spec.height * spec.width;
  int64_t row = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    const Tensor tmpl = render_template(templates[c], spec.height, spec.width);
    for (int s = 0; s < per_class; ++s, ++row) {
      double* dst = out.images.data() + row * hw;
      for (int64_t p = 0; p < hw; ++p) {
        dst[p] = std::clamp(tmpl[p] + spec.jitter * rng.uniform(-1.0, 1.0), 0.0, 1.0);
      }
      out.labels[row] = c;
    }
  }
  return out;
}

}  // namespace

std::vector<Tensor> synth_templates(const SynthSpec& spec) {
  spec.validate();
  std::vector<Tensor> out;
  for (const ClassTemplate& t : draw_templates(spec)) {
    out.push_back(render_template(t, spec.height, spec.width));
  }
  return out;
}

SynthSplits generate_synth(const SynthSpec& spec) {
  spec.validate();
  const std::vector<ClassTemplate> templates = draw_templates(spec);
  Rng root(spec.seed);
  SynthSplits splits;
  splits.train = render_split(spec, templates, spec.train_per_class,
                              root.derive(kSplitStreamBase + 1), "train");
  splits.val = render_split(spec, templates, spec.val_per_class,
                            root.derive(kSplitStreamBase + 2), "val");
  splits.test = render_split(spec, templates, spec.test_per_class,
                             root.derive(kSplitStreamBase + 3), "test");
  return splits;
}

namespace {

constexpr uint32_t kImageMagic = 0x00000803;
constexpr uint32_t kLabelMagic = 0x00000801;

uint32_t read_be32(std::istream& is, const std::string& path, size_t offset) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw ParseError(path + ": truncated at byte offset " + std::to_string(offset));
  }
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
         uint32_t(b[3]);
}

void write_be32(std::ostream& os, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  if (!fi) throw IoError("cannot open IDX image file: " + images_path);
  const uint32_t magic_i = read_be32(fi, images_path, 0);
  if (magic_i != kImageMagic) {
    std::ostringstream os;
    os << images_path << ": bad magic 0x" << std::hex << magic_i << " at byte offset 0";
    throw ParseError(os.str());
  }
  const uint32_t n = read_be32(fi, images_path, 4);
  const uint32_t h = read_be32(fi, images_path, 8);
  const uint32_t w = read_be32(fi, images_path, 12);
  const size_t payload = size_t(n) * h * w;
  std::vector<unsigned char> pixels(payload);
  if (!fi.read(reinterpret_cast<char*>(pixels.data()), payload)) {
    const size_t got = static_cast<size_t>(fi.gcount());
    throw ParseError(images_path + ": truncated pixel payload at byte offset " +
                     std::to_string(16 + got));
  }

  std::ifstream fl(labels_path, std::ios::binary);
  if (!fl) throw IoError("cannot open IDX label file: " + labels_path);
  const uint32_t magic_l = read_be32(fl, labels_path, 0);
  if (magic_l != kLabelMagic) {
    std::ostringstream os;
    os << labels_path << ": bad magic 0x" << std::hex << magic_l << " at byte offset 0";
    throw ParseError(os.str());
  }
  const uint32_t n_labels = read_be32(fl, labels_path, 4);
  if (n_labels != n) {
    throw ParseError(labels_path + ": label count " + std::to_string(n_labels) +
                     " does not match image count " + std::to_string(n) +
                     " (byte offset 4)");
  }
  std::vector<unsigned char> raw_labels(n_labels);
  if (!fl.read(reinterpret_cast<char*>(raw_labels.data()), n_labels)) {
    const size_t got = static_cast<size_t>(fl.gcount());
    throw ParseError(labels_path + ": truncated label payload at byte offset " +
                     std::to_string(8 + got));
  }

  Dataset out;
  out.images = Tensor({int64_t(n), 1, int64_t(h), int64_t(w)});
  for (size_t i = 0; i < payload; ++i) {
    out.images[static_cast<int64_t>(i)] = static_cast<double>(pixels[i]) / 255.0;
  }
  out.labels.assign(raw_labels.begin(), raw_labels.end());
  int max_label = 0;
  for (int l : out.labels) max_label = std::max(max_label, l);
  out.num_classes = std::max(2, max_label + 1);
  out.id = std::filesystem::path(images_path).stem().string();
  return out;
}

void save_idx(const Dataset& data, const std::string& images_path,
              const std::string& labels_path) {
  if (data.images.extent(1) != 1) {
    throw ValidationError("save_idx: only single-channel datasets fit the IDX container");
  }
  std::ofstream fi(images_path, std::ios::binary);
  if (!fi) throw IoError("cannot open IDX image file for writing: " + images_path);
  write_be32(fi, kImageMagic);
  write_be32(fi, static_cast<uint32_t>(data.size()));
  write_be32(fi, static_cast<uint32_t>(data.images.extent(2)));
  write_be32(fi, static_cast<uint32_t>(data.images.extent(3)));
  std::vector<unsigned char> pixels(static_cast<size_t>(data.images.size()));
  for (int64_t i = 0; i < data.images.size(); ++i) {
    pixels[static_cast<size_t>(i)] =
        static_cast<unsigned char>(std::lround(std::clamp(data.images[i], 0.0, 1.0) * 255.0));
  }
  fi.write(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  if (!fi) throw IoError("failed writing IDX image file: " + images_path);

  std::ofstream fl(labels_path, std::ios::binary);
  if (!fl) throw IoError("cannot open IDX label file for writing: " + labels_path);
  write_be32(fl, kLabelMagic);
  write_be32(fl, static_cast<uint32_t>(data.size()));
  std::vector<unsigned char> raw(data.labels.begin(), data.labels.end());
  fl.write(reinterpret_cast<const char*>(raw.data()), raw.size());
  if (!fl) throw IoError("failed writing IDX label file: " + labels_path);
}

void save_dataset_cache(const Dataset& data, const std::string& basename,
                        const std::string& meta) {
  save_idx(data, basename + "-images.idx", basename + "-labels.idx");
  std::ofstream fm(basename + "-meta.txt", std::ios::binary);
  if (!fm) throw IoError("cannot open dataset metadata file: " + basename + "-meta.txt");
  fm << "id " << data.id << "\n" << meta;
  if (!meta.empty() && meta.back() != '\n') fm << "\n";
}

std::vector<Dataset> split(const Dataset& data, const std::vector<double>& fractions,
                           uint64_t seed, bool stratified) {
  data.validate();
  double total = 0.0;
  for (double f : fractions) {
    if (f <= 0.0) throw ValidationError("split: fractions must be positive");
    total += f;
  }
  if (total > 1.0 + 1e-12) throw ValidationError("split: fractions sum exceeds 1");

  Rng rng = Rng(seed).derive(0x73706C69ULL);
  std::vector<std::vector<int64_t>> groups;
  if (stratified) {
    groups.resize(data.num_classes);
    for (int64_t i = 0; i < data.size(); ++i) groups[data.labels[i]].push_back(i);
  } else {
    groups.emplace_back(data.size());
    std::iota(groups[0].begin(), groups[0].end(), 0);
  }
  for (auto& g : groups) {
    for (int64_t i = static_cast<int64_t>(g.size()) - 1; i > 0; --i) {
      const int64_t j = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(i + 1));
      std::swap(g[i], g[j]);
    }
  }

  std::vector<Dataset> out;
  std::vector<size_t> cursor(groups.size(), 0);
  for (size_t s = 0; s < fractions.size(); ++s) {
    std::vector<int64_t> take;
    for (size_t gi = 0; gi < groups.size(); ++gi) {
      const size_t count =
          static_cast<size_t>(std::floor(fractions[s] * static_cast<double>(groups[gi].size()) +
                                         1e-9));
      for (size_t i = 0; i < count && cursor[gi] < groups[gi].size(); ++i) {
        take.push_back(groups[gi][cursor[gi]++]);
      }
    }
    out.push_back(data.subset(take, data.id + "-split" + std::to_string(s)));
  }
  return out;
}

}  // namespace dign

#include "distembed/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#ifdef DISTEMBED_WITH_JPEG
#include <csetjmp>
#include <cstdio>

#include <jpeglib.h>
#endif

#include "distembed/corruption.hpp"
#include "distembed/error.hpp"
#include "distembed/seed.hpp"

namespace distembed {

namespace fs = std::filesystem;

const char* to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::Unassigned: return "unassigned";
    case SplitTag::Train: return "train";
    case SplitTag::Query: return "query";
    case SplitTag::Gallery: return "gallery";
  }
  return "?";
}

std::size_t DatasetIndex::num_cameras() const {
  std::set<int> cams;
  for (const auto& e : entries) cams.insert(e.cam);
  return cams.size();
}

std::size_t DatasetIndex::label(std::size_t entry) const {
  const auto it = relabel.find(entries.at(entry).raw_id);
  if (it == relabel.end()) {
    throw Error(ErrorKind::InvalidDataset, "identity " + std::to_string(entries[entry].raw_id) + " has no training label");
  }
  return it->second;
}

std::optional<MarketName> parse_market_name(const std::string& filename) {
  static const std::regex pattern(R"(^(-?\d+)_c(\d+)s\d+_\d+_\d+\.[A-Za-z]+$)");
  std::smatch m;
  if (!std::regex_match(filename, m, pattern)) return std::nullopt;
  return MarketName{std::stol(m[1].str()), std::stoi(m[2].str())};
}

namespace {

void build_relabel(DatasetIndex& index) {
  std::set<long> ids;
  for (const auto& e : index.entries)
    if (e.split == SplitTag::Train && !e.distractor) ids.insert(e.raw_id);
  index.relabel.clear();
  for (long id : ids) index.relabel.emplace(id, index.relabel.size());
}

void index_files(DatasetIndex& index, const fs::path& dir, SplitTag tag) {
  std::vector<fs::path> files;
  for (const auto& item : fs::directory_iterator(dir))
    if (item.is_regular_file()) files.push_back(item.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto name = parse_market_name(f.filename().string());
    if (!name) {
      index.rejects.push_back(f.string());
      continue;
    }
    DatasetEntry e;
    e.path = f.string();
    e.raw_id = name->id;
    e.cam = name->cam;
    e.distractor = name->id <= 0;
    e.split = tag;
    index.entries.push_back(std::move(e));
  }
}

}  // namespace

DatasetIndex index_market_dir(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error(ErrorKind::InvalidDataset, "dataset directory not found: " + root.string());
  DatasetIndex index;
  const fs::path train = root / "bounding_box_train", query = root / "query", test = root / "bounding_box_test";
  if (fs::is_directory(train) && fs::is_directory(query) && fs::is_directory(test)) {
    index_files(index, train, SplitTag::Train);
    index_files(index, query, SplitTag::Query);
    index_files(index, test, SplitTag::Gallery);
    build_relabel(index);
  } else {
    index_files(index, root, SplitTag::Unassigned);
  }
  if (index.entries.empty()) {
    throw Error(ErrorKind::InvalidDataset, "no images with Market-style names under " + root.string() + " (" +
                                               std::to_string(index.rejects.size()) + " rejected)");
  }
  return index;
}

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticSpec::validate() const {
  if (num_classes < 2) throw Error(ErrorKind::InvalidConfig, "synthetic data needs at least two classes");
  if (per_class == 0) throw Error(ErrorKind::InvalidConfig, "synthetic data needs samples per class");
  if (!(within_std >= 0.0) || !(noise_std >= 0.0)) throw Error(ErrorKind::InvalidConfig, "noise std must be >= 0");
  if (mode == SyntheticMode::Vector && dim == 0) throw Error(ErrorKind::InvalidConfig, "vector dim must be positive");
  if (mode == SyntheticMode::Image && (height < 4 || width < 4)) {
    throw Error(ErrorKind::InvalidConfig, "synthetic images must be at least 4x4");
  }
}

namespace {

struct Prototype {
  double upper[3], lower[3];
  std::size_t split_row;
  std::size_t period;
  bool vertical_stripes;
};

// Classes draw garment colours from a small shared palette, so many pairs
// differ only in stripe period or orientation.
std::vector<Prototype> make_prototypes(const SyntheticSpec& spec) {
  constexpr std::size_t kPalette = 3;
  constexpr std::size_t kPeriods[] = {2, 3, 4, 6};
  std::mt19937_64 rng(derive_seed(spec.seed, 100));
  std::uniform_real_distribution<double> colour(0.15, 0.85), split(0.4, 0.6);
  double palette[kPalette][3];
  for (auto& c : palette)
    for (double& v : c) v = colour(rng);
  // Every (upper, lower, period, orientation) combination, shuffled.
  std::vector<std::size_t> combos(kPalette * kPalette * 4 * 2);
  std::iota(combos.begin(), combos.end(), std::size_t{0});
  std::shuffle(combos.begin(), combos.end(), rng);
  std::vector<Prototype> out(spec.num_classes);
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    std::size_t c = combos[k % combos.size()];
    Prototype& p = out[k];
    p.vertical_stripes = c % 2 == 1;
    c /= 2;
    p.period = kPeriods[c % 4];
    c /= 4;
    std::copy_n(palette[c % kPalette], 3, p.upper);
    std::copy_n(palette[c / kPalette], 3, p.lower);
    p.split_row = static_cast<std::size_t>(std::llround(split(rng) * static_cast<double>(spec.height)));
  }
  return out;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset out;
  const std::size_t n = spec.num_classes * spec.per_class;
  std::vector<double> values;
  std::normal_distribution<double> n01;
  if (spec.mode == SyntheticMode::Vector) {
    values.reserve(n * spec.dim);
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      std::mt19937_64 rng(derive_seed(spec.seed, 100 + k));
      std::vector<double> mean(spec.dim);
      double norm = 0.0;
      for (auto& m : mean) {
        m = n01(rng);
        norm += m * m;
      }
      for (auto& m : mean) m *= spec.mean_scale / std::sqrt(norm);
      for (std::size_t i = 0; i < spec.per_class; ++i)
        for (std::size_t j = 0; j < spec.dim; ++j) values.push_back(mean[j] + spec.within_std * n01(rng));
    }
    out.samples = Tensor({n, spec.dim}, std::move(values));
  } else {
    const std::size_t H = spec.height, W = spec.width;
    values.reserve(n * H * W * 3);
    const auto prototypes = make_prototypes(spec);
    for (std::size_t k = 0; k < spec.num_classes; ++k) {
      const Prototype& p = prototypes[k];
      for (std::size_t i = 0; i < spec.per_class; ++i) {
        std::mt19937_64 rng(derive_seed(spec.seed, (std::uint64_t{k} << 32) + i + 1));
        const long dy = std::uniform_int_distribution<long>(-4, 4)(rng);
        const long dx = std::uniform_int_distribution<long>(-3, 3)(rng);
        const long split_jitter = std::uniform_int_distribution<long>(-3, 3)(rng);
        const double gain = std::uniform_real_distribution<double>(0.8, 1.2)(rng);
        std::uniform_real_distribution<double> tint(-0.08, 0.08);
        const double shift[3] = {tint(rng), tint(rng), tint(rng)};
        const long split_row = long(p.split_row) + split_jitter;
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x = 0; x < W; ++x) {
            const auto sy = static_cast<std::size_t>(std::clamp<long>(long(y) - dy, 0, long(H) - 1));
            const auto sx = static_cast<std::size_t>(std::clamp<long>(long(x) - dx, 0, long(W) - 1));
            const std::size_t s = p.vertical_stripes ? sx : sy;
            const double stripe = (s % p.period) < (p.period + 1) / 2 ? 1.0 : -1.0;
            for (int c = 0; c < 3; ++c) {
              const double base = long(sy) < split_row ? p.upper[c] * (1.0 + 0.3 * stripe) : p.lower[c];
              values.push_back(std::clamp(gain * base + shift[c] + spec.noise_std * n01(rng), 0.0, 1.0));
            }
          }
      }
    }
    out.samples = Tensor({n, H, W, 3}, std::move(values));
  }
  for (std::size_t k = 0; k < spec.num_classes; ++k)
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      DatasetEntry e;
      e.raw_id = static_cast<long>(k + 1);
      e.cam = static_cast<int>(1 + i % 4);
      e.sample = k * spec.per_class + i;
      out.index.entries.push_back(e);
    }
  return out;
}

void export_synthetic(const Dataset& dataset, const fs::path& dir) {
  if (dataset.samples.rank() != 4) throw Error(ErrorKind::InvalidInput, "only image datasets can be exported");
  fs::create_directories(dir);
  const Shape image{dataset.samples.dim(1), dataset.samples.dim(2), dataset.samples.dim(3)};
  const std::size_t per = shape_numel(image);
  for (const auto& e : dataset.index.entries) {
    char name[64];
    std::snprintf(name, sizeof name, "%04ld_c%ds1_%06zu_00.ppm", e.raw_id, e.cam, e.sample);
    const auto src = dataset.samples.data().subspan(e.sample * per, per);
    save_image(Tensor(image, std::vector<double>(src.begin(), src.end())), dir / name);
  }
}

// ---------------------------------------------------------------------------
// Images

bool jpeg_supported() {
#ifdef DISTEMBED_WITH_JPEG
  return true;
#else
  return false;
#endif
}

std::string encode_ppm(const Tensor& image, std::size_t* clamped) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw Error(ErrorKind::IncompatibleShape, "PPM needs an [H,W,3] image, got " + shape_str(image.shape()));
  }
  std::string out = "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
  std::size_t count = 0;
  for (double v : image.data()) {
    if (!(v >= 0.0 && v <= 1.0)) ++count;
    const double c = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
  }
  if (clamped) *clamped = count;
  return out;
}

Tensor decode_ppm(const std::string& bytes, const std::string& source) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& why) -> Error {
    return Error(ErrorKind::Decode, "cannot decode " + source + ": " + why);
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t start = pos, v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos++] - '0');
      if (v > (1u << 24)) throw fail("header value too large");
    }
    if (pos == start) throw fail("malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw fail("not a binary PPM (P6)");
  pos = 2;
  const auto width = number(), height = number(), maxval = number();
  if (width == 0 || height == 0 || maxval == 0 || maxval > 65535) throw fail("bad dimensions or maxval");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) throw fail("malformed header");
  ++pos;
  const std::size_t bytes_per = maxval > 255 ? 2 : 1;
  const std::size_t count = width * height * 3;
  if (bytes.size() - pos < count * bytes_per) throw fail("truncated pixel data");
  std::vector<double> v(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t raw = static_cast<unsigned char>(bytes[pos + i * bytes_per]);
    if (bytes_per == 2) raw = raw * 256 + static_cast<unsigned char>(bytes[pos + i * 2 + 1]);
    if (raw > maxval) throw fail("sample above maxval");
    v[i] = static_cast<double>(raw) / static_cast<double>(maxval);
  }
  return Tensor({height, width, 3}, std::move(v));
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

#ifdef DISTEMBED_WITH_JPEG
struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

Tensor decode_jpeg(const std::string& bytes, const std::string& source) {
  jpeg_decompress_struct cinfo;
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  // libjpeg is C; errors leave through longjmp rather than a C++ exception.
  err.mgr.error_exit = [](j_common_ptr c) {
    auto* e = reinterpret_cast<JpegError*>(c->err);
    (*c->err->format_message)(c, e->message);
    std::longjmp(e->jump, 1);
  };
  std::vector<double> v;
  std::vector<unsigned char> row;
  std::size_t H = 0, W = 0;
  jpeg_create_decompress(&cinfo);
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw Error(ErrorKind::Decode, "cannot decode " + source + ": " + err.message);
  }
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  W = cinfo.output_width;
  H = cinfo.output_height;
  row.resize(W * 3);
  v.reserve(H * W * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* ptr = row.data();
    jpeg_read_scanlines(&cinfo, &ptr, 1);
    for (auto b : row) v.push_back(b / 255.0);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return Tensor({H, W, 3}, std::move(v));
}
#endif

}  // namespace

Tensor load_image(const fs::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".ppm") return decode_ppm(read_file(path), path.string());
  if (ext == ".jpg" || ext == ".jpeg") {
#ifdef DISTEMBED_WITH_JPEG
    return decode_jpeg(read_file(path), path.string());
#else
    throw Error(ErrorKind::Capability, path.string() + ": built without JPEG support; convert to PPM");
#endif
  }
  throw Error(ErrorKind::Capability, path.string() + ": unsupported image format (PPM" +
                                         std::string(jpeg_supported() ? ", JPEG" : "") + " only)");
}

std::size_t save_image(const Tensor& image, const fs::path& path) {
  std::size_t clamped = 0;
  const auto bytes = encode_ppm(image, &clamped);
  std::ofstream out(path, std::ios::binary);
  if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
    throw Error(ErrorKind::Io, "cannot write " + path.string());
  }
  return clamped;
}

Tensor load_inputs(const Dataset& dataset, std::span<const std::size_t> entries, std::size_t height,
                   std::size_t width) {
  if (dataset.samples.numel() > 0) {
    std::vector<std::size_t> rows;
    rows.reserve(entries.size());
    for (auto e : entries) rows.push_back(dataset.index.entries.at(e).sample);
    return take_rows(dataset.samples, rows);
  }
  std::vector<double> v;
  v.reserve(entries.size() * height * width * 3);
  for (auto e : entries) {
    Tensor img = load_image(dataset.index.entries.at(e).path);
    if (img.dim(0) != height || img.dim(1) != width) img = resize_bilinear(img, height, width);
    v.insert(v.end(), img.data().begin(), img.data().end());
  }
  return Tensor({entries.size(), height, width, 3}, std::move(v));
}

// ---------------------------------------------------------------------------
// Splits

SplitPolicyKind parse_split_policy(const std::string& name) {
  if (name == "tagged") return SplitPolicyKind::Tagged;
  if (name == "identity-half") return SplitPolicyKind::IdentityHalf;
  if (name == "holdout") return SplitPolicyKind::Holdout;
  throw Error(ErrorKind::InvalidConfig, "unknown split policy '" + name + "' (tagged, identity-half, holdout)");
}

namespace {

// Moves images of one test identity into the query set, camera by camera,
// keeping a gallery image on another camera for every query.
void pick_queries(std::vector<DatasetEntry>& entries, const std::vector<std::size_t>& test_images,
                  std::size_t per_camera, std::mt19937_64& rng) {
  for (auto i : test_images) entries[i].split = SplitTag::Gallery;
  std::map<int, std::vector<std::size_t>> by_cam;
  for (auto i : test_images) by_cam[entries[i].cam].push_back(i);
  auto covered = [&] {
    for (auto q : test_images) {
      if (entries[q].split != SplitTag::Query) continue;
      bool ok = false;
      for (auto g : test_images) ok = ok || (entries[g].split == SplitTag::Gallery && entries[g].cam != entries[q].cam);
      if (!ok) return false;
    }
    return true;
  };
  for (auto& [cam, images] : by_cam) {
    std::shuffle(images.begin(), images.end(), rng);
    std::size_t taken = 0;
    for (auto i : images) {
      if (taken == per_camera) break;
      entries[i].split = SplitTag::Query;
      if (covered()) ++taken;
      else entries[i].split = SplitTag::Gallery;
    }
  }
}

}  // namespace

Split split(DatasetIndex& index, const SplitPolicy& policy) {
  auto& entries = index.entries;
  if (policy.kind != SplitPolicyKind::Tagged) {
    if (index.num_cameras() < 2) {
      throw Error(ErrorKind::InvalidConfig, "cross-camera query/gallery split needs at least two cameras");
    }
    if (policy.queries_per_camera == 0) throw Error(ErrorKind::InvalidConfig, "queries_per_camera must be positive");
    std::map<long, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].distractor) entries[i].split = SplitTag::Gallery;
      else by_id[entries[i].raw_id].push_back(i);
    }
    if (by_id.size() < 2) throw Error(ErrorKind::InvalidConfig, "split needs at least two identities");
    std::vector<long> ids;
    for (const auto& [id, imgs] : by_id) ids.push_back(id);

    if (policy.kind == SplitPolicyKind::IdentityHalf) {
      std::mt19937_64 rng(derive_seed(policy.seed, 1));
      std::shuffle(ids.begin(), ids.end(), rng);
      const std::size_t n_train = ids.size() / 2;
      for (std::size_t r = 0; r < ids.size(); ++r) {
        const auto& imgs = by_id[ids[r]];
        std::mt19937_64 id_rng(derive_seed(policy.seed, 1000 + static_cast<std::uint64_t>(ids[r])));
        if (r < n_train) {
          for (auto i : imgs) entries[i].split = SplitTag::Train;
        } else {
          pick_queries(entries, imgs, policy.queries_per_camera, id_rng);
        }
      }
    } else {
      if (!(policy.train_fraction > 0.0 && policy.train_fraction < 1.0)) {
        throw Error(ErrorKind::InvalidConfig, "holdout train_fraction must lie in (0,1)");
      }
      for (long id : ids) {
        auto imgs = by_id[id];
        std::mt19937_64 id_rng(derive_seed(policy.seed, 1000 + static_cast<std::uint64_t>(id)));
        std::shuffle(imgs.begin(), imgs.end(), id_rng);
        auto n_train = static_cast<std::size_t>(std::llround(policy.train_fraction * static_cast<double>(imgs.size())));
        n_train = std::clamp<std::size_t>(n_train, 1, imgs.size());
        for (std::size_t r = 0; r < n_train; ++r) entries[imgs[r]].split = SplitTag::Train;
        const std::vector<std::size_t> test(imgs.begin() + static_cast<long>(n_train), imgs.end());
        pick_queries(entries, test, policy.queries_per_camera, id_rng);
      }
    }
  } else {
    for (const auto& e : entries) {
      if (e.split == SplitTag::Unassigned) {
        throw Error(ErrorKind::InvalidConfig, "tagged split requested but " + e.path + " has no split tag");
      }
    }
  }
  build_relabel(index);
  Split out;
  out.num_classes = index.num_classes();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    switch (entries[i].split) {
      case SplitTag::Train:
        if (entries[i].distractor) break;
        out.train.push_back(i);
        out.train_labels.push_back(index.relabel.at(entries[i].raw_id));
        break;
      case SplitTag::Query: out.query.push_back(i); break;
      case SplitTag::Gallery: out.gallery.push_back(i); break;
      case SplitTag::Unassigned: break;
    }
  }
  if (out.train.empty()) throw Error(ErrorKind::InvalidConfig, "split left no training images");
  return out;
}

}  // namespace distembed

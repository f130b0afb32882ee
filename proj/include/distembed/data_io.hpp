#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distembed/tensor.hpp"

namespace distembed {

enum class SplitTag { Unassigned, Train, Query, Gallery };

const char* to_string(SplitTag tag);

struct DatasetEntry {
  std::string path;  // empty for in-memory samples
  long raw_id = 0;
  int cam = 0;
  bool distractor = false;  // raw id -1 or 0
  SplitTag split = SplitTag::Unassigned;
  std::size_t sample = 0;  // row of Dataset::samples for in-memory data
};

struct DatasetIndex {
  std::vector<DatasetEntry> entries;
  // Raw training ids -> contiguous labels [0, K). Filled when training
  // entries are known (tagged directories or after split()).
  std::map<long, std::size_t> relabel;
  std::vector<std::string> rejects;  // unparseable file names

  std::size_t num_classes() const { return relabel.size(); }
  std::size_t num_cameras() const;
  std::size_t label(std::size_t entry) const;
};

/// Parses `ID_cCsS_frame_bbox.ext`; returns nothing for other names.
struct MarketName {
  long id = 0;
  int cam = 0;
};
std::optional<MarketName> parse_market_name(const std::string& filename);

/// Indexes a Market-style directory. If `bounding_box_train`, `query` and
/// `bounding_box_test` exist their entries are tagged train/query/gallery;
/// otherwise every image directly under `root` is indexed unassigned.
DatasetIndex index_market_dir(const std::filesystem::path& root);

// ---------------------------------------------------------------------------
// Synthetic data

enum class SyntheticMode { Vector, Image };

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t per_class = 60;
  SyntheticMode mode = SyntheticMode::Image;
  // vector mode
  std::size_t dim = 16;
  double mean_scale = 3.0;
  double within_std = 0.3;
  // image mode
  std::size_t height = 64;
  std::size_t width = 32;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  DatasetIndex index;
  Tensor samples;  // [N,d] or [N,H,W,3] for in-memory data; empty for on-disk data
};

/// Raw ids 1..K, cameras 1..4 in rotation. Vector mode: class means are random
/// directions of length mean_scale plus N(0, within_std^2) noise. Image mode:
/// per-class two-colour split (upper/lower) with a class-specific stripe period
/// on the upper part, plus per-image shift, gain and pixel noise.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// Writes every sample as `<dir>/<id>_c<cam>s1_<n>_00.ppm` (image mode only).
void export_synthetic(const Dataset& dataset, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Images

bool jpeg_supported();

/// [H,W,3] tensor in [0,1]. Binary PPM (P6, 8 or 16 bit) always; JPEG when
/// built with libjpeg. Failures raise Decode (or Capability) errors naming the path.
Tensor load_image(const std::filesystem::path& path);

/// Writes an 8-bit P6 PPM. Values outside [0,1] are clamped; the count of
/// clamped values is returned.
std::size_t save_image(const Tensor& image, const std::filesystem::path& path);

std::string encode_ppm(const Tensor& image, std::size_t* clamped = nullptr);
Tensor decode_ppm(const std::string& bytes, const std::string& source = "<memory>");

/// Inputs for the given entries: rows of the in-memory samples, or images
/// loaded from disk and resized (bilinear) to height x width.
Tensor load_inputs(const Dataset& dataset, std::span<const std::size_t> entries, std::size_t height,
                   std::size_t width);

// ---------------------------------------------------------------------------
// Splits

enum class SplitPolicyKind {
  Tagged,        // keep the directory tags
  IdentityHalf,  // half the identities train, the other half query/gallery
  Holdout,       // every identity in train; a per-identity share of images held out
};

SplitPolicyKind parse_split_policy(const std::string& name);

struct SplitPolicy {
  SplitPolicyKind kind = SplitPolicyKind::Holdout;
  double train_fraction = 2.0 / 3.0;  // holdout only
  std::size_t queries_per_camera = 1;  // per identity among test images
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<std::size_t> train, query, gallery;  // entry indices
  std::vector<std::size_t> train_labels;           // contiguous labels of `train`
  std::size_t num_classes = 0;
};

/// Assigns split tags in `index` (and its relabel map) and returns the views.
/// Query images are drawn per (identity, camera); an identity is only queried
/// on cameras where another camera of it lands in the gallery.
Split split(DatasetIndex& index, const SplitPolicy& policy);

}  // namespace distembed

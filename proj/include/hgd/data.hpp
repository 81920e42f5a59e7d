#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hgd {

/// A 2D grayscale slice. `pixels` is an H×W float32 tensor with values in [-1, 1].
struct ImageSlice {
  torch::Tensor pixels;
  std::string subject_id;
  int modality_id = 0;
  int slice_index = 0;

  int64_t height() const { return pixels.size(0); }
  int64_t width() const { return pixels.size(1); }
};

/// Integer structure classes aligned 1:1 with an ImageSlice. `classes` is an
/// H×W int64 tensor with entries in [0, num_classes).
struct LabelMap {
  torch::Tensor classes;
  int num_classes = 0;
  std::vector<std::string> class_names;

  int64_t height() const { return classes.size(0); }
  int64_t width() const { return classes.size(1); }
};

struct Sample {
  ImageSlice image;
  LabelMap labels;
};

enum class Split { kTrain, kTest };

struct ManifestEntry {
  std::string image_path;
  std::string label_path;
  std::string subject_id;
  int modality_id = 0;
  int slice_index = 0;
};

/// On-disk description of a dataset split. Relative paths resolve against
/// `base_dir`, which is the directory of the manifest file when loaded.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  Split split = Split::kTrain;
  int resolution = 64;
  std::vector<std::string> class_names;
  std::filesystem::path base_dir;
};

const std::vector<std::string>& phantom_class_names();

DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// Checks that no subject appears in both manifests.
void check_disjoint_subjects(const DatasetManifest& a, const DatasetManifest& b);

/// Loads, resizes (bilinear for images, nearest for labels) and per-slice
/// min-max rescales every entry. Output is ordered by
/// (subject_id, modality_id, slice_index).
std::vector<Sample> load_corpus(const DatasetManifest& manifest);

/// Raw (unnormalised) single-slice file access.
torch::Tensor load_image_file(const std::filesystem::path& path);
torch::Tensor load_label_file(const std::filesystem::path& path);
void save_image_file(const std::filesystem::path& path, const torch::Tensor& pixels);
void save_label_file(const std::filesystem::path& path, const torch::Tensor& classes);

/// Min-max rescale to [-1, 1]; a constant image maps to all zeros.
torch::Tensor minmax_to_unit_range(const torch::Tensor& pixels);

/// Bilinear resize of an H×W image tensor.
torch::Tensor resize_image(const torch::Tensor& pixels, int64_t height, int64_t width);

/// Nearest-neighbour downsampling of a label map (pixel-centre aligned).
LabelMap downsample_labels(const LabelMap& labels, int64_t target_h, int64_t target_w);

struct PhantomCorpus {
  DatasetManifest train;
  DatasetManifest test;
  std::filesystem::path train_manifest_path;
  std::filesystem::path test_manifest_path;
};

/// Per-class base intensities of the phantom in raw (pre-normalisation)
/// units, indexed [modality][class]. Modality 1 reverses the class order.
const std::vector<std::vector<double>>& phantom_base_intensities();

/// Writes a deterministic two-modality phantom dataset under `out_dir`:
/// images/subjNNN_modM.npy (float32), labels/subjNNN.npy (uint8) and
/// train_manifest.json / test_manifest.json.
PhantomCorpus make_phantom_corpus(uint64_t seed, int n_subjects, int resolution,
                                  const std::filesystem::path& out_dir);

}  // namespace hgd

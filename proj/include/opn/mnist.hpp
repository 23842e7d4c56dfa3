#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "opn/rng.hpp"
#include "opn/tensor.hpp"

namespace opn {

/// Images (N, 1, H, W) with pixel values in [0, 1] and one class label per
/// image. Immutable after construction; safe to share read-only.
struct Dataset {
  Tensor4 images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

// IDX container format, big-endian: magic, dimension sizes, byte payload.
inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Parses an images file (magic 0x00000803, dims N,H,W, N*H*W bytes) and
/// scales pixels by 1/255. FormatError on bad magic, zero counts, or a
/// payload whose length does not match the header.
Tensor4 parse_idx_images(std::span<const unsigned char> bytes);

/// Parses a labels file (magic 0x00000801, dim N, N bytes). DataError if a
/// label byte exceeds 9; FormatError on structural problems.
std::vector<int> parse_idx_labels(std::span<const unsigned char> bytes);

/// Inverse of the parsers; pixel values are quantized back to bytes by
/// rounding v * 255.
std::vector<unsigned char> encode_idx_images(const Tensor4& images);
std::vector<unsigned char> encode_idx_labels(std::span<const int> labels);

bool is_gzip(std::span<const unsigned char> bytes);
std::vector<unsigned char> gzip_decompress(std::span<const unsigned char> bytes);

/// Reads a file, inflating gzip content transparently; if `path` is absent
/// but `path + ".gz"` exists, reads that instead. FormatError if neither
/// exists.
std::vector<unsigned char> read_maybe_gzipped(const std::filesystem::path& path);

inline constexpr const char* kTrainImagesName = "train-images-idx3-ubyte";
inline constexpr const char* kTrainLabelsName = "train-labels-idx1-ubyte";
inline constexpr const char* kTestImagesName = "t10k-images-idx3-ubyte";
inline constexpr const char* kTestLabelsName = "t10k-labels-idx1-ubyte";

/// Loads one images+labels pair from `dir`. FormatError if image and label
/// counts disagree.
Dataset load_dataset(const std::filesystem::path& dir, const std::string& images_name,
                     const std::string& labels_name);

struct MnistData {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Loads the standard four files and carves the validation set off the end
/// of the training set.
MnistData load_mnist(const std::filesystem::path& dir, std::size_t val_size);

/// Validation = last val_size examples, taken before any shuffling.
/// ConfigError if val_size >= the dataset size.
std::pair<Dataset, Dataset> split_validation(const Dataset& full, std::size_t val_size);

/// One epoch of mini-batch index lists drawn from a seeded shuffle; the
/// final partial batch is kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    Rng& rng);

/// Gathers the selected examples into a contiguous batch.
Dataset take(const Dataset& d, std::span<const std::size_t> indices);

/// First n examples (the CLI --subset switch).
Dataset head(const Dataset& d, std::size_t n);

}  // namespace opn

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "csn/config.hpp"
#include "csn/model.hpp"
#include "csn/networks.hpp"

namespace csn {

enum class Split { Train = 0, Val = 1, Test = 2 };
std::string to_string(Split s);
Split parse_split(const std::string& s);

/// Raised when a split cannot supply an episode.
class SamplerError : public Error {
 public:
  using Error::Error;
};

struct SplitSizes {
  std::size_t train = 30;
  std::size_t val = 10;
  std::size_t test = 10;
  std::size_t total() const { return train + val + test; }
};

/// A task distribution: classes partitioned into disjoint train/val/test
/// pools, each able to produce examples.
class TaskSource {
 public:
  virtual ~TaskSource() = default;

  virtual InputKind kind() const = 0;
  virtual std::string name() const = 0;
  /// Examples of one class stacked into [count x ...]; distinct examples when
  /// the class has finitely many.
  virtual Tensor draw(std::size_t class_id, std::size_t count, Rng& rng) const = 0;
  /// Number of distinct examples of a class; max() for generative sources.
  virtual std::size_t available(std::size_t class_id) const {
    (void)class_id;
    return std::numeric_limits<std::size_t>::max();
  }

  const std::vector<std::size_t>& classes(Split s) const { return splits_[std::size_t(s)]; }

 protected:
  std::array<std::vector<std::size_t>, 3> splits_;
  /// Deals `sizes` classes out of ids 0..total-1 in a seeded random order.
  void partition(const SplitSizes& sizes, std::uint64_t seed);
};

/// Isotropic Gaussians around fixed random prototypes on the unit sphere.
class GaussianSource : public TaskSource {
 public:
  GaussianSource(const SplitSizes& sizes, std::size_t dim, double noise, std::uint64_t seed);
  InputKind kind() const override { return InputKind::Vector; }
  std::string name() const override { return "gaussian"; }
  Tensor draw(std::size_t class_id, std::size_t count, Rng& rng) const override;
  const Tensor& prototypes() const { return prototypes_; }
  double noise() const { return noise_; }

 private:
  Tensor prototypes_;
  double noise_;
};

/// Sentences of `length` tokens with one blank (token 0). Each target word
/// has a template: a blank position and a context token per position. With
/// probability `noise` each context token, and the blank position, are
/// replaced at random.
class ClozeSource : public TaskSource {
 public:
  ClozeSource(const SplitSizes& sizes, std::size_t vocab, std::size_t length, double noise,
              std::uint64_t seed);
  InputKind kind() const override { return InputKind::Sequence; }
  std::string name() const override { return "cloze"; }
  Tensor draw(std::size_t class_id, std::size_t count, Rng& rng) const override;
  std::size_t vocab() const { return vocab_; }
  std::size_t length() const { return length_; }

 private:
  std::size_t vocab_;
  std::size_t length_;
  double noise_;
  std::vector<std::size_t> blank_;
  std::vector<std::vector<std::size_t>> context_;
};

/// Grayscale glyph images from a manifest directory (see load_omniglot).
class ImageSource : public TaskSource {
 public:
  InputKind kind() const override { return InputKind::Image; }
  std::string name() const override { return "omniglot"; }
  Tensor draw(std::size_t class_id, std::size_t count, Rng& rng) const override;
  std::size_t available(std::size_t class_id) const override;
  std::size_t image_size() const { return size_; }
  std::size_t base_classes() const { return images_.size(); }
  std::size_t example_count() const;

 private:
  friend std::unique_ptr<ImageSource> load_omniglot(const std::filesystem::path&, std::size_t,
                                                    bool, const SplitSizes&, std::uint64_t);
  std::size_t size_ = 0;
  std::vector<std::vector<Tensor>> images_;  // per base class, [size x size]
  // Class id -> (base class, quarter turns).
  std::vector<std::pair<std::size_t, int>> classes_;
};

/// Reads `dir/manifest.csv` (rows `class_id,relative_path`, optional header),
/// each path a CSNT [H x W] tensor in [0, 1]. Images are bilinearly resized to
/// image_size. With rotations every training class adds three classes rotated
/// by 90, 180 and 270 degrees.
std::unique_ptr<ImageSource> load_omniglot(const std::filesystem::path& dir,
                                           std::size_t image_size, bool rotations,
                                           const SplitSizes& sizes, std::uint64_t seed);

/// Bilinear resize with half-pixel centers; the identity at equal size.
Tensor resize_bilinear(const Tensor& image, std::size_t size);
/// Counter-clockwise rotation of a square image by quarter turns.
Tensor rotate_quarter(const Tensor& image, int quarter_turns);

/// Samples C classes without replacement from the split, k description and
/// disjoint query examples per class, and relabels the classes 0..C-1 in
/// random order. Queries are spread evenly over the classes; a remainder goes
/// to randomly chosen classes.
Episode sample_episode(const TaskSource& source, Split split, std::size_t ways, std::size_t shots,
                       std::size_t queries, Rng& rng);

/// Source selected by the data.* keys of a resolved config.
std::unique_ptr<TaskSource> make_source(const Config& resolved);

/// Accuracy of the nearest-prototype rule (vector sources) or the
/// context-overlap rule (cloze) on one episode.
double oracle_accuracy(const Episode& episode, InputKind kind);

}  // namespace csn

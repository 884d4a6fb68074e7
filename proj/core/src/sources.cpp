// SPDX-License-Identifier: Apache-2.0
#include "csn/sources.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "csn/tensor_io.hpp"

namespace csn {

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "' (expected train|val|test)");
}

void TaskSource::partition(const SplitSizes& sizes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5117));
  std::vector<std::size_t> ids(sizes.total());
  std::iota(ids.begin(), ids.end(), 0);
  rng.shuffle(ids);
  auto take = [&](std::size_t begin, std::size_t n) {
    std::vector<std::size_t> v(ids.begin() + long(begin), ids.begin() + long(begin + n));
    std::sort(v.begin(), v.end());
    return v;
  };
  splits_[0] = take(0, sizes.train);
  splits_[1] = take(sizes.train, sizes.val);
  splits_[2] = take(sizes.train + sizes.val, sizes.test);
}

GaussianSource::GaussianSource(const SplitSizes& sizes, std::size_t dim, double noise,
                               std::uint64_t seed)
    : prototypes_({std::max<std::size_t>(sizes.total(), 1), std::max<std::size_t>(dim, 1)}),
      noise_(noise) {
  if (!(noise > 0.0)) throw ConfigError("data.gaussian.noise must be positive");
  if (dim == 0) throw ConfigError("data.gaussian.dim must be positive");
  partition(sizes, seed);
  Rng rng(derive_seed(seed, 1));
  for (std::size_t c = 0; c < sizes.total(); ++c) {
    double norm = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double v = rng.normal();
      prototypes_.at(c, j) = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) prototypes_.at(c, j) /= norm;
  }
}

Tensor GaussianSource::draw(std::size_t class_id, std::size_t count, Rng& rng) const {
  const std::size_t dim = prototypes_.dim(1);
  Tensor out({count, dim});
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t j = 0; j < dim; ++j) {
      out.at(i, j) = prototypes_.at(class_id, j) + noise_ * rng.normal();
    }
  }
  return out;
}

ClozeSource::ClozeSource(const SplitSizes& sizes, std::size_t vocab, std::size_t length,
                         double noise, std::uint64_t seed)
    : vocab_(vocab), length_(length), noise_(noise) {
  if (length < 3) throw ConfigError("data.cloze.length must be at least 3");
  if (vocab < 3) throw ConfigError("data.cloze.vocab must be at least 3");
  if (noise < 0.0 || noise > 1.0) throw ConfigError("data.cloze.noise must lie in [0, 1]");
  partition(sizes, seed);
  Rng rng(derive_seed(seed, 2));
  for (std::size_t c = 0; c < sizes.total(); ++c) {
    blank_.push_back(rng.index(length));
    std::vector<std::size_t> ctx(length);
    for (auto& t : ctx) t = 1 + rng.index(vocab - 1);
    context_.push_back(std::move(ctx));
  }
}

Tensor ClozeSource::draw(std::size_t class_id, std::size_t count, Rng& rng) const {
  Tensor out({count, length_});
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t blank = rng.bernoulli(noise_) ? rng.index(length_) : blank_[class_id];
    for (std::size_t p = 0; p < length_; ++p) {
      std::size_t tok = rng.bernoulli(noise_) ? 1 + rng.index(vocab_ - 1) : context_[class_id][p];
      if (p == blank) tok = 0;
      out.at(i, p) = double(tok);
    }
  }
  return out;
}

Tensor resize_bilinear(const Tensor& image, std::size_t size) {
  if (image.rank() != 2) throw DimensionError("resize: expected [H x W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h == size && w == size) return image;
  Tensor out({size, size});
  const double sy = double(h) / double(size), sx = double(w) / double(size);
  for (std::size_t i = 0; i < size; ++i) {
    const double y = std::clamp((double(i) + 0.5) * sy - 0.5, 0.0, double(h - 1));
    const std::size_t y0 = std::size_t(y), y1 = std::min(y0 + 1, h - 1);
    const double fy = y - double(y0);
    for (std::size_t j = 0; j < size; ++j) {
      const double x = std::clamp((double(j) + 0.5) * sx - 0.5, 0.0, double(w - 1));
      const std::size_t x0 = std::size_t(x), x1 = std::min(x0 + 1, w - 1);
      const double fx = x - double(x0);
      out.at(i, j) = (1 - fy) * ((1 - fx) * image.at(y0, x0) + fx * image.at(y0, x1)) +
                     fy * ((1 - fx) * image.at(y1, x0) + fx * image.at(y1, x1));
    }
  }
  return out;
}

Tensor rotate_quarter(const Tensor& image, int quarter_turns) {
  const std::size_t n = image.dim(0);
  if (image.rank() != 2 || image.dim(1) != n) throw DimensionError("rotate: image must be square");
  Tensor out = image;
  for (int q = 0; q < ((quarter_turns % 4) + 4) % 4; ++q) {
    Tensor next({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) next.at(n - 1 - j, i) = out.at(i, j);
    }
    out = std::move(next);
  }
  return out;
}

std::size_t ImageSource::available(std::size_t class_id) const {
  return images_[classes_.at(class_id).first].size();
}

std::size_t ImageSource::example_count() const {
  std::size_t n = 0;
  for (const auto& c : images_) n += c.size();
  return n;
}

Tensor ImageSource::draw(std::size_t class_id, std::size_t count, Rng& rng) const {
  const auto [base, turns] = classes_.at(class_id);
  const auto& pool = images_[base];
  if (count > pool.size()) {
    throw SamplerError("class " + std::to_string(class_id) + " has " + std::to_string(pool.size()) +
                       " images, " + std::to_string(count) + " requested");
  }
  std::vector<Tensor> picked;
  for (auto i : rng.choose(pool.size(), count)) picked.push_back(rotate_quarter(pool[i], turns));
  return stack(picked);
}

std::unique_ptr<ImageSource> load_omniglot(const std::filesystem::path& dir,
                                           std::size_t image_size, bool rotations,
                                           const SplitSizes& sizes, std::uint64_t seed) {
  const auto manifest = dir / "manifest.csv";
  std::ifstream in(manifest);
  if (!in) throw LoadError("cannot open " + manifest.string());
  if (image_size == 0) throw ConfigError("data.omniglot.image_size must be positive");
  auto src = std::unique_ptr<ImageSource>(new ImageSource());
  src->size_ = image_size;
  std::map<std::string, std::size_t> class_index;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos || comma == 0 || comma + 1 == line.size()) {
      throw LoadError(manifest.string() + " row " + std::to_string(row) +
                      ": expected 'class_id,relative_path'");
    }
    const std::string cls = line.substr(0, comma), rel = line.substr(comma + 1);
    if (row == 1 && cls == "class_id") continue;
    Tensor img;
    try {
      img = csnt::load(dir / rel);
    } catch (const Error& e) {
      throw LoadError(manifest.string() + " row " + std::to_string(row) + ": " + e.what());
    }
    if (img.rank() != 2) {
      throw LoadError(manifest.string() + " row " + std::to_string(row) + ": image must be [H x W], got " +
                      shape_str(img.shape()));
    }
    auto [it, fresh] = class_index.try_emplace(cls, src->images_.size());
    if (fresh) src->images_.emplace_back();
    src->images_[it->second].push_back(resize_bilinear(img, image_size));
  }
  const std::size_t base = src->images_.size();
  if (sizes.total() > base) {
    throw LoadError(manifest.string() + ": " + std::to_string(base) + " classes, split needs " +
                    std::to_string(sizes.total()));
  }
  src->partition(sizes, seed);
  for (std::size_t c = 0; c < base; ++c) src->classes_.push_back({c, 0});
  if (rotations) {
    std::vector<std::size_t> extra;
    for (auto c : src->splits_[0]) {
      for (int q = 1; q <= 3; ++q) {
        extra.push_back(src->classes_.size());
        src->classes_.push_back({c, q});
      }
    }
    src->splits_[0].insert(src->splits_[0].end(), extra.begin(), extra.end());
  }
  return src;
}

Episode sample_episode(const TaskSource& source, Split split, std::size_t ways, std::size_t shots,
                       std::size_t queries, Rng& rng) {
  const auto& pool = source.classes(split);
  if (ways < 2) throw SamplerError("episodes need at least 2 ways");
  if (shots == 0) throw SamplerError("episodes need at least 1 shot");
  if (pool.size() < ways) {
    throw SamplerError(to_string(split) + " split has " + std::to_string(pool.size()) +
                       " classes, " + std::to_string(ways) + "-way episodes need " +
                       std::to_string(ways - pool.size()) + " more");
  }
  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  std::vector<std::size_t> chosen;
  for (auto i : rng.choose(pool.size(), ways)) chosen.push_back(pool[i]);
  std::vector<std::size_t> label(ways);
  std::iota(label.begin(), label.end(), 0);
  rng.shuffle(label);
  std::vector<std::size_t> per_class(ways, queries / ways);
  for (auto i : rng.choose(ways, queries % ways)) ++per_class[i];

  std::vector<Tensor> sx, qx;
  for (std::size_t c = 0; c < ways; ++c) {
    const std::size_t need = shots + per_class[c];
    if (source.available(chosen[c]) < need) {
      throw SamplerError("class " + std::to_string(chosen[c]) + " has " +
                         std::to_string(source.available(chosen[c])) + " examples, episode needs " +
                         std::to_string(need));
    }
    Tensor x = source.draw(chosen[c], need, rng);
    for (std::size_t i = 0; i < need; ++i) {
      Tensor row = x.slice_rows(i, i + 1);
      Shape s(row.shape().begin() + 1, row.shape().end());
      (i < shots ? sx : qx).push_back(row.reshaped(s));
      (i < shots ? ep.support_labels : ep.query_labels).push_back(label[c]);
    }
  }
  ep.support_x = stack(sx);
  ep.support_y = one_hot(ep.support_labels, ways);
  if (!qx.empty()) {
    ep.query_x = stack(qx);
    ep.query_y = one_hot(ep.query_labels, ways);
  }
  return ep;
}

std::unique_ptr<TaskSource> make_source(const Config& c) {
  SplitSizes sizes{c.get_size("data.train_classes"), c.get_size("data.val_classes"),
                   c.get_size("data.test_classes")};
  const auto seed = std::uint64_t(c.get_int("data.seed"));
  const std::string kind = c.get("data.source");
  if (kind == "gaussian") {
    return std::make_unique<GaussianSource>(sizes, c.get_size("data.gaussian.dim"),
                                            c.get_double("data.gaussian.noise"), seed);
  }
  if (kind == "cloze") {
    return std::make_unique<ClozeSource>(sizes, c.get_size("data.cloze.vocab"),
                                         c.get_size("data.cloze.length"),
                                         c.get_double("data.cloze.noise"), seed);
  }
  if (kind == "omniglot") {
    const std::string dir = c.get("data.omniglot.dir");
    if (dir.empty()) throw ConfigError("data.omniglot.dir is required for data.source = omniglot");
    return load_omniglot(dir, c.get_size("data.omniglot.image_size"),
                         c.get_bool("data.omniglot.rotations"), sizes, seed);
  }
  throw ConfigError("unknown data.source '" + kind + "' (expected gaussian|cloze|omniglot)");
}

double oracle_accuracy(const Episode& ep, InputKind kind) {
  const std::size_t n = ep.support_x.dim(0), m = ep.query_x.dim(0);
  const std::size_t f = ep.support_x.size() / n;
  std::size_t correct = 0;
  if (kind == InputKind::Sequence) {
    for (std::size_t j = 0; j < m; ++j) {
      std::size_t best = 0, best_score = 0;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t score = 0;
        for (std::size_t p = 0; p < f; ++p) score += ep.support_x[i * f + p] == ep.query_x[j * f + p];
        if (i == 0 || score > best_score) best = i, best_score = score;
      }
      correct += ep.support_labels[best] == ep.query_labels[j];
    }
  } else {
    // Class means of the description examples as prototypes.
    Tensor proto({ep.ways, f});
    std::vector<double> count(ep.ways, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < f; ++p) proto.at(ep.support_labels[i], p) += ep.support_x[i * f + p];
      count[ep.support_labels[i]] += 1.0;
    }
    for (std::size_t j = 0; j < m; ++j) {
      std::size_t best = 0;
      double best_d = 0.0;
      for (std::size_t c = 0; c < ep.ways; ++c) {
        double d = 0.0;
        for (std::size_t p = 0; p < f; ++p) {
          const double diff = ep.query_x[j * f + p] - proto.at(c, p) / count[c];
          d += diff * diff;
        }
        if (c == 0 || d < best_d) best = c, best_d = d;
      }
      correct += best == ep.query_labels[j];
    }
  }
  return m == 0 ? 0.0 : double(correct) / double(m);
}

}  // namespace csn

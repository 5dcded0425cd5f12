#pragma once

// Read side of the on-disk dataset produced by datagen. Frames are cached
// as 8-bit pixels after the first read.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "tba/datagen.hpp"
#include "tba/eval.hpp"
#include "tba/image_io.hpp"

namespace tba {

class Dataset {
 public:
  explicit Dataset(const std::filesystem::path& root) : root_(root), manifest_(datagen::load_manifest(root)) {}

  const datagen::DatasetManifest& manifest() const { return manifest_; }
  const std::filesystem::path& root() const { return root_; }
  int seq_len() const { return manifest_.data.seq_len; }
  int chunks_per_stream() const { return manifest_.data.chunks_per_stream; }

  int sequences(const std::string& split) const {
    auto it = manifest_.splits.find(split);
    if (it == manifest_.splits.end()) throw ValidationError("unknown split '" + split + "'");
    return it->second.sequences;
  }
  int streams(const std::string& split) const {
    const int n = sequences(split), c = chunks_per_stream();
    return (n + c - 1) / c;
  }
  // Sequence indices of one stream, in temporal order.
  std::vector<int> stream_sequences(const std::string& split, int stream) const {
    std::vector<int> out;
    const int n = sequences(split), c = chunks_per_stream();
    for (int s = stream * c; s < std::min(n, (stream + 1) * c); ++s) out.push_back(s);
    return out;
  }

  std::filesystem::path sequence_dir(const std::string& split, int index) const {
    return root_ / split / datagen::seq_dir_name(index);
  }

  std::vector<Tensor<float>> frames(const std::string& split, int index) {
    const auto& raw = cached(split, index);
    const int d = manifest_.channels, h = manifest_.height, w = manifest_.width;
    const std::size_t n = static_cast<std::size_t>(d) * h * w;
    std::vector<Tensor<float>> out;
    out.reserve(raw.size() / n);
    for (std::size_t f = 0; f * n < raw.size(); ++f) {
      Tensor<float> t({d, h, w});
      for (std::size_t p = 0; p < n; ++p) t[p] = raw[f * n + p] / 255.0f;
      out.push_back(std::move(t));
    }
    return out;
  }

  std::vector<TrackBox> ground_truth(const std::string& split, int index) const {
    const auto path = sequence_dir(split, index) / "gt.csv";
    if (!std::filesystem::exists(path)) throw IoError("missing ground truth " + path.string());
    return read_mot_csv(path);
  }

 private:
  const std::vector<std::uint8_t>& cached(const std::string& split, int index) {
    const auto key = std::make_pair(split, index);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    if (index < 0 || index >= sequences(split)) {
      throw ValidationError("sequence " + std::to_string(index) + " not in split " + split);
    }
    const auto dir = sequence_dir(split, index);
    if (!std::filesystem::is_directory(dir)) throw IoError("sequence not found: " + dir.string());
    std::vector<std::uint8_t> raw;
    for (int f = 0; f < seq_len(); ++f) {
      const Tensor<float> img = read_png(dir / datagen::frame_file_name(f));
      if (img.dim(0) != manifest_.channels || img.dim(1) != manifest_.height || img.dim(2) != manifest_.width) {
        throw ValidationError("frame " + (dir / datagen::frame_file_name(f)).string() + " has shape " +
                              shape_string(img.shape()) + ", manifest disagrees");
      }
      for (float v : img.values()) raw.push_back(quantize(v));
    }
    return cache_.emplace(key, std::move(raw)).first->second;
  }

  std::filesystem::path root_;
  datagen::DatasetManifest manifest_;
  std::map<std::pair<std::string, int>, std::vector<std::uint8_t>> cache_;
};

}  // namespace tba

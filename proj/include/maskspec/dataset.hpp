#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "maskspec/audio.hpp"
#include "maskspec/common.hpp"
#include "maskspec/manifest.hpp"

namespace maskspec {

/// Indexable spectrogram provider for the pretraining loop.
template <typename T>
struct SpectrogramSource {
  long count{0};
  std::function<Matrix<T>(long)> get;
};

/// In-memory source over fixed spectrogram matrices.
template <typename T>
SpectrogramSource<T> memory_source(std::vector<Matrix<T>> items) {
  auto store = std::make_shared<std::vector<Matrix<T>>>(std::move(items));
  SpectrogramSource<T> src;
  src.count = static_cast<long>(store->size());
  src.get = [store](long i) { return (*store)[i]; };
  return src;
}

/// Manifest-backed source. Clips are featurized once and cached; the cache
/// is shared across epochs.
template <typename T>
SpectrogramSource<T> manifest_source(const std::vector<ManifestRecord>& records,
                                     ChannelMode mode = ChannelMode::mean) {
  auto paths = std::make_shared<std::vector<std::string>>();
  for (const auto& r : records) paths->push_back(r.path);
  auto cache = std::make_shared<std::vector<Matrix<T>>>(paths->size());
  auto loaded = std::make_shared<std::vector<bool>>(paths->size(), false);
  SpectrogramSource<T> src;
  src.count = static_cast<long>(paths->size());
  src.get = [paths, cache, loaded, mode](long i) {
    if (!(*loaded)[i]) {
      const Spectrogram spec = compute_spectrogram((*paths)[i], mode);
      (*cache)[i] = spec.values.template cast<T>();
      (*loaded)[i] = true;
    }
    return (*cache)[i];
  };
  return src;
}

}  // namespace maskspec

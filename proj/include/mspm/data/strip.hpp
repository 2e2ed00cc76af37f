#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "mspm/data/image_io.hpp"
#include "mspm/data/patch_set.hpp"

namespace mspm {

// One ASCII 0 or 1 per line; blank trailing lines are ignored.
inline std::vector<Label> read_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open label file '" + path + "'");
  std::vector<Label> labels;
  std::string line;
  std::size_t lineno = 0, blank_run = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      ++blank_run;
      continue;
    }
    if (blank_run) throw InvalidArgument(path + ":" + std::to_string(lineno) + ": blank line inside label file");
    if (line == "0") {
      labels.push_back(Label::NonMatch);
    } else if (line == "1") {
      labels.push_back(Label::Match);
    } else {
      throw InvalidArgument(path + ":" + std::to_string(lineno) + ": expected 0 or 1, got '" + line + "'");
    }
  }
  return labels;
}

// Slices a strip image whose rows are pairs laid out side by side: columns
// [0, p) hold modality A, [p, 2p) modality B, each row band p pixels tall.
// Labels come from `labels_path`, or from "<path>.labels" when that exists.
inline PatchPairSet import_strip(const std::string& path, std::optional<std::string> labels_path = std::nullopt,
                                 int channels = 1, int patch = 64) {
  if (channels != 1 && channels != 3) throw InvalidArgument("strip import supports 1 or 3 channels");
  Image img = read_image(path);
  if (channels == 1) {
    img = to_gray(img);
  } else if (img.channels != 3) {
    throw InvalidArgument("strip '" + path + "' has no color channels");
  }
  if (img.width != 2 * patch || img.height % patch != 0 || img.height == 0) {
    throw InvalidArgument("strip '" + path + "' is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          "; expected width " + std::to_string(2 * patch) + " and height a multiple of " +
                          std::to_string(patch));
  }
  if (!labels_path && std::filesystem::exists(path + ".labels")) labels_path = path + ".labels";
  PatchPairSet set;
  set.height = patch;
  set.width = patch;
  set.channels = channels;
  const int rows = img.height / patch;
  for (int r = 0; r < rows; ++r) {
    PatchPair pair;
    for (int y = 0; y < patch; ++y) {
      for (int x = 0; x < patch; ++x) {
        for (int c = 0; c < channels; ++c) pair.a.push_back(img.at(r * patch + y, x, c));
      }
      for (int x = 0; x < patch; ++x) {
        for (int c = 0; c < channels; ++c) pair.b.push_back(img.at(r * patch + y, patch + x, c));
      }
    }
    set.pairs.push_back(std::move(pair));
  }
  if (labels_path) {
    const auto labels = read_labels(*labels_path);
    if (labels.size() != static_cast<std::size_t>(rows)) {
      throw InvalidArgument("label file '" + *labels_path + "' has " + std::to_string(labels.size()) +
                            " entries for " + std::to_string(rows) + " pairs");
    }
    set.labeled = true;
    for (int r = 0; r < rows; ++r) set.pairs[r].label = labels[r];
  }
  return set;
}

}  // namespace mspm

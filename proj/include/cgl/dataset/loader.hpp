// Copyright 2026 the cgl authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "cgl/core/tensor.hpp"
#include "cgl/dataset/manifest.hpp"

namespace cgl {

// PNG -> float CHW in [0,1]
template <class S>
Tensor<S> image_to_tensor(const ImageU8& img) {
  Tensor<S> t(Shape{3, img.height, img.width});
  const int64_t hw = static_cast<int64_t>(img.height) * img.width;
  for (int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) t[c * hw + p] = static_cast<S>(img.rgb[p * 3 + c] / 255.0);
  return t;
}

template <class S>
ImageU8 tensor_to_image(const Tensor<S>& t) {
  if (t.ndim() != 3 || t.shape[0] != 3) throw std::runtime_error("tensor_to_image: expect [3,H,W]");
  ImageU8 img;
  img.height = t.shape[1];
  img.width = t.shape[2];
  img.rgb.resize(static_cast<size_t>(img.height) * img.width * 3);
  const int64_t hw = static_cast<int64_t>(img.height) * img.width;
  for (int64_t p = 0; p < hw; ++p)
    for (int c = 0; c < 3; ++c) {
      double v = static_cast<double>(t[c * hw + p]);
      v = std::min(1.0, std::max(0.0, v));
      img.rgb[p * 3 + c] = static_cast<uint8_t>(std::lround(v * 255.0));
    }
  return img;
}

// Stacks all manifest images into one [B,3,H,W] tensor (datasets here are
// small enough to hold in memory).
template <class S>
Tensor<S> load_images(const DatasetManifest& m) {
  if (m.records.empty()) throw std::runtime_error("load_images: empty manifest");
  ImageU8 first = read_png_rgb8(m.resolve(m.records[0]));
  const int H = first.height, W = first.width;
  Tensor<S> out(Shape{static_cast<int>(m.records.size()), 3, H, W});
  const int64_t stride = 3LL * H * W;
  for (size_t i = 0; i < m.records.size(); ++i) {
    ImageU8 img = i == 0 ? first : read_png_rgb8(m.resolve(m.records[i]));
    if (img.height != H || img.width != W)
      throw std::runtime_error("load_images: inconsistent size at " + m.records[i].path);
    Tensor<S> t = image_to_tensor<S>(img);
    std::copy(t.buf->begin(), t.buf->end(), out.buf->begin() + i * stride);
  }
  return out;
}

template <class S>
Tensor<S> slice_batch(const Tensor<S>& all, const std::vector<int>& idx) {
  Shape sh = all.shape;
  const int64_t stride = all.size() / sh[0];
  sh[0] = static_cast<int>(idx.size());
  Tensor<S> out(sh);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(all.buf->begin() + idx[i] * stride, all.buf->begin() + (idx[i] + 1) * stride,
              out.buf->begin() + i * stride);
  return out;
}

}  // namespace cgl

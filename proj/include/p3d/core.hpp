#pragma once

#include "p3d/tensor.hpp"

namespace p3d {

// Reversible reinterpretations of a (B, C, F, H, W) video tensor. Factorized
// layers run their 2D piece on the spatial-batch view and their 1D piece on
// the temporal-batch view; attention flattens H*W into one token axis.
enum class ViewKind {
    spatial_batch,   // (B*F, C, H, W)      element (b,c,f,y,x) -> (b*F + f, c, y, x)
    temporal_batch,  // (B*H*W, C, F)       element (b,c,f,y,x) -> (b*H*W + y*W + x, c, f)
    spatial_flat,    // (B, C, F, H*W)      pure reshape
};

struct AxisView {
    ViewKind kind;
    Shape origin_shape;  // the (B,C,F,H,W) this view came from
    Tensor data;
};

// All three throw ShapeError unless the input is rank 5 with positive dims.
AxisView to_spatial_batch(const Tensor& video);
AxisView to_temporal_batch(const Tensor& video);
AxisView flatten_spatial(const Tensor& video);

// Inverse of the view's own transform; the view's data may have been replaced
// by same-shaped results in the meantime. Round-trips are bit-exact.
Tensor restore_video(const AxisView& view);

// Raw kernels used by both the views above and the autodiff wrappers.
// dst must already have the target shape.
void scatter_spatial_batch(const Tensor& video, Tensor& dst);
void gather_spatial_batch(const Tensor& sb, const Shape& origin, Tensor& dst);
void scatter_temporal_batch(const Tensor& video, Tensor& dst);
void gather_temporal_batch(const Tensor& tb, const Shape& origin, Tensor& dst);

}  // namespace p3d

#include "p3d/core.hpp"

namespace p3d {

namespace {

void require_video(const Tensor& t, const char* who) {
    check_rank(t, 5, who);
    numel_of(t.shape);  // rejects non-positive dims
}

}  // namespace

void scatter_spatial_batch(const Tensor& video, Tensor& dst) {
    const int B = video.dim(0), C = video.dim(1), F = video.dim(2), H = video.dim(3), W = video.dim(4);
    const int64_t plane = static_cast<int64_t>(H) * W;
    // src index (b,c,f,y,x); dst index (b*F+f, c, y, x)
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f) {
                const double* s = video.ptr() + (((static_cast<int64_t>(b) * C + c) * F + f) * plane);
                double* d = dst.ptr() + (((static_cast<int64_t>(b) * F + f) * C + c) * plane);
                for (int64_t i = 0; i < plane; ++i) d[i] = s[i];
            }
}

void gather_spatial_batch(const Tensor& sb, const Shape& origin, Tensor& dst) {
    const int B = origin[0], C = origin[1], F = origin[2], H = origin[3], W = origin[4];
    const int64_t plane = static_cast<int64_t>(H) * W;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f) {
                const double* s = sb.ptr() + (((static_cast<int64_t>(b) * F + f) * C + c) * plane);
                double* d = dst.ptr() + (((static_cast<int64_t>(b) * C + c) * F + f) * plane);
                for (int64_t i = 0; i < plane; ++i) d[i] = s[i];
            }
}

void scatter_temporal_batch(const Tensor& video, Tensor& dst) {
    const int B = video.dim(0), C = video.dim(1), F = video.dim(2), H = video.dim(3), W = video.dim(4);
    const int64_t plane = static_cast<int64_t>(H) * W;
    // src index (b,c,f,y,x); dst index (b*H*W + y*W + x, c, f)
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f) {
                const double* s = video.ptr() + (((static_cast<int64_t>(b) * C + c) * F + f) * plane);
                const int64_t base = static_cast<int64_t>(b) * plane;
                for (int64_t i = 0; i < plane; ++i)
                    dst.ptr()[((base + i) * C + c) * F + f] = s[i];
            }
}

void gather_temporal_batch(const Tensor& tb, const Shape& origin, Tensor& dst) {
    const int B = origin[0], C = origin[1], F = origin[2], H = origin[3], W = origin[4];
    const int64_t plane = static_cast<int64_t>(H) * W;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int f = 0; f < F; ++f) {
                double* d = dst.ptr() + (((static_cast<int64_t>(b) * C + c) * F + f) * plane);
                const int64_t base = static_cast<int64_t>(b) * plane;
                for (int64_t i = 0; i < plane; ++i)
                    d[i] = tb.ptr()[((base + i) * C + c) * F + f];
            }
}

AxisView to_spatial_batch(const Tensor& video) {
    require_video(video, "to_spatial_batch");
    AxisView v{ViewKind::spatial_batch, video.shape,
               Tensor({video.dim(0) * video.dim(2), video.dim(1), video.dim(3), video.dim(4)})};
    scatter_spatial_batch(video, v.data);
    return v;
}

AxisView to_temporal_batch(const Tensor& video) {
    require_video(video, "to_temporal_batch");
    AxisView v{ViewKind::temporal_batch, video.shape,
               Tensor({video.dim(0) * video.dim(3) * video.dim(4), video.dim(1), video.dim(2)})};
    scatter_temporal_batch(video, v.data);
    return v;
}

AxisView flatten_spatial(const Tensor& video) {
    require_video(video, "flatten_spatial");
    AxisView v{ViewKind::spatial_flat, video.shape, video};
    v.data.shape = {video.dim(0), video.dim(1), video.dim(2), video.dim(3) * video.dim(4)};
    return v;
}

Tensor restore_video(const AxisView& view) {
    const Shape& o = view.origin_shape;
    if (o.size() != 5) throw ShapeError("restore_video: origin_shape must be rank 5");
    Tensor out(o);
    switch (view.kind) {
        case ViewKind::spatial_batch: {
            Shape want{o[0] * o[2], o[1], o[3], o[4]};
            if (view.data.shape != want)
                throw ShapeError("restore_video: data shape " + shape_str(view.data.shape) +
                                 " does not match spatial-batch of " + shape_str(o));
            gather_spatial_batch(view.data, o, out);
            break;
        }
        case ViewKind::temporal_batch: {
            Shape want{o[0] * o[3] * o[4], o[1], o[2]};
            if (view.data.shape != want)
                throw ShapeError("restore_video: data shape " + shape_str(view.data.shape) +
                                 " does not match temporal-batch of " + shape_str(o));
            gather_temporal_batch(view.data, o, out);
            break;
        }
        case ViewKind::spatial_flat: {
            Shape want{o[0], o[1], o[2], o[3] * o[4]};
            if (view.data.shape != want)
                throw ShapeError("restore_video: data shape " + shape_str(view.data.shape) +
                                 " does not match spatial-flat of " + shape_str(o));
            out.data = view.data.data;
            break;
        }
    }
    return out;
}

}  // namespace p3d

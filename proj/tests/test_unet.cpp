#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "p3d/checkpoint.hpp"
#include "p3d/gradcheck.hpp"
#include "p3d/unet.hpp"

using namespace p3d;
using ad::Var;

namespace {

UNetConfig tiny_image_cfg() {
    UNetConfig c;
    c.mode = ModelMode::image2d;
    c.in_channels = 3;
    c.out_channels = 3;
    c.base_channels = 8;
    c.channel_mult = {1, 2};
    c.attn_levels = {1};
    c.heads = 2;
    c.cond_input_dim = 6;
    c.cond_dim = 8;
    c.cond_tokens = 2;
    c.emb_dim = 8;
    c.max_frames = 8;
    return c;
}

// a fresh model predicts zeros by construction; give the head real weights so
// equality tests compare live outputs
void liven(UNetModel& m, Rng& rng) {
    rng.fill_normal(m.out_conv.spatial.W->value, 0.3);
    rng.fill_normal(m.out_conv.spatial.b->value, 0.3);
}

Tensor frame_of(const Tensor& video, int f) {
    const int B = video.dim(0), C = video.dim(1), H = video.dim(3), W = video.dim(4);
    Tensor out({B, C, H, W});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x)
                    out[((static_cast<int64_t>(b) * C + c) * H + y) * W + x] =
                        video[(((static_cast<int64_t>(b) * C + c) * video.dim(2) + f) * H + y) *
                                  W +
                              x];
    return out;
}

}  // namespace

TEST_CASE("bad configurations are rejected") {
    Rng rng(1);
    auto expect_bad = [&](auto&& tweak) {
        UNetConfig c = tiny_image_cfg();
        tweak(c);
        CHECK_THROWS_AS(UNetModel(c, rng), ConfigError);
    };
    expect_bad([](UNetConfig& c) { c.channel_mult = {2, 1}; });
    expect_bad([](UNetConfig& c) { c.channel_mult = {}; });
    expect_bad([](UNetConfig& c) { c.attn_levels = {2}; });
    expect_bad([](UNetConfig& c) { c.heads = 3; });
    expect_bad([](UNetConfig& c) { c.emb_dim = 7; });
    expect_bad([](UNetConfig& c) { c.temporal_kernel = 2; });
    expect_bad([](UNetConfig& c) { c.cond_input_dim = 4, c.cond_dim = 0; });
}

TEST_CASE("image forward produces finite output of the input shape") {
    Rng rng(2);
    UNetModel model(tiny_image_cfg(), rng);
    liven(model, rng);

    Tensor x = rng.normal_tensor({2, 3, 8, 8});
    Var cond = ad::constant(rng.normal_tensor({2, 6}));
    Tensor y = model.forward(ad::constant(x), {10.0, 500.0}, {}, &cond)->value;
    CHECK(y.shape == Shape{2, 3, 8, 8});
    CHECK(all_finite(y));
    CHECK(max_abs(y) > 0.0);

    SUBCASE("conditioning is required, fps is rejected") {
        CHECK_THROWS_AS(model.forward(ad::constant(x), {1.0, 2.0}, {}, nullptr),
                        MissingConditionError);
        CHECK_THROWS_AS(model.forward(ad::constant(x), {1.0, 2.0}, {24.0, 24.0}, &cond),
                        ConfigError);
        CHECK_THROWS_AS(model.forward(ad::constant(x), {1.0}, {}, &cond), ShapeError);
    }
    SUBCASE("unconditional model rejects conditioning") {
        UNetConfig c = tiny_image_cfg();
        c.cond_input_dim = 0;
        UNetModel plain(c, rng);
        CHECK_THROWS_AS(plain.forward(ad::constant(x), {1.0, 2.0}, {}, &cond), ConfigError);
    }
    SUBCASE("spatial size must survive the downsampling chain") {
        Tensor odd = rng.normal_tensor({1, 3, 5, 5});
        Var c1 = ad::constant(rng.normal_tensor({1, 6}));
        CHECK_THROWS_AS(model.forward(ad::constant(odd), {1.0}, {}, &c1), ConfigError);
    }
}

TEST_CASE("inflated video net equals the image net run frame by frame") {
    for (uint64_t seed : {7u, 8u, 9u}) {
        Rng rng(seed);
        UNetModel image(tiny_image_cfg(), rng);
        liven(image, rng);
        UNetModel video = inflate_to_video(image, rng);

        const int F = 4;
        Tensor x = rng.normal_tensor({1, 3, F, 8, 8});
        Tensor ce = rng.normal_tensor({1, 6});
        Var cond = ad::constant(ce);
        const double t = 321.0;

        Tensor vy = video.forward(ad::constant(x), {t}, {24.0}, &cond)->value;
        for (int f = 0; f < F; ++f) {
            Tensor iy = image.forward(ad::constant(frame_of(x, f)), {t}, {}, &cond)->value;
            CHECK(max_abs_diff(frame_of(vy, f), iy) == 0.0);
        }

        // the temporal attention branch contributes exactly nothing at birth
        Tensor probed =
            video.forward(ad::constant(x), {t}, {24.0}, &cond, /*skip_temporal_attn=*/true)->value;
        CHECK(max_abs_diff(probed, vy) == 0.0);

        // and the fps input is silent until trained
        Tensor other_fps = video.forward(ad::constant(x), {t}, {1.0}, &cond)->value;
        CHECK(max_abs_diff(other_fps, vy) == 0.0);
    }
}

TEST_CASE("video mode demands fps conditioning") {
    Rng rng(11);
    UNetModel image(tiny_image_cfg(), rng);
    UNetModel video = inflate_to_video(image, rng);
    Tensor x = rng.normal_tensor({1, 3, 2, 8, 8});
    Var cond = ad::constant(rng.normal_tensor({1, 6}));
    CHECK_THROWS_AS(video.forward(ad::constant(x), {1.0}, {}, &cond), MissingConditionError);

    SUBCASE("and bounds the clip length") {
        Tensor long_clip = rng.normal_tensor({1, 3, 9, 8, 8});  // max_frames is 8
        CHECK_THROWS_AS(video.forward(ad::constant(long_clip), {1.0}, {24.0}, &cond), ConfigError);
    }
    SUBCASE("a video model cannot be inflated again") {
        CHECK_THROWS_AS(inflate_to_video(video, rng), ConfigError);
    }
}

TEST_CASE("inflation adds exactly the temporal parameters") {
    Rng rng(12);
    UNetConfig cfg = tiny_image_cfg();
    cfg.max_frames = 76;
    UNetModel image(cfg, rng);
    UNetModel video = inflate_to_video(image, rng);

    // closed form for the additions, mirrored from the block layout
    const int kt = cfg.temporal_kernel;
    auto conv_site = [&](int c) { return static_cast<int64_t>(c) * c * kt + c; };
    auto attn_site = [&](int c) {
        return 4 * (static_cast<int64_t>(c) * c + c) + 2 * c +
               static_cast<int64_t>(cfg.max_frames) * c;
    };
    int64_t want = 2 * (static_cast<int64_t>(cfg.emb_dim) * cfg.emb_dim + cfg.emb_dim);  // fps
    want += conv_site(cfg.base_channels);  // stem
    int prev = cfg.base_channels;
    for (int l = 0; l < cfg.levels(); ++l) {
        const int ch = cfg.level_channels(l);
        want += 2 * conv_site(ch);
        if (prev != ch) want += conv_site(ch);  // down skip
        if (cfg.has_attn(l)) want += attn_site(ch);
        prev = ch;
    }
    const int mid = cfg.level_channels(cfg.levels() - 1);
    want += 4 * conv_site(mid) + attn_site(mid);
    for (int l = 0; l < cfg.levels(); ++l) {
        const int ch = cfg.level_channels(l);
        want += 3 * conv_site(ch);  // conv1, conv2, and the always-present skip
        if (cfg.has_attn(l)) want += attn_site(ch);
    }
    want += conv_site(cfg.out_channels);

    CHECK(video.param_count() - image.param_count() == want);

    // every image tensor survives with its name and shape
    ParamMap vs = video.params();
    for (const auto& [name, var] : image.params().items) {
        ad::Var twin = vs.find(name);
        REQUIRE(twin != nullptr);
        CHECK(max_abs_diff(twin->value, var->value) == 0.0);
    }
}

TEST_CASE("checkpoints round trip bit for bit") {
    Rng rng(13);
    UNetConfig cfg = tiny_image_cfg();
    UNetModel image(cfg, rng);
    liven(image, rng);
    UNetModel video = inflate_to_video(image, rng);

    const std::string path = "roundtrip_test.ckpt";
    nlohmann::json extra{{"stage", "unit-test"}, {"steps", 42}};
    save_checkpoint(video, path, extra);

    nlohmann::json got_extra;
    UNetModel loaded = load_checkpoint(path, &got_extra);
    CHECK(got_extra == extra);
    CHECK(config_to_json(loaded.cfg) == config_to_json(video.cfg));

    ParamMap a = video.params(), b = loaded.params();
    REQUIRE(a.items.size() == b.items.size());
    for (size_t i = 0; i < a.items.size(); ++i) {
        CHECK(a.items[i].first == b.items[i].first);
        CHECK(max_abs_diff(a.items[i].second->value, b.items[i].second->value) == 0.0);
    }

    Tensor x = rng.normal_tensor({1, 3, 3, 8, 8});
    Var cond = ad::constant(rng.normal_tensor({1, 6}));
    Tensor y1 = video.forward(ad::constant(x), {5.0}, {12.0}, &cond)->value;
    Tensor y2 = loaded.forward(ad::constant(x), {5.0}, {12.0}, &cond)->value;
    CHECK(max_abs_diff(y1, y2) == 0.0);

    SUBCASE("junk files are refused") {
        std::ofstream bad("junk_test.ckpt", std::ios::binary);
        bad << "not a checkpoint at all, sorry";
        bad.close();
        CHECK_THROWS_AS(load_checkpoint("junk_test.ckpt"), ConfigError);
        std::remove("junk_test.ckpt");
    }
    std::remove(path.c_str());
}

TEST_CASE("widening the stem is invisible when the new channels are zero") {
    Rng rng(14);
    UNetConfig cfg = tiny_image_cfg();
    UNetModel image(cfg, rng);
    liven(image, rng);
    UNetModel video = inflate_to_video(image, rng);

    Tensor x = rng.normal_tensor({1, 3, 3, 8, 8});
    Var cond = ad::constant(rng.normal_tensor({1, 6}));
    Tensor before = video.forward(ad::constant(x), {5.0}, {10.0}, &cond)->value;

    const int64_t count_before = video.param_count();
    widen_input_channels(video, 7);
    const int64_t delta = video.param_count() - count_before;
    CHECK(delta == static_cast<int64_t>(cfg.base_channels) * 4 * 3 * 3);

    Tensor wide({1, 7, 3, 8, 8});
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 3 * 8 * 8; ++i)
            wide.data[static_cast<int64_t>(c) * 3 * 8 * 8 + i] =
                x.data[static_cast<int64_t>(c) * 3 * 8 * 8 + i];
    Tensor after = video.forward(ad::constant(wide), {5.0}, {10.0}, &cond)->value;
    CHECK(max_abs_diff(before, after) == 0.0);

    SUBCASE("shrinking is refused") {
        CHECK_THROWS_AS(widen_input_channels(video, 5), ConfigError);
    }
}

TEST_CASE("image U-Net gradients match finite differences") {
    Rng rng(15);
    UNetConfig cfg;
    cfg.in_channels = 2;
    cfg.out_channels = 2;
    cfg.base_channels = 4;
    cfg.channel_mult = {1};
    cfg.attn_levels = {0};
    cfg.heads = 1;
    cfg.cond_input_dim = 3;
    cfg.cond_dim = 4;
    cfg.cond_tokens = 2;
    cfg.emb_dim = 6;
    UNetModel model(cfg, rng);
    liven(model, rng);

    Tensor xv = rng.normal_tensor({1, 2, 4, 4});
    for (double& v : xv.data) v *= 2.0;
    Var x = ad::parameter(xv, "input");
    Var cond = ad::parameter(rng.normal_tensor({1, 3}), "cond");
    Tensor target = rng.normal_tensor({1, 2, 4, 4});

    ParamMap pm = model.params();
    pm.add("input", x);
    pm.add("cond", cond);
    auto report = check_gradients(
        [&] { return ad::mse(model.forward(x, {7.0}, {}, &cond), target); }, pm.items);
    INFO("worst: ", report.worst_param);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("video U-Net gradients match finite differences") {
    Rng rng(16);
    UNetConfig cfg;
    cfg.in_channels = 2;
    cfg.out_channels = 2;
    cfg.base_channels = 4;
    cfg.channel_mult = {1};
    cfg.attn_levels = {};
    cfg.heads = 1;
    cfg.cond_input_dim = 0;
    cfg.emb_dim = 6;
    cfg.max_frames = 4;
    cfg.mode = ModelMode::video3d;
    UNetModel model(cfg, rng);
    liven(model, rng);
    // wake the branches that are born silent
    rng.fill_normal(model.mid_attn.attn_t.proj.W->value, 0.4);
    rng.fill_normal(model.mid_attn.pos_table->value, 0.4);

    Tensor xv = rng.normal_tensor({1, 2, 3, 2, 3});
    for (double& v : xv.data) v *= 2.0;
    Var x = ad::parameter(xv, "input");
    Tensor target = rng.normal_tensor({1, 2, 3, 2, 3});

    ParamMap pm = model.params();
    pm.add("input", x);
    auto report = check_gradients(
        [&] { return ad::mse(model.forward(x, {7.0}, {20.0}, nullptr), target); }, pm.items);
    INFO("worst: ", report.worst_param);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("step and fps inputs both steer a live video net") {
    Rng rng(17);
    UNetConfig cfg = tiny_image_cfg();
    cfg.mode = ModelMode::video3d;
    cfg.cond_input_dim = 0;
    UNetModel model(cfg, rng);  // scratch video net: fps path live by default
    liven(model, rng);

    Tensor x = rng.normal_tensor({1, 3, 2, 8, 8});
    Tensor base = model.forward(ad::constant(x), {100.0}, {5.0}, nullptr)->value;
    Tensor fps_moved = model.forward(ad::constant(x), {100.0}, {25.0}, nullptr)->value;
    Tensor t_moved = model.forward(ad::constant(x), {900.0}, {5.0}, nullptr)->value;
    CHECK(max_abs_diff(base, fps_moved) > 1e-8);
    CHECK(max_abs_diff(base, t_moved) > 1e-8);
}

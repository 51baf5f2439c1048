#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include <nfldm/latent_ae.hpp>

#include "helpers.hpp"

using namespace nfldm;
using nfldm_test::fd_check;
using nfldm_test::project_scalar;
using nfldm_test::rand_tensor;

TEST_CASE("unit-gaussian kl hand values") {
    SECTION("standard normal has zero divergence") {
        CHECK(kl_unit_gaussian(Tensor::zeros({4}), Tensor::zeros({4})).item() == 0.f);
    }
    SECTION("mean shift of 1 in one dim costs one half") {
        Tensor mu = Tensor::from_data({2}, {1.f, 0.f});
        CHECK(kl_unit_gaussian(mu, Tensor::zeros({2})).item() == Catch::Approx(0.5f));
    }
    SECTION("doubled variance") {
        // lv = ln 4: 0.5 * (4 - 1 - ln 4)
        Tensor lv = Tensor::from_data({1}, {std::log(4.f)});
        CHECK(kl_unit_gaussian(Tensor::zeros({1}), lv).item() ==
              Catch::Approx(0.5f * (4.f - 1.f - std::log(4.f))).epsilon(1e-5));
    }
    SECTION("divergence is nonnegative and finite under extreme logvar") {
        Rng rng(1, 1);
        for (int t = 0; t < 50; ++t) {
            Tensor mu = Tensor::uniform({8}, rng, -3.f, 3.f);
            Tensor lv = Tensor::uniform({8}, rng, -100.f, 100.f);
            float v = kl_unit_gaussian(mu, lv).item();
            CHECK(v >= 0.f);
            CHECK(std::isfinite(v));
        }
    }
}

TEST_CASE("reparameterized draw and its gradient") {
    Tensor mu = Tensor::from_data({3}, {1.f, -2.f, 0.5f});
    Tensor lv = Tensor::from_data({3}, {0.f, std::log(4.f), -1.f});
    Tensor eps = Tensor::from_data({3}, {1.f, -1.f, 2.f});
    Tensor z = reparam_gaussian(mu, lv, eps);
    CHECK(z.data()[0] == Catch::Approx(2.f));        // 1 + 1*1
    CHECK(z.data()[1] == Catch::Approx(-4.f));       // -2 + 2*(-1)
    CHECK(z.data()[2] == Catch::Approx(0.5f + 2.f * std::exp(-0.5f)).epsilon(1e-5));

    auto mu2 = rand_tensor({6}, 12);
    auto lv2 = rand_tensor({6}, 13);
    auto eps2 = rand_tensor({6}, 14);
    auto r = fd_check({mu2, lv2}, [&] {
        return nfldm::add(project_scalar(reparam_gaussian(mu2, lv2, eps2), 1),
                          kl_unit_gaussian(mu2, lv2));
    });
    CHECK(r.max_err < 1e-4);
}

static VectorQuantizer make_vq(ParamStore& ps, std::vector<float> rows, int dim) {
    int k = int(rows.size()) / dim;
    VectorQuantizer vq(ps, "vq", k, dim);
    vq.codebook.data() = std::move(rows);
    return vq;
}

TEST_CASE("quantizer picks nearest rows, lowest index on ties") {
    ParamStore ps(3);
    // rows: (0,0), (1,0), (1,0) duplicate, (0,2)
    auto vq = make_vq(ps, {0, 0, 1, 0, 1, 0, 0, 2}, 2);
    Tensor z = Tensor::from_data({2, 3}, {0.1f, 0.9f, 0.f,     // x coords
                                          0.f, 0.1f, 1.1f});   // y coords
    auto idx = vq.nearest(z);
    CHECK(idx[0] == 0);
    CHECK(idx[1] == 1);  // the duplicate row 2 never wins
    CHECK(idx[2] == 3);
    CHECK_THROWS(vq.nearest(Tensor::zeros({3, 2})));
}

TEST_CASE("quantize output carries codebook values with pass-through gradient") {
    ParamStore ps(4);
    auto vq = make_vq(ps, {0, 0, 2, 2}, 2);
    Tensor z = Tensor::from_data({2, 2}, {1.8f, 0.2f, 2.1f, -0.3f});
    z.set_requires_grad(true);
    auto q = vq(z);
    REQUIRE(q.idx == std::vector<int>({1, 0}));
    CHECK(q.quantized.data()[0] == 2.f);
    CHECK(q.quantized.data()[1] == 0.f);
    CHECK(q.quantized.data()[2] == 2.f);
    CHECK(q.quantized.data()[3] == 0.f);

    // straight-through: d sum(quantized) / dz = 1 everywhere
    backward(sum(q.quantized));
    for (float g : z.grad()) CHECK(g == 1.f);
    for (float g : vq.codebook.grad()) CHECK(g == 0.f);
    CHECK(vq.usage[0] == 1);
    CHECK(vq.usage[1] == 1);
}

TEST_CASE("quantizer loss splits into codebook and commitment pulls") {
    ParamStore ps(5);
    auto vq = make_vq(ps, {0, 0, 5, 5}, 2);
    Tensor z = Tensor::from_data({2, 1}, {1.f, 0.f});
    z.set_requires_grad(true);
    auto q = vq(z);
    // nearest is row 0; squared distance spread over 2 elements: mean 0.5
    CHECK(q.loss.item() == Catch::Approx(0.5f + 0.25f * 0.5f));
    backward(q.loss);
    // codebook term: d mean((e - sg z)^2) / de = 2 (e - z) / n
    CHECK(vq.codebook.grad()[0] == Catch::Approx(2.f * (0.f - 1.f) / 2.f));
    CHECK(vq.codebook.grad()[1] == 0.f);
    CHECK(vq.codebook.grad()[2] == 0.f);  // unselected row untouched
    // commitment term: 0.25 * 2 (z - e) / n
    CHECK(z.grad()[0] == Catch::Approx(0.25f * 2.f * 1.f / 2.f));
}

TEST_CASE("dead codebook rows reseed from the batch") {
    ParamStore ps(6);
    auto vq = make_vq(ps, {0, 0, 0.1f, 0, 40, 40, 50, 50}, 2);
    // both columns sit near rows 0/1; rows 2 and 3 stay dead
    Tensor z = Tensor::from_data({2, 2}, {0.01f, 0.09f, 0.f, 0.f});
    vq(z);
    CHECK(vq.usage[2] == 0);
    Rng rng(7, 7);
    int replaced = vq.reseed_dead(z, rng);
    CHECK(replaced == 2);
    for (int k : {2, 3}) {
        float cx = vq.codebook.data()[k * 2], cy = vq.codebook.data()[k * 2 + 1];
        bool is_col0 = cx == 0.01f && cy == 0.f;
        bool is_col1 = cx == 0.09f && cy == 0.f;
        CHECK((is_col0 || is_col1));
    }
    // live rows survive with their trained values
    CHECK(vq.codebook.data()[0] == 0.f);
    CHECK(vq.codebook.data()[2 * 1 + 0] == 0.1f);
    for (int64_t u : vq.usage) CHECK(u == 0);
}

static LatentAEConfig tiny_cfg() {
    LatentAEConfig cfg;
    cfg.vox_channels = 3;
    cfg.vox_z = 2;
    cfg.vox_x = 8;
    cfg.vox_y = 8;
    cfg.f_channels = 4;
    cfg.f_codes = 12;
    cfg.c_channels = 4;
    cfg.c_z = 1;
    cfg.c_codes = 16;
    cfg.g_dim = 6;
    cfg.width = 8;
    return cfg;
}

TEST_CASE("latent shapes through encode and decode") {
    ParamStore ps(8);
    LatentAEConfig cfg;  // full toy configuration
    LatentAE ae(ps, "lae", cfg);
    Rng rng(9, 9);
    Tensor vox = Tensor::uniform({9, 8, 16, 16}, rng, -1.f, 1.f);
    Tensor eps = Tensor::randn({16}, rng);

    auto codes = ae.encode(vox, eps);
    CHECK(codes.g.shape() == std::vector<int>({16}));
    CHECK(codes.c.shape() == std::vector<int>({8, 4, 4}));
    CHECK(codes.f.shape() == std::vector<int>({4, 16, 16}));
    CHECK(codes.mu.shape() == std::vector<int>({16}));
    CHECK(int(codes.c_idx.size()) == 2 * 4 * 4);
    CHECK(int(codes.f_idx.size()) == 16 * 16);
    for (int i : codes.c_idx) {
        CHECK(i >= 0);
        CHECK(i < 1024);
    }

    Tensor rec = ae.decode(codes.g, codes.c, codes.f);
    REQUIRE(rec.shape() == std::vector<int>({9, 8, 16, 16}));
    // density plane is nonnegative
    for (size_t i = 0; i < size_t(8) * 16 * 16; ++i) CHECK(rec.data()[i] >= 0.f);
    CHECK_THROWS(ae.encode(Tensor::zeros({9, 8, 16, 8}), eps));
}

TEST_CASE("deeper fine-code downsampling shrinks the codes") {
    ParamStore ps(81);
    LatentAEConfig cfg;
    cfg.f_down_stages = 1;
    LatentAE ae(ps, "lae", cfg);
    Rng rng(9, 9);
    auto codes = ae.encode(Tensor::uniform({9, 8, 16, 16}, rng, -1.f, 1.f), Tensor::randn({16}, rng));
    CHECK(codes.f.shape() == std::vector<int>({4, 8, 8}));
    CHECK(codes.c.shape() == std::vector<int>({8, 2, 2}));
    CHECK(ae.decode(codes.g, codes.c, codes.f).shape() == std::vector<int>({9, 8, 16, 16}));
}

TEST_CASE("smooth segments of the pass match finite differences") {
    ParamStore ps(10);
    auto cfg = tiny_cfg();
    LatentAE ae(ps, "lae", cfg);
    auto vox = rand_tensor({3, 2, 8, 8}, 303);
    auto eps = rand_tensor({6}, 304);

    SECTION("encoder to the gaussian head") {
        auto build = [&] {
            auto codes = ae.encode(vox, eps);
            return nfldm::add(kl_unit_gaussian(codes.mu, codes.logvar), project_scalar(codes.g, 3));
        };
        auto r = fd_check({vox, ae.enc_in.w, ae.enc_g.W}, build, 7e-3f, 1e-3f);
        CHECK(r.max_err < 1e-3);
    }
    SECTION("decoder from fixed latents") {
        auto g = rand_tensor({6}, 7);
        auto c = rand_tensor({4, 2, 2}, 8);
        auto f = rand_tensor({4, 8, 8}, 9);
        auto build = [&] { return project_scalar(ae.decode(g, c, f), 4); };
        auto r = fd_check({g, c, f, ae.dec_head.w, ae.dec_join.w}, build, 7e-3f, 1e-3f);
        CHECK(r.max_err < 1e-3);
    }
    SECTION("balanced loss away from its kinks") {
        auto pred = rand_tensor({3, 2, 8, 8}, 305);
        // keep every residual at least 0.3 from zero so L1 is locally linear
        Tensor target = Tensor::zeros(pred.shape());
        for (size_t i = 0; i < pred.numel(); ++i)
            target.data()[i] = pred.data()[i] + (i % 2 ? 0.4f : -0.4f);
        std::vector<uint8_t> mask(size_t(2) * 8 * 8, 0);
        for (size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;
        auto build = [&] { return balanced_voxel_l1(pred, target, mask).total; };
        auto r = fd_check({pred}, build);
        CHECK(r.max_err < 1e-4);
    }
}

TEST_CASE("surrogate gradient reaches every trainable tensor") {
    // the quantizer's pass-through estimator is deliberately not the true
    // local derivative, so this checks reach, not numeric agreement
    ParamStore ps(10);
    auto cfg = tiny_cfg();
    LatentAE ae(ps, "lae", cfg);
    auto vox = rand_tensor({3, 2, 8, 8}, 303);
    auto eps = rand_tensor({6}, 304);
    std::vector<uint8_t> mask(size_t(2) * 8 * 8, 0);
    for (size_t i = 0; i < mask.size(); i += 3) mask[i] = 1;

    auto codes = ae.encode(vox, eps);
    Tensor rec = ae.decode(codes.g, codes.c, codes.f);
    auto vrep = balanced_voxel_l1(rec, vox, mask);
    Tensor loss = nfldm::add(nfldm::add(vrep.total, mul_s(kl_unit_gaussian(codes.mu, codes.logvar), 2e-5f)),
                             codes.vq_loss);
    backward(loss);
    for (auto& [name, p] : ps.entries) {
        float asum = 0;
        for (float g : p.grad()) asum += std::abs(g);
        INFO(name);
        CHECK(asum > 0.f);
    }
}

TEST_CASE("balanced voxel loss averages filled and empty pools separately") {
    // 1 channel pair, 2x1x2 grid: cells {0,1,2,3}
    Tensor pred = Tensor::from_data({2, 2, 1, 2}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f, 7.f, 8.f});
    Tensor target = Tensor::zeros({2, 2, 1, 2});
    std::vector<uint8_t> mask = {1, 0, 0, 0};

    auto r = balanced_voxel_l1(pred, target, mask);
    // filled pool: cell 0 -> density |1|*2.5, feature |5|; mean over 1 cell * 2 ch
    CHECK(r.filled == Catch::Approx((2.5f * 1.f + 5.f) / 2.f));
    // empty pool: cells 1,2,3 -> density (2+3+4)*2.5, features 6+7+8
    CHECK(r.empty == Catch::Approx((2.5f * 9.f + 21.f) / 6.f));
    CHECK(r.total.item() == Catch::Approx(r.filled + r.empty));

    SECTION("degenerate all-filled mask") {
        std::vector<uint8_t> full(4, 1);
        auto rf = balanced_voxel_l1(pred, target, full);
        CHECK(rf.empty == 0.f);
        CHECK(rf.filled == Catch::Approx((2.5f * 10.f + 26.f) / 8.f));
    }
    SECTION("density weight is adjustable") {
        auto r1 = balanced_voxel_l1(pred, target, mask, 1.f);
        CHECK(r1.filled == Catch::Approx((1.f + 5.f) / 2.f));
    }
}

TEST_CASE("a tiny latent ae fits one field") {
    ParamStore ps(11);
    auto cfg = tiny_cfg();
    LatentAE ae(ps, "lae", cfg);
    Rng rng(12, 12);
    Tensor vox = Tensor::uniform({3, 2, 8, 8}, rng, 0.f, 1.f);
    std::vector<uint8_t> mask(size_t(2) * 8 * 8, 1);

    auto params = ps.all_params();
    AdamConfig ocfg;
    ocfg.lr = 2e-3f;
    Adam opt(ocfg);
    float first = -1, last = -1;
    for (int step = 0; step < 60; ++step) {
        Tensor eps = Tensor::randn({6}, rng);
        auto codes = ae.encode(vox, eps);
        Tensor rec = ae.decode(codes.g, codes.c, codes.f);
        auto vrep = balanced_voxel_l1(rec, vox, mask);
        Tensor loss = nfldm::add(nfldm::add(vrep.total, mul_s(kl_unit_gaussian(codes.mu, codes.logvar), 2e-5f)),
                                 codes.vq_loss);
        if (step == 0) first = loss.item();
        last = loss.item();
        Adam::zero_grads(params);
        backward(loss);
        opt.step(params);
    }
    CHECK(last < 0.5f * first);
}

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "recticast/errors.hpp"
#include "recticast/layers.hpp"
#include "recticast/optim.hpp"
#include "recticast/tensor_io.hpp"
#include "recticast/training.hpp"
#include "support/gradcheck.hpp"
#include "support/temp_dir.hpp"

using namespace recticast;

TEST_CASE("tensor basics") {
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
    t.at(1, 2) = 5.0f;
    CHECK(t.span()[5] == 5.0f);
    CHECK(t.reshaped({3, 2}).at(2, 1) == 5.0f);
    CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);

    auto s = t.slice0(1, 2);
    CHECK(s.shape() == Shape{1, 3});
    CHECK(s.span()[2] == 5.0f);

    std::vector<Tensor> parts{t, s};
    auto c = concat0<float>(parts);
    CHECK(c.shape() == Shape{3, 3});
    CHECK_THROWS_AS(concat0<float>(std::vector<Tensor>{t, Tensor::zeros({1, 2})}), DimensionError);

    Tensor bad = Tensor::zeros({2});
    bad.span()[1] = std::nanf("");
    CHECK_FALSE(bad.all_finite());
}

TEST_CASE("gemm matches a triple loop") {
    Rng rng(4);
    const int m = 3, n = 4, k = 5;
    std::vector<double> a(m * k), b(k * n), c(m * n, 0.0);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    gemm(false, false, m, n, k, 1.0, a.data(), k, b.data(), n, 0.0, c.data(), n);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double ref = 0;
            for (int p = 0; p < k; ++p) ref += a[i * k + p] * b[p * n + j];
            CHECK(c[i * n + j] == doctest::Approx(ref).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv2d matches a direct loop") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        const std::size_t cin = 1 + rng.below(3), cout = 1 + rng.below(3), h = 3 + rng.below(5), w = 3 + rng.below(5);
        const std::size_t k = rng.below(2) ? 3 : 1, pad = k / 2;
        auto x = testing::random_tensor({cin, h, w}, rng);
        auto kern = testing::random_tensor({cout, cin, k, k}, rng);
        auto bias = testing::random_tensor({cout}, rng);
        auto y = conv2d(x, kern, bias, pad);
        REQUIRE(y.shape() == Shape{cout, h, w});
        for (std::size_t o = 0; o < cout; ++o) {
            for (std::size_t r = 0; r < h; ++r) {
                for (std::size_t c = 0; c < w; ++c) {
                    double ref = bias[o];
                    for (std::size_t i = 0; i < cin; ++i) {
                        for (std::size_t dr = 0; dr < k; ++dr) {
                            for (std::size_t dc = 0; dc < k; ++dc) {
                                const auto rr = static_cast<long>(r + dr) - static_cast<long>(pad);
                                const auto cc = static_cast<long>(c + dc) - static_cast<long>(pad);
                                if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
                                ref += x.at(i, rr, cc) * kern.at(o, i, dr, dc);
                            }
                        }
                    }
                    CHECK(y.at(o, r, c) == doctest::Approx(ref).epsilon(1e-10));
                }
            }
        }
    }
}

TEST_CASE("conv2d identity kernel and channel mismatch") {
    Rng rng(1);
    auto x = testing::random_tensor({1, 4, 4}, rng);
    auto kern = BasicTensor<double>::zeros({1, 1, 3, 3});
    kern.at(0, 0, 1, 1) = 1.0;
    CHECK(conv2d(x, kern, BasicTensor<double>::zeros({1}), 1) == x);
    CHECK_THROWS_AS(conv2d(x, BasicTensor<double>::zeros({1, 2, 3, 3}), BasicTensor<double>::zeros({1}), 1),
                    DimensionError);
}

TEST_CASE("max_pool2d") {
    Tensor x = Tensor::zeros({1, 4, 4});
    x.at(0, 1, 2) = 1.0f;
    x.at(0, 3, 0) = 0.5f;
    auto y = max_pool2d(x, 2);
    CHECK(y.shape() == Shape{1, 2, 2});
    CHECK(y.at(0, 0, 1) == 1.0f);
    CHECK(y.at(0, 1, 0) == 0.5f);
    CHECK(y.at(0, 0, 0) == 0.0f);
    CHECK(max_pool2d(x, 1) == x);
    CHECK_THROWS_AS(max_pool2d(Tensor::zeros({1, 5, 4}), 2), DimensionError);
}

TEST_CASE("film_modulate") {
    BasicTensor<double> f = BasicTensor<double>::full({2, 1, 2}, 3.0);
    BasicTensor<double> zero = BasicTensor<double>::zeros({2});
    CHECK(film_modulate(f, zero, zero) == f);
    BasicTensor<double> scale({2}, std::vector<double>{1.0, -1.0});
    BasicTensor<double> shift({2}, std::vector<double>{0.5, 2.0});
    auto y = film_modulate(f, scale, shift);
    CHECK(y.at(0, 0, 1) == 6.5);
    CHECK(y.at(1, 0, 0) == 2.0);
}

TEST_CASE("channel attention with uniform gate") {
    ParamStore<double> store;
    Rng rng(3);
    ChannelAttention<double> att(store, "a", 4, 2, rng);
    for (auto& [name, var] : store.entries()) {
        auto v = var;
        v.mutable_value().fill(0.0);
    }
    Rng r2(5);
    auto x = testing::random_tensor({4, 3, 3}, r2);
    auto y = channel_attention(x, att);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.span()[i] == doctest::Approx(0.5 * x.span()[i]));
}

TEST_CASE("backward requires a finite scalar") {
    ag::Var<double> a(BasicTensor<double>::full({2}, 1.0), true);
    CHECK_THROWS_AS(ag::scale(a, 2.0).backward(), DimensionError);
    ag::Var<double> b(BasicTensor<double>::full({1}, std::nan("")), true);
    CHECK_THROWS_AS(ag::mean(b).backward(), NumericError);
}

TEST_CASE("no_grad records nothing") {
    ag::Var<double> a(BasicTensor<double>::full({2}, 1.0), true);
    ag::NoGradGuard guard;
    auto y = ag::silu(a);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("gradients accumulate across backward calls") {
    ag::Var<double> a(BasicTensor<double>::full({3}, 2.0), true);
    ag::mean(ag::mul(a, a)).backward();
    ag::mean(ag::mul(a, a)).backward();
    for (auto g : a.grad().span()) CHECK(g == doctest::Approx(2 * (2.0 * 2.0 / 3.0)));
    a.zero_grad();
    for (auto g : a.grad().span()) CHECK(g == 0.0);
}

TEST_CASE("Adam matches a hand-computed update") {
    ParamStore<double> store;
    auto p = store.add("p", BasicTensor<double>({2}, std::vector<double>{1.0, -2.0}));
    AdamState<double> st;
    // loss = 0.5 * sum(p^2) -> grad = p
    const double lr = 0.1;
    double m[2] = {0, 0}, v[2] = {0, 0}, ref[2] = {1.0, -2.0};
    for (int step = 1; step <= 3; ++step) {
        store.zero_grad();
        ag::mean(ag::mul(p, p)).backward();  // grad = p
        adam_step(store, st, lr);
        for (int i = 0; i < 2; ++i) {
            const double g = ref[i];
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            const double mh = m[i] / (1 - std::pow(0.9, step)), vh = v[i] / (1 - std::pow(0.999, step));
            ref[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
        }
        CHECK(p.value()[0] == doctest::Approx(ref[0]).epsilon(1e-12));
        CHECK(p.value()[1] == doctest::Approx(ref[1]).epsilon(1e-12));
    }
    CHECK(st.step == 3);
}

TEST_CASE("Adam skips frozen parameters") {
    ParamStore<double> store;
    auto p = store.add("p", BasicTensor<double>::full({2}, 1.0));
    store.set_trainable(false);
    AdamState<double> st;
    adam_step(store, st, 0.1);
    CHECK(p.value()[0] == 1.0);
    CHECK(st.first_moment.empty());
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 100, 1e-4, 1e-7) == doctest::Approx(1e-4));
    CHECK(cosine_lr(100, 100, 1e-4, 1e-7) == doctest::Approx(1e-7));
    CHECK(cosine_lr(50, 100, 1e-4, 1e-7) == doctest::Approx((1e-4 + 1e-7) / 2));
    CHECK(cosine_lr(250, 100, 1e-4, 1e-7) == 1e-7);
    double prev = 1.0;
    for (std::size_t s = 0; s <= 100; ++s) {
        const double lr = cosine_lr(s, 100, 1e-4, 1e-7);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("param store") {
    ParamStore<float> store;
    store.add("a", Tensor::zeros({2}));
    CHECK_THROWS_AS(store.add("a", Tensor::zeros({2})), ConfigError);
    CHECK_THROWS_AS(store.load_values({{"a", Tensor::zeros({3})}}), FormatError);
    CHECK_THROWS_AS(store.load_values({{"b", Tensor::zeros({2})}}), FormatError);
}

TEST_CASE("tensor container round trip and corruption") {
    testing::TempDir dir;
    Rng rng(9);
    auto t = testing::random_tensor({2, 3, 1}, rng);
    save_tensor(dir / "t.rten", t);
    CHECK(load_tensor<double>(dir / "t.rten") == t);
    CHECK(peek_tensor_dtype(dir / "t.rten") == "f64");
    CHECK_THROWS_AS(load_tensor<float>(dir / "t.rten"), FormatError);

    const auto bytes = read_file_bytes(dir / "t.rten");
    CHECK(bytes.substr(0, 8) == "RTEN0001");
    {
        std::ofstream(dir / "trunc.rten", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
        CHECK_THROWS_AS(load_tensor<double>(dir / "trunc.rten"), FormatError);
        std::ofstream(dir / "magic.rten", std::ios::binary) << "XTEN" + bytes.substr(4);
        CHECK_THROWS_AS(load_tensor<double>(dir / "magic.rten"), FormatError);
        std::ofstream(dir / "extra.rten", std::ios::binary) << bytes + "zz";
        CHECK_THROWS_AS(load_tensor<double>(dir / "extra.rten"), FormatError);
    }
    CHECK(fnv1a_hex("") == "cbf29ce484222325");
}

TEST_CASE("training loop, checkpoint and resume") {
    testing::TempDir dir;
    auto make = [] {
        ParamStore<float> s;
        s.add("w", Tensor::full({3}, 1.0f));
        return s;
    };
    auto loss_of = [](ParamStore<float>& s) {
        return [&s](Rng&, std::size_t) { return ag::mse_loss(s.get("w"), ag::constant(Tensor::zeros({3}))); };
    };
    ParamStore<float> store = make();
    AdamState<float> adam;
    TrainOptions opt;
    opt.steps = 5;
    opt.lr_max = 1e-2;
    std::vector<std::size_t> seen;
    opt.on_step = [&](std::size_t step, double, double) { seen.push_back(step); };
    auto r = run_training(store, adam, opt, loss_of(store));
    CHECK(r.losses.size() == 5);
    CHECK(r.losses.back() < r.losses.front());
    CHECK(seen.back() == 5);
    save_checkpoint(dir / "ck", store, &adam, {{"kind", "test"}});

    ParamStore<float> restored = make();
    AdamState<float> adam2;
    auto manifest = load_checkpoint(dir / "ck", restored, &adam2);
    CHECK(manifest["kind"] == "test");
    CHECK(adam2.step == 5);
    CHECK(restored.get("w").value() == store.get("w").value());
    seen.clear();
    run_training(restored, adam2, opt, loss_of(restored));
    CHECK(seen.front() == 6);
    CHECK(adam2.step == 10);

    CHECK(checkpoint_hash(dir / "ck") == checkpoint_hash(dir / "ck"));
    CHECK_THROWS_AS(read_checkpoint_manifest(dir / "missing"), PrerequisiteError);
}

TEST_CASE("non-finite loss stops before the update") {
    ParamStore<float> store;
    auto w = store.add("w", Tensor::full({1}, 1.0f));
    AdamState<float> adam;
    TrainOptions opt;
    opt.steps = 3;
    CHECK_THROWS_AS(run_training(store, adam, opt,
                                 [&](Rng&, std::size_t) {
                                     return ag::scale(ag::mean(w), std::numeric_limits<float>::infinity());
                                 }),
                    NumericError);
    CHECK(w.value()[0] == 1.0f);
    CHECK(adam.step == 0);
}

TEST_CASE("conv2d closed-form cases") {
    const double c = 0.7;
    auto x = BasicTensor<double>::full({1, 5, 5}, c);
    auto ones = BasicTensor<double>::full({1, 1, 3, 3}, 1.0);
    auto y = conv2d(x, ones, BasicTensor<double>::zeros({1}), 1);
    for (std::size_t r = 1; r < 4; ++r) {
        for (std::size_t q = 1; q < 4; ++q) CHECK(y.at(0, r, q) == doctest::Approx(9 * c));
    }
    CHECK(y.at(0, 0, 0) == doctest::Approx(4 * c));
    BasicTensor<double> b({2}, std::vector<double>{0.25, -3.0});
    auto z = conv2d(x, BasicTensor<double>::zeros({2, 1, 3, 3}), b, 1);
    for (std::size_t i = 0; i < 25; ++i) {
        CHECK(z.span()[i] == 0.25);
        CHECK(z.span()[25 + i] == -3.0);
    }
}

TEST_CASE("max_pool2d against a window scan") {
    Tensor small({1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    CHECK(max_pool2d(small, 2).span()[0] == 4.0f);
    CHECK(max_pool2d(Tensor::full({2, 4, 4}, 0.3f), 4) == Tensor::full({2, 1, 1}, 0.3f));
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        Tensor x = Tensor::zeros({1, 8, 8});
        for (auto& v : x.span()) v = static_cast<float>(rng.normal());
        auto y = max_pool2d(x, 4);
        for (std::size_t br = 0; br < 2; ++br) {
            for (std::size_t bc = 0; bc < 2; ++bc) {
                float best = -1e30f;
                for (std::size_t r = 0; r < 4; ++r) {
                    for (std::size_t c = 0; c < 4; ++c) best = std::max(best, x.at(0, br * 4 + r, bc * 4 + c));
                }
                CHECK(y.at(0, br, bc) == best);
            }
        }
    }
}

TEST_CASE("film_modulate doubles with unit scale") {
    Rng rng(2);
    auto f = testing::random_tensor({3, 2, 2}, rng);
    auto one = BasicTensor<double>::full({3}, 1.0), zero = BasicTensor<double>::zeros({3});
    auto y = film_modulate(f, one, zero);
    for (std::size_t i = 0; i < f.numel(); ++i) CHECK(y.span()[i] == 2 * f.span()[i]);
}

TEST_CASE("channel attention matches dense evaluation") {
    ParamStore<double> store;
    Rng rng(8);
    ChannelAttention<double> att(store, "a", 4, 2, rng);
    auto x = testing::random_tensor({4, 3, 2}, rng);
    CHECK(channel_attention(BasicTensor<double>::zeros({4, 3, 2}), att) == BasicTensor<double>::zeros({4, 3, 2}));
    auto y = channel_attention(x, att);
    const auto& w1 = att.squeeze.weight.value();
    const auto& b1 = att.squeeze.bias.value();
    const auto& w2 = att.excite.weight.value();
    const auto& b2 = att.excite.bias.value();
    double avg[4] = {};
    for (std::size_t c = 0; c < 4; ++c) {
        for (std::size_t i = 0; i < 6; ++i) avg[c] += x.span()[c * 6 + i] / 6.0;
    }
    double hidden[2];
    for (std::size_t j = 0; j < 2; ++j) {
        double s = b1[j];
        for (std::size_t c = 0; c < 4; ++c) s += w1.at(j, c) * avg[c];
        hidden[j] = s / (1 + std::exp(-s));
    }
    for (std::size_t c = 0; c < 4; ++c) {
        double s = b2[c];
        for (std::size_t j = 0; j < 2; ++j) s += w2.at(c, j) * hidden[j];
        const double gate = 1 / (1 + std::exp(-s));
        for (std::size_t i = 0; i < 6; ++i) CHECK(y.span()[c * 6 + i] == doctest::Approx(gate * x.span()[c * 6 + i]));
    }
}

TEST_CASE("quadratic and constant losses") {
    ag::Var<double> theta(BasicTensor<double>({3}, std::vector<double>{0.5, -1.0, 2.0}), true);
    // 0.5 * |theta|^2 = 1.5 * mean(theta^2) for three elements
    ag::scale(ag::mean(ag::mul(theta, theta)), 1.5).backward();
    for (std::size_t i = 0; i < 3; ++i) CHECK(theta.grad()[i] == doctest::Approx(theta.value()[i]));
    theta.zero_grad();
    ag::Var<double> c(BasicTensor<double>::full({}, 4.0), false);
    ag::add(ag::scale(ag::mean(theta), 0.0), c).backward();
    for (std::size_t i = 0; i < 3; ++i) CHECK(theta.grad()[i] == 0.0);
}

TEST_CASE("Adam scalar reference and zero-gradient no-op") {
    ParamStore<double> store;
    auto p = store.add("p", BasicTensor<double>::full({1}, 1.0));
    AdamState<double> st;
    store.zero_grad();
    p.grad();  // allocate zeros
    adam_step(store, st, 0.1);
    CHECK(p.value()[0] == 1.0);

    ParamStore<double> s2;
    auto q = s2.add("q", BasicTensor<double>::full({1}, 1.0));
    AdamState<double> st2;
    double theta = 1.0, m = 0, v = 0;
    for (int step = 1; step <= 2; ++step) {
        s2.zero_grad();
        q.grad()[0] = 1.0;
        adam_step(s2, st2, 0.1);
        m = 0.9 * m + 0.1;
        v = 0.999 * v + 0.001;
        theta -= 0.1 * (m / (1 - std::pow(0.9, step))) / (std::sqrt(v / (1 - std::pow(0.999, step))) + 1e-8);
        CHECK(q.value()[0] == doctest::Approx(theta).epsilon(1e-14));
    }
    CHECK(q.value()[0] == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("scalar tensor container round trip") {
    testing::TempDir dir;
    Tensor s = Tensor::scalar(3.5f);
    save_tensor(dir / "s.rten", s);
    auto back = load_tensor<float>(dir / "s.rten");
    CHECK(back.shape().empty());
    CHECK(back.span()[0] == 3.5f);
}

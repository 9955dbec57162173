#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cacl/autoencoder.hpp"

#include <random>

using namespace cacl;

namespace {

Grid<double> random_image(int h, int w, std::mt19937_64& rng) {
  Grid<double> g(3, h, w);
  for (int i = 0; i < g.m.size(); ++i) g.m.data()[i] = uniform<double>(rng, 0.0, 1.0);
  return g;
}

}  // namespace

TEST_CASE("encode shape contract and determinism") {
  auto p = AutoencoderParams<double>::init(64, 16, 3);
  std::mt19937_64 rng(1);
  auto img = random_image(128, 128, rng);
  auto f = encode(img, p);
  CHECK(f.h == 32);
  CHECK(f.w == 32);
  CHECK(f.channels() == 64);

  auto img2 = random_image(64, 64, rng);
  auto f2 = encode(img2, p);
  CHECK(f2.h == 16);
  CHECK(f2.w == 16);

  auto f2b = encode(img2, p);
  CHECK(f2.m == f2b.m);

  Grid<double> bad(3, 66, 64);
  CHECK_THROWS_AS(encode(bad, p), ShapeError);
  Grid<double> gray(1, 64, 64);
  CHECK_THROWS_AS(encode(gray, p), ShapeError);
}

TEST_CASE("decode restores the spatial size") {
  auto p = AutoencoderParams<double>::init(8, 8, 5);
  std::mt19937_64 rng(2);
  Grid<double> z(8, 4, 6);
  for (int i = 0; i < z.m.size(); ++i) z.m.data()[i] = uniform<double>(rng, -1.0, 1.0);
  auto out = decode(z, p);
  CHECK(out.h == 16);
  CHECK(out.w == 24);
  CHECK(out.channels() == 3);
  CHECK(out.m.minCoeff() > 0.0);
  CHECK(out.m.maxCoeff() < 1.0);

  Grid<double> wrong(7, 4, 4);
  CHECK_THROWS_AS(decode(wrong, p), ShapeError);
}

TEST_CASE("forward_dual honors the subset contract and shapes") {
  auto p = AutoencoderParams<double>::init(8, 8, 11);
  auto cb = init_codebook<double>(4, 4, 8, 13);
  std::mt19937_64 rng(4);
  LabeledPatch<double> patch{random_image(16, 16, rng), Label::Positive};

  auto [pair, qp, qn] = forward_dual(patch, p, cb);
  CHECK((qn.from_class_partition == 0).all());
  CHECK(pair.recon_positive.h == 16);
  CHECK(pair.recon_positive.w == 16);
  CHECK(pair.recon_negative.h == 16);
  CHECK(pair.recon_negative.w == 16);
  CHECK(qp.quantized.h == 4);
  CHECK(qp.quantized.w == 4);
}

TEST_CASE("forward_dual with C duplicating S collapses both paths") {
  auto p = AutoencoderParams<double>::init(8, 8, 17);
  auto cb = init_codebook<double>(4, 4, 8, 19);
  std::mt19937_64 rng(6);
  for (int i = 0; i < cb.codes.size(); ++i) cb.codes.data()[i] = uniform<double>(rng, -1.0, 1.0);
  cb.class_codes() = cb.shared_codes();

  LabeledPatch<double> patch{random_image(16, 16, rng), Label::Negative};
  auto [pair, qp, qn] = forward_dual(patch, p, cb);
  CHECK((qp.from_class_partition == 0).all());
  CHECK(qp.indices == qn.indices);
  CHECK(pair.recon_positive.m == pair.recon_negative.m);
}

TEST_CASE("reconstruction_loss selects exactly one path") {
  std::mt19937_64 rng(8);
  LabeledPatch<double> pos{random_image(8, 8, rng), Label::Positive};
  ReconstructionPair<double> pair;
  pair.recon_positive = pos.pixels;
  pair.recon_negative = random_image(8, 8, rng);  // garbage must not matter
  CHECK(reconstruction_loss(pos, pair) == 0.0);

  // value is invariant to any change of the unselected reconstruction
  auto pair2 = pair;
  pair2.recon_negative.m.setConstant(0.123);
  CHECK(reconstruction_loss(pos, pair2) == reconstruction_loss(pos, pair));

  LabeledPatch<double> neg{random_image(8, 8, rng), Label::Negative};
  ReconstructionPair<double> off;
  off.recon_positive = random_image(8, 8, rng);
  off.recon_negative = neg.pixels;
  off.recon_negative.m.array() += 0.1;  // constant offset per channel
  CHECK(reconstruction_loss(neg, off) == doctest::Approx(0.01).epsilon(1e-12));

  off.recon_negative = neg.pixels;
  CHECK(reconstruction_loss(neg, off) == 0.0);
}

TEST_CASE("reconstruction_loss nonnegative, zero iff selected path matches") {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 20; ++t) {
    LabeledPatch<double> patch{random_image(4, 4, rng),
                               t % 2 == 0 ? Label::Positive : Label::Negative};
    ReconstructionPair<double> pair;
    pair.recon_positive = random_image(4, 4, rng);
    pair.recon_negative = random_image(4, 4, rng);
    const double l = reconstruction_loss(patch, pair);
    CHECK(l >= 0.0);
    const auto& sel = patch.label == Label::Negative ? pair.recon_negative : pair.recon_positive;
    CHECK((l == 0.0) == (sel.m == patch.pixels.m));
  }
}

namespace {

QuantizationResult<double> make_result(const MatX<double>& cells, int h, int w,
                                       const std::vector<int>& from_class) {
  QuantizationResult<double> r;
  r.quantized = Grid<double>(int(cells.rows()), h, w);
  r.quantized.m = cells;
  r.indices = Eigen::VectorXi::Zero(h * w);
  r.from_class_partition.resize(h * w);
  for (int j = 0; j < h * w; ++j) r.from_class_partition[j] = std::uint8_t(from_class[size_t(j)]);
  return r;
}

}  // namespace

TEST_CASE("codebook_divergence_loss cases from the closed form") {
  // two cells, dim 2, both from C, per-cell squared distance 0.36
  MatX<double> a(2, 2), b(2, 2);
  a << 0.0, 1.0, 0.0, -1.0;
  b = a;
  b.row(0).array() += 0.6;
  auto e_neg = make_result(a, 1, 2, {1, 1});
  auto e_pos = make_result(b, 1, 2, {1, 1});

  CHECK(codebook_divergence_loss(e_neg, e_neg, Label::Negative, 1.0) == 0.0);
  CHECK(codebook_divergence_loss(e_neg, e_pos, Label::Negative, 1.0) ==
        doctest::Approx(0.36).epsilon(1e-12));
  CHECK(codebook_divergence_loss(e_neg, e_pos, Label::Positive, 1.0) ==
        doctest::Approx(0.64).epsilon(1e-12));
  CHECK(codebook_divergence_loss(e_neg, e_pos, Label::Positive, 1.0, DivergenceForm::Signed) ==
        doctest::Approx(-0.36).epsilon(1e-12));

  // no cell drew from C: zero for either label
  auto e_pos_none = make_result(b, 1, 2, {0, 0});
  CHECK(codebook_divergence_loss(e_neg, e_pos_none, Label::Negative, 1.0) == 0.0);
  CHECK(codebook_divergence_loss(e_neg, e_pos_none, Label::Positive, 1.0) == 0.0);

  CHECK_THROWS_AS(codebook_divergence_loss(e_neg, e_pos, Label::Positive, -0.5),
                  std::invalid_argument);
}

TEST_CASE("codebook_divergence_loss negative branch equals a brute-force cell sum") {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 10; ++t) {
    const int dim = 3, h = 4, w = 4;
    MatX<double> qa(dim, h * w), qb(dim, h * w);
    std::vector<int> fc(h * w);
    for (int i = 0; i < qa.size(); ++i) {
      qa.data()[i] = uniform<double>(rng, -1.0, 1.0);
      qb.data()[i] = uniform<double>(rng, -1.0, 1.0);
    }
    int n_c = 0;
    for (auto& f : fc) {
      f = uniform_int(rng, 0, 1);
      n_c += f;
    }
    auto e_neg = make_result(qa, h, w, fc);  // from_class of e_neg is ignored
    auto e_pos = make_result(qb, h, w, fc);
    const double got = codebook_divergence_loss(e_neg, e_pos, Label::Negative, 1.0);

    double acc = 0.0;
    for (int j = 0; j < h * w; ++j) {
      if (!fc[size_t(j)]) continue;
      for (int d = 0; d < dim; ++d) {
        const double diff = qa(d, j) - qb(d, j);
        acc += diff * diff;
      }
    }
    const double expect = n_c == 0 ? 0.0 : acc / n_c;
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  }
}

#include "hpn/model.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "hpn/tensor.hpp"
#include "testing.hpp"

using namespace hpn;
using hpn_test::random_tensor;

namespace {

template <typename T>
Tensor<T> random_patches(int n, RngEngine& rng) {
  return random_tensor<T>({n, 1, kPatchSize, kPatchSize}, rng, -1.5, 1.5);
}

template <typename T>
HybridNetwork<T> small_init_net(Variant v, std::uint64_t seed = 42, double sigma = 0.05) {
  auto net = make_network<T>(v);
  init_params(net, seed, sigma);
  return net;
}

double row_norm(const Tensor<float>& t, int row) {
  double s = 0;
  for (int j = 0; j < t.dim(1); ++j) s += static_cast<double>(t.value_at(row * t.dim(1) + j)) *
                                          static_cast<double>(t.value_at(row * t.dim(1) + j));
  return std::sqrt(s);
}

TEST(Encode, BatchOf128Gives128dHybrids) {
  RngEngine rng(1);
  auto net = small_init_net<float>(Variant::kL2Hinge);
  auto patches = random_patches<float>(128, rng);
  auto enc = encode(net, patches, Modality::kX);
  ASSERT_EQ(enc.hybrid.shape(), (Shape{128, kDescriptorDim}));
  ASSERT_EQ(enc.siam.shape(), (Shape{128, kDescriptorDim}));
  ASSERT_EQ(enc.asym.shape(), (Shape{128, kDescriptorDim}));
  for (int r = 0; r < 128; ++r) {
    EXPECT_NEAR(row_norm(enc.hybrid, r), 1.0, 1e-6);
    EXPECT_NEAR(row_norm(enc.siam, r), 1.0, 1e-6);
    EXPECT_NEAR(row_norm(enc.asym, r), 1.0, 1e-6);
  }
}

TEST(Encode, SharedBranchSamePatchBothModalities) {
  RngEngine rng(2);
  auto net = small_init_net<float>(Variant::kL2Hinge);
  // The asymmetric branches start identical; nudge one as training would.
  for (float& v : net.asym_y.convs[0].w.mutable_values()) v += 0.01f;
  auto patch = random_patches<float>(3, rng);
  auto ex = encode(net, patch, Modality::kX);
  auto ey = encode(net, patch, Modality::kY);
  double asym_diff = 0;
  for (int i = 0; i < 3 * kDescriptorDim; ++i) {
    EXPECT_EQ(ex.siam.value_at(i), ey.siam.value_at(i));  // shared weights, bitwise
    asym_diff += std::abs(ex.asym.value_at(i) - ey.asym.value_at(i));
  }
  EXPECT_GT(asym_diff, 1e-3);
}

TEST(Encode, PureFunctionOfParamsAndInput) {
  RngEngine rng(3);
  auto net = small_init_net<float>(Variant::kSoftmax);
  auto patches = random_patches<float>(2, rng);
  auto a = encode(net, patches, Modality::kY);
  auto b = encode(net, patches, Modality::kY);
  for (int i = 0; i < 2 * kDescriptorDim; ++i) EXPECT_EQ(a.hybrid.value_at(i), b.hybrid.value_at(i));
}

TEST(Encode, WrongSpatialSizeRejected) {
  RngEngine rng(4);
  auto net = small_init_net<float>(Variant::kL2Hinge);
  auto bad = random_tensor<float>({1, 1, 32, 32}, rng, -1, 1);
  EXPECT_THROW(encode(net, bad, Modality::kX), std::invalid_argument);
}

TEST(Init, DeterministicUnderSeed) {
  auto a = small_init_net<float>(Variant::kL2Hinge, 7);
  auto b = small_init_net<float>(Variant::kL2Hinge, 7);
  auto pa = parameters(a);
  auto pb = parameters(b);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::int64_t j = 0; j < pa[i].tensor.numel(); ++j)
      EXPECT_EQ(pa[i].tensor.value_at(j), pb[i].tensor.value_at(j));
}

TEST(Init, AsymmetricBranchesStartIdentical) {
  auto net = small_init_net<float>(Variant::kSoftmax, 9);
  for (std::size_t i = 0; i < net.asym_x.convs.size(); ++i)
    for (std::int64_t j = 0; j < net.asym_x.convs[i].w.numel(); ++j)
      EXPECT_EQ(net.asym_x.convs[i].w.value_at(j), net.asym_y.convs[i].w.value_at(j));
  for (std::int64_t j = 0; j < net.asym_x.fc.w.numel(); ++j)
    EXPECT_EQ(net.asym_x.fc.w.value_at(j), net.asym_y.fc.w.value_at(j));
  // Distinct storage: mutating one must not touch the other.
  net.asym_x.fc.w.mutable_values()[0] += 1.0f;
  EXPECT_NE(net.asym_x.fc.w.value_at(0), net.asym_y.fc.w.value_at(0));
}

TEST(Init, WeightStatisticsMatchNormal) {
  const double sigma = 0.03;
  auto net = make_network<double>(Variant::kL2Hinge);
  init_params(net, 11, sigma);
  // Conv4 weights: 256*256*3*3 = 589824 samples.
  const auto& w = net.siamese.convs[4].w;
  const double n = static_cast<double>(w.numel());
  ASSERT_GT(n, 1e5);
  double s = 0, ss = 0;
  for (double v : w.values()) {
    s += v;
    ss += v * v;
  }
  const double mean = s / n;
  const double stddev = std::sqrt(ss / n - mean * mean);
  EXPECT_LT(std::abs(mean - 0.0), 3.0 * sigma / std::sqrt(n));
  EXPECT_LT(std::abs(stddev - sigma), 3.0 * sigma / std::sqrt(2.0 * n));
  // Biases zero.
  for (double v : net.siamese.convs[4].b.values()) EXPECT_EQ(v, 0.0);
}

TEST(Init, NonPositiveSigmaRejected) {
  auto net = make_network<float>(Variant::kL2Hinge);
  EXPECT_THROW(init_params(net, 1, 0.0), std::invalid_argument);
  EXPECT_THROW(init_params(net, 1, -0.1), std::invalid_argument);
}

TEST(Architecture, ParameterCountsMatchTables) {
  // Table 1 branch: Conv0(1->32,5x5) Conv1(32->64,5x5) Conv2(64->128,3x3)
  // Conv3(128->256,3x3) Conv4(256->256,3x3) FC(4096->128), all with biases.
  std::int64_t expect_l2_branch = 0;
  expect_l2_branch += 32 * 1 * 5 * 5 + 32;
  expect_l2_branch += 64 * 32 * 5 * 5 + 64;
  expect_l2_branch += 128 * 64 * 3 * 3 + 128;
  expect_l2_branch += 256 * 128 * 3 * 3 + 256;
  expect_l2_branch += 256 * 256 * 3 * 3 + 256;
  expect_l2_branch += 128 * 4096 + 128;
  EXPECT_EQ(expect_l2_branch, 1535616);

  auto l2 = make_network<float>(Variant::kL2Hinge);
  std::int64_t branch = 0;
  for (const auto& c : l2.siamese.convs) branch += c.w.numel() + c.b.numel();
  branch += l2.siamese.fc.w.numel() + l2.siamese.fc.b.numel();
  EXPECT_EQ(branch, expect_l2_branch);
  EXPECT_EQ(parameter_count(l2), 3 * expect_l2_branch + 2 * (128 * 256 + 128));

  auto sm = make_network<float>(Variant::kSoftmax);
  std::int64_t sm_branch = 0;
  for (const auto& c : sm.siamese.convs) sm_branch += c.w.numel() + c.b.numel();
  sm_branch += sm.siamese.fc.w.numel() + sm.siamese.fc.b.numel();
  // Table 2: extra Conv5(256->256,3x3), FC input 2*2*256.
  EXPECT_EQ(sm_branch, expect_l2_branch - (128 * 4096 + 128) + (256 * 256 * 3 * 3 + 256) +
                           (128 * 1024 + 128));
  EXPECT_EQ(parameter_count(sm), 3 * sm_branch + 2 * (128 * 256 + 128) + 3 * (2 * 128 + 2));
}

TEST(Architecture, LayerShapesMatchTable1) {
  RngEngine rng(12);
  auto net = small_init_net<float>(Variant::kL2Hinge);
  auto patch = random_patches<float>(1, rng);
  std::vector<std::pair<std::string, Shape>> trace;
  branch_forward(net.siamese, net.variant, patch, static_cast<Tape<float>*>(nullptr), &trace);
  const std::vector<std::pair<std::string, Shape>> expected = {
      {"conv0", {1, 32, 64, 64}}, {"pool0", {1, 32, 32, 32}},
      {"conv1", {1, 64, 32, 32}}, {"pool1", {1, 64, 16, 16}},
      {"conv2", {1, 128, 16, 16}}, {"pool2", {1, 128, 8, 8}},
      {"conv3", {1, 256, 6, 6}},  {"conv4", {1, 256, 4, 4}},
      {"fc", {1, 128}},           {"unit_norm", {1, 128}}};
  ASSERT_EQ(trace.size(), expected.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    EXPECT_EQ(trace[i].first, expected[i].first);
    EXPECT_EQ(trace[i].second, expected[i].second) << "layer " << trace[i].first;
  }
}

TEST(Architecture, LayerShapesMatchTable2) {
  RngEngine rng(13);
  auto net = small_init_net<float>(Variant::kSoftmax);
  auto patch = random_patches<float>(1, rng);
  std::vector<std::pair<std::string, Shape>> trace;
  branch_forward(net.siamese, net.variant, patch, static_cast<Tape<float>*>(nullptr), &trace);
  const std::vector<std::pair<std::string, Shape>> expected = {
      {"conv0", {1, 32, 64, 64}}, {"pool0", {1, 32, 32, 32}},
      {"conv1", {1, 64, 32, 32}}, {"pool1", {1, 64, 16, 16}},
      {"conv2", {1, 128, 16, 16}}, {"pool2", {1, 128, 8, 8}},
      {"conv3", {1, 256, 6, 6}},  {"conv4", {1, 256, 4, 4}},
      {"conv5", {1, 256, 2, 2}},  {"fc", {1, 128}}};
  ASSERT_EQ(trace.size(), expected.size());
  for (std::size_t i = 0; i < trace.size(); ++i) {
    EXPECT_EQ(trace[i].first, expected[i].first);
    EXPECT_EQ(trace[i].second, expected[i].second) << "layer " << trace[i].first;
  }
}

TEST(ScorePair, L2IdentityAndDiameter) {
  auto net = small_init_net<float>(Variant::kL2Hinge);
  Encoding<float> ex{Modality::kX, {}, {}, std::vector<float>(128, 0.f)};
  Encoding<float> ey{Modality::kY, {}, {}, std::vector<float>(128, 0.f)};
  ex.hybrid[0] = 1.f;
  ey.hybrid[0] = 1.f;
  EXPECT_DOUBLE_EQ(score_pair(net, ex, ey), 0.0);
  ey.hybrid[0] = -1.f;  // opposite poles of the unit sphere
  EXPECT_DOUBLE_EQ(score_pair(net, ex, ey), 2.0);
}

TEST(ScorePair, ModalityAndHeadStateChecked) {
  auto net = small_init_net<float>(Variant::kL2Hinge);
  Encoding<float> ex{Modality::kX, {}, {}, std::vector<float>(128, 0.f)};
  Encoding<float> ey{Modality::kY, {}, {}, std::vector<float>(128, 0.f)};
  EXPECT_THROW(score_pair(net, ey, ex), std::invalid_argument);
  HybridNetwork<float> headless = make_network<float>(Variant::kL2Hinge);
  headless.variant = Variant::kSoftmax;  // softmax variant without heads
  EXPECT_THROW(score_pair(headless, ex, ey), std::invalid_argument);
}

TEST(ScorePair, ConcatHeadEqualsSummedEncodings) {
  // FC([Hx;Hy]) with block-partitioned weights equals FCx*Hx + FCy*Hy.
  RngEngine rng(14);
  auto net = small_init_net<float>(Variant::kSoftmax, 21, 0.08);
  for (int trial = 0; trial < 100; ++trial) {
    auto hx = random_tensor<float>({1, 2 * kDescriptorDim}, rng, -1, 1);
    auto hy = random_tensor<float>({1, 2 * kDescriptorDim}, rng, -1, 1);
    // Sum formulation.
    auto xhat = linear(hx, net.merge_x.w, net.merge_x.b);
    auto yhat = linear(hy, net.merge_y.w, net.merge_y.b);
    auto summed = add(xhat, yhat);
    // Concatenated formulation with the block matrix [FCx FCy].
    std::vector<float> wcat(static_cast<std::size_t>(kDescriptorDim) * 4 * kDescriptorDim);
    std::vector<float> bcat(kDescriptorDim);
    for (int r = 0; r < kDescriptorDim; ++r) {
      for (int c = 0; c < 2 * kDescriptorDim; ++c) {
        wcat[static_cast<std::size_t>(r) * 4 * kDescriptorDim + c] = net.merge_x.w.value_at(r * 2 * kDescriptorDim + c);
        wcat[static_cast<std::size_t>(r) * 4 * kDescriptorDim + 2 * kDescriptorDim + c] =
            net.merge_y.w.value_at(r * 2 * kDescriptorDim + c);
      }
      bcat[static_cast<std::size_t>(r)] = net.merge_x.b.value_at(r) + net.merge_y.b.value_at(r);
    }
    auto wfull = Tensor<float>::from_data({kDescriptorDim, 4 * kDescriptorDim}, wcat);
    auto bfull = Tensor<float>::from_data({kDescriptorDim}, bcat);
    auto concat_out = linear(concat(hx, hy), wfull, bfull);
    for (int j = 0; j < kDescriptorDim; ++j)
      EXPECT_NEAR(concat_out.value_at(j), summed.value_at(j), 1e-5);
  }
}

TEST(SharedWeights, DirectionalDerivativesRouteCorrectly) {
  RngEngine rng(15);
  auto net = small_init_net<float>(Variant::kL2Hinge, 33);
  auto px = random_patches<float>(2, rng);
  auto py = random_patches<float>(2, rng);
  auto base_x = encode(net, px, Modality::kX);
  auto base_y = encode(net, py, Modality::kY);

  auto l1_delta = [](const Tensor<float>& a, const Tensor<float>& b) {
    double s = 0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
      s += std::abs(static_cast<double>(a.value_at(i)) - static_cast<double>(b.value_at(i)));
    return s;
  };

  // Perturbing the Siamese branch moves W_s(x) and W_s(y).
  {
    auto nudged = import_params<float>(export_params(net));
    nudged.siamese.convs[0].w.mutable_values()[7] += 0.05f;
    auto ex = encode(nudged, px, Modality::kX);
    auto ey = encode(nudged, py, Modality::kY);
    EXPECT_GT(l1_delta(ex.siam, base_x.siam), 0.0);
    EXPECT_GT(l1_delta(ey.siam, base_y.siam), 0.0);
  }
  // Perturbing asym_x moves only the X path.
  {
    auto nudged = import_params<float>(export_params(net));
    nudged.asym_x.convs[0].w.mutable_values()[7] += 0.05f;
    auto ex = encode(nudged, px, Modality::kX);
    auto ey = encode(nudged, py, Modality::kY);
    EXPECT_GT(l1_delta(ex.asym, base_x.asym), 0.0);
    EXPECT_GT(l1_delta(ex.hybrid, base_x.hybrid), 0.0);
    EXPECT_EQ(l1_delta(ex.siam, base_x.siam), 0.0);
    EXPECT_EQ(l1_delta(ey.siam, base_y.siam), 0.0);
    EXPECT_EQ(l1_delta(ey.asym, base_y.asym), 0.0);
    EXPECT_EQ(l1_delta(ey.hybrid, base_y.hybrid), 0.0);
  }
}

TEST(Checkpoint, RoundTripIsBitwiseLossless) {
  auto net = small_init_net<float>(Variant::kSoftmax, 55);
  auto bytes = export_params(net);
  auto back = import_params<float>(bytes);
  auto again = export_params(back);
  ASSERT_EQ(bytes.size(), again.size());
  EXPECT_EQ(bytes, again);
}

TEST(Checkpoint, ReloadReproducesEncodingsBitwise) {
  RngEngine rng(16);
  auto net = small_init_net<float>(Variant::kL2Hinge, 77);
  auto patches = random_patches<float>(4, rng);
  auto before = encode(net, patches, Modality::kX);
  auto reloaded = import_params<float>(export_params(net));
  auto after = encode(reloaded, patches, Modality::kX);
  for (std::int64_t i = 0; i < before.hybrid.numel(); ++i)
    EXPECT_EQ(before.hybrid.value_at(i), after.hybrid.value_at(i));
}

TEST(Checkpoint, DistinctErrorsPerCorruption) {
  auto net = small_init_net<float>(Variant::kL2Hinge, 3);
  auto bytes = export_params(net);

  {  // bad magic
    auto bad = bytes;
    bad[0] = 'X';
    try {
      import_params<float>(bad);
      FAIL();
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind, CheckpointError::Kind::kBadMagic);
    }
  }
  {  // bad version
    auto bad = bytes;
    bad[4] = 0x7f;
    try {
      import_params<float>(bad);
      FAIL();
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind, CheckpointError::Kind::kBadVersion);
    }
  }
  {  // flipped variant tag
    auto bad = bytes;
    ASSERT_EQ(bad[6], 0);
    bad[6] = 1;
    try {
      import_params<float>(bad);
      FAIL();
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind, CheckpointError::Kind::kVariantMismatch);
    }
  }
  {  // corrupted shape table entry
    auto bad = bytes;
    bad[12] = 0x7f;  // first dim of first param
    try {
      import_params<float>(bad);
      FAIL();
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind, CheckpointError::Kind::kShapeMismatch);
    }
  }
  {  // truncated parameter data
    auto bad = bytes;
    bad.resize(bad.size() - 17);
    try {
      import_params<float>(bad);
      FAIL();
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind, CheckpointError::Kind::kTruncated);
    }
  }
  {  // trailing garbage
    auto bad = bytes;
    bad.push_back(0);
    try {
      import_params<float>(bad);
      FAIL();
    } catch (const CheckpointError& e) {
      EXPECT_EQ(e.kind, CheckpointError::Kind::kTruncated);
    }
  }
}

TEST(Checkpoint, DoublePrecisionNetExportsF32Losslessly) {
  auto net = small_init_net<double>(Variant::kL2Hinge, 5);
  auto bytes = export_params(net);
  auto back = import_params<double>(bytes);
  EXPECT_EQ(export_params(back), bytes);
}

}  // namespace

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <set>

#include "nowcast/model.hpp"
#include "nowcast/tpnn.hpp"
#include "test_support.hpp"

using namespace nowcast;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.context_frames = 3;
  c.horizon = 3;
  c.channels = 4;
  c.embed_dim = 2;
  c.reduc_factor = 4;
  c.dropout = 0.2;
  c.evolver_depth = 2;
  c.evolver_dim = 6;
  c.lead_time_classes = 3;
  return c;
}

std::vector<Grid> context(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Grid> out;
  for (int k = 0; k < 3; ++k) out.push_back(testing::random_grid(rng, n, 0.0, 20.0));
  return out;
}

/// Perturbs every parameter so the zero-initialized output layers are live.
void randomize(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& p : m.parameters())
    for (auto& v : p.tensor.mutable_value()) v += rng.uniform(-0.05, 0.05);
}

std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, b.data() + at, 4);
  return v;
}

}  // namespace

TEST_CASE("parameters carry group-prefixed names") {
  const Model m(tiny(), 1);
  std::set<std::string> names;
  for (const auto& p : m.parameters()) {
    CHECK(names.insert(p.name).second);
    CHECK_NOTHROW(group_of(p.name));
  }
  CHECK(names.count("encoder.in.weight"));
  CHECK(names.count("decoder.out.bias"));
  CHECK(names.count("evolver.embed"));
  CHECK(names.count("evolver.block1.mix.weight"));
  CHECK(group_of("decoder.up0.weight") == ParamGroup::Decoder);
  CHECK_THROWS(group_of("head.weight"));

  std::size_t count = 0;
  for (const auto& p : m.parameters()) count += p.tensor.numel();
  CHECK(m.parameter_count() == count);
  CHECK(sampling_stages(4) == 2);
  CHECK(m.latent_size(16) == 2 * 4 * 4);
}

TEST_CASE("the same seed gives the same weights, another seed does not") {
  CHECK(encode_weights(Model(tiny(), 7)) == encode_weights(Model(tiny(), 7)));
  CHECK(encode_weights(Model(tiny(), 7)) != encode_weights(Model(tiny(), 8)));
}

TEST_CASE("a fresh model predicts persistence") {
  const Model m(tiny(), 2);
  const FieldSequence seq = testing::make_sequence(context(16, 3), 600, 6000);
  const NowcastOutput out = m.nowcast(seq);
  REQUIRE(out.frames.size() == 3);
  for (int k = 0; k < 3; ++k) {
    CHECK(out.frames[k].values == seq.frames.back().values);
    CHECK(out.frames[k].timestamp == 6000 + 600 * (2 + k + 1));
    for (double v : out.motion[k].u.values()) CHECK(v == 0.0);
    for (double v : out.intensity[k].values.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("a fresh evolver is the identity on the latent") {
  const Model m(tiny(), 4);
  const LatentState l1 = m.ved_encode(std::span<const Grid>(context(16, 5)));
  for (int k = 2; k <= 3; ++k) CHECK(m.evolve(l1, k).mu == l1.sample);
}

TEST_CASE("encoding shapes and the reparameterized sample") {
  Model m(tiny(), 6);
  randomize(m, 7);
  const auto ctx = context(16, 8);
  const LatentState zero_noise = m.ved_encode(std::span<const Grid>(ctx));
  CHECK(zero_noise.side == 4);
  CHECK(zero_noise.embed_dim == 2);
  CHECK(zero_noise.size() == 32);
  CHECK(zero_noise.sample == zero_noise.mu);

  std::vector<double> noise(32);
  Rng rng(9);
  for (auto& v : noise) v = rng.normal();
  const LatentState noisy = m.ved_encode(std::span<const Grid>(ctx), noise);
  for (std::size_t i = 0; i < 32; ++i)
    CHECK(noisy.sample[i] == doctest::Approx(noisy.mu[i] + std::exp(0.5 * noisy.log_var[i]) * noise[i]));
}

TEST_CASE("decoded fields scale with the stored normalization") {
  Model m(tiny(), 10);
  randomize(m, 11);
  const LatentState l = m.ved_encode(std::span<const Grid>(context(16, 12)));
  MotionField m1, m2;
  IntensityField s1, s2;
  m.ved_decode(l, m1, s1);
  Normalization norm;
  norm.flow_scale = 2.0;
  norm.intensity_scale = 3.0;
  m.set_normalization(norm);
  m.ved_decode(l, m2, s2);
  for (std::size_t i = 0; i < m1.u.size(); ++i) {
    CHECK(m2.u[i] == doctest::Approx(2.0 * m1.u[i]));
    CHECK(s2.values[i] == doctest::Approx(3.0 * s1.values[i]));
  }
}

TEST_CASE("input normalization makes the encoder scale-invariant") {
  Model m(tiny(), 13);
  randomize(m, 14);
  auto ctx = context(16, 15);
  const LatentState a = m.ved_encode(std::span<const Grid>(ctx));
  for (auto& g : ctx)
    for (auto& v : g.values()) v *= 4.0;
  Normalization norm;
  norm.input_scale = 4.0;
  m.set_normalization(norm);
  const LatentState b = m.ved_encode(std::span<const Grid>(ctx));
  for (std::size_t i = 0; i < a.mu.size(); ++i) CHECK(b.mu[i] == doctest::Approx(a.mu[i]).epsilon(1e-12));
}

TEST_CASE("gradients through decode and evolve match finite differences") {
  Model m(tiny(), 16);
  randomize(m, 17);
  const auto ctx = context(16, 18);
  const std::array<ParamGroup, 3> all{ParamGroup::Encoder, ParamGroup::Decoder, ParamGroup::Evolver};

  auto loss_of = [&](ad::Tape& t, const ParamSet& p) {
    const auto enc = m.encode(t, p, ctx, {}, nullptr);
    const ad::Tensor z = m.evolve(t, p, enc.sample, 2);
    const ad::Tensor fields = m.decode(t, p, z, nullptr);
    Rng rng(19);
    std::vector<double> w(fields.numel());
    for (auto& x : w) x = rng.uniform(-1, 1);
    return ad::mean(t, ad::mul(t, fields, ad::Tensor::constant(fields.shape(), w)));
  };
  const ParamSet p = m.snapshot(all);
  {
    ad::Tape t;
    t.backward(loss_of(t, p));
  }
  Rng pick(20);
  const double h = 1e-6;
  int checked = 0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    auto v = p[j].mutable_value();
    const std::size_t i = pick.index(v.size());
    const double saved = v[i];
    ad::Tape probe(ad::Tape::Mode::Inference);
    v[i] = saved + h;
    const double up = loss_of(probe, p).item();
    v[i] = saved - h;
    const double down = loss_of(probe, p).item();
    v[i] = saved;
    const double fd = (up - down) / (2 * h);
    const double a = p[j].grad()[i];
    CAPTURE(m.parameters()[j].name);
    CHECK(std::abs(a - fd) <= 1e-5 * std::max({std::abs(a), std::abs(fd), 1e-4}));
    ++checked;
  }
  CHECK(checked == static_cast<int>(p.size()));
}

TEST_CASE("snapshots are independent of the model and respect the trainable set") {
  const Model m(tiny(), 21);
  const std::array<ParamGroup, 1> evo{ParamGroup::Evolver};
  const ParamSet p = m.snapshot(evo);
  for (std::size_t j = 0; j < p.size(); ++j)
    CHECK(p[j].requires_grad() == (group_of(m.parameters()[j].name) == ParamGroup::Evolver));
  p[0].mutable_value()[0] += 1.0;
  CHECK(m.parameters()[0].tensor.value()[0] != p[0].value()[0]);
}

TEST_CASE("context and lead checks") {
  const Model m(tiny(), 22);
  auto ctx = context(16, 23);
  ctx.pop_back();
  CHECK_THROWS_AS(m.ved_encode(std::span<const Grid>(ctx)), ConfigError);
  const LatentState l = m.ved_encode(std::span<const Grid>(context(16, 23)));
  CHECK_THROWS_AS(m.evolve(l, 1), InvalidArgument);
  CHECK_THROWS_AS(m.evolve(l, 4), InvalidArgument);
  ModelConfig bad = tiny();
  bad.reduc_factor = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_THROWS_AS(tiny().validate_for(18), ConfigError);
}

TEST_CASE("weights round-trip byte-identically") {
  Model m(tiny(), 24);
  randomize(m, 25);
  m.set_normalization({2.5, 0.75, 1.0 / 3.0});
  const auto bytes = encode_weights(m);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "TPNW");
  CHECK(read_u32(bytes, 4) == 1);
  const Model back = decode_weights(bytes);
  CHECK(encode_weights(back) == bytes);
  CHECK(back.config() == m.config());
  CHECK(back.normalization() == m.normalization());

  const auto dir = testing::temp_dir("model_weights");
  save_weights(m, dir / "w.tpnw");
  CHECK(read_file_bytes(dir / "w.tpnw") == bytes);
  CHECK(encode_weights(load_weights(dir / "w.tpnw")) == bytes);
}

TEST_CASE("malformed weights are rejected with the right error") {
  const auto bytes = encode_weights(Model(tiny(), 26));
  auto kind_of = [](std::vector<std::uint8_t> b) {
    try {
      decode_weights(b);
    } catch (const FormatError& e) {
      return e.kind();
    }
    FAIL("expected a FormatError");
    return FormatError::Kind::Io;
  };
  {
    auto b = bytes;
    b[0] = 'X';
    CHECK(kind_of(b) == FormatError::Kind::BadMagic);
  }
  {
    auto b = bytes;
    b[4] = 9;
    CHECK(kind_of(b) == FormatError::Kind::VersionMismatch);
  }
  {
    auto b = bytes;
    b.push_back(0);
    CHECK(kind_of(b) == FormatError::Kind::TrailingBytes);
  }
  {
    auto b = bytes;
    b.resize(b.size() - 2);
    CHECK(kind_of(b) == FormatError::Kind::Truncated);
  }
  {
    auto b = bytes;
    const float nan = std::nanf("");
    std::memcpy(b.data() + b.size() - 4, &nan, 4);
    CHECK(kind_of(b) == FormatError::Kind::InvalidValue);
  }
}

TEST_CASE("weights for a different architecture are a config error") {
  // Same byte layout up to the echo, but the echo names a deeper evolver
  // than the tensors that follow.
  const auto bytes = encode_weights(Model(tiny(), 27));
  std::string s(bytes.begin(), bytes.end());
  const auto at = s.find("model.evolver_depth=2");
  REQUIRE(at != std::string::npos);
  s[at + std::strlen("model.evolver_depth=")] = '3';
  CHECK_THROWS_AS(decode_weights(std::vector<std::uint8_t>(s.begin(), s.end())), ConfigError);
}

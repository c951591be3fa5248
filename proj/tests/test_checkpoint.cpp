#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <string>

#include "dsc/checkpoint.hpp"
#include "support.hpp"

using namespace dsc;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.stage_channels = {2, 3};
  c.mlif_channels = 2;
  return c;
}

std::string serialized(const NetworkParams<float>& net) {
  std::ostringstream os;
  write_checkpoint(os, net);
  return os.str();
}

NetworkParams<float> parse(const std::string& bytes) {
  std::istringstream is(bytes);
  return read_checkpoint(is);
}

bool same_bits(const ParamSet<float>& a, const ParamSet<float>& b) {
  if (a.names() != b.names()) return false;
  for (const auto& [name, t] : a) {
    const auto& u = b.at(name);
    if (t.shape() != u.shape()) return false;
    if (std::memcmp(t.data().data(), u.data().data(), t.size() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  auto net = init_network<float>(small_config(), 5);
  // Values whose bits a decimal or lossy path would disturb.
  auto& w = net.tensors.at(net.tensors.names().front());
  w[0] = std::numeric_limits<float>::denorm_min();
  w[1] = -0.0f;
  w[2] = std::nextafter(1.0f, 2.0f);
  const auto back = parse(serialized(net));
  EXPECT_EQ(back.config, net.config);
  EXPECT_TRUE(same_bits(back.tensors, net.tensors));
  EXPECT_TRUE(std::signbit(back.tensors.at(net.tensors.names().front())[1]));
}

TEST(Checkpoint, ManifestIsTextAndDataIsLittleEndianFloat32) {
  auto net = init_network<float>(small_config(), 1);
  const std::string bytes = serialized(net);
  EXPECT_EQ(bytes.rfind(std::string(kCheckpointMagic) + "\n", 0), 0u);
  const auto first = net.tensors.names().front();
  const Shape s = net.tensors.at(first).shape();
  const std::string line = first + " " + std::to_string(s.n) + " " + std::to_string(s.c) + " " +
                           std::to_string(s.h) + " " + std::to_string(s.w) + " f32\n";
  EXPECT_NE(bytes.find(line), std::string::npos);
  const auto data = bytes.find("data\n") + 5;
  EXPECT_EQ(bytes.size() - data, net.tensors.total_elements() * 4);
  const float v = net.tensors.at(first)[0];
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) {
    EXPECT_EQ(static_cast<unsigned char>(bytes[data + b]), (bits >> (8 * b)) & 0xFFu);
  }
}

TEST(Checkpoint, SaveLoadThroughFileAndArchitectureCheck) {
  const auto dir = test::scratch_dir("ckpt_file");
  auto net = init_network<float>(small_config(), 2);
  save_checkpoint(dir / "a.ckpt", net);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.ckpt.tmp"));
  EXPECT_TRUE(same_bits(load_checkpoint(dir / "a.ckpt").tensors, net.tensors));
  NetworkConfig other = small_config();
  other.use_dsc = false;
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", other), IoError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST(Checkpoint, RejectsExtraTensor) {
  auto net = init_network<float>(small_config(), 3);
  net.tensors.add("extra.weight", Tensor<float>({1, 1, 1, 1}));
  EXPECT_THROW(parse(serialized(net)), IoError);
}

TEST(Checkpoint, RejectsMissingTensor) {
  auto full = init_network<float>(small_config(), 3);
  NetworkParams<float> partial{full.config, {}};
  const auto names = full.tensors.names();
  for (std::size_t i = 1; i < names.size(); ++i) partial.tensors.add(names[i], full.tensors.at(names[i]));
  EXPECT_THROW(parse(serialized(partial)), IoError);
}

TEST(Checkpoint, RejectsDuplicateTensor) {
  auto net = init_network<float>(small_config(), 3);
  std::string bytes = serialized(net);
  const auto first = net.tensors.names().front();
  const auto start = bytes.find("\n" + first + " ") + 1;
  const auto end = bytes.find('\n', start) + 1;
  const std::string line = bytes.substr(start, end - start);
  const auto count_pos = bytes.find("tensors ");
  const auto count_end = bytes.find('\n', count_pos);
  bytes.replace(count_pos, count_end - count_pos, "tensors " + std::to_string(net.tensors.size() + 1));
  bytes.insert(bytes.find("data\n"), line);
  bytes.append(net.tensors.at(first).size() * 4, '\0');
  EXPECT_THROW(parse(bytes), IoError);
}

TEST(Checkpoint, RejectsWrongShape) {
  auto net = init_network<float>(small_config(), 3);
  std::string bytes = serialized(net);
  const auto first = net.tensors.names().front();
  const Shape s = net.tensors.at(first).shape();
  const std::string good = first + " " + std::to_string(s.n) + " " + std::to_string(s.c) + " ";
  const std::string bad = first + " " + std::to_string(s.n + 1) + " " + std::to_string(s.c) + " ";
  bytes.replace(bytes.find(good), good.size(), bad);
  EXPECT_THROW(parse(bytes), IoError);
}

TEST(Checkpoint, RejectsTrailingAndTruncatedData) {
  auto net = init_network<float>(small_config(), 3);
  const std::string bytes = serialized(net);
  EXPECT_THROW(parse(bytes + "x"), IoError);
  EXPECT_THROW(parse(bytes.substr(0, bytes.size() - 1)), IoError);
  EXPECT_THROW(parse("something else\n"), IoError);
  EXPECT_THROW(parse(std::string(kCheckpointMagic) + "\nbogus line\n"), IoError);
}

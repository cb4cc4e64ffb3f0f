#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include "json.hpp"
#include <sstream>

#include "support.hpp"

using namespace repcn;
using namespace repcn::testing;
using nlohmann::json;

namespace {

std::string save_bytes(const Model<float>& m, const RunConfig& run = {}) {
  std::ostringstream os;
  save_checkpoint(os, m, run);
  return os.str();
}

struct Parts {
  json header;
  std::string payload;
};

Parts split(const std::string& bytes) {
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= std::uint64_t(std::uint8_t(bytes[8 + i])) << (8 * i);
  return {json::parse(bytes.substr(16, len)), bytes.substr(16 + len)};
}

std::string join(const Parts& p) {
  const std::string h = p.header.dump();
  std::string out(kCheckpointMagic, 8);
  for (int i = 0; i < 8; ++i) out.push_back(char((std::uint64_t(h.size()) >> (8 * i)) & 0xff));
  return out + h + p.payload;
}

Checkpoint<float> load_bytes(const std::string& bytes) {
  std::istringstream is(bytes);
  return load_checkpoint<float>(is);
}

void expect_format_error(const std::string& bytes, const std::string& field) {
  try {
    load_bytes(bytes);
    ADD_FAILURE() << "expected FormatError mentioning " << field;
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
  }
}

template <typename T>
void expect_same_model(const Model<T>& a, const Model<T>& b) {
  EXPECT_EQ(a.parts, b.parts);
  EXPECT_EQ(a.pretrain_steps, b.pretrain_steps);
  ASSERT_EQ(a.params.size(), b.params.size());
  for (const auto& [name, p] : a.params) {
    ASSERT_TRUE(b.params.contains(name)) << name;
    EXPECT_TRUE(bitwise_equal(p.value, b.params.at(name).value)) << name;
    EXPECT_EQ(p.trainable, b.params.at(name).trainable) << name;
  }
}

}  // namespace

TEST(Checkpoint, RoundTripsEveryVariant) {
  auto base = frozen_base<float>(1);
  base.pretrain_steps = 17;
  auto dual = random_dual<float>(2);
  std::vector<Model<float>> models{base, dual, fuse_model(dual, FusionConfig{}),
                                   attach_controlnet(base)};
  RunConfig run;
  run.seed = 5;
  run.steps = 99;
  run.w = 0.3;
  run.alpha = 0.5;
  for (const auto& m : models) {
    auto ck = load_bytes(save_bytes(m, run));
    expect_same_model(m, ck.model);
    EXPECT_EQ(ck.run, run);
    EXPECT_EQ(ck.model.config.image_size, m.config.image_size);
  }
}

TEST(Checkpoint, DoublePrecisionRoundTrip) {
  auto m = random_dual<double>(3);
  std::ostringstream os;
  save_checkpoint(os, m, RunConfig{});
  std::istringstream is(os.str());
  expect_same_model(m, load_checkpoint<double>(is).model);
  std::istringstream wrong(os.str());
  EXPECT_THROW(load_checkpoint<float>(wrong), FormatError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "repcn_test_ckpt.bin";
  auto m = frozen_base<float>(4);
  save_checkpoint(path, m, RunConfig{});
  expect_same_model(m, load_checkpoint<float>(path).model);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint<float>(path), FormatError);
}

TEST(Checkpoint, SavingIsDeterministic) {
  auto m = random_dual<float>(5);
  EXPECT_EQ(save_bytes(m), save_bytes(m));
}

TEST(Checkpoint, HeaderDescribesTensors) {
  auto m = random_dual<float>(6);
  auto p = split(save_bytes(m));
  EXPECT_EQ(p.header.at("format_version"), kCheckpointVersion);
  EXPECT_EQ(p.header.at("variant"), "dual");
  EXPECT_EQ(p.header.at("payload_bytes").get<std::uint64_t>(), p.payload.size());
  EXPECT_EQ(p.header.at("tensors").size(), m.params.size());
  for (const auto& t : p.header.at("tensors")) {
    const auto& value = m.params.at(t.at("name").get<std::string>()).value;
    EXPECT_EQ(t.at("dtype").get<std::string>(), "float32");
    float first = 0;
    std::memcpy(&first, p.payload.data() + t.at("offset").get<std::size_t>(), sizeof(float));
    EXPECT_EQ(first, value[0]);
  }
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  auto bytes = save_bytes(frozen_base<float>(7));
  auto bad = bytes;
  bad[0] = 'X';
  expect_format_error(bad, "magic");
  expect_format_error(bytes.substr(0, 12), "header length");
  expect_format_error(bytes.substr(0, 40), "header");
  expect_format_error(bytes.substr(0, bytes.size() - 3), "payload_bytes");
}

TEST(Checkpoint, RejectsMalformedHeaderFields) {
  const auto bytes = save_bytes(random_dual<float>(8));
  auto edit = [&](auto fn) {
    auto p = split(bytes);
    fn(p);
    return join(p);
  };
  expect_format_error(edit([](Parts& p) { p.header["format_version"] = 99; }), "format_version");
  expect_format_error(edit([](Parts& p) { p.header["variant"] = "base"; }), "variant");
  expect_format_error(edit([](Parts& p) { p.header.erase("run_config"); }), "run_config");
  expect_format_error(edit([](Parts& p) { p.header["tensors"][0]["dtype"] = "float16"; }), "dtype");
  expect_format_error(edit([](Parts& p) { p.header["tensors"][0]["shape"][0] = 1000; }), "shape");
  expect_format_error(edit([](Parts& p) { p.header["tensors"][0]["offset"] = 1u << 30; }),
                      "offset");
  expect_format_error(edit([](Parts& p) { p.header["tensors"][1]["name"] = p.header["tensors"][0]["name"]; }),
                      "more than once");
  expect_format_error(edit([](Parts& p) { p.header["tensors"][1]["offset"] = p.header["tensors"][0]["offset"]; }),
                      "overlap");
  expect_format_error(edit([](Parts& p) { p.header["model_config"]["groups"] = 3; }),
                      "model_config");
  expect_format_error(edit([](Parts& p) { p.header["tensors"].erase(0); }), "tensors");
  auto garbage = bytes;
  garbage[16] = '!';
  expect_format_error(garbage, "JSON");
}

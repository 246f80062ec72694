#include <gtest/gtest.h>

#include <sstream>

#include "psp/config.hpp"

namespace {

psp::RunConfig parse(const std::string& text) {
  psp::RunConfig cfg;
  std::istringstream in(text);
  psp::apply_config_text(cfg, in, "test.cfg");
  return cfg;
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const psp::ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(RunConfig, DefaultsValidate) { EXPECT_NO_THROW(psp::RunConfig{}.validate()); }

TEST(RunConfig, ParsesValuesCommentsAndBlankLines) {
  auto cfg = parse(
      "# comment\n"
      "\n"
      "  optim.base_lr = 0.02  \n"
      "model.bins=1,2,4\n"
      "model.pool = max\n"
      "model.psp = false\n"
      "model.blocks = 1,1,2,1\n"
      "eval.scales = 0.75,1.0\n"
      "data.train_dir = some dir\n");
  EXPECT_DOUBLE_EQ(cfg.optim.base_lr, 0.02);
  EXPECT_EQ(cfg.pyramid.bins, (std::vector<int>{1, 2, 4}));
  EXPECT_EQ(cfg.pyramid.pool, psp::PoolMode::Max);
  EXPECT_FALSE(cfg.model_config().pyramid.has_value());
  EXPECT_EQ(cfg.model.backbone.stage_blocks, (std::array<int, 4>{1, 1, 2, 1}));
  EXPECT_EQ(cfg.eval_scales, (std::vector<double>{0.75, 1.0}));
  EXPECT_EQ(cfg.train_dir, "some dir");
}

TEST(RunConfig, UnknownKeyNamesFileAndLine) {
  auto msg = error_of("seed = 1\nmodel.colour = red\n");
  EXPECT_NE(msg.find("test.cfg:2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("model.colour"), std::string::npos) << msg;
}

TEST(RunConfig, MalformedValuesRejected) {
  EXPECT_NE(error_of("seed = -1\n"), "");
  EXPECT_NE(error_of("optim.max_iter = 10x\n"), "");
  EXPECT_NE(error_of("model.aux = maybe\n"), "");
  EXPECT_NE(error_of("model.blocks = 1,2,3\n"), "");
  EXPECT_NE(error_of("model.pool = median\n"), "");
  EXPECT_NE(error_of("just words\n"), "");
  EXPECT_NE(error_of("seed = 1\nseed = 2\n").find("already set"), std::string::npos);
}

TEST(RunConfig, ResolvedConfigRoundTrips) {
  auto cfg = parse("optim.base_lr = 0.0123\nmodel.bins = 1,3\nsynth.noise = 0.1\nseed = 42\n");
  std::ostringstream os;
  psp::write_config(os, cfg);
  auto back = parse(os.str());
  EXPECT_EQ(psp::resolved_config(back), psp::resolved_config(cfg));
  EXPECT_EQ(psp::resolved_config(cfg).size(), psp::detail::config_keys().size());
}

TEST(RunConfig, OverrideWinsOverFileValue) {
  auto cfg = parse("optim.max_iter = 50\n");
  psp::apply_override(cfg, "optim.max_iter=7");
  EXPECT_EQ(cfg.optim.max_iter, 7);
  EXPECT_THROW(psp::apply_override(cfg, "optim.max_iter"), psp::ConfigError);
}

TEST(RunConfig, ValidateCatchesBadCombinations) {
  psp::RunConfig cfg;
  cfg.eval_scales = {1.0, -0.5};
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
  cfg = {};
  cfg.pyramid.bins = {2, 3};
  EXPECT_THROW(cfg.validate(), psp::ConfigError);
  cfg.psp = false;
  EXPECT_NO_THROW(cfg.validate());
}

TEST(RunConfig, ThreadsFromEnvironment) {
  EXPECT_EQ(psp::threads_from_env(nullptr), 1);
  EXPECT_EQ(psp::threads_from_env(""), 1);
  EXPECT_EQ(psp::threads_from_env("3"), 3);
  EXPECT_THROW(psp::threads_from_env("0"), psp::ConfigError);
  EXPECT_THROW(psp::threads_from_env("two"), psp::ConfigError);
}

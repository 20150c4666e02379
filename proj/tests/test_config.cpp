#include <gtest/gtest.h>

#include "upn/cli.hpp"
#include "upn/config.hpp"

using namespace upn;

TEST(KeyValues, SectionsCommentsAndWhitespace) {
  const auto kv = parse_key_values("# header\nseed = 4\n\n[train]\nlr=0.01  # fast\n epochs = 3\n[flow]\nbounds = -1,1,-2,2\n");
  ASSERT_EQ(kv.size(), 4u);
  EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"seed", "4"}));
  EXPECT_EQ(kv[1], (std::pair<std::string, std::string>{"train.lr", "0.01"}));
  EXPECT_EQ(kv[2].first, "train.epochs");
  EXPECT_EQ(kv[3].second, "-1,1,-2,2");
}

TEST(KeyValues, ErrorsCarryLineNumbers) {
  try {
    parse_key_values("seed = 1\n\nno equals sign\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse_key_values("[train\n"), ParseError);
  EXPECT_THROW(parse_key_values(" = 3\n"), ParseError);
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
  ExperimentConfig c;
  EXPECT_THROW(apply_key(c, "train.learning_rate", "0.1"), ConfigError);
  EXPECT_THROW(apply_key(c, "train.epochs", "ten"), ConfigError);
  EXPECT_THROW(apply_key(c, "seed", "-1"), ConfigError);
  EXPECT_THROW(apply_key(c, "model.kind", "gp"), ConfigError);
  EXPECT_THROW(apply_key(c, "system.name", "pendulum"), ConfigError);
  EXPECT_THROW(apply_key(c, "flow.bounds", "1,2,3"), ConfigError);
  EXPECT_THROW(apply_key(c, "train.record_time", "maybe"), ConfigError);
}

TEST(Config, SystemNameIsAppliedBeforeItsParameters) {
  ExperimentConfig c;
  apply_key_values(c, {{"system.mu", "0.7"}, {"system.name", "van_der_pol"}});
  EXPECT_EQ(c.system.kind, SystemKind::van_der_pol);
  EXPECT_EQ(c.system.params.at(0).second, 0.7);
  EXPECT_THROW(apply_key_values(c, {{"system.nonexistent", "1"}}), ConfigError);
}

TEST(Config, TextRoundTripIsLossless) {
  ExperimentConfig c;
  apply_key_values(c, {{"system.name", "lorenz"},
                       {"system.rho", "27.5"},
                       {"seed", "123"},
                       {"out", "some/dir"},
                       {"model.hidden", "32,16"},
                       {"model.cov_mode", "full"},
                       {"model.kind", "ensemble"},
                       {"train.lr", "0.000123456789"},
                       {"train.grad_mode", "adjoint"},
                       {"solver.method", "rk4"},
                       {"solver.step", "0.01"},
                       {"flow.dataset", "circles"},
                       {"flow.checkpoints", "0,5,9"},
                       {"flow.bounds", "-3,3.5,-2,2"},
                       {"filter.init_mean", "1,2,3"},
                       {"data.val_fraction", "0.1"}});
  const std::string text = config_text(c);
  const ExperimentConfig back = config_from_text(text);
  EXPECT_EQ(config_text(back), text);
  EXPECT_EQ(back.system.kind, SystemKind::lorenz);
  EXPECT_EQ(back.seed, 123u);
  EXPECT_EQ(back.hidden, (std::vector<int>{32, 16}));
  EXPECT_EQ(back.flow.checkpoints, (std::vector<int>{0, 5, 9}));
  EXPECT_EQ(back.train.lr, 0.000123456789);
  EXPECT_EQ(back.solver.method, Method::rk4_fixed);
  EXPECT_EQ(back.flow.bounds.x_max, 3.5);
}

TEST(Config, DefaultsRoundTripAndValidate) {
  const ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(config_text(config_from_text(config_text(c))), config_text(c));
}

TEST(Presets, AllParseAndValidate) {
  ASSERT_FALSE(preset_names().empty());
  for (const auto& e : presets::all) {
    SCOPED_TRACE(std::string(e.name));
    ExperimentConfig c;
    EXPECT_NO_THROW(apply_key_values(c, parse_key_values(std::string(e.text))));
    EXPECT_NO_THROW(c.validate());
  }
}

TEST(Presets, ProtocolConstants) {
  const auto osc = resolve_config({"generate", "protocol", "", {{"system.name", "linear_oscillator"}}});
  EXPECT_EQ(osc.data.trajectories, 50);
  EXPECT_EQ(osc.data.history, 10);
  EXPECT_EQ(osc.data.horizon, 20);
  EXPECT_EQ(osc.train.lr, 1e-3);
  EXPECT_EQ(osc.train.epochs, 100);
  EXPECT_EQ(osc.ensemble_size, 5);
  const auto lorenz = resolve_config({"generate", "protocol", "", {{"system.name", "lorenz"}}});
  EXPECT_EQ(lorenz.data.trajectories, 100);
  EXPECT_EQ(lorenz.data.horizon, 50);
  EXPECT_EQ(lorenz.train.epochs, 25);
  EXPECT_EQ(lorenz.cov_mode, CovMode::full);
  const auto flow = resolve_config({"flow", "protocol", "", {}});
  EXPECT_EQ(flow.model, ModelKind::flow);
  EXPECT_EQ(flow.flow.checkpoints, (std::vector<int>{50, 150}));
}

TEST(Presets, FlagsOverridePresetAndPresetMustMatchSystem) {
  const auto c = resolve_config({"train", "protocol", "", {{"train.epochs", "7"}, {"system.name", "van_der_pol"}}});
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_EQ(c.system.kind, SystemKind::van_der_pol);
  EXPECT_THROW(resolve_config({"train", "missing", "", {}}), ConfigError);
  EXPECT_THROW(resolve_config({"train", "protocol_lorenz", "", {}}), ConfigError);
}

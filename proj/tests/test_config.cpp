// SPDX-License-Identifier: Apache-2.0
#include "ttmoe/config.hpp"

#include <doctest.h>
#include <filesystem>

using namespace ttmoe;

TEST_CASE("config: sections, comments and typed getters") {
    const std::string text = R"(# comment
[train]
learning_rate = 5e-3   # inline comment
rank = 5
q_in_factors = 16,8,4,4

[router]
lambda = 0.5
)";
    auto cfg = ConfigFile::parse_string(text, "<test>");
    CHECK(cfg.get_double("train.learning_rate", 0) == doctest::Approx(5e-3));
    CHECK(cfg.get_size("train.rank", 0) == 5);
    CHECK(cfg.get_size_list("train.q_in_factors", {}) ==
          std::vector<std::size_t>{16, 8, 4, 4});
    CHECK(cfg.get_double("router.lambda", 0) == doctest::Approx(0.5));
    CHECK(cfg.get_double("router.missing", 7.5) == 7.5);
}

TEST_CASE("config: malformed lines raise with location") {
    CHECK_THROWS_AS(ConfigFile::parse_string("[train\nx = 1", "<t>"), ConfigError);
    CHECK_THROWS_AS(ConfigFile::parse_string("just words", "<t>"), ConfigError);
    auto cfg = ConfigFile::parse_string("[a]\nx = abc", "<t>");
    CHECK_THROWS_AS(cfg.get_double("a.x", 0), ConfigError);
    CHECK_THROWS_AS(cfg.get_size_list("a.x", {}), ConfigError);
}

TEST_CASE("config: train section round-trips into TrainConfig") {
    const std::string text = R"(
[train]
adapter = tt
learning_rate = 1e-2
alpha = 8
rank = 3
batch_size = 16
max_epochs = 7
patience = 4
optimizer = sgd
q_in_factors = 8,8
q_out_factors = 8,8
v_in_factors = 8,8
v_out_factors = 4,4
)";
    auto tc = train_config_from(ConfigFile::parse_string(text, "<t>"));
    CHECK(tc.learning_rate == doctest::Approx(1e-2));
    CHECK(tc.alpha == doctest::Approx(8));
    CHECK(tc.rank == 3);
    CHECK(tc.batch_size == 16);
    CHECK(tc.max_epochs == 7);
    CHECK(tc.patience == 4);
    CHECK(tc.optimizer == OptimizerKind::PlainSgd);
    CHECK(tc.q_shape().d_in() == 64);
    CHECK(tc.v_shape().d_out() == 16);

    CHECK_THROWS_AS(
        train_config_from(ConfigFile::parse_string("[train]\nadapter = x", "<t>")),
        ConfigError);
}

TEST_CASE("config: lora defaults pick the 5e-4 learning rate") {
    auto tc = train_config_from(ConfigFile::parse_string("[train]\nadapter = lora", "<t>"));
    CHECK(tc.adapter == AdapterKind::Lora);
    CHECK(tc.learning_rate == doctest::Approx(5e-4));
}

TEST_CASE("config: repo presets parse and match the chosen rows") {
    // Tests run from the build tree; presets live in the source tree.
    const auto root = std::filesystem::path(__FILE__).parent_path().parent_path();

    auto full = ConfigFile::parse_file((root / "configs/paper_tt.cfg").string());
    auto tc = train_config_from(full);
    CHECK(tc.rank == 5);
    CHECK(tc.alpha == doctest::Approx(16));
    CHECK(tc.learning_rate == doctest::Approx(5e-3));
    CHECK(tc.q_shape().d_in() == 2048);
    CHECK(tc.q_shape().d_out() == 2048);
    CHECK(tc.v_shape().d_in() == 2048);
    CHECK(tc.v_shape().d_out() == 512);
    CHECK(tt_param_count(tc.q_shape()) == 960);
    CHECK(tt_param_count(tc.v_shape()) == 1160);

    auto lora = train_config_from(
        ConfigFile::parse_file((root / "configs/paper_lora.cfg").string()));
    CHECK(lora.adapter == AdapterKind::Lora);
    CHECK(lora.rank == 16);
    CHECK(lora.alpha == doctest::Approx(8));
    CHECK(lora.learning_rate == doctest::Approx(5e-4));

    auto toy = ConfigFile::parse_file((root / "configs/toy_tt.cfg").string());
    auto toy_model = toy_config_from(toy);
    CHECK(toy_model.d_model == 64);
    CHECK(toy_model.d_v == 16);
    auto toy_train = train_config_from(toy);
    CHECK(toy_train.q_shape().d_in() == toy_model.d_model);
    CHECK(toy_train.v_shape().d_out() == toy_model.d_v);
}

TEST_CASE("config: mixed section") {
    const std::string text = R"(
[mixed]
tasks = a.ttmd, b.ttmd
per_task = 40
seed = 12
)";
    auto mc = mixed_config_from(ConfigFile::parse_string(text, "<t>"));
    CHECK(mc.task_paths == std::vector<std::string>{"a.ttmd", "b.ttmd"});
    CHECK(mc.per_task == 40);
    CHECK(mc.seed == 12);
}

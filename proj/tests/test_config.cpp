#include <gtest/gtest.h>

#include "aga/config.hpp"

using namespace aga;

namespace {

std::string error_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, ParsesKeysCommentsAndBlankLines) {
    RunConfig c;
    apply_config_text(c, "# desk run\n\n  train_size = 40  # fewer\nlr=0.002\n");
    EXPECT_EQ(c.sizes.train, 40u);
    EXPECT_DOUBLE_EQ(c.train.optim.lr, 0.002);
}

TEST(Config, LaterLinesWin) {
    RunConfig c;
    apply_config_text(c, "epochs = 3\nepochs = 5\n");
    EXPECT_EQ(c.train.epochs, 5u);
}

TEST(Config, UnknownKeyAndBadValueNameTheField) {
    RunConfig c;
    EXPECT_NE(error_of([&] { apply_config_text(c, "learning_rate = 1"); }).find("'learning_rate'"), std::string::npos);
    EXPECT_NE(error_of([&] { apply_config_text(c, "batch_size = many"); }).find("'batch_size'"), std::string::npos);
    EXPECT_NE(error_of([&] { apply_config_text(c, "tau1 = 0.3x"); }).find("'tau1'"), std::string::npos);
    EXPECT_NE(error_of([&] { apply_config_text(c, "just words"); }).find("line 1"), std::string::npos);
}

TEST(Config, ValidationNamesTheField) {
    RunConfig c;
    c.world.region_max = 9;
    EXPECT_NE(error_of([&] { validate_config(c); }).find("'region_max'"), std::string::npos);
    c = {};
    c.train.loss.temps.tau2 = -1.0;
    EXPECT_NE(error_of([&] { validate_config(c); }).find("'tau2'"), std::string::npos);
    c = {};
    c.sizes.test = 0;
    EXPECT_NE(error_of([&] { validate_config(c); }).find("'test_size'"), std::string::npos);
    c = {};
    c.train.epochs = 0;
    EXPECT_NO_THROW(validate_config(c));
}

TEST(Config, RenderRoundTrips) {
    RunConfig c;
    apply_config_text(c, "lr = 0.1\nsigma0 = 0.3\nvocab = 80\n");
    RunConfig back;
    apply_config_text(back, render_config(c));
    EXPECT_EQ(render_config(back), render_config(c));
    EXPECT_DOUBLE_EQ(back.train.sigma0, 0.3);
    EXPECT_EQ(back.world.vocab, 80u);
    for (const auto& k : config_keys()) EXPECT_NE(render_config(c).find(k + " = "), std::string::npos) << k;
}

TEST(Config, MissingFileRejected) {
    EXPECT_THROW(load_config("/nonexistent/aga.cfg"), ConfigError);
}

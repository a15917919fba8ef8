#include "bdcp/encoder.hpp"
#include "bdcp/error.hpp"
#include "bdcp/params.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <sstream>

using namespace bdcp;
using Tokens = std::vector<std::string>;

namespace {

EncoderConfig small(int blocks = 1) {
    EncoderConfig c;
    c.width = 8;
    c.blocks = blocks;
    c.heads = 2;
    c.ffn_width = 8;
    c.dropout = 0.0;
    c.max_length = 16;
    return c;
}

struct FixedAdapter : PretrainedAdapter {
    Matrix rows;
    int width() const override { return static_cast<int>(rows.cols()); }
    Matrix encode(std::span<const std::string> tokens) const override {
        return rows.topRows(static_cast<Eigen::Index>(tokens.size()));
    }
};

struct ToyAdapter : PretrainedAdapter {
    const EncoderParams* params;
    int width() const override { return params->config.width; }
    Matrix encode(std::span<const std::string> tokens) const override { return bdcp::encode(*params, tokens); }
};

} // namespace

TEST_CASE("encode shape and determinism") {
    const EncoderParams p = init_encoder(EncoderConfig{}, Vocabulary({"a", "b", "c"}), 1);
    const Tokens one{"a"};
    CHECK(encode(p, one).rows() == 1);
    CHECK(encode(p, one).cols() == 32);
    const Tokens s{"a", "b", "zzz", "c"};
    CHECK(encode(p, s) == encode(p, s));
    CHECK(encode(p, s).allFinite());
    const Tokens perm{"c", "zzz", "b", "a"};
    CHECK_FALSE(encode(p, s).colwise().sum().isApprox(encode(p, perm).colwise().sum()));
}

TEST_CASE("unknown words and the mask share one embedding") {
    const Vocabulary v({"a"});
    CHECK(v.lookup("nope") == Vocabulary::kUnknown);
    CHECK(v.lookup(Vocabulary::kMaskToken) == Vocabulary::kUnknown);
    CHECK(v.lookup("a") != Vocabulary::kUnknown);
}

TEST_CASE("over-length input is truncated") {
    const EncoderParams p = init_encoder(small(), Vocabulary({"a"}), 2);
    const Tokens longer(20, "a");
    CHECK(encode(p, longer).rows() == 16);
    CHECK_THROWS_AS(encode(p, Tokens{}), InvariantError);
}

TEST_CASE("dropout only acts in training mode") {
    EncoderConfig c = small();
    c.dropout = 0.5;
    const EncoderParams p = init_encoder(c, Vocabulary({"a", "b"}), 3);
    const Tokens s{"a", "b", "a"};
    std::mt19937_64 rng(1);
    ag::Tape t1, t2;
    const Matrix train = encode(t1, p, nullptr, s, Mode::Training, &rng).value();
    const Matrix infer = encode(t2, p, nullptr, s, Mode::Inference, nullptr).value();
    CHECK_FALSE(train.isApprox(infer));
    CHECK(infer == encode(p, s));
}

TEST_CASE("embedding gradient matches finite differences") {
    EncoderParams p = init_encoder(small(1), Vocabulary({"a", "b"}), 4);
    const Tokens s{"a", "b"};
    const Matrix r = testing::random_matrix(2, 8, 5);
    auto build = [&](ag::Tape& tape, const EncoderParams& q, EncoderParams* g) {
        return ag::sum(ag::hadamard(encode(tape, q, g, s, Mode::Inference, nullptr), tape.constant(r)));
    };
    const auto rep = testing::check_param_gradients<EncoderParams>(p, build);
    CHECK(rep.max_rel < 1e-4);
    CHECK(rep.max_abs_analytic > 0.0);
}

TEST_CASE("deeper encoder gradients match finite differences") {
    EncoderParams p = init_encoder(small(2), Vocabulary({"a", "b", "c"}), 6);
    const Tokens s{"a", "c", "b", "a"};
    const Matrix r = testing::random_matrix(4, 8, 7);
    auto build = [&](ag::Tape& tape, const EncoderParams& q, EncoderParams* g) {
        return ag::sum(ag::hadamard(encode(tape, q, g, s, Mode::Inference, nullptr), tape.constant(r)));
    };
    CHECK(testing::check_param_gradients<EncoderParams>(p, build, 1e-5, 1e-5).max_rel < 1e-4);
}

TEST_CASE("pretrained adapter boundary") {
    const Tokens s{"a", "b"};
    CHECK_THROWS_AS(adapter_encode(nullptr, s), CapabilityError);
    FixedAdapter fixed;
    fixed.rows = testing::random_matrix(4, 3, 1);
    CHECK(adapter_encode(&fixed, s) == fixed.rows.topRows(2));
    const EncoderParams p = init_encoder(small(), Vocabulary({"a", "b"}), 8);
    ToyAdapter toy;
    toy.params = &p;
    CHECK(adapter_encode(&toy, s) == encode(p, s));
}

TEST_CASE("encoder checkpoint round trips bit-exactly") {
    const EncoderParams p = init_encoder(small(2), Vocabulary({"x", "y", "z"}), 9);
    std::stringstream buf;
    save_encoder(buf, p);
    const EncoderParams q = load_encoder(buf);
    CHECK(checksum(q) == checksum(p));
    CHECK(q.vocab == p.vocab);
    CHECK(q.config == p.config);
    std::stringstream bad("not a checkpoint");
    CHECK_THROWS(load_encoder(bad));
}

TEST_CASE("seeds give independent initialisations") {
    const Vocabulary v({"a"});
    CHECK(checksum(init_encoder(small(), v, 1)) == checksum(init_encoder(small(), v, 1)));
    CHECK(checksum(init_encoder(small(), v, 1)) != checksum(init_encoder(small(), v, 2)));
}

#include <numeric>

#include "helpers.hpp"
#include "quantlens/corpus.hpp"

namespace qtest {

const Fixture& trained_fixture() {
  static const Fixture f = [] {
    Fixture fx;
    fx.world = qlens::generate_world(11, 32, 2, 16);
    fx.facts.resize(fx.world.facts.size());
    std::iota(fx.facts.begin(), fx.facts.end(), 0);
    qlens::ModelConfig c;
    c.n_layers = 4;
    c.d_model = 32;
    c.n_heads = 2;
    c.head_dim = 16;
    c.d_ff = 64;
    c.vocab_size = static_cast<int>(fx.world.vocab.size());
    fx.model = qlens::init_model(c, 5);
    std::vector<qlens::TrainSample> samples;
    for (const auto& p : qlens::render_all(fx.world, fx.facts)) samples.push_back({p.tokens, p.target});
    qlens::TrainHyperparams hp;
    hp.steps = 500;
    hp.lr = 5e-3;
    hp.batch = 32;
    hp.warmup_steps = 20;
    qlens::train(fx.model, samples, hp);
    return fx;
  }();
  return f;
}

}  // namespace qtest

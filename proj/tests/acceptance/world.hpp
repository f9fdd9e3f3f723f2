#pragma once

// Toy worlds for the two learning criteria. Both pretrain a small backbone
// from scratch, so they are the slow part of the acceptance run.

#include <vector>

#include "uniicl/corpus.hpp"
#include "uniicl/trainer.hpp"

namespace uniicl::acceptance::world {

struct CopyWorld {
  Backbone backbone;
  std::vector<TaskInstance> validation;
  TrainResult phase1;
};

/// Copy backbone pretrained on short sources, then phase 1 on a fresh copy
/// corpus from the same band.
inline CopyWorld copy_world() {
  BackboneConfig bc;
  bc.vocab_size = 128;
  bc.embed_dim = 64;
  bc.n_layers = 2;
  bc.n_heads = 4;
  bc.max_positions = 128;
  bc.seed = 3;
  SynthSpec spec;
  spec.copy = 3000;
  spec.band = {4, 16};
  spec.vocab_size = bc.vocab_size;
  spec.word_pool = 64;
  spec.seed = 1;
  Tokenizer tok(spec.vocab_size);
  std::vector<TaskInstance> pretrain;
  for (const auto& r : synth_corpus(spec)) pretrain.push_back(to_instance(r, tok));
  CopyWorld w{Backbone(bc), {}, {}};
  PretrainConfig pc;
  pc.epochs = 12;
  pc.learning_rate = 1e-3;
  pc.batch = 8;
  pretrain_backbone(w.backbone, pretrain, pc);

  spec.copy = 1000;
  spec.seed = 7;
  std::vector<TaskInstance> train;
  auto records = synth_corpus(spec);
  for (std::size_t i = 0; i < records.size(); ++i)
    (i % 10 == 0 ? w.validation : train).push_back(to_instance(records[i], tok));
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.epochs_phase1 = 10;
  tc.effective_batch = 16;
  Compressor comp(w.backbone);
  w.phase1 = train_phase1(comp, train, w.validation, tc, CompressorParams::initialize(w.backbone));
  return w;
}

struct SelectionOutcome {
  double init_rate = 0.0;
  double phase1_rate = 0.0;
  double phase2_rate = 0.0;
  std::size_t held_out = 0;
  std::size_t mined_pairs = 0;
  std::size_t consistent_pairs = 0;
  bool frozen = false;
};

SelectionOutcome selection_world();

}  // namespace uniicl::acceptance::world

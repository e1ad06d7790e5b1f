"""
Train a dual-view video-text model on a synthetic world
=======================================================

Generates a small world of videos with two transcript views, pairs clips with
sentences, trains the encoders for one seed and measures text-to-video
retrieval on held-out videos.
"""

import numpy as np

from dualview import experiments as ex
from dualview.corpus import generate_corpus

run = ex.demo_config()
seed = 0

# training and held-out worlds share class means but not videos
train_corpus = generate_corpus(ex.train_world(run, seed))
test_corpus = generate_corpus(ex.test_world(run, seed))
print(f"{len(train_corpus.videos)} training videos, {len(train_corpus.sentences)} transcript sentences")

for s in train_corpus.sentences[:4]:
    print(f"  [{s.source}] {s.start_s:5.1f}-{s.end_s:5.1f}s  {s.text}")

vocab = ex.run_vocab(run, train_corpus, seed)
trial = ex.run_trial(run, seed, corpus=train_corpus, vocab=vocab)
print(f"{len(trial.pairs)} clip-text pairs, vocab of {len(vocab)} pieces")

losses = np.array(trial.report.total)
print(f"loss {losses[:20].mean():.3f} (first 20 steps) -> {losses[-20:].mean():.3f} (last 20)")

queries = ex.event_queries(test_corpus, run.world.keywords(), seed)
trained = ex.retrieval_eval(trial.params, vocab, trial.hyper, test_corpus, queries, run.eval.ks)
untrained = ex.retrieval_eval(ex.random_model(run, vocab, seed), vocab, trial.hyper, test_corpus, queries, run.eval.ks)

print(f"{'metric':>6}  trained  random")
for key in trained:
    print(f"{key:>6}  {trained[key]:7.3f}  {untrained[key]:6.3f}")

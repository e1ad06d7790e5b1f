"""
Zero-shot classification and text-only captioning
=================================================

Reuses a trained encoder two ways: labeled clips are classified by cosine
similarity to class prompts, and a decoder trained only on text embeddings
captions held-out clips.
"""

from dualview import experiments as ex
from dualview.corpus import generate_corpus

run = ex.demo_config()
seed = 2

train_corpus = generate_corpus(ex.train_world(run, seed))
test_corpus = generate_corpus(ex.test_world(run, seed))
vocab = ex.run_vocab(run, train_corpus, seed)
trial = ex.run_trial(run, seed, corpus=train_corpus, vocab=vocab)
random_params = ex.random_model(run, vocab, seed)

prompts = ex.synthetic_prompts(run.world.keywords())
print("prompt for class 0:", prompts.classes[0].prompt)

for name, params in (("trained", trial.params), ("random", random_params)):
    summary, _ = ex.zeroshot_eval(params, vocab, trial.hyper, test_corpus, prompts, run.eval.zeroshot_clip_s)
    print(f"{name:>8}: mAP {summary['mAP']:.3f}  mean F1 {summary['mean_F1']:.3f}")

scores, captions, examples, _ = ex.captioning_run(
    run, seed, trial.params, vocab, trial.hyper, train_corpus, test_corpus
)
print("caption scores:", {k: round(v, 3) for k, v in scores.items()})
for ex_, text in list(zip(examples, captions))[:5]:
    print(f"  {ex_.clip_ref:>26}  ref: {ex_.references[0]:<32} got: {text}")

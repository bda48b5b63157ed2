# %% [markdown]
# # How many tokens the knowledge takes
#
# Each reasoning path becomes one soft token, so the knowledge segment costs
# at most k * cap tokens whatever the path length. Written out as text the
# same paths cost a few tokens per hop. No training is needed to see this;
# an untrained adapter has the same token count.

# %%
import numpy as np

from kgadapter.harness import Pipeline, PretrainConfig, TrainConfig, build_lm, make_adapter
from kgadapter.retrieval import train_hop_classifier
from kgadapter.synth import gen_synthetic

rows = []
for max_hops in (2, 4):
    bench = gen_synthetic(seed=0, n_entities=50, n_relations=10, n_questions=60, max_hops=max_hops)
    kg = bench.graph()
    train, test = bench.questions(kg)
    lm, tokenizer, _ = build_lm(kg, train, train + test, PretrainConfig(steps=20, n_sequences=200))
    cfg = TrainConfig(max_hops=max_hops)
    pipe = Pipeline(kg, tokenizer, lm, train_hop_classifier(train, max_hops), make_adapter(kg, lm, tokenizer, cfg), cfg)
    for q in train:
        rg = pipe.retrieve(q)
        text = tokenizer.encode(pipe.textual_graph(rg)) if rg.paths else []
        rows.append((max_hops, rg.hops, len(rg.paths), len(text)))

rows = np.array(rows)
for H in (2, 4):
    sel = rows[rows[:, 0] == H]
    print(f"max hops {H}: {sel[:, 2].mean():.1f} soft tokens vs {sel[:, 3].mean():.1f} text tokens per question")
    for h in np.unique(sel[:, 1]):
        part = sel[sel[:, 1] == h]
        print(f"  {h} hops: {len(part)} questions, text tokens per path "
              f"{part[:, 3].sum() / max(part[:, 2].sum(), 1):.1f}")

"""Character modelling with a fixed mixed-operator cell.

The language harness wraps any cell with an embedding table and a
softmax head, scoring per-character cross entropy. Guessing uniformly
over the alphabet costs log(V) nats, so that is the line to beat. A few
epochs on a periodic string get well under it.
"""

import math

import numpy as np

from cellgrow import build_two_to_one
from cellgrow.bilevel import BilevelConfig, EarlyStop, train_stage
from cellgrow.tasks import LanguageTask, text_dataset

text = "the quick brown fox jumps over the lazy dog. " * 60
data = text_dataset(text, seq_len=16, n_train=120, n_val=20, n_test=20, batch_size=20)
print(f"alphabet {data.n_symbols} symbols (uniform guess = {math.log(data.n_symbols):.3f} nats)")

spec, state = build_two_to_one(n_x=12, n_h=12, m=3, seed=2)
task = LanguageTask(data, n_h=12, seed=2)
state = task.attach(state)  # adds the embedding and the output head

before = task.evaluate(spec, state, "val")
stop = EarlyStop(patience=3, max_epochs=12)
state, history = train_stage(spec, state, task, stop, BilevelConfig(lr_w=0.01, lr_alpha=0.003))
for row in history:
    print(f"epoch {row.epoch:>2}: train {row.train_loss:.4f}  val {row.val_loss:.4f}")

after = task.evaluate(spec, state, "val")
print(f"validation cross entropy: {before:.3f} -> {after:.3f} nats/char")
print(f"perplexity: {math.exp(before):.1f} -> {math.exp(after):.1f}")

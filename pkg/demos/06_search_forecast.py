"""The full search loop on a synthetic forecasting task.

A vector autoregression with known coefficients is the ideal testbed:
the best achievable validation loss is the noise floor of the process
itself, so we can say exactly how close the discovered cell gets. The
controller trains a stage, prunes and scores it, grows a node, and stops
when the score stops improving.
"""

import numpy as np

from cellgrow import BilevelConfig, ForecastTask, SearchConfig, run_search, synth_var_series
from cellgrow.cells import build_baseline
from cellgrow.bilevel import EarlyStop, train_stage

data = synth_var_series(seed=11, d=4, t=1200, lag=2, noise=0.1, window=10, batch_size=50)
task = ForecastTask(data, n_h=4, seed=1)
print(f"series: {data.dim} channels, {len(data.splits['train'][0])} train windows")

cfg = SearchConfig(
    backbone="two_to_one",
    n_x=4,
    n_h=4,
    m0=2,
    max_stages=3,
    patience=2,
    max_epochs=8,
    tune_epochs=4,
    seed=3,
    bilevel=BilevelConfig(),
)
res = run_search(cfg, task, trial=0)

print()
print(f"{'stage':>5} {'epoch':>5} {'train':>9} {'val':>9} {'nodes':>5}  event")
for row in res.history:
    print(f"{row.stage:>5} {row.epoch:>5} {row.train_loss:>9.4f} {row.val_loss:>9.4f} "
          f"{row.node_count:>5}  {row.event}")

print()
print(f"stages run: {res.stages_run}, best score {res.eva_best:.4f}")
print(f"delivered cell: {res.best_spec.node_count} nodes, "
      f"{[e.ops[0].kind for e in res.best_spec.edges]}")
print("growth lineage:", [e.kind for e in res.events])

# an LSTM of the same width, trained with the same budget, for scale
spec, state = build_baseline("lstm", 4, 4, seed=3)
state = task.attach(state)
stop = EarlyStop(patience=2, max_epochs=cfg.max_stages * cfg.max_epochs)
state, _ = train_stage(spec, state, task, stop, cfg.bilevel, update_alphas=False)
print(f"lstm baseline val: {task.evaluate(spec, state, 'val'):.4f}")
print(f"found cell val:    {task.evaluate(res.best_spec, res.best_state, 'val'):.4f}")

# the generating process itself, pushed through the same normalization,
# marks the best any predictor could do on this data
X, Y = data.splits["val"]
preds = np.zeros_like(Y)
for i in range(len(Y)):
    raw = X[i] * data.std + data.mean
    step = sum(raw[-1 - k] @ data.var_coeffs[k].T for k in range(data.var_coeffs.shape[0]))
    preds[i] = (step - data.mean) / data.std
print(f"noise floor:       {((preds - Y) ** 2).mean():.4f}")

"""Train a desk-scale model on strong-contingency data, then read its attention.

Prints validation macro-F1 per epoch, writes the attention maps of one held-out
window under ``demos_out/``, and compares the layer-0 lag score with the
uniform-causal baseline. Takes about a minute on one core.

    python demos/train_and_attend.py
"""

import numpy as np

from multipar.export import export_attention
from multipar.model import ModelConfig
from multipar.synthetic import generate, preset, uniform_causal_baseline
from multipar.training import FocalConfig, OptimizerConfig, evaluate, train

tr = generate(preset("strong_contingency", seed=100), 600)
va = generate(preset("strong_contingency", seed=200), 200)
test, truth = generate(preset("strong_contingency", seed=300), 50, return_truth=True)

cfg = ModelConfig(P=5, k=16, F=16, d_x=32, h=2, M=2, lstm_hidden=32, seed=0)
opt = OptimizerConfig(lr0=1e-3, decay_every=100, batch_size=32, epochs=12, oversample=False)
res = train(cfg, opt, FocalConfig(alpha=2.0), tr, va,
            on_epoch=lambda r: print(f"epoch {r['epoch']:2d}  loss {r['train_loss']:.3f}  "
                                     f"val macro-F1 {r['macro_f1']:.3f}"))
print("test", evaluate(res.model, test).to_dict())

# attention of the first answering person in the first test window
t = truth[0]
person = next(p for p in t["persons"] if p["source"] is not None)
summary = export_attention(res.model, test[0], person["person"], "demos_out", "0", t)
base = uniform_causal_baseline(cfg.k, person["onset"], person["lag"], t["event_len"])
print(f"maps written: {len(summary['files'])}")
print(f"lag score {summary['lag_score']['mean']:.3f}  uniform baseline {base:.3f}")

w0 = np.loadtxt(summary["files"][0], delimiter=",")
np.set_printoptions(precision=2, suppress=True, linewidth=160)
print(summary["files"][0])
print(w0)

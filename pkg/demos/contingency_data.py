"""Walk through one strong-contingency window.

One person speaks; everyone else answers a frame or two later with a copy of
the speech scaled by 1, 1/2 or 1/4. That scale is the answer's class. Speech
sizes vary 16-fold, so only the answer-to-speech ratio identifies the class.

    python demos/contingency_data.py
"""

import numpy as np

from multipar.synthetic import generate, preset

spec = preset("strong_contingency", seed=0)
windows, truth = generate(spec, 3, return_truth=True)

for w, t in zip(windows, truth):
    energy = np.linalg.norm(w.features, axis=2)  # (P, k) per-frame size
    speaker = next(p["person"] for p in t["persons"] if p["source"] is None)
    print(f"window {t['index']}  group {w.group_id}  speaker p{speaker}")
    for p in t["persons"]:
        row = energy[p["person"]]
        peak = int(row.argmax())
        ratio = row.max() / energy[speaker].max()
        print(f"  p{p['person']}  label {w.labels[p['person']]}  mode {p['mode']:>6}  peak frame {peak:2d}  "
              f"size {row.max():6.2f}  ratio to speaker {ratio:5.2f}")
    print()

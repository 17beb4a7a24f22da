"""Train a reduced model on a small synthetic set and inspect what it learned.

Takes about half a minute on one core.  Run: python demos/train_small.py
"""
import numpy as np

from ustssm.data import CLASS_NAMES, SynthConfig, synth_generate
from ustssm.model import ModelConfig, TrainConfig, evaluate, train

data = synth_generate(SynthConfig(videos_per_class=24, T=8, N=128, seed=0))
model_cfg = ModelConfig(channels=32, frames=8, n_spatial=32, k_group=8)
result = train(data, model_cfg, TrainConfig(epochs=12, batch_size=8, seed=0),
               epoch_callback=lambda r: print(f"epoch {r['epoch']:2d}  loss {r['train_loss']:.3f}  "
                                              f"train {r['train_acc']:.2f}  held-out {r['val_acc']:.2f}"))
print(f"\nkept epoch {result.best_epoch} ({result.model.n_params()} parameters)")

fresh = synth_generate(SynthConfig(videos_per_class=16, T=8, N=128, seed=1))
m = evaluate(fresh, result.model)
print(f"accuracy on clips from another seed: {m.accuracy:.3f}")
print("confusion (rows true, columns predicted):")
for name, row in zip(CLASS_NAMES, m.confusion):
    print(f"  {name:12s} {np.array2string(row)}")

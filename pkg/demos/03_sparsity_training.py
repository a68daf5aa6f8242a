"""Train the sequential VAE on action-sparse data with and without the mask penalty.

Prints disentanglement (MCC, linear score) and the recovered action graph
for alpha_a = 0 and alpha_a > 0, next to the supervised and random encoder
baselines. Small scale so it finishes in a few minutes on one core; the
acceptance suite runs the full-size version.

    python demos/03_sparsity_training.py [epochs]
"""

import sys
import warnings

from mechdis import metrics as mt
from mechdis import synthdata as sd
from mechdis import training as tr

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 40
proc, batch = sd.generate("t-a", 3, 6, n_seq=3000, seed=0)
meta = sd.process_metadata(proc, batch)
base = dict(epochs=epochs, batch_size=64, lr=0.002, seed=0, enc_hidden=64, tr_hidden=32)

print("true M^a:")
print(proc.M_a)
for alpha in (0.0, 0.03):
    params, log = tr.train(batch, meta, tr.TrainConfig(alpha_a=alpha, **base))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = mt.evaluate(params, batch, meta)
    print(f"\nalpha_a={alpha}: mcc={rep['mcc']:.3f} linear={rep['linear_score']:.3f} "
          f"shd_a={rep['shd_a']} final train elbo={log.rows[-1]['elbo']:.1f}")
    print("learned M^a (rows in learned latent order):")
    print(params.hard_masks()[1])

conf = tr.TrainConfig(**base)
print(f"\nsupervised encoder mcc={mt.supervised_baseline(batch, meta, conf)[0]:.3f}")
print(f"random encoder mcc={mt.random_baseline(batch, meta, conf)[0]:.3f}")

"""
C2R against a plain GIN, at small scale
=======================================

A few epochs on a few hundred graphs; the full desk-scale comparison lives
in the acceptance suite and the ``c2r train`` command.
"""
import json

from c2r.cli import generate_splits
from c2r.config import RunConfig
from c2r.trainer import train

cfg = RunConfig()
cfg.apply_overrides(["data.n_train=300", "data.n_val=150", "data.n_test=300",
                     "optim.epochs=15", "optim.batch_size=64"])
splits = generate_splits(cfg)

for kind in ("vanilla", "c2r"):
    cfg.model.kind = kind
    res = train(cfg, 0, splits["train"], splits["val"], splits["test"])
    last = [r for r in res.records if r["split"] == "train"][-1]
    losses = {k: round(v, 3) for k, v in last.items() if k.startswith("loss_")}
    print(kind, "best epoch", res.best_epoch)
    print("  last train losses", json.dumps(losses))
    print("  test", json.dumps({k: round(v, 3) for k, v in res.test.metrics().items()}))

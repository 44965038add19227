"""
Training on a synthetic dataset
===============================

A seeded 5-class dataset of coloured images with bright rectangles is
enough to watch VeloxNet learn on a CPU. Set VELOX_EPOCHS to train longer.
"""

import os
import tempfile
from pathlib import Path

from veloxnet.data import load_checkpoint, synth_dataset
from veloxnet.models import Model, build_veloxnet
from veloxnet.train import bench, evaluate, fit

epochs = int(os.environ.get("VELOX_EPOCHS", "3"))
work = Path(tempfile.mkdtemp(prefix="veloxnet-"))

# 8 samples per class, split 6/1/1, stored as 3x256x256 float32 files
manifest = synth_dataset(work / "data", classes=5, per_class=8, seed=0)
print("splits:", {s: len(manifest.split(s)) for s in ("train", "val", "test")})
print("channel mean:", manifest.mean.round(3), "std:", manifest.std.round(3))

model = Model(build_veloxnet(classes=5), seed=0)
records = fit(model, manifest, epochs=epochs, lr=1e-3, batch_size=8, seed=0,
              checkpoint_path=work / "best.vlxc", log_path=work / "log.csv")
for r in records:
    print(f"epoch {r.epoch}: train loss {r.train_loss:.4f} acc {r.train_accuracy:.2f} "
          f"val F1 {r.val_weighted_f1:.2f}")

# the best-validation checkpoint reloads into a fresh model
best = load_checkpoint(work / "best.vlxc")
report = evaluate(best, manifest, "test")
print("test confusion matrix:\n", report.confusion)
print("weighted F1:", round(report.weighted_f1, 3))

# local throughput only; the number depends entirely on this machine
rep = bench(best, batch=1, iters=3, warmup=1)
print(rep.header())
print(f"{rep.images_per_second:.1f} images/s on {rep.host}")

"""A miniature poisoning arena on synthetic data.

Runs FedAvg, coordinate-wise median and the adaptive defence against the
LMP attack for 30 rounds each, then prints the report table. Takes a
couple of minutes on one CPU core; the MNIST desk configs in ``configs/``
are the full-size version of the same experiment.
"""
import sys
import tempfile
from pathlib import Path

from flarena import config, experiment

BASE = """
[data]
dataset = synthetic
train_size = 1500
test_size = 500
root_size = 500
val_size = 300

[fl]
clients = 15
malicious = 3
fraction = 0.34
rounds = 30

[attack]
name = lmp

[adaagg]
max_iters = 10
num_images = 8
extractor_epochs = 2

[run]
seeds = 0
"""

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="arena_"))
for defense in ("fedavg", "median", "adaagg"):
    cfg = config.load_config(text=BASE, overrides=[f"defense.name={defense}"])
    experiment.run_experiment(cfg, out / defense, progress=lambda s, r: print(f"{defense} round {r.t} acc {r.test_acc:.3f}", end="\r"))
    print()
print(experiment.report([out], out / "report").text())
print(f"\nartifacts in {out}")

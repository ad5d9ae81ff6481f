"""
A short desk-scale run
======================

Trains the full method and the supervised-only baseline for a few epochs
on a fresh phantom set and prints the test scores. The acceptance suite
runs the same protocol for 60 epochs over three seeds.
"""

import sys
import tempfile
from pathlib import Path

from pccl.core import TrainConfig
from pccl.data import synth_generate
from pccl.trainer import read_history, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
work = Path(tempfile.mkdtemp())
synth_generate(340, 64, seed=7, root=work / "data")

config = TrainConfig.desk(epochs=epochs)
for mode in ("supervised_only", "pccl"):
    res = train(config, work / "data", mode, work / mode)
    print(f"{mode:16s} {res.test_report.summary()}")

###############################################################################
# The history is line-delimited JSON: one meta record, one record per step
# and one per epoch.

records = read_history(work / "pccl" / "history.jsonl")
last = [r for r in records if r["kind"] == "step"][-1]
print({k: round(v, 4) for k, v in last.items() if isinstance(v, float)})

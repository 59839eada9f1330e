"""
Counting the cost of a time step
================================

Spiking layers replace multiply-accumulates with plain accumulates that only
happen when a spike arrives. This demo tabulates the estimated inference
energy of several sequence architectures at the same sizes, then measures
the actual firing rates of a small spiking network to cost it.
"""

import numpy as np

from stprobe.energy import ArchDims, SpikeStats, analytic_report, energy_pj, energy_report
from stprobe.train import TrainConfig, build_network

dims = ArchDims(m=128, n=256, k=3, h=512, T=100)
rates = SpikeStats.uniform(0.1)
for arch in ("TCN", "SpikingTCN", "LSTM", "GSU", "Transformer", "SDT4", "SDT1",
             "DenseFC", "SpikingFC"):
    print(f"{arch:12s} {energy_pj(arch, dims, rates) / 1e3:12.2f} nJ")

###############################################################################
# A transformer whose spiking neurons integrate over four internal steps
# spends about four times the accumulate energy of a single-step one.

wide = ArchDims(n=512, h=2048, T=100)
rep = analytic_report(["SDT4", "SDT1"], wide, rates)
ratio = [r for r in rep.rows if r.architecture == "SDT4/SDT1"][0]
print(f"SDT4 / SDT1 energy ratio: {ratio.ratio:.3f}")

###############################################################################
# Measured mode: run inputs through an (untrained) network and cost each
# weight matrix by how often its source neurons actually fired.

cfg = TrainConfig(hidden=(32, 32))
net = build_network(cfg, 2, 10)
x = (np.random.default_rng(0).uniform(size=(64, 50, 2)) < 0.3).astype(np.float32)
for row in energy_report(net, x).rows:
    print(f"{row.layer:14s} {row.op_kind:4s} ops {row.op_count:12.1f}  {row.energy_nJ:10.4f} nJ")

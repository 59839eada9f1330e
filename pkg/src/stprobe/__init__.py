"""Temporal probing of spiking neural network benchmarks.

Train the same LIF network with full temporal credit assignment (STBP),
with credit confined to each step (SDBP) and with the temporal pathway
removed altogether (NoTD), then compare the three accuracies to judge
whether a benchmark actually exercises temporal processing.
"""

from .energy import (ArchDims, EnergyConstants, SpikeStats, analytic_report, energy_of,
                     energy_report, measure_spike_freq, op_counts)
from .engine import (ALGORITHMS, TEMPORAL_OFF, TEMPORAL_ON, LifParams, Network, Surrogate,
                     backward_notd, backward_sdbp, backward_stbp, init_network, lif_forward,
                     smooth_forward, softmax_xent, surrogate)
from .numerics import NonFiniteError, Rng64, choose_k, fisher_yates, matmul, rng_below, rng_next
from .stp import (CREDIT_UNNEEDED, FRAME_SUFFICIENT, SUITABLE, StpReport, classify_verdict,
                  confident_frame, run_stp)
from .tasks import (BinaryAddingSpec, SequenceDataset, brute_force_label, gen_binary_adding,
                    load_dataset, load_mnist_idx, make_ps_mnist, save_dataset)
from .train import Checkpoint, TrainConfig, TrainingDivergence, train_run

__version__ = "0.1.0"

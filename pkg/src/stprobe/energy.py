"""Theoretical energy accounting: operation counts times per-operation cost.

Each architecture's per-layer cost is expressed as a MAC count and an
(expected) AC count; energy is ``mac * E_MAC + ac * E_AC``.  Counts for
spiking layers are scaled by measured spike frequencies.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

E_AC_PJ = 0.9
E_MAC_PJ = 4.6


@dataclass(frozen=True)
class EnergyConstants:
    e_ac: float = E_AC_PJ
    e_mac: float = E_MAC_PJ

    def __post_init__(self):
        if self.e_ac <= 0 or self.e_mac <= 0:
            raise ValueError("energy per operation must be positive")


@dataclass(frozen=True)
class ArchDims:
    m: int = 1          # input size
    n: int = 1          # hidden size
    k: int = 1          # convolution kernel size
    h: int = 1          # feedforward hidden dim (transformers)
    T: int = 1          # sequence length (attention span)
    T_in: int = 1       # internal window; recorded only, the SDT rows fix it at 4 or 1
    layers: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if int(v) != v or v < 1:
                raise ValueError(f"{f.name} must be a positive integer, got {v}")


FREQ_NAMES = ("f_in", "f_out", "f_conv2", "f_Q", "f_K", "f_V", "f_attn", "f_fc1", "f_fc2")


@dataclass(frozen=True)
class SpikeStats:
    f_in: float | None = None
    f_out: float | None = None
    f_conv2: float | None = None
    f_Q: float | None = None
    f_K: float | None = None
    f_V: float | None = None
    f_attn: float | None = None
    f_fc1: float | None = None
    f_fc2: float | None = None

    def __post_init__(self):
        for name in FREQ_NAMES:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @classmethod
    def uniform(cls, f: float) -> "SpikeStats":
        return cls(**{name: f for name in FREQ_NAMES})


class MissingFrequencyError(ValueError):
    pass


def _need(stats: SpikeStats, *names):
    vals = []
    for name in names:
        v = getattr(stats, name)
        if v is None:
            raise MissingFrequencyError(f"formula needs {name}")
        vals.append(v)
    return vals


def _tcn(d, s):
    return d.k * d.m * d.n + d.k * d.n ** 2, 0.0


def _spiking_tcn(d, s):
    f_in, f_conv2 = _need(s, "f_in", "f_conv2")
    return 0, d.k * d.m * d.n * f_in + d.k * d.n ** 2 * f_conv2


def _lstm(d, s):
    return 4 * d.m * d.n + 4 * d.n ** 2 + 19 * d.n, 0.0


def _gsu(d, s):
    f_in, f_out = _need(s, "f_in", "f_out")
    return 5 * d.n, 2 * d.m * d.n * f_in + 2 * d.n ** 2 * f_out


def _transformer(d, s):
    return 4 * d.n ** 2 + 2 * d.n * d.T + 2 * d.n * d.h, 0.0


def _sdt_ac(d, s, scale):
    f_in, f_attn, f_q, f_k, f_v, f1, f2 = _need(
        s, "f_in", "f_attn", "f_Q", "f_K", "f_V", "f_fc1", "f_fc2")
    return scale * ((3 * f_in + f_attn) * d.n ** 2 + (f_q * f_k + f_v) * d.n * d.T
                    + (f1 + f2) * d.n * d.h)


def _sdt4(d, s):
    return 24 * d.n + 4 * d.h, _sdt_ac(d, s, 4)


def _sdt1(d, s):
    return 0, _sdt_ac(d, s, 1)


def _spiking_fc(d, s):
    (f_in,) = _need(s, "f_in")
    return 0, d.m * d.n * f_in


def _dense_fc(d, s):
    return d.m * d.n, 0.0


FORMULAS = {
    "TCN": _tcn,
    "SpikingTCN": _spiking_tcn,
    "LSTM": _lstm,
    "GSU": _gsu,
    "Transformer": _transformer,
    "SDT4": _sdt4,
    "SDT1": _sdt1,
    "SpikingFC": _spiking_fc,
    "DenseFC": _dense_fc,
}
SPIKING = {"SpikingTCN", "GSU", "SDT4", "SDT1", "SpikingFC"}
DENSE_COUNTERPART = {"SpikingTCN": "TCN", "GSU": "LSTM", "SDT4": "Transformer",
                     "SDT1": "Transformer", "SpikingFC": "DenseFC"}


def op_counts(arch: str, dims: ArchDims, stats: SpikeStats | None = None) -> tuple[float, float]:
    """(MAC count, expected AC count) for one layer."""
    if arch not in FORMULAS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(FORMULAS)}")
    return FORMULAS[arch](dims, stats or SpikeStats())


def energy_pj(arch: str, dims: ArchDims, stats: SpikeStats | None = None,
              consts: EnergyConstants = EnergyConstants(), per_model: bool = False) -> float:
    mac, ac = op_counts(arch, dims, stats)
    e = mac * consts.e_mac + ac * consts.e_ac
    return e * dims.layers if per_model else e


def energy_of(arch: str, dims: ArchDims, stats: SpikeStats | None = None,
              consts: EnergyConstants = EnergyConstants(), per_model: bool = False) -> float:
    """Per-layer energy in nJ (``per_model`` multiplies by ``dims.layers``)."""
    return energy_pj(arch, dims, stats, consts, per_model) / 1000.0


# -- measured mode -------------------------------------------------------------

def spike_frequency(spikes) -> float:
    """Fraction of nonzero entries (events) in a (T, batch, width) array."""
    a = np.asarray(spikes)
    if a.size == 0:
        raise ValueError("empty spike record")
    return float(np.count_nonzero(a)) / a.size


def measure_spike_freq(trace) -> list[SpikeStats]:
    """Input and output event frequency of every hidden layer of a trace.

    Layer 0's input frequency counts nonzero input values as events.
    """
    if trace is None or not trace.s:
        raise ValueError("trace holds no layers")
    out = []
    below = trace.inputs
    for s in trace.s:
        out.append(SpikeStats(f_in=spike_frequency(below), f_out=spike_frequency(s)))
        below = s
    return out


@dataclass
class EnergyRow:
    layer: str
    architecture: str
    op_kind: str
    op_count: float
    energy_nJ: float
    ratio: float


@dataclass
class EnergyReport:
    rows: list

    @property
    def spiking_total_nJ(self) -> float:
        return sum(r.energy_nJ for r in self.rows if r.op_kind == "AC" and r.layer != "total")

    @property
    def dense_total_nJ(self) -> float:
        return sum(r.energy_nJ for r in self.rows if r.op_kind == "MAC" and r.layer != "total")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("layer", "architecture", "op_kind", "op_count", "energy_nJ", "ratio"))
            for r in self.rows:
                w.writerow((r.layer, r.architecture, r.op_kind, _fmt(r.op_count),
                            _fmt(r.energy_nJ), _fmt(r.ratio)))


def _fmt(x) -> str:
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return repr(float(x))


def _ratio(dense, spiking):
    return math.inf if spiking == 0 else dense / spiking


def energy_report(net, inputs, consts: EnergyConstants = EnergyConstants(),
                  algorithm: str = "stbp") -> EnergyReport:
    """Spiking vs dense cost of every weight matrix of ``net`` on ``inputs``.

    ``inputs`` is batch-major, ``(batch, T, channels)``.
    Costs are per sample and cover all ``T`` steps: a spiking matrix performs
    ``T * m * n * f`` accumulates, its dense counterpart ``T * m * n`` MACs.
    """
    from .engine import lif_forward, mode_for

    trace = lif_forward(inputs, net, mode_for(algorithm))
    T = trace.steps
    rows = []
    sources = [("layers.%d.W" % i, layer.W, trace.s[i - 1] if i else trace.inputs)
               for i, layer in enumerate(net.layers)]
    for i, layer in enumerate(net.layers):
        if layer.V is not None:
            # the recurrent input at step t is s[t-1]; nothing arrives at t=0
            prev = np.concatenate([np.zeros_like(trace.s[i][:1]), trace.s[i][:-1]])
            sources.append(("layers.%d.V" % i, layer.V, prev))
    sources.append(("readout.W", net.readout.W, trace.s[-1]))
    sources.sort(key=lambda item: list(net.named_params()).index(item[0]))
    for name, W, pre in sources:
        n, m = W.shape
        f = spike_frequency(pre)
        dims = ArchDims(m=m, n=n)
        ac = T * op_counts("SpikingFC", dims, SpikeStats(f_in=f))[1]
        mac = T * op_counts("DenseFC", dims)[0]
        e_s = ac * consts.e_ac / 1000.0
        e_d = mac * consts.e_mac / 1000.0
        r = _ratio(e_d, e_s)
        rows.append(EnergyRow(name, "SpikingFC", "AC", ac, e_s, r))
        rows.append(EnergyRow(name, "DenseFC", "MAC", mac, e_d, r))
    s_tot = sum(r.energy_nJ for r in rows if r.op_kind == "AC")
    d_tot = sum(r.energy_nJ for r in rows if r.op_kind == "MAC")
    r_tot = _ratio(d_tot, s_tot)
    rows.append(EnergyRow("total", "SpikingFC", "AC",
                          sum(r.op_count for r in rows if r.op_kind == "AC"), s_tot, r_tot))
    rows.append(EnergyRow("total", "DenseFC", "MAC",
                          sum(r.op_count for r in rows if r.op_kind == "MAC"), d_tot, r_tot))
    return EnergyReport(rows)


def analytic_report(archs, dims: ArchDims, stats: SpikeStats | None = None,
                    consts: EnergyConstants = EnergyConstants()) -> EnergyReport:
    """Rows for each requested architecture formula.

    A spiking architecture's ratio is its dense counterpart's energy over its
    own (when the counterpart is computable from ``dims``); dense rows get
    ratio 1.  The SDT4 row additionally gets an ``SDT4/SDT1`` row when both
    are requested.
    """
    rows = []
    energies = {}
    for arch in archs:
        mac, ac = op_counts(arch, dims, stats)
        e = energy_of(arch, dims, stats, consts)
        energies[arch] = e
        ratio = 1.0
        if arch in SPIKING:
            ratio = _ratio(energy_of(DENSE_COUNTERPART[arch], dims, stats, consts), e)
        if mac:
            rows.append(EnergyRow("layer", arch, "MAC", mac, mac * consts.e_mac / 1000.0, ratio))
        if ac or arch in SPIKING:
            rows.append(EnergyRow("layer", arch, "AC", ac, ac * consts.e_ac / 1000.0, ratio))
    if "SDT4" in energies and "SDT1" in energies:
        rows.append(EnergyRow("layer", "SDT4/SDT1", "ratio", 0, energies["SDT4"],
                              _ratio(energies["SDT4"], energies["SDT1"])))
    return EnergyReport(rows)

"""Explicit threshold-model constructions and closed-form verification scans.

Each builder returns a tiny transformer whose designated hidden value
o_t[dim 3] follows a closed form in the position t: without any positional
remap the value crosses the threshold exactly at the window length M, while a
capped or staircase weave keeps it above threshold far beyond M.  The scan
runs the real forward pass and checks it against the independently computed
closed form.

The feed-forward step that turns the first layer's attention weight on the
first token back into an integer position is realized as an exact
breakpoint-lookup stand-in (any piecewise-capable MLP can implement it; see
build_position_decoder_mlp for an actual ReLU construction on a small range).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from weavepe.model import (
    DenseFF,
    ForwardTrace,
    HeadWeights,
    LayerWeights,
    ModelWeights,
    forward,
    zero_ff,
)
from weavepe.pe_core import Scheme, WeaveParams, weave_fn

#: double-precision floor for exp(-(t-1)); beyond this the first-layer signal underflows
MAX_SCAN = 700


@dataclass(frozen=True)
class TheoryConfig:
    """Shared knobs for the constructions.

    window is the effective length M, threshold the free bound H, cap/tread
    the weave parameters (N, E).  d >= 3 because the constructions use the
    first three hidden dimensions; h >= 3 leaves room for the position slots.
    """

    window: int                # M
    threshold: float = 0.0     # H
    cap: int = 2               # N (weave models only)
    tread: int = 1             # E (staircase only)
    d: int = 3
    h: int = 3
    t_max: int = MAX_SCAN

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.d < 3 or self.h < 1:
            raise ValueError("constructions need d >= 3 and h >= 1")
        if self.t_max > MAX_SCAN:
            raise ValueError(f"t_max > {MAX_SCAN} underflows exp(-(t-1)) in double precision")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")


def geometric_sum(t) -> np.ndarray | float:
    """S(t) = sum_{j=0}^{t-1} e^(-j), in closed form."""
    t_arr = np.asarray(t, dtype=np.float64)
    out = (1.0 - np.exp(-t_arr)) / (1.0 - math.exp(-1.0))
    return float(out) if np.ndim(t) == 0 else out


def bos_weight(t) -> np.ndarray | float:
    """g(t) = e^(-(t-1)) / S(t): the first-layer attention weight on the first token."""
    t_arr = np.asarray(t, dtype=np.float64)
    out = np.exp(-(t_arr - 1.0)) / geometric_sum(t_arr)
    return float(out) if np.ndim(t) == 0 else out


def weave_values(weave: WeaveParams | None, t_max: int) -> np.ndarray:
    """W(d) for d = 0..t_max-1; identity when no weave is given."""
    d = np.arange(t_max, dtype=np.int64)
    if weave is None:
        return d.astype(np.float64)
    return np.asarray(weave_fn(weave)(d), dtype=np.float64)


def weave_schedule(weave: WeaveParams | None, t_max: int) -> tuple[np.ndarray, np.ndarray]:
    """First-layer signal schedule under a weave.

    Returns (x, p) where x[t-1] = e^(-W(t-1)) / sum_{d<t} e^(-W(d)) is the
    weight on the first token at position t, and p[t-1] = W(t-1) + 1 the
    position the decoder should recover there.  x is decreasing; staircase
    schedules plateau within a tread once e^(-W) underflows against the sum,
    where p is constant too.
    """
    w = weave_values(weave, t_max)
    ew = np.exp(-w)
    denom = np.cumsum(ew)
    x = ew / denom
    p = w + 1.0
    return x, p


class PositionDecoder:
    """Nearest-breakpoint inverse of a non-increasing signal schedule.

    The staircase schedules plateau in double precision once e^(-W) underflows
    against the running sum; positions sharing one float value also share one
    recovered output, so exact duplicates are collapsed to a single breakpoint.
    """

    def __init__(self, signal: np.ndarray, recovered: np.ndarray):
        diffs = np.diff(signal)
        if np.any(diffs > 0):
            raise ValueError("signal schedule must be non-increasing")
        flat = np.nonzero(diffs == 0)[0]
        if np.any(recovered[flat] != recovered[flat + 1]):
            raise ValueError("equal signal values must recover equal positions")
        keep = np.concatenate([[True], diffs < 0])
        self.signal = signal[keep]
        self.recovered = recovered[keep]
        self._log_asc = np.log(self.signal)[::-1]  # ascending
        self._out_asc = self.recovered[::-1]
        # anything half a between-position gap below the last breakpoint is the
        # ambiguous underflow region; within-tread gaps can be tiny, so use a
        # fixed margin rather than the local gap
        self._floor = self._log_asc[0] - 0.5

    def decode(self, x) -> np.ndarray | float:
        lx = np.log(np.asarray(x, dtype=np.float64))
        if np.any(lx < self._floor):
            raise ValueError("signal below the smallest breakpoint (underflow region)")
        pos = np.searchsorted(self._log_asc, lx)
        pos = np.clip(pos, 1, len(self._log_asc) - 1)
        lo, hi = self._log_asc[pos - 1], self._log_asc[pos]
        pick = np.where(np.abs(lx - lo) <= np.abs(lx - hi), pos - 1, pos)
        out = self._out_asc[pick]
        return float(out) if np.ndim(x) == 0 else out


def position_inversion(x: float, t_max: int) -> int:
    """Recover the integer position t from g(t) by nearest-breakpoint lookup."""
    if not 0.0 < x:
        raise ValueError("signal must be positive")
    sched, rec = weave_schedule(None, t_max)
    return int(PositionDecoder(sched, rec).decode(x))


@dataclass
class PositionRecoveryFF:
    """Feed-forward stand-in writing the decoded position into dimension 3.

    The output complement is rounding-compensated so that adding it back to
    the sub-layer input yields the integer position bit-exactly.
    """

    decoder: PositionDecoder
    weave_doc: dict | None = None

    def __call__(self, z: np.ndarray) -> np.ndarray:
        x = z[2]
        target = np.asarray(self.decoder.decode(x), dtype=np.float64)
        comp = target - x
        for _ in range(3):
            resid = (comp + x) - target
            if not np.any(resid):
                break
            comp = comp - resid
        out = np.zeros_like(z)
        out[2] = comp
        return out

    def describe(self) -> dict:
        return {"kind": "position_recovery", **(self.weave_doc or {})}


def recovery_ff_from_doc(doc: dict) -> PositionRecoveryFF:
    weave = None
    if doc.get("scheme"):
        weave = WeaveParams(scheme=Scheme(doc["scheme"]), cap=doc["cap"], tread=doc["tread"])
    sched, rec = weave_schedule(weave, doc["t_max"])
    return PositionRecoveryFF(decoder=PositionDecoder(sched, rec), weave_doc=doc)


@dataclass
class TheoryModel:
    """A constructed model plus its closed-form oracles."""

    label: str
    weights: ModelWeights
    weave: WeaveParams | None
    cfg: TheoryConfig
    watch_dim: int = 2  # third dimension

    def alpha1(self, ts: np.ndarray) -> np.ndarray:
        """Closed-form final-layer attention weight on the first token at each t.

        Computed directly from the weave: alpha_i = W(t-1) - W(i-1) - W(t-i)
        (all zero for the un-woven models), then a stable softmax.  Independent
        of the transformer plumbing.
        """
        t_max = int(np.max(ts))
        w = weave_values(self.weave, t_max)
        out = np.empty(len(ts), dtype=np.float64)
        for j, t in enumerate(ts):
            i = np.arange(1, t + 1)
            alpha = w[t - 1] - w[i - 1] - w[t - i]
            out[j] = 1.0 / np.sum(np.exp(alpha - alpha[0]))
        return out

    def predict(self, ts: np.ndarray) -> np.ndarray:
        """Closed-form o_t[3] = H + alpha1(t) * M - 1 (equals M/t - 1 + H un-woven)."""
        return self.cfg.threshold + self.alpha1(ts) * self.cfg.window - 1.0

    def run(self, t_max: int | None = None) -> ForwardTrace:
        t_max = t_max or self.cfg.t_max
        tokens = [1] * (t_max - 1)  # plus <bos> gives columns t = 1..t_max
        return forward(tokens, self.weights, weave=self.weave)


def _embedding(cfg: TheoryConfig) -> np.ndarray:
    """d x 2 embedding: first dimension all ones, second marks <bos>."""
    w_e = np.zeros((cfg.d, 2))
    w_e[0, :] = 1.0
    w_e[1, 0] = 1.0
    return w_e


def _value_output_heads(cfg: TheoryConfig) -> tuple[np.ndarray, np.ndarray]:
    """Shared W_V / W_O: value row 1 carries M on <bos>, row 2 carries 1 - H
    everywhere; the output projection writes their difference into dim 3."""
    w_v = np.zeros((cfg.h, cfg.d))
    w_v[0, 1] = float(cfg.window)      # reads the <bos> flag
    w_v[1, 0] = 1.0 - cfg.threshold    # reads the all-ones dimension
    w_o = np.zeros((cfg.d, cfg.h))
    w_o[2, 0] = 1.0
    w_o[2, 1] = -1.0
    return w_v, w_o


def build_theorem1(cfg: TheoryConfig) -> TheoryModel:
    """One layer, no positional term: all keys identical, so attention is uniform
    and o_t[3] = M/t - 1 + H, crossing the threshold exactly at t = M."""
    w_k = np.zeros((cfg.h, cfg.d))
    w_k[:, 0] = 1.0  # every key becomes the all-ones vector
    w_q = np.zeros((cfg.h, cfg.d))
    w_v, w_o = _value_output_heads(cfg)
    layer = LayerWeights(heads=[HeadWeights(w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o)], ff=zero_ff(cfg.d))
    weights = ModelWeights(w_e=_embedding(cfg), layers=[layer], pe_family="dot")
    return TheoryModel(label="nope-threshold", weights=weights, weave=None, cfg=cfg)


def _build_two_layer(cfg: TheoryConfig, weave: WeaveParams | None, label: str) -> TheoryModel:
    """Two layers under the additive unit-slope positional score.

    Layer 1 zeroes queries and keys so the scores are pure woven distances;
    its softmax puts weight g on the first token and the FF stand-in inverts g
    to an integer position in dim 3.  Layer 2 pairs +position on the query
    with -position on the key so the recovered positions cancel against the
    positional term, reducing to the theorem-1 head with alpha_1 in place of 1/t.
    """
    if cfg.h < 3:
        raise ValueError("two-layer construction needs h >= 3")
    d, h = cfg.d, cfg.h

    # layer 1: extract position
    w_k1 = np.zeros((h, d))
    w_q1 = np.zeros((h, d))
    w_v1 = np.zeros((h, d))
    w_v1[0, 1] = 1.0  # value picks out the <bos> flag
    w_o1 = np.zeros((d, h))
    w_o1[2, 0] = 1.0
    w_o1[2, 1] = -1.0
    sched, rec = weave_schedule(weave, cfg.t_max)
    weave_doc = {
        "t_max": cfg.t_max,
        "scheme": weave.scheme.value if weave else None,
        "cap": weave.cap if weave else None,
        "tread": weave.tread if weave else None,
    }
    ff1 = PositionRecoveryFF(decoder=PositionDecoder(sched, rec), weave_doc=weave_doc)
    layer1 = LayerWeights(heads=[HeadWeights(w_q=w_q1, w_k=w_k1, w_v=w_v1, w_o=w_o1)], ff=ff1)

    # layer 2: query slot 1 carries +position, key slot 3 carries -position,
    # paired constant slots turn the product into the difference pos_t - pos_i
    w_q2 = np.zeros((h, d))
    w_q2[0, 2] = 1.0  # +position
    w_q2[2, 0] = 1.0  # constant 1
    w_k2 = np.zeros((h, d))
    w_k2[0, 0] = 1.0   # constant 1
    w_k2[2, 2] = -1.0  # -position
    w_v2, w_o2 = _value_output_heads(cfg)
    layer2 = LayerWeights(heads=[HeadWeights(w_q=w_q2, w_k=w_k2, w_v=w_v2, w_o=w_o2)], ff=zero_ff(d))

    weights = ModelWeights(
        w_e=_embedding(cfg),
        layers=[layer1, layer2],
        pe_family="additive",
        head_slopes=[1.0],
    )
    return TheoryModel(label=label, weights=weights, weave=weave, cfg=cfg)


def build_theorem2(cfg: TheoryConfig) -> TheoryModel:
    """Simple relative PE (score minus raw distance): same crossing at t = M."""
    return _build_two_layer(cfg, None, "pe-threshold")


def build_theorem3(cfg: TheoryConfig) -> TheoryModel:
    """Capped weave on the theorem-2 weights: recovered positions saturate at
    cap+1 and the first attention weight stays above 1/t, rescuing t > M."""
    if cfg.cap >= cfg.window:
        raise ValueError("weave point must sit inside the window (cap < M)")
    weave = WeaveParams(scheme=Scheme.REROPE, cap=cfg.cap)
    return _build_two_layer(cfg, weave, "capped-weave-rescue")


def build_corollary(cfg: TheoryConfig) -> TheoryModel:
    """Staircase weave on the theorem-2 weights."""
    if cfg.cap >= cfg.window:
        raise ValueError("weave point must sit inside the window (cap < M)")
    weave = WeaveParams(scheme=Scheme.STAIR, cap=cfg.cap, tread=cfg.tread)
    return _build_two_layer(cfg, weave, "stair-weave-rescue")


@dataclass
class ThresholdReport:
    """Observed vs closed-form designated hidden value per position."""

    label: str
    threshold: float
    ts: np.ndarray
    observed: np.ndarray
    predicted: np.ndarray
    crossing: int | None          # first t with observed <= H (within crossing_tol)
    max_abs_err: float
    tol: float
    crossing_tol: float = 1e-9

    @property
    def verdicts(self) -> np.ndarray:
        """True where the value stays strictly above the threshold."""
        return self.observed > self.threshold

    @property
    def agrees(self) -> bool:
        return self.max_abs_err <= self.tol

    def to_csv(self) -> str:
        lines = ["t,observed,predicted,verdict"]
        for t, o, p, v in zip(self.ts, self.observed, self.predicted, self.verdicts):
            lines.append(f"{t},{o:.12g},{p:.12g},{'success' if v else 'fail'}")
        return "\n".join(lines) + "\n"


def threshold_scan(model: TheoryModel, t_max: int | None = None, tol: float = 1e-9) -> ThresholdReport:
    """Run the forward pass for t = 1..t_max and compare against the closed form."""
    t_max = t_max or model.cfg.t_max
    trace = model.run(t_max)
    observed = trace.attn[-1][model.watch_dim, :]
    ts = np.arange(1, t_max + 1)
    predicted = model.predict(ts)
    err = float(np.max(np.abs(observed - predicted)))
    below = np.nonzero(observed <= model.cfg.threshold + 1e-9)[0]
    crossing = int(ts[below[0]]) if below.size else None
    return ThresholdReport(
        label=model.label,
        threshold=model.cfg.threshold,
        ts=ts,
        observed=observed,
        predicted=predicted,
        crossing=crossing,
        max_abs_err=err,
        tol=tol,
    )


def scan_cap(window: int, cap: int, t_max: int = MAX_SCAN) -> int:
    """Scan ceiling min(t_max, M * e^N / 2) used by the rescue checks."""
    return int(min(t_max, window * math.exp(cap) / 2.0))


def build_position_decoder_mlp(t_max: int = 64, d: int = 3, ramp_frac: float = 0.1) -> DenseFF:
    """An actual ReLU network realizing the position decoder on t <= t_max.

    Uses the constant dimension (hidden dim 1 is always 1) as a bias source.
    decode(x) = 1 + sum of steep ramps that switch between consecutive
    breakpoints g(t); the output complement is decode(x) - x so the residual
    path reconstructs the integer position.  Demonstrates that the
    breakpoint-lookup stand-in is MLP-realizable; not used by the scans.
    """
    g = bos_weight(np.arange(1, t_max + 1, dtype=np.float64))
    cols: list[np.ndarray] = []
    coefs: list[float] = []

    def unit(const: float, xcoef: float, out_coef: float) -> None:
        c = np.zeros(d)
        c[0] = const    # reads the all-ones dimension
        c[2] = xcoef    # reads the signal dimension
        cols.append(c)
        coefs.append(out_coef)

    # identity pair: relu(x) - relu(-x) = x, contributed with weight -1
    unit(0.0, 1.0, -1.0)
    unit(0.0, -1.0, 1.0)
    # constant 1 (base position)
    unit(1.0, 0.0, 1.0)
    # one ramp per step t-1 -> t, switching inside the gap (g(t), g(t-1))
    for t in range(2, t_max + 1):
        hi, lo = g[t - 2], g[t - 1]
        width = ramp_frac * (hi - lo)
        mid = 0.5 * (hi + lo)
        # (relu(mid + w/2 - x) - relu(mid - w/2 - x)) / w : 0 above the gap, 1 below
        unit(mid + width / 2.0, -1.0, 1.0 / width)
        unit(mid - width / 2.0, -1.0, -1.0 / width)

    w1 = np.stack(cols, axis=1)  # (d, units)
    w2 = np.zeros((d, w1.shape[1]))
    w2[2, :] = np.asarray(coefs)
    return DenseFF(w1=w1, w2=w2)

"""Post-hoc recalibration of next-token distributions.

Two flavors:

* a coverage-gated EOS logit correction plus a learned per-token inverse
  temperature ``g(entropy) * h(corrected logit)``, where g and h are tiny
  feed-forward nets (1 -> 3 -> 3 -> 1, ReLU hidden, sigmoid output) fitted
  by full-batch gradient descent on validation NLL with hand-derived
  analytic gradients;
* a single global temperature ``p ** (1/T)`` fitted by golden-section
  search on validation NLL.

All fitting is deterministic given the seed and input order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import FitError, SeqcalError, ValidationError
from .features import FeatureConfig, attention_entropy, coverage
from .records import TokenRecord, densify
from .sequence import ScoringModel

PARAMS_VERSION = "seqcal-params-v1"

NET_HIDDEN = 3
NET_SIZE = 4 * NET_HIDDEN + NET_HIDDEN * NET_HIDDEN + 1  # 22 scalars per net
THETA_SIZE = 2 + 2 * NET_SIZE


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = -np.log1p(np.exp(-x[pos]))
    out[~pos] = x[~pos] - np.log1p(np.exp(x[~pos]))
    return out if out.ndim else float(out)


@dataclass
class ScalarNet:
    """1 -> 3 -> 3 -> 1 feed-forward net with ReLU hidden layers and sigmoid output."""

    w1: np.ndarray  # (3,)
    b1: np.ndarray  # (3,)
    w2: np.ndarray  # (3, 3)
    b2: np.ndarray  # (3,)
    w3: np.ndarray  # (3,)
    b3: float

    @classmethod
    def zeros(cls) -> "ScalarNet":
        return cls.from_flat(np.zeros(NET_SIZE))

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "ScalarNet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (NET_SIZE,):
            raise ValidationError("net", f"expected {NET_SIZE} weights, got {flat.shape}")
        h = NET_HIDDEN
        return cls(
            w1=flat[0:h].copy(),
            b1=flat[h : 2 * h].copy(),
            w2=flat[2 * h : 2 * h + h * h].reshape(h, h).copy(),
            b2=flat[2 * h + h * h : 3 * h + h * h].copy(),
            w3=flat[3 * h + h * h : 4 * h + h * h].copy(),
            b3=float(flat[4 * h + h * h]),
        )

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [self.w1, self.b1, self.w2.reshape(-1), self.b2, self.w3, [self.b3]]
        )

    def forward(self, x: np.ndarray):
        """Sigmoid output in (0, 1) for a batch of scalar inputs."""
        x = np.asarray(x, dtype=np.float64)
        z1 = np.outer(x, self.w1) + self.b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.w2.T + self.b2
        a2 = np.maximum(z2, 0.0)
        z3 = a2 @ self.w3 + self.b3
        out = sigmoid(z3)
        return out, (x, z1 > 0, a1, z2 > 0, a2, out)

    def backward(self, cache, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Parameter gradients (flat, 22) and input gradients for ``dout``."""
        x, m1, a1, m2, a2, out = cache
        dz3 = dout * out * (1.0 - out)
        g_w3 = a2.T @ dz3
        g_b3 = dz3.sum()
        dz2 = (dz3[:, None] * self.w3) * m2
        g_w2 = dz2.T @ a1
        g_b2 = dz2.sum(axis=0)
        dz1 = (dz2 @ self.w2) * m1
        g_w1 = dz1.T @ x
        g_b1 = dz1.sum(axis=0)
        dx = dz1 @ self.w1
        grads = np.concatenate([g_w1, g_b1, g_w2.reshape(-1), g_b2, g_w3, [g_b3]])
        return grads, dx


@dataclass
class CalibratorParams:
    """Learned recalibration parameters.

    With ``plus_one`` off each temperature factor is sigma(net(.)) in (0, 1)
    so the inverse temperature lies in (0, 1); with it on each factor is
    1 + sigma(net(.)), giving an inverse temperature in (1, 4).
    """

    w1: float
    w2: float
    g_net: ScalarNet
    h_net: ScalarNet
    plus_one: bool = False

    def to_flat(self) -> np.ndarray:
        return np.concatenate([[self.w1, self.w2], self.g_net.to_flat(), self.h_net.to_flat()])

    @classmethod
    def from_flat(cls, theta: np.ndarray, plus_one: bool) -> "CalibratorParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (THETA_SIZE,):
            raise ValidationError("params", f"expected {THETA_SIZE} parameters, got {theta.shape}")
        return cls(
            w1=float(theta[0]),
            w2=float(theta[1]),
            g_net=ScalarNet.from_flat(theta[2 : 2 + NET_SIZE]),
            h_net=ScalarNet.from_flat(theta[2 + NET_SIZE :]),
            plus_one=plus_one,
        )


@dataclass(frozen=True)
class SingleTemperature:
    """Global-temperature recalibration: p ** (1/temperature), renormalized."""

    temperature: float


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    max_epochs: int = 2000
    tolerance: float = 1e-10
    seed: int = 0
    init_scale: float = 0.1

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.max_epochs <= 0 or self.tolerance <= 0:
            raise FitError("learning rate, epoch budget, and tolerance must be positive")


def _offset(params: CalibratorParams) -> float:
    return 1.0 if params.plus_one else 0.0


def eos_correction(
    logits: np.ndarray, c_t: float, eos_id: int, params: CalibratorParams
) -> np.ndarray:
    """Add ln(sigma(w1 * (c_t - w2))) to the EOS logit; always non-positive."""
    corrected = np.array(logits, dtype=np.float64, copy=True)
    corrected[eos_id] += log_sigmoid(params.w1 * (c_t - params.w2))
    return corrected


def inverse_temperature(a_t: float, l_prime, params: CalibratorParams):
    """Per-token inverse temperature g(a_t) * h(l') for scalar or vector l'."""
    g_out, _ = params.g_net.forward(np.asarray([a_t]))
    l_arr = np.atleast_1d(np.asarray(l_prime, dtype=np.float64))
    h_out, _ = params.h_net.forward(l_arr)
    value = (g_out[0] + _offset(params)) * (h_out + _offset(params))
    return value if np.ndim(l_prime) else float(value[0])


def recalibrate_distribution(
    dense: np.ndarray, entropy: float, cov: float, eos_id: int, params: CalibratorParams
) -> np.ndarray:
    """Recalibrated distribution: softmax of corrected-logit times inverse temperature.

    Zero-probability tokens stay at exactly zero; the output is a valid
    distribution (non-negative, sums to 1 within 1e-9).
    """
    dense = np.asarray(dense, dtype=np.float64)
    active = dense > 0
    logits = np.full(dense.shape, -np.inf)
    logits[active] = np.log(dense[active])
    logits[eos_id] += log_sigmoid(params.w1 * (cov - params.w2))

    g_out, _ = params.g_net.forward(np.asarray([entropy]))
    gf = g_out[0] + _offset(params)
    h_out, _ = params.h_net.forward(logits[active])
    hf = h_out + _offset(params)

    z = np.full(dense.shape, -np.inf)
    z[active] = logits[active] * gf * hf
    return _masked_softmax(z, active)


def _masked_softmax(z: np.ndarray, active: np.ndarray) -> np.ndarray:
    out = np.zeros(z.shape)
    zs = z[active]
    m = zs.max()
    e = np.exp(zs - m)
    out[active] = e / e.sum()
    return out


def apply_calibrator(
    record: TokenRecord,
    params: CalibratorParams,
    feature_cfg: FeatureConfig = FeatureConfig(),
) -> np.ndarray:
    """Recalibrate one record's dense distribution using its stored features.

    Falls back to computing features from the record's attention vectors
    when they are absent; raises if neither is available.
    """
    feats = record.features
    if feats is None:
        if record.attention is None or record.cum_attention is None:
            raise FitError(
                f"sequence {record.seq_id!r} step {record.t}: no features and no attention to derive them"
            )
        from .records import StepFeatures

        feats = StepFeatures(
            entropy=attention_entropy(record.attention),
            coverage=coverage(record.cum_attention, feature_cfg.coverage_threshold),
        )
    return recalibrate_distribution(densify(record), feats.entropy, feats.coverage, record.eos_id, params)


def apply_single_temperature(record: TokenRecord, temperature: float) -> np.ndarray:
    """Dense distribution proportional to p ** (1/T); preserves the ranking."""
    if temperature <= 0:
        raise FitError(f"temperature must be positive, got {temperature}")
    dense = densify(record)
    active = dense > 0
    z = np.full(dense.shape, -np.inf)
    z[active] = np.log(dense[active]) / temperature
    return _masked_softmax(z, active)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


@dataclass
class _Prepared:
    logits: np.ndarray      # (L, V), -inf where the model put zero mass
    active: np.ndarray      # (L, V) bool
    gold: np.ndarray        # (L,)
    entropy: np.ndarray     # (L,)
    coverage: np.ndarray    # (L,)
    eos_id: int
    ids: list[tuple[str, int]]


def _prepare(records: Sequence[TokenRecord]) -> _Prepared:
    if not records:
        raise FitError("cannot fit on an empty dataset")
    vocab = records[0].vocab_size
    eos_id = records[0].eos_id
    dense_rows = np.empty((len(records), vocab))
    entropies = np.empty(len(records))
    coverages = np.empty(len(records))
    gold = np.empty(len(records), dtype=np.int64)
    ids: list[tuple[str, int]] = []
    for i, record in enumerate(records):
        if record.vocab_size != vocab or record.eos_id != eos_id:
            raise FitError(
                f"sequence {record.seq_id!r} step {record.t}: vocabulary/EOS differs from the rest of the dataset"
            )
        if record.features is None:
            raise FitError(f"sequence {record.seq_id!r} step {record.t}: features missing; enrich first")
        dense_rows[i] = densify(record)
        if dense_rows[i, record.gold_id] <= 0.0:
            raise FitError(
                f"sequence {record.seq_id!r} step {record.t}: gold token {record.gold_id} "
                "has zero probability, loss would be infinite"
            )
        entropies[i] = record.features.entropy
        coverages[i] = record.features.coverage
        gold[i] = record.gold_id
        ids.append((record.seq_id, record.t))
    active = dense_rows > 0
    logits = np.full(dense_rows.shape, -np.inf)
    logits[active] = np.log(dense_rows[active])
    return _Prepared(logits, active, gold, entropies, coverages, eos_id, ids)


def _forward_backward(
    theta: np.ndarray, prep: _Prepared, plus_one: bool, want_grad: bool = True
):
    """Mean NLL of the recalibrated gold probabilities and its exact gradient.

    Overflow is deliberately tolerated here: runaway parameters produce a
    non-finite loss, which the fit loop detects and reports.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward_backward_inner(theta, prep, plus_one, want_grad)


def _forward_backward_inner(theta: np.ndarray, prep: _Prepared, plus_one: bool, want_grad: bool):
    n = len(prep.gold)
    rows = np.arange(n)
    offset = 1.0 if plus_one else 0.0
    w1, w2 = theta[0], theta[1]
    g_net = ScalarNet.from_flat(theta[2 : 2 + NET_SIZE])
    h_net = ScalarNet.from_flat(theta[2 + NET_SIZE :])

    u = w1 * (prep.coverage - w2)
    s = sigmoid(u)
    lp = prep.logits.copy()
    lp[:, prep.eos_id] += log_sigmoid(u)

    g_out, g_cache = g_net.forward(prep.entropy)
    gf = g_out + offset

    flat_inputs = lp[prep.active]
    h_out, h_cache = h_net.forward(flat_inputs)
    hf = np.ones(lp.shape)
    hf[prep.active] = h_out + offset

    lp0 = np.where(prep.active, lp, 0.0)
    z = np.where(prep.active, lp0 * gf[:, None] * hf, -np.inf)
    m = z.max(axis=1)
    e = np.exp(z - m[:, None])
    denom = e.sum(axis=1)
    losses = -z[rows, prep.gold] + m + np.log(denom)
    value = float(losses.mean())
    if not want_grad:
        return value, None, losses

    r = e / denom[:, None]
    r[rows, prep.gold] -= 1.0
    r /= n

    d_gf = np.sum(np.where(prep.active, r * lp0 * hf, 0.0), axis=1)
    g_grads, _ = g_net.backward(g_cache, d_gf)

    d_hf_flat = (r * lp0 * gf[:, None])[prep.active]
    h_grads, d_inputs = h_net.backward(h_cache, d_hf_flat)

    dlp = np.where(prep.active, r * gf[:, None] * hf, 0.0)
    dlp[prep.active] += d_inputs

    d_log_s = dlp[:, prep.eos_id]
    du = d_log_s * (1.0 - s)
    d_w1 = float(np.sum(du * (prep.coverage - w2)))
    d_w2 = float(np.sum(du * (-w1)))

    grad = np.concatenate([[d_w1, d_w2], g_grads, h_grads])
    return value, grad, losses


def calibration_nll(records: Sequence[TokenRecord], params: CalibratorParams) -> float:
    """Mean NLL of gold tokens under the recalibrated distributions."""
    prep = _prepare(list(records))
    value, _, _ = _forward_backward(params.to_flat(), prep, params.plus_one, want_grad=False)
    return value


def calibration_gradient(params: CalibratorParams, records: Sequence[TokenRecord]) -> np.ndarray:
    """Exact gradient of the mean NLL over (w1, w2, g_net, h_net), flattened."""
    prep = _prepare(list(records))
    _, grad, _ = _forward_backward(params.to_flat(), prep, params.plus_one)
    return grad


def initial_params(cfg: TrainConfig, plus_one: bool) -> CalibratorParams:
    """Seeded starting point: small symmetric nets, damping engaged near the
    default coverage threshold."""
    rng = np.random.default_rng(cfg.seed)
    theta = np.empty(THETA_SIZE)
    theta[0] = 1.0
    theta[1] = 0.35
    theta[2:] = rng.uniform(-cfg.init_scale, cfg.init_scale, THETA_SIZE - 2)
    return CalibratorParams.from_flat(theta, plus_one)


def fit_calibrator(
    records: Sequence[TokenRecord],
    cfg: TrainConfig = TrainConfig(),
    *,
    plus_one: bool = False,
) -> CalibratorParams:
    """Full-batch gradient descent on validation NLL; returns the best-seen
    parameters, never worse than the initialization."""
    prep = _prepare(list(records))
    theta = initial_params(cfg, plus_one).to_flat()
    best_theta = theta.copy()
    best_nll = math.inf
    prev_nll = math.inf
    for epoch in range(cfg.max_epochs):
        value, grad, losses = _forward_backward(theta, prep, plus_one)
        if not math.isfinite(value):
            bad = int(np.argmax(~np.isfinite(losses)))
            seq_id, t = prep.ids[bad]
            raise FitError(
                f"non-finite loss at epoch {epoch} (sequence {seq_id!r} step {t}); "
                "reduce the learning rate"
            )
        if value < best_nll:
            best_nll = value
            best_theta = theta.copy()
        if abs(prev_nll - value) < cfg.tolerance:
            break
        prev_nll = value
        theta = theta - cfg.learning_rate * grad
    return CalibratorParams.from_flat(best_theta, plus_one)


def golden_section(f, lo: float, hi: float, tol: float = 1e-8, max_iter: int = 200) -> float:
    """Minimize a unimodal function on [lo, hi]; ties collapse toward lo."""
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        c = hi - ratio * (hi - lo)
        d = lo + ratio * (hi - lo)
        if f(c) <= f(d):
            hi = d
        else:
            lo = c
    return 0.5 * (lo + hi)


TEMPERATURE_RANGE = (0.05, 20.0)


def fit_single_temperature(records: Sequence[TokenRecord]) -> float:
    """Temperature minimizing validation NLL of p ** (1/T), via golden-section
    search over [0.05, 20] with a final parabolic refinement."""
    prep = _prepare_logits_only(list(records))

    def objective(temperature: float) -> float:
        return _temperature_nll(prep, temperature)

    lo, hi = TEMPERATURE_RANGE
    center = golden_section(objective, lo, hi, tol=1e-6)
    h = 1e-4
    a = max(lo, center - h)
    b = min(hi, center + h)
    fa, fc, fb = objective(a), objective(center), objective(b)
    denom = fa - 2.0 * fc + fb
    refined = center
    if denom > 0:
        refined = center + 0.5 * (fa - fb) / denom * h
        refined = min(max(refined, lo), hi)
    candidates = [(fa, a), (fc, center), (fb, b), (objective(refined), refined)]
    return min(candidates)[1]


@dataclass
class _LogitsOnly:
    logits: np.ndarray
    active: np.ndarray
    gold: np.ndarray


def _prepare_logits_only(records: Sequence[TokenRecord]) -> _LogitsOnly:
    if not records:
        raise FitError("cannot fit on an empty dataset")
    vocab = records[0].vocab_size
    dense_rows = np.empty((len(records), vocab))
    gold = np.empty(len(records), dtype=np.int64)
    for i, record in enumerate(records):
        if record.vocab_size != vocab:
            raise FitError(
                f"sequence {record.seq_id!r} step {record.t}: vocabulary differs from the rest of the dataset"
            )
        dense_rows[i] = densify(record)
        if dense_rows[i, record.gold_id] <= 0.0:
            raise FitError(
                f"sequence {record.seq_id!r} step {record.t}: gold token has zero probability"
            )
        gold[i] = record.gold_id
    active = dense_rows > 0
    logits = np.full(dense_rows.shape, -np.inf)
    logits[active] = np.log(dense_rows[active])
    return _LogitsOnly(logits, active, gold)


def _temperature_nll(prep: _LogitsOnly, temperature: float) -> float:
    z = np.where(prep.active, prep.logits / temperature, -np.inf)
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    rows = np.arange(len(prep.gold))
    return float(np.mean(-z[rows, prep.gold] + lse))


def single_temperature_nll(records: Sequence[TokenRecord], temperature: float) -> float:
    """Mean NLL of gold tokens after global temperature scaling."""
    if temperature <= 0:
        raise FitError(f"temperature must be positive, got {temperature}")
    return _temperature_nll(_prepare_logits_only(list(records)), temperature)


# ---------------------------------------------------------------------------
# Params file IO and model wrapping
# ---------------------------------------------------------------------------


def _net_to_json(net: ScalarNet) -> tuple[list, list]:
    weights = [
        [[float(w)] for w in net.w1],
        [[float(v) for v in row] for row in net.w2],
        [[float(w) for w in net.w3]],
    ]
    biases = [[float(b) for b in net.b1], [float(b) for b in net.b2], [float(net.b3)]]
    return weights, biases


def _net_from_json(weights: list, biases: list) -> ScalarNet:
    return ScalarNet(
        w1=np.asarray([row[0] for row in weights[0]], dtype=np.float64),
        b1=np.asarray(biases[0], dtype=np.float64),
        w2=np.asarray(weights[1], dtype=np.float64),
        b2=np.asarray(biases[1], dtype=np.float64),
        w3=np.asarray(weights[2][0], dtype=np.float64),
        b3=float(biases[2][0]),
    )


def params_to_payload(params: CalibratorParams | SingleTemperature) -> dict:
    if isinstance(params, SingleTemperature):
        return {
            "version": PARAMS_VERSION,
            "mode": "single",
            "temperature": params.temperature,
        }
    g_w, g_b = _net_to_json(params.g_net)
    h_w, h_b = _net_to_json(params.h_net)
    return {
        "version": PARAMS_VERSION,
        "mode": "variable",
        "w1": params.w1,
        "w2": params.w2,
        "plus_one": params.plus_one,
        "g_net": g_w,
        "g_bias": g_b,
        "h_net": h_w,
        "h_bias": h_b,
    }


def params_from_payload(payload: dict) -> CalibratorParams | SingleTemperature:
    if payload.get("version") != PARAMS_VERSION:
        raise SeqcalError(f"unsupported params file version {payload.get('version')!r}")
    if payload.get("mode") == "single":
        return SingleTemperature(temperature=float(payload["temperature"]))
    return CalibratorParams(
        w1=float(payload["w1"]),
        w2=float(payload["w2"]),
        g_net=_net_from_json(payload["g_net"], payload["g_bias"]),
        h_net=_net_from_json(payload["h_net"], payload["h_bias"]),
        plus_one=bool(payload["plus_one"]),
    )


def save_params(path, params: CalibratorParams | SingleTemperature) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(params_to_payload(params), handle, indent=2)
        handle.write("\n")


def load_params(path) -> CalibratorParams | SingleTemperature:
    with open(path, "r", encoding="utf-8") as handle:
        return params_from_payload(json.load(handle))


class CalibratedModel(ScoringModel):
    """Wrap a scoring model so every step distribution is recalibrated.

    Features are derived online exactly as the log pipeline derives them:
    cumulative attention includes the current step.
    """

    def __init__(
        self,
        inner: ScoringModel,
        params: CalibratorParams | SingleTemperature,
        feature_cfg: FeatureConfig = FeatureConfig(),
    ):
        self.inner = inner
        self.params = params
        self.feature_cfg = feature_cfg

    @property
    def vocab_size(self) -> int:
        return self.inner.vocab_size

    @property
    def eos_id(self) -> int:
        return self.inner.eos_id

    def start(self, source):
        return (self.inner.start(source), None)

    def step(self, state, prefix):
        inner_state, cum = state
        probs, alpha, next_inner = self.inner.step(inner_state, prefix)
        alpha = np.asarray(alpha, dtype=np.float64)
        cum = alpha.copy() if cum is None else cum + alpha
        if isinstance(self.params, SingleTemperature):
            adjusted = _temperature_transform(probs, self.params.temperature)
        else:
            adjusted = recalibrate_distribution(
                np.asarray(probs, dtype=np.float64),
                attention_entropy(alpha),
                coverage(cum, self.feature_cfg.coverage_threshold),
                self.eos_id,
                self.params,
            )
        return adjusted, alpha, (next_inner, cum)


def _temperature_transform(probs: np.ndarray, temperature: float) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    active = probs > 0
    z = np.full(probs.shape, -np.inf)
    z[active] = np.log(probs[active]) / temperature
    return _masked_softmax(z, active)

"""Neural predicate P: a sequence encoder over prefixes with a sigmoid head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _node
from .eventlog import Prefix, Trace

PAD, OOV = 0, 1
TRUTH_EPS = 1e-6
CHECKPOINT_FORMAT = "ltnppm-checkpoint"
CHECKPOINT_VERSION = 1
TIME_FEATURES = ("hours_since_prev", "hours_since_start")


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    backbone: str = "recurrent"  # recurrent | pooled_mlp
    cell: str = "gru"  # gru | lstm
    layers: int = 1
    hidden: int = 32
    embed_dim: int = 16

    def __post_init__(self):
        if self.backbone not in ("recurrent", "pooled_mlp"):
            raise ValueError(f"unknown backbone {self.backbone!r}")
        if self.cell not in ("gru", "lstm"):
            raise ValueError(f"unknown recurrent cell {self.cell!r}")
        if self.hidden < 1 or self.embed_dim < 1 or self.layers < 1:
            raise ValueError("hidden, embed_dim and layers must be >= 1")


FIDELITY_CONFIG = EncoderConfig(backbone="recurrent", cell="lstm", layers=2, hidden=128, embed_dim=32)


# --- feature space ------------------------------------------------------


@dataclass
class FeatureSpace:
    """Vocabularies and normalization statistics fitted on training traces.

    Index 0 is padding/missing and 1 the out-of-vocabulary bucket for every
    categorical vocabulary.  Numeric inputs are event attributes, numeric case
    attributes (repeated per event) and two elapsed-time features.
    """

    activities: list[str]
    categorical: dict[str, list[str]]
    numeric: list[str]
    mean: list[float]
    std: list[float]
    case_numeric: list[str] = field(default_factory=list)
    case_categorical: list[str] = field(default_factory=list)

    @classmethod
    def fit(cls, traces: Sequence[Trace]) -> "FeatureSpace":
        acts = sorted({e.activity for t in traces for e in t.events})
        ev_num: set[str] = set()
        ev_cat: dict[str, set[str]] = {}
        case_num: set[str] = set()
        case_cat: dict[str, set[str]] = {}
        for t in traces:
            for k, v in t.case_attributes.items():
                if isinstance(v, str):
                    case_cat.setdefault(k, set()).add(v)
                else:
                    case_num.add(k)
            for e in t.events:
                for k, v in e.attributes.items():
                    if isinstance(v, str):
                        ev_cat.setdefault(k, set()).add(v)
                    else:
                        ev_num.add(k)
        categorical = {f"event:{k}": sorted(v) for k, v in sorted(ev_cat.items())}
        categorical.update({f"case:{k}": sorted(v) for k, v in sorted(case_cat.items())})
        numeric = [*TIME_FEATURES, *(f"event:{k}" for k in sorted(ev_num)),
                   *(f"case:{k}" for k in sorted(case_num))]
        space = cls(acts, categorical, numeric, [0.0] * len(numeric), [1.0] * len(numeric),
                    sorted(case_num), sorted(case_cat))
        raw = [space._raw_numeric(t) for t in traces]
        stacked = np.concatenate(raw, axis=0) if raw else np.zeros((0, len(numeric)))
        for j in range(len(numeric)):
            col = stacked[:, j]
            col = col[~np.isnan(col)]
            if col.size:
                space.mean[j] = float(col.mean())
                sd = float(col.std())
                space.std[j] = sd if sd > 1e-12 else 1.0
        return space

    @property
    def n_activities(self) -> int:
        return len(self.activities) + 2

    def _raw_numeric(self, trace) -> np.ndarray:
        events = trace.events
        out = np.full((len(events), len(self.numeric)), np.nan)
        t0 = events[0].timestamp if events else None
        for i, e in enumerate(events):
            prev = events[i - 1].timestamp if i else e.timestamp
            out[i, 0] = (e.timestamp - prev).total_seconds() / 3600.0
            out[i, 1] = (e.timestamp - t0).total_seconds() / 3600.0
            for j, name in enumerate(self.numeric[2:], start=2):
                scope, key = name.split(":", 1)
                v = trace.case_attributes.get(key) if scope == "case" else e.attributes.get(key)
                if isinstance(v, float):
                    out[i, j] = v
        return out

    def encode_events(self, trace) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Activity codes [T], categorical codes [T, C], standardized numerics [T, N]."""
        act_index = {a: i + 2 for i, a in enumerate(self.activities)}
        cat_index = {name: {v: i + 2 for i, v in enumerate(vals)} for name, vals in self.categorical.items()}
        T = len(trace.events)
        acts = np.array([act_index.get(e.activity, OOV) for e in trace.events], dtype=np.intp)
        cats = np.zeros((T, len(self.categorical)), dtype=np.intp)
        for j, name in enumerate(self.categorical):
            scope, key = name.split(":", 1)
            for i, e in enumerate(trace.events):
                v = trace.case_attributes.get(key) if scope == "case" else e.attributes.get(key)
                if v is not None:
                    cats[i, j] = cat_index[name].get(str(v), OOV)
        nums = (self._raw_numeric(trace) - np.array(self.mean)) / np.array(self.std)
        nums = np.nan_to_num(nums, nan=0.0)
        return acts, cats, nums

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpace":
        return cls(**d)


@dataclass
class PrefixEncoding:
    activities: np.ndarray  # [B, L] int
    categorical: np.ndarray  # [B, L, C] int
    numeric: np.ndarray  # [B, L, N]
    mask: np.ndarray  # [B, L] float, 1 for real events
    lengths: np.ndarray  # [B]

    def __len__(self) -> int:
        return self.activities.shape[0]


def encode_batch(prefixes: Sequence[Prefix], space: FeatureSpace, pad_to: int | None = None) -> PrefixEncoding:
    if not prefixes:
        raise ValueError("empty batch")
    for p in prefixes:
        if len(p.events) == 0:
            raise ValueError(f"prefix of case {p.case_id!r} has no events")
    L = max(max(len(p.events) for p in prefixes), pad_to or 0)
    B, C, N = len(prefixes), len(space.categorical), len(space.numeric)
    acts = np.zeros((B, L), dtype=np.intp)
    cats = np.zeros((B, L, C), dtype=np.intp)
    nums = np.zeros((B, L, N))
    lengths = np.array([len(p.events) for p in prefixes])
    for b, p in enumerate(prefixes):
        a, c, n = space.encode_events(p)
        k = len(p.events)
        acts[b, :k], cats[b, :k], nums[b, :k] = a, c, n
    mask = (np.arange(L)[None, :] < lengths[:, None]).astype(float)
    return PrefixEncoding(acts, cats, nums, mask, lengths)


class PrefixTable:
    """Pre-encoded traces; batches are sliced out by (trace, length) pairs.

    Prefix features never look ahead, so the encoding of a prefix equals the
    first k rows of its trace's encoding.
    """

    def __init__(self, traces: Sequence[Trace], prefixes: Sequence[Prefix], space: FeatureSpace):
        index = {t.case_id: i for i, t in enumerate(traces)}
        T = max(len(t) for t in traces)
        C, N = len(space.categorical), len(space.numeric)
        self.acts = np.zeros((len(traces), T), dtype=np.intp)
        self.cats = np.zeros((len(traces), T, C), dtype=np.intp)
        self.nums = np.zeros((len(traces), T, N))
        for i, t in enumerate(traces):
            a, c, n = space.encode_events(t)
            self.acts[i, : len(t)], self.cats[i, : len(t)], self.nums[i, : len(t)] = a, c, n
        self.trace_idx = np.array([index[p.case_id] for p in prefixes], dtype=np.intp)
        self.k = np.array([p.k for p in prefixes], dtype=np.intp)

    def __len__(self) -> int:
        return len(self.k)

    def batch(self, idx: np.ndarray) -> PrefixEncoding:
        ti, k = self.trace_idx[idx], self.k[idx]
        L = int(k.max())
        mask = (np.arange(L)[None, :] < k[:, None]).astype(float)
        acts = self.acts[ti, :L] * mask.astype(np.intp)
        cats = self.cats[ti, :L] * mask.astype(np.intp)[:, :, None]
        nums = self.nums[ti, :L] * mask[:, :, None]
        return PrefixEncoding(acts, cats, nums, mask, k.copy())


# --- parameters ---------------------------------------------------------


def _glorot(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def glorot_limit(shape: tuple[int, int]) -> float:
    return math.sqrt(6.0 / (shape[0] + shape[1]))


def input_width(config: EncoderConfig, space: FeatureSpace) -> int:
    return config.embed_dim * (1 + len(space.categorical)) + len(space.numeric)


def init_params(config: EncoderConfig, space: FeatureSpace, seed: int | np.random.SeedSequence) -> dict[str, Tensor]:
    """Glorot-uniform weights and embeddings, zero biases; fully determined by ``seed``."""
    rng = ad.make_rng(seed)
    E, H = config.embed_dim, config.hidden
    shapes: list[tuple[str, tuple[int, ...]]] = [("emb:activity", (space.n_activities, E))]
    for name, vals in space.categorical.items():
        shapes.append((f"emb:{name}", (len(vals) + 2, E)))
    D = input_width(config, space)
    if config.backbone == "recurrent":
        gates = 3 if config.cell == "gru" else 4
        for layer in range(config.layers):
            d_in = D if layer == 0 else H
            shapes += [
                (f"rnn{layer}:Wx", (d_in, gates * H)),
                (f"rnn{layer}:Wh", (H, gates * H)),
                (f"rnn{layer}:bx", (gates * H,)),
                (f"rnn{layer}:bh", (gates * H,)),
            ]
        shapes += [("head:W", (H, 1)), ("head:b", (1,))]
    else:
        shapes += [("mlp:W1", (D, H)), ("mlp:b1", (H,)), ("head:W", (H, 1)), ("head:b", (1,))]
    params = {}
    for name, shape in shapes:
        data = _glorot(rng, shape) if len(shape) == 2 else np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# --- recurrent layers ---------------------------------------------------


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_layer(X: Tensor, mask: np.ndarray, Wx: Tensor, Wh: Tensor, bx: Tensor, bh: Tensor) -> Tensor:
    """Gated recurrent layer over a padded batch as one graph node.

    Returns hidden states [B, L, H].  Padded steps carry the previous state
    forward, so position L-1 holds each sequence's last real state.
    Gates follow r, z, n ordering: ``n = tanh(x_n + r * (h W_n + b_n))``,
    ``h' = (1 - z) * n + z * h``.
    """
    B, L, D = X.shape
    H = Wh.shape[0]
    m = mask[:, :, None]
    xp = X.data @ Wx.data + bx.data
    Whd, bhd = Wh.data, bh.data
    h = np.zeros((B, H))
    hs = np.empty((B, L, H))
    saved = []
    for t in range(L):
        hh = h @ Whd + bhd
        r = _sig(xp[:, t, :H] + hh[:, :H])
        z = _sig(xp[:, t, H : 2 * H] + hh[:, H : 2 * H])
        n = np.tanh(xp[:, t, 2 * H :] + r * hh[:, 2 * H :])
        hc = (1.0 - z) * n + z * h
        mt = m[:, t]
        h_new = mt * hc + (1.0 - mt) * h
        saved.append((h, r, z, n, hh[:, 2 * H :]))
        hs[:, t] = h_new
        h = h_new

    def bw(g):
        dxp = np.empty((B, L, 3 * H))
        dWh = np.zeros_like(Whd)
        dbh = np.zeros_like(bhd)
        dh = np.zeros((B, H))
        for t in range(L - 1, -1, -1):
            h_prev, r, z, n, hhn = saved[t]
            mt = m[:, t]
            dh = dh + g[:, t]
            dhc = mt * dh
            dh_prev = (1.0 - mt) * dh + dhc * z
            dn = dhc * (1.0 - z)
            dz = dhc * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dar = dan * hhn * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dhh = np.concatenate([dar, daz, dan * r], axis=1)
            dxp[:, t] = np.concatenate([dar, daz, dan], axis=1)
            dWh += h_prev.T @ dhh
            dbh += dhh.sum(axis=0)
            dh = dh_prev + dhh @ Whd.T
        flat = dxp.reshape(-1, 3 * H)
        dX = (dxp @ Wx.data.T) if X.requires_grad else None
        dWx = X.data.reshape(-1, D).T @ flat
        return dX, dWx, dWh, flat.sum(axis=0), dbh

    return _node(hs, (X, Wx, Wh, bx, bh), bw, "gru_layer")


def gru_layer_reference(X: Tensor, mask: np.ndarray, Wx: Tensor, Wh: Tensor, bx: Tensor, bh: Tensor) -> Tensor:
    """Same recurrence as :func:`gru_layer` composed from primitive ops."""
    B, L, _ = X.shape
    H = Wh.shape[0]
    xp = X @ Wx + bx
    h = Tensor(np.zeros((B, H)))
    outs = []
    for t in range(L):
        mt = mask[:, t : t + 1]
        hh = h @ Wh + bh
        xt = xp[:, t, :]
        r = (xt[:, :H] + hh[:, :H]).sigmoid()
        z = (xt[:, H : 2 * H] + hh[:, H : 2 * H]).sigmoid()
        n = (xt[:, 2 * H :] + r * hh[:, 2 * H :]).tanh()
        hc = (1.0 - z) * n + z * h
        h = hc * mt + h * (1.0 - mt)
        outs.append(h)
    return ad.stack(outs, axis=1)


def lstm_layer(X: Tensor, mask: np.ndarray, Wx: Tensor, Wh: Tensor, bx: Tensor, bh: Tensor) -> Tensor:
    """LSTM layer (i, f, g, o gate order) from primitive ops; padded steps carry state."""
    B, L, _ = X.shape
    H = Wh.shape[0]
    xp = X @ Wx + bx
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    outs = []
    for t in range(L):
        mt = mask[:, t : t + 1]
        a = xp[:, t, :] + h @ Wh + bh
        i = a[:, :H].sigmoid()
        f = a[:, H : 2 * H].sigmoid()
        g = a[:, 2 * H : 3 * H].tanh()
        o = a[:, 3 * H :].sigmoid()
        c_new = f * c + i * g
        h_new = o * c_new.tanh()
        c = c_new * mt + c * (1.0 - mt)
        h = h_new * mt + h * (1.0 - mt)
        outs.append(h)
    return ad.stack(outs, axis=1)


# --- predicate ----------------------------------------------------------


class PredicateModel:
    def __init__(self, config: EncoderConfig, space: FeatureSpace, params: dict[str, Tensor]):
        self.config = config
        self.space = space
        self.params = params

    @classmethod
    def create(cls, config: EncoderConfig, space: FeatureSpace, seed) -> "PredicateModel":
        return cls(config, space, init_params(config, space, seed))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()

    def clone(self) -> "PredicateModel":
        return PredicateModel(
            self.config, self.space, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        )

    def _inputs(self, enc: PrefixEncoding) -> Tensor:
        p = self.params
        parts = [p["emb:activity"].take(enc.activities)]
        for j, name in enumerate(self.space.categorical):
            parts.append(p[f"emb:{name}"].take(enc.categorical[:, :, j]))
        if enc.numeric.shape[-1]:
            parts.append(Tensor(enc.numeric))
        return ad.concat(parts, axis=2) if len(parts) > 1 else parts[0]

    def logits(self, enc: PrefixEncoding, fused: bool = True) -> Tensor:
        p, cfg = self.params, self.config
        X = self._inputs(enc)
        if cfg.backbone == "recurrent":
            for layer in range(cfg.layers):
                w = [p[f"rnn{layer}:{n}"] for n in ("Wx", "Wh", "bx", "bh")]
                if cfg.cell == "lstm":
                    X = lstm_layer(X, enc.mask, *w)
                elif fused:
                    X = gru_layer(X, enc.mask, *w)
                else:
                    X = gru_layer_reference(X, enc.mask, *w)
            feat = X[:, -1, :]
        else:
            m = enc.mask[:, :, None]
            pooled = (X * m).sum(axis=1) / enc.lengths[:, None].astype(float)
            feat = (pooled @ p["mlp:W1"] + p["mlp:b1"]).tanh()
        return (feat @ p["head:W"] + p["head:b"]).reshape((len(enc),))

    def forward(self, enc: PrefixEncoding, fused: bool = True) -> Tensor:
        """Truth degrees in [1e-6, 1 - 1e-6]; raises on NaN."""
        out = self.logits(enc, fused).sigmoid().clamp(TRUTH_EPS, 1.0 - TRUTH_EPS)
        if np.isnan(out.data).any():
            bad = int(np.isnan(out.data).sum())
            worst = max((float(np.nanmax(np.abs(v.data))) for v in self.params.values()), default=0.0)
            raise NumericalError(f"predicate produced {bad} NaN outputs (max |param| = {worst:.3g})")
        return out

    __call__ = forward

    # --- persistence ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "space": self.space.to_dict(),
            "params": {k: {"shape": list(v.shape), "data": v.data.reshape(-1).tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredicateModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a predicate checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        params = {
            k: Tensor(np.array(v["data"], dtype=float).reshape(v["shape"]), requires_grad=True)
            for k, v in d["params"].items()
        }
        return cls(EncoderConfig(**d["config"]), FeatureSpace.from_dict(d["space"]), params)


def save_checkpoint(model: PredicateModel, path: str | Path, **extra) -> None:
    payload = model.to_dict()
    payload["extra"] = extra
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path: str | Path) -> tuple[PredicateModel, dict]:
    d = json.loads(Path(path).read_text())
    return PredicateModel.from_dict(d), d.get("extra", {})


def predicate_forward(model: PredicateModel, enc: PrefixEncoding) -> Tensor:
    return model.forward(enc)

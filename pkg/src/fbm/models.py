"""Model variants behind one forecasting interface.

Every variant shares the same outer pipeline: instance-standardize each
window per channel, analyze it into spectrum halves, drop the (now zero)
DC bin, map the time-frequency content to the horizon, then undo the
standardization. Variants differ only in the mapping:

  fbm-l   one linear map from the flattened feature grid, no bias
  fbm-nl  three fully connected layers, ReLU after the first two
  fbm-np  patch tokens -> attention stacks -> linear head
  fbm-s   seasonal rolling filter + patched trend + masked interaction
  diag    per-bin scaling of the spectrum halves (negative control)
  last    repeat the window's final value (toy sanity baseline)

fbm-l / fbm-nl never materialize the feature grid: their first layer is
contracted with the basis tables on the tape (W[k,n,:] against C[n,k]
and S[n,k]), which is algebraically the same linear map but keeps the
per-batch work at spectrum size. Channel-independent variants share one
mapping across all D channels.

Standardization divides by max(sigma, 1e-5) rather than sqrt(var+eps):
the floor keeps zero-variance windows finite while leaving the mapping
exactly scale-equivariant for ordinary windows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .blocks import (
    InteractionBlock,
    InteractionConfig,
    PatchLayout,
    PatchProjector,
    SeasonalBlock,
    TrendBlock,
    TrendConfig,
)
from .errors import CheckpointError, ConfigError
from .fourier import build_bases, dft_matrices

VARIANTS = ("fbm-l", "fbm-nl", "fbm-np", "fbm-s", "diag", "last")

STD_FLOOR = 1e-5


@dataclass(frozen=True)
class NpConfig:
    P: int = 14
    h1: int = 128
    h2: int = 256  # FFN width inside the stacks
    K: int = 3


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    T: int
    L: int
    D: int
    standardize: bool = True
    nl_h1: int = 1440
    nl_h2: int = 1440
    np_cfg: NpConfig = field(default_factory=NpConfig)
    trend: TrendConfig = field(default_factory=TrendConfig)
    interaction: InteractionConfig | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.T < 4 or self.T % 2:
            raise ConfigError(f"window length must be even and >= 4, got {self.T}")
        if self.L < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.L}")
        if self.D < 1:
            raise ConfigError(f"channel count must be >= 1, got {self.D}")
        if self.variant == "fbm-nl" and (self.nl_h1 < 1 or self.nl_h2 < 1):
            raise ConfigError("fbm-nl hidden widths must be positive")

    def to_header(self):
        h = {
            "variant": self.variant,
            "T": str(self.T),
            "L": str(self.L),
            "D": str(self.D),
            "standardize": "1" if self.standardize else "0",
        }
        if self.variant == "fbm-nl":
            h["nl_h1"] = str(self.nl_h1)
            h["nl_h2"] = str(self.nl_h2)
        if self.variant == "fbm-np":
            c = self.np_cfg
            h.update(np_p=str(c.P), np_h1=str(c.h1), np_h2=str(c.h2), np_k=str(c.K))
        if self.variant == "fbm-s":
            t = self.trend
            h.update(
                trend_backbone=t.backbone,
                trend_h1=str(t.h1),
                trend_h2=str(t.h2),
                trend_k=str(t.K),
                trend_p=str(t.P),
                trend_scales="+".join(str(s) for s in t.scales),
            )
            if self.interaction is None:
                h["interaction"] = "0"
            else:
                i = self.interaction
                h.update(
                    interaction="1", c1=str(i.C1), c2=str(i.C2),
                    h3=str(i.h3), inter_k=str(i.K),
                )
        return h

    @classmethod
    def from_header(cls, h):
        try:
            variant = h["variant"]
            kw = dict(
                variant=variant,
                T=int(h["T"]),
                L=int(h["L"]),
                D=int(h["D"]),
                standardize=h.get("standardize", "1") == "1",
            )
            if variant == "fbm-nl":
                kw["nl_h1"] = int(h["nl_h1"])
                kw["nl_h2"] = int(h["nl_h2"])
            if variant == "fbm-np":
                kw["np_cfg"] = NpConfig(
                    P=int(h["np_p"]), h1=int(h["np_h1"]),
                    h2=int(h["np_h2"]), K=int(h["np_k"]),
                )
            if variant == "fbm-s":
                kw["trend"] = TrendConfig(
                    backbone=h["trend_backbone"],
                    h1=int(h["trend_h1"]),
                    h2=int(h["trend_h2"]),
                    K=int(h["trend_k"]),
                    P=int(h["trend_p"]),
                    scales=tuple(int(s) for s in h["trend_scales"].split("+")),
                )
                if h.get("interaction", "0") == "1":
                    kw["interaction"] = InteractionConfig(
                        C1=int(h["c1"]), C2=int(h["c2"]),
                        h3=int(h["h3"]), K=int(h["inter_k"]),
                    )
            return cls(**kw)
        except KeyError as missing:
            raise CheckpointError(f"checkpoint header missing field {missing}") from None

    def summary(self):
        return ", ".join(f"{k}={v}" for k, v in self.to_header().items())


def instance_standardize(X):
    """Per-window, per-channel (x - mean) / max(sigma, floor)."""
    mu = X.mean(axis=-1, keepdims=True)
    sd = np.maximum(X.std(axis=-1, keepdims=True), STD_FLOOR)
    return (X - mu) / sd, mu, sd


class ForecastModel:
    def __init__(self, spec, seed=0, zero_weights=False):
        self.spec = spec
        rng = np.random.default_rng(seed)
        T, L, K = spec.T, spec.L, spec.T // 2
        self._cm, self._sm = dft_matrices(T)
        bases = build_bases(T)
        # DC-dropped basis tables, also pre-shaped for the fbm-l/nl contraction
        self._C = np.ascontiguousarray(bases.C[:T, 1:])
        self._S = np.ascontiguousarray(bases.S[:T, 1:])
        self._crow = Tensor(np.ascontiguousarray(self._C.T[:, None, :]))  # [K,1,T]
        self._srow = Tensor(np.ascontiguousarray(self._S.T[:, None, :]))
        self.params = []
        self.blocks = {}

        def register(ps):
            self.params.extend(ps)

        v = spec.variant
        if v == "fbm-l":
            # one weight slab per bin: W[k, n, v]; no bias, so the exact
            # parameter count is (T * T/2) * L
            self.w = Parameter(ad.init_uniform(rng, (K, T, L), T * K), "linear.w")
            register([self.w])
        elif v == "fbm-nl":
            h1, h2 = spec.nl_h1, spec.nl_h2
            self.w1 = Parameter(ad.init_uniform(rng, (K, T, h1), T * K), "fc1.w")
            self.b1 = Parameter(np.zeros(h1), "fc1.b")
            self.w2 = Parameter(ad.init_uniform(rng, (h1, h2), h1), "fc2.w")
            self.b2 = Parameter(np.zeros(h2), "fc2.b")
            self.w3 = Parameter(ad.init_uniform(rng, (h2, L), h2), "fc3.w")
            self.b3 = Parameter(np.zeros(L), "fc3.b")
            register([self.w1, self.b1, self.w2, self.b2, self.w3, self.b3])
        elif v == "fbm-np":
            c = spec.np_cfg
            layout = PatchLayout.make(T, K, c.P)
            self.proj = PatchProjector(rng, layout, spec.D, c.h1, use_relu=False, name="np.proj")
            self.stacks = [
                ad.AttentionParams.build(rng, c.h1, c.h2, f"np.stack{i}") for i in range(c.K)
            ]
            n_flat = c.P * c.h1
            self.w_out = Parameter(ad.init_uniform(rng, (n_flat, L), n_flat), "np.out.w")
            self.b_out = Parameter(np.zeros(L), "np.out.b")
            register(self.proj.params())
            for s in self.stacks:
                register(s.params())
            register([self.w_out, self.b_out])
        elif v == "fbm-s":
            self.seasonal = SeasonalBlock(T, L)
            self.trend = TrendBlock(rng, T, L, spec.D, spec.trend)
            register(self.seasonal.params())
            register(self.trend.params())
            self.blocks["seasonal"] = self.seasonal
            self.blocks["trend"] = self.trend
            if spec.interaction is not None:
                self.inter = InteractionBlock(rng, T, L, spec.D, spec.interaction)
                register(self.inter.params())
                self.blocks["interaction"] = self.inter
            else:
                self.inter = None
        elif v == "diag":
            self.wa = Parameter(np.ones(K), "diag.wa")
            self.wb = Parameter(np.ones(K), "diag.wb")
            # horizon rows of the basis tables (periodic continuation)
            rows = np.arange(L) % T
            self._c_rows = Tensor(np.ascontiguousarray(self._C[rows].T))  # [K, L]
            self._s_rows = Tensor(np.ascontiguousarray(self._S[rows].T))
            register([self.wa, self.wb])
        elif v == "last":
            pass  # parameter-free

        names = [p.name for p in self.params]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate parameter names in registration order")
        expected = expected_param_count(spec)
        actual = sum(p.size for p in self.params)
        if actual != expected:
            raise ConfigError(
                f"built {actual} parameters, closed form says {expected} ({spec.summary()})"
            )
        if zero_weights:
            for p in self.params:
                if not p.name.endswith((".gamma",)):
                    p.value = np.zeros_like(p.value)

    # --- forward -----------------------------------------------------------

    def _spectra(self, Xs):
        """Standardized windows -> DC-dropped spectrum halves (constants)."""
        H_R = Xs @ self._cm
        H_I = Xs @ self._sm
        return H_R[..., 1:], H_I[..., 1:]

    def _features(self, H_R, H_I):
        return Tensor(H_R[..., None, :] * self._C + H_I[..., None, :] * self._S)

    def forward(self, X):
        """X: f64[B, D, T] raw windows -> Tensor[B, D, L] predictions."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[1] != self.spec.D or X.shape[2] != self.spec.T:
            raise ConfigError(
                f"input shape {X.shape} does not match spec "
                f"(B, D={self.spec.D}, T={self.spec.T})"
            )
        if self.spec.standardize:
            Xs, mu, sd = instance_standardize(X)
        else:
            Xs, mu, sd = X, np.zeros(X.shape[:2] + (1,)), np.ones(X.shape[:2] + (1,))
        out = self._map_standardized(Xs)
        return ad.add(ad.mul(out, Tensor(sd)), Tensor(mu))

    def _map_standardized(self, Xs):
        spec = self.spec
        v = spec.variant
        if v == "last":
            last = Xs[..., -1:]
            return Tensor(np.broadcast_to(last, Xs.shape[:2] + (spec.L,)).copy())
        H_R, H_I = self._spectra(Xs)
        if v == "fbm-l":
            wc, ws = self._contract(self.w)
            return ad.add(ad.matmul(Tensor(H_R), wc), ad.matmul(Tensor(H_I), ws))
        if v == "fbm-nl":
            wc, ws = self._contract(self.w1)
            h = ad.add(
                ad.add(ad.matmul(Tensor(H_R), wc), ad.matmul(Tensor(H_I), ws)), self.b1
            )
            h = ad.relu(h)
            h = ad.relu(ad.add(ad.matmul(h, self.w2), self.b2))
            return ad.add(ad.matmul(h, self.w3), self.b3)
        if v == "fbm-np":
            G = self._features(H_R, H_I)
            y = self.proj.forward(G)  # [B, D, P, h1]
            b, d = y.shape[0], y.shape[1]
            c = spec.np_cfg
            tokens = ad.reshape(y, (b * d, c.P, c.h1))
            for stack in self.stacks:
                tokens = ad.attention_block(tokens, stack)
            flat = ad.reshape(tokens, (b, d, c.P * c.h1))
            return ad.add(ad.matmul(flat, self.w_out), self.b_out)
        if v == "fbm-s":
            return self._sum_components(self._component_outputs(H_R, H_I))
        if v == "diag":
            a = ad.mul(Tensor(H_R), self.wa)
            b = ad.mul(Tensor(H_I), self.wb)
            return ad.add(ad.matmul(a, self._c_rows), ad.matmul(b, self._s_rows))
        raise ConfigError(f"unknown variant {v!r}")

    def _contract(self, w):
        """Per-bin weight slabs [K, T, width] -> basis-contracted [K, width] pair."""
        K = self.spec.T // 2
        wc = ad.reshape(ad.matmul(self._crow, w), (K, w.shape[-1]))
        ws = ad.reshape(ad.matmul(self._srow, w), (K, w.shape[-1]))
        return wc, ws

    def _component_outputs(self, H_R, H_I):
        outs = {"seasonal": self.seasonal.forward(Tensor(H_R), Tensor(H_I))}
        G = self._features(H_R, H_I)
        outs["trend"] = self.trend.forward(G)
        if self.inter is not None:
            outs["interaction"] = self.inter.forward(G)
        return outs

    @staticmethod
    def _sum_components(outs):
        total = None
        for y in outs.values():
            total = y if total is None else ad.add(total, y)
        return total

    def components(self, X):
        """fbm-s only: per-block contributions in the de-standardized space,
        plus the standardization state; reassembling exactly as forward does
        reproduces forward(X) bit for bit."""
        if self.spec.variant != "fbm-s":
            raise ConfigError("components() is only defined for fbm-s")
        X = np.asarray(X, dtype=np.float64)
        Xs, mu, sd = instance_standardize(X)
        H_R, H_I = self._spectra(Xs)
        outs = self._component_outputs(H_R, H_I)
        return {k: v.value for k, v in outs.items()}, mu, sd

    def predict(self, X):
        with ad.no_grad():
            return self.forward(X).value

    # --- bookkeeping ---------------------------------------------------------

    def param_count(self):
        return sum(p.size for p in self.params)

    def describe(self):
        """(block name, parameter count) rows followed by the total."""
        if self.spec.variant == "fbm-s":
            rows = [(name, blk.param_count()) for name, blk in self.blocks.items()]
        else:
            rows = [(self.spec.variant, self.param_count())]
        rows.append(("total", self.param_count()))
        return rows

    def save(self, path):
        ad.save_tensors(path, [(p.name, p.value) for p in self.params],
                        header=self.spec.to_header())

    @classmethod
    def load(cls, path, expected_spec=None):
        header, records = ad.load_tensors(path)
        spec = ModelSpec.from_header(header)
        if expected_spec is not None and spec != expected_spec:
            raise CheckpointError(
                "checkpoint spec does not match requested spec:\n"
                f"  checkpoint: {spec.summary()}\n"
                f"  requested:  {expected_spec.summary()}"
            )
        model = cls(spec, seed=0)
        if len(records) != len(model.params):
            raise CheckpointError(
                f"checkpoint holds {len(records)} tensors, model needs {len(model.params)}"
            )
        for p, (name, arr) in zip(model.params, records):
            if p.name != name or p.value.shape != arr.shape:
                raise CheckpointError(
                    f"checkpoint tensor {name}{arr.shape} does not match "
                    f"parameter {p.name}{p.value.shape}"
                )
            p.value = arr
        return model


def expected_param_count(spec):
    """Closed-form count for the spec, used to cross-check construction."""
    T, L, D, K = spec.T, spec.L, spec.D, spec.T // 2
    v = spec.variant
    if v == "last":
        return 0
    if v == "diag":
        return 2 * K
    if v == "fbm-l":
        return T * K * L
    if v == "fbm-nl":
        h1, h2 = spec.nl_h1, spec.nl_h2
        return T * K * h1 + h1 + h1 * h2 + h2 + h2 * L + L

    def stack_count(h, ffn):
        return 4 * h * h + 4 * h + h * ffn + ffn + ffn * h + h

    if v == "fbm-np":
        c = spec.np_cfg
        n = (T // c.P) * K
        total = 2 * D + n * c.h1 + c.h1  # centralization + projector
        total += c.K * stack_count(c.h1, c.h2)
        total += c.P * c.h1 * L + L
        return total
    # fbm-s
    total = T * K  # seasonal W
    t = spec.trend
    for s in t.scales:
        T_s, K_s = T // s, K // s
        if t.backbone == "linear":
            total += T_s * K_s * L + L
            continue
        n = (T_s // t.P) * K_s
        total += 2 * D + n * t.h1 + t.h1
        if t.backbone == "mlp":
            total += t.P * t.h1 * t.h2 + t.h2 + t.h2 * L + L
        else:
            total += t.K * stack_count(t.h1, t.h2) + t.P * t.h1 * L + L
    if spec.interaction is not None:
        i = spec.interaction
        total += 2 * D + i.C1 * K * i.h3 + i.h3
        total += i.K * stack_count(i.h3, i.h3)
        total += i.h3 * L + L
    return total

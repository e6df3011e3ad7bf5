"""Unrolled augmented Lagrangian reconstruction network.

Each phase applies four updates in order: a learned sparse-coding step
(``omega``), a learned gradient step on the image (``u``), a non-local
attention step (``x``) and the multiplier updates.  All parameters live in
plain numpy arrays (:class:`NetParams`); a forward pass binds them to a
fresh :class:`~nlcs.autodiff.Tape` so gradients can be taken.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import sampling
from .attention import EMBED_CHANNELS, AttentionParams, x_module
from .autodiff import Tensor

FEATURES = EMBED_CHANNELS
CONV_STD = 0.05
SCALAR_INIT = {"alpha": 0.1, "beta": 1.0, "theta": 1.0, "mu": 1.0}
EPS_INIT = 0.5


def inverse_softplus(y: float) -> float:
    if y <= 0:
        return -math.inf
    return y + math.log(-math.expm1(-y))


@dataclass
class PhaseParams:
    """Weights of one phase; fields hold arrays, or Tensors once bound."""

    e1: object
    e2: list
    f1: object
    rb1: list
    rb2: list
    f2: object
    attn: AttentionParams
    eps: object

    @classmethod
    def init(cls, rng: np.random.Generator, patch_size: int = 7,
             stride: int = 4) -> "PhaseParams":
        def conv(o, i):
            return rng.normal(0.0, CONV_STD, (o, i, 3, 3))

        f = FEATURES
        return cls(
            e1=conv(f, 1),
            e2=[conv(f, f), conv(1, f)],
            f1=conv(f, f),
            # second conv of each residual block starts at zero so every
            # phase begins close to an identity map
            rb1=[conv(f, f), np.zeros((f, f, 3, 3))],
            rb2=[conv(f, f), np.zeros((f, f, 3, 3))],
            f2=conv(f, f),
            attn=AttentionParams.init(rng, 1, CONV_STD, patch_size, stride),
            eps=np.array(EPS_INIT),
        )

    def named(self, prefix: str = "") -> dict:
        out = {
            f"{prefix}e1": self.e1,
            f"{prefix}e2.0": self.e2[0],
            f"{prefix}e2.1": self.e2[1],
            f"{prefix}f1": self.f1,
            f"{prefix}rb1.0": self.rb1[0],
            f"{prefix}rb1.1": self.rb1[1],
            f"{prefix}rb2.0": self.rb2[0],
            f"{prefix}rb2.1": self.rb2[1],
            f"{prefix}f2": self.f2,
            f"{prefix}f_q": self.attn.f_q,
            f"{prefix}f_k": self.attn.f_k,
            f"{prefix}f_v": self.attn.f_v,
            f"{prefix}out": self.attn.out_conv,
            f"{prefix}eps": self.eps,
        }
        return out

    @classmethod
    def from_named(cls, values: dict, prefix: str = "", patch_size: int = 7,
                   stride: int = 4) -> "PhaseParams":
        g = lambda k: values[prefix + k]  # noqa: E731
        return cls(
            e1=g("e1"), e2=[g("e2.0"), g("e2.1")], f1=g("f1"),
            rb1=[g("rb1.0"), g("rb1.1")], rb2=[g("rb2.0"), g("rb2.1")], f2=g("f2"),
            attn=AttentionParams(g("f_q"), g("f_k"), g("f_v"), g("out"),
                                 patch_size, stride),
            eps=g("eps"),
        )


@dataclass
class NetParams:
    """Sampling matrix, global scalars and per-phase weights.

    ``alpha``, ``beta``, ``theta`` and ``mu`` are stored before the softplus
    that keeps them positive.
    """

    phi: np.ndarray
    phases: list[PhaseParams]
    alpha: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    binary: bool = False
    measurement_target: str = "phi_u0"
    patch_size: int = 7
    patch_stride: int = 4

    def __post_init__(self):
        if not self.phases:
            raise ValueError("need at least one phase")
        if self.measurement_target not in ("phi_u0", "b"):
            raise ValueError(f"unknown measurement target {self.measurement_target!r}")

    @classmethod
    def init(cls, m: int, n: int, n_phases: int, seed: int = 0, *,
             binary: bool = False, measurement_target: str = "phi_u0",
             patch_size: int = 7, patch_stride: int = 4) -> "NetParams":
        rng = np.random.default_rng(seed)
        phi = sampling.init_gaussian(m, n, int(rng.integers(2**31))).phi
        phases = [PhaseParams.init(rng, patch_size, patch_stride) for _ in range(n_phases)]
        raw = {k: np.array(inverse_softplus(v)) for k, v in SCALAR_INIT.items()}
        return cls(phi=phi, phases=phases, binary=binary,
                   measurement_target=measurement_target,
                   patch_size=patch_size, patch_stride=patch_stride, **raw)

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    @property
    def m(self) -> int:
        return self.phi.shape[0]

    @property
    def n(self) -> int:
        return self.phi.shape[1]

    @property
    def block(self) -> int:
        return sampling.block_size(self.n)

    @property
    def sampling_matrix(self) -> sampling.SamplingMatrix:
        return sampling.SamplingMatrix(self.phi, binary=self.binary)

    def named(self) -> dict[str, np.ndarray]:
        out = {"phi": self.phi, "alpha": self.alpha, "beta": self.beta,
               "theta": self.theta, "mu": self.mu}
        for k, ph in enumerate(self.phases):
            out.update(ph.named(f"phase{k}."))
        return out

    @classmethod
    def from_named(cls, values: dict, n_phases: int, **meta) -> "NetParams":
        ps, st = meta.get("patch_size", 7), meta.get("patch_stride", 4)
        phases = [PhaseParams.from_named(values, f"phase{k}.", ps, st)
                  for k in range(n_phases)]
        return cls(phi=values["phi"], phases=phases, alpha=values["alpha"],
                   beta=values["beta"], theta=values["theta"], mu=values["mu"], **meta)

    def with_arrays(self, values: dict) -> "NetParams":
        meta = {f.name: getattr(self, f.name) for f in fields(self)
                if f.name in ("binary", "measurement_target", "patch_size", "patch_stride")}
        return NetParams.from_named(values, self.n_phases, **meta)

    def copy(self) -> "NetParams":
        return self.with_arrays({k: np.array(v) for k, v in self.named().items()})

    def bind(self, tape: ad.Tape | None = None) -> "BoundNet":
        """Attach parameters to ``tape`` (or wrap as constants) for a forward pass."""
        if tape is None:
            tensors = {k: Tensor(v, name=k) for k, v in self.named().items()}
        else:
            tensors = {k: tape.param(k, v) for k, v in self.named().items()}
        return self.bind_tensors(tensors)

    def bind_tensors(self, tensors: dict) -> "BoundNet":
        """Bind caller-supplied tensors (or arrays) using this model's layout."""
        tensors = {k: ad.as_tensor(v) for k, v in tensors.items()}
        phi = sampling.materialize(tensors["phi"], self.binary)
        return BoundNet(
            phi=phi, phi_master=tensors["phi"],
            alpha=ad.softplus(tensors["alpha"]), beta=ad.softplus(tensors["beta"]),
            theta=ad.softplus(tensors["theta"]), mu=ad.softplus(tensors["mu"]),
            phases=[PhaseParams.from_named(tensors, f"phase{k}.", self.patch_size,
                                           self.patch_stride)
                    for k in range(self.n_phases)],
            measurement_target=self.measurement_target,
        )


@dataclass
class BoundNet:
    """Parameters as tensors, with the positive scalars already transformed."""

    phi: Tensor
    phi_master: Tensor
    alpha: Tensor
    beta: Tensor
    theta: Tensor
    mu: Tensor
    phases: list[PhaseParams]
    measurement_target: str = "phi_u0"

    @property
    def block(self) -> int:
        return sampling.block_size(self.phi.shape[1])


@dataclass
class ReconState:
    u: Tensor
    x: Tensor
    omega: Tensor
    v: Tensor
    gamma: Tensor
    lam: Tensor
    u0: Tensor
    target: Tensor

    def shapes(self) -> dict[str, tuple]:
        return {f.name: getattr(self, f.name).shape for f in fields(self)}


def conv3(x, w) -> Tensor:
    return ad.conv2d(x, w, stride=1, pad=1)


def e1_map(u, pp: PhaseParams) -> Tensor:
    return ad.relu(conv3(u, pp.e1))


def e2_map(z, pp: PhaseParams) -> Tensor:
    return conv3(ad.relu(conv3(z, pp.e2[0])), pp.e2[1])


def residual_block(z, weights) -> Tensor:
    return z + conv3(ad.relu(conv3(z, weights[0])), weights[1])


def omega_module(u, v, pp: PhaseParams, beta) -> Tensor:
    """``F2(RB2(RB1(F1(E1(u) - v / beta))))``."""
    z = ad.sub(e1_map(u, pp), ad.div(v, beta))
    z = conv3(z, pp.f1)
    z = residual_block(z, pp.rb1)
    z = residual_block(z, pp.rb2)
    return conv3(z, pp.f2)


def data_term(u, state: ReconState, net: BoundNet) -> Tensor:
    """``PixelShuffle(Phi^T (mu (Phi u - target) - lambda))``."""
    resid = ad.sub(sampling.sample(net.phi, u), state.target)
    inner = ad.sub(ad.mul(net.mu, resid), state.lam)
    return sampling.init_reconstruction(net.phi, inner)


def u_direction(state: ReconState, omega, pp: PhaseParams, net: BoundNet) -> Tensor:
    beta = net.beta
    inner = ad.sub(ad.sub(ad.mul(beta, e1_map(state.u, pp)), state.v), ad.mul(beta, omega))
    d = ad.sub(e2_map(inner, pp), state.gamma)
    d = ad.add(d, ad.mul(net.theta, ad.sub(state.u, state.x)))
    return ad.add(d, data_term(state.u, state, net))


def u_module(state: ReconState, omega, pp: PhaseParams, net: BoundNet) -> Tensor:
    """One learned-step gradient update ``u - eps * d``."""
    return ad.sub(state.u, ad.mul(pp.eps, u_direction(state, omega, pp, net)))


def update_multipliers(state: ReconState, u, x, omega, pp: PhaseParams, net: BoundNet):
    v = ad.sub(state.v, ad.mul(net.beta, ad.sub(e1_map(u, pp), omega)))
    gamma = ad.sub(state.gamma, ad.mul(net.theta, ad.sub(u, x)))
    lam = ad.sub(state.lam, ad.mul(net.mu, ad.sub(sampling.sample(net.phi, u), state.target)))
    return v, gamma, lam


def phase_forward(state: ReconState, pp: PhaseParams, net: BoundNet) -> ReconState:
    omega = omega_module(state.u, state.v, pp, net.beta)
    u = u_module(state, omega, pp, net)
    x = x_module(u, state.gamma, net.beta, net.theta, net.alpha, pp.attn)
    v, gamma, lam = update_multipliers(state, u, x, omega, pp, net)
    return replace(state, u=u, x=x, omega=omega, v=v, gamma=gamma, lam=lam)


def initial_state(b, net: BoundNet) -> ReconState:
    """``u = PixelShuffle(Phi^T b)``; every other variable starts at zero."""
    b = ad.as_tensor(b)
    u0 = sampling.init_reconstruction(net.phi, b)
    feat = u0.shape[:-3] + (FEATURES,) + u0.shape[-2:]
    target = sampling.sample(net.phi, u0) if net.measurement_target == "phi_u0" else b
    return ReconState(
        u=u0, x=Tensor(np.zeros(u0.shape)), omega=Tensor(np.zeros(feat)),
        v=Tensor(np.zeros(feat)), gamma=Tensor(np.zeros(u0.shape)),
        lam=Tensor(np.zeros(b.shape)), u0=u0, target=target)


def net_forward(b, net: BoundNet, keep_trace: bool = False):
    """Reconstruct blocks from measurements ``b`` (``[M]`` or ``[batch, M]``).

    Returns the final image estimate and, if requested, the state after
    every phase.
    """
    state = initial_state(b, net)
    trace = []
    for pp in net.phases:
        state = phase_forward(state, pp, net)
        if keep_trace:
            trace.append(state)
    return state.u, trace


@dataclass
class Reconstruction:
    u: np.ndarray
    u0: np.ndarray
    phases: int = 0
    extra: dict = field(default_factory=dict)


def reconstruct(b: np.ndarray, params: NetParams, chunk: int = 64) -> Reconstruction:
    """Inference without a tape; ``b`` is ``[batch, M]``."""
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    net = params.bind(None)
    outs, inits = [], []
    for i in range(0, b.shape[0], chunk):
        u, _ = net_forward(b[i:i + chunk], net)
        outs.append(u.data)
        inits.append(initial_state(b[i:i + chunk], net).u0.data)
    return Reconstruction(np.concatenate(outs), np.concatenate(inits), params.n_phases)

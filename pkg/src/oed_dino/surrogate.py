"""Reduced-basis ResNet surrogate with exact Jacobians and Jacobian-augmented training.

The network maps input coefficients ``beta`` (length ``r_in``) to output
coefficients (length ``r_out``)::

    z_0     = tanh(Z_in beta + b_in)
    z_{l+1} = z_l + W_l sigmoid(Z_l z_l + b_l),   l = 0..L-1
    out     = Z_out tanh(z_L) + b_out

Jacobians are propagated in forward mode alongside the primal pass.  The
training loss penalizes both output and Jacobian mismatch; its gradient is a
hand-written reverse sweep through the primal and tangent recurrences.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericalValidityError, ParameterDomainError
from .prior import sample_rng
from .reduce import EUCLIDEAN, PRIOR_INVERSE, ReducedBasis

log = logging.getLogger(__name__)

INNER_ACTIVATION = "sigmoid"
OUTER_ACTIVATION = "tanh"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ResNet:
    """Parameters and evaluation of the coefficient-to-coefficient network."""

    def __init__(self, r_in: int, r_out: int, width: int = 100, n_resnet: int = 3, params=None):
        if min(r_in, r_out, width) < 1 or n_resnet < 0:
            raise ParameterDomainError("network dimensions must be positive")
        self.r_in, self.r_out, self.width, self.n_resnet = int(r_in), int(r_out), int(width), int(n_resnet)
        shapes = self.shapes()
        if params is None:
            params = {k: np.zeros(s) for k, s in shapes.items()}
        for k, s in shapes.items():
            if k not in params or np.shape(params[k]) != s:
                raise DimensionError(f"parameter {k} must have shape {s}")
        self.params = {k: np.asarray(params[k], dtype=float) for k in shapes}

    def shapes(self) -> dict:
        w = self.width
        out = {"Z_in": (w, self.r_in), "b_in": (w,)}
        for l in range(self.n_resnet):
            out[f"W_{l}"] = (w, w)
            out[f"Z_{l}"] = (w, w)
            out[f"b_{l}"] = (w,)
        out["Z_out"] = (self.r_out, w)
        out["b_out"] = (self.r_out,)
        return out

    @classmethod
    def xavier(cls, r_in, r_out, width=100, n_resnet=3, seed=0) -> "ResNet":
        net = cls(r_in, r_out, width, n_resnet)
        rng = sample_rng(seed, 0)
        for k, s in net.shapes().items():
            if len(s) == 2:
                a = np.sqrt(6.0 / (s[0] + s[1]))
                net.params[k] = rng.uniform(-a, a, size=s)
        return net

    def copy(self) -> "ResNet":
        return ResNet(self.r_in, self.r_out, self.width, self.n_resnet, {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def set_flat(self, theta):
        i = 0
        for k, s in self.shapes().items():
            size = int(np.prod(s))
            self.params[k] = np.asarray(theta[i:i + size], dtype=float).reshape(s)
            i += size

    # evaluation ------------------------------------------------------------
    def _check(self, beta):
        beta = np.asarray(beta, dtype=float)
        if beta.shape[-1] != self.r_in:
            raise DimensionError(f"input has {beta.shape[-1]} coefficients, network expects {self.r_in}")
        return beta

    def forward(self, beta):
        beta = self._check(beta)
        p = self.params
        z = np.tanh(beta @ p["Z_in"].T + p["b_in"])
        for l in range(self.n_resnet):
            z = z + _sigmoid(z @ p[f"Z_{l}"].T + p[f"b_{l}"]) @ p[f"W_{l}"].T
        return np.tanh(z) @ p["Z_out"].T + p["b_out"]

    def _sweep(self, beta):
        """Primal and tangent pass on a batch, keeping what the reverse sweep needs."""
        p = self.params
        z = np.tanh(beta @ p["Z_in"].T + p["b_in"])
        T = (1.0 - z**2)[:, :, None] * p["Z_in"][None]
        tape = [(z, T)]
        for l in range(self.n_resnet):
            s = _sigmoid(z @ p[f"Z_{l}"].T + p[f"b_{l}"])
            ds = s * (1.0 - s)
            A = p[f"Z_{l}"] @ T
            D = ds[:, :, None] * A
            tape.append((s, ds, A, D))
            z = z + s @ p[f"W_{l}"].T
            T = T + p[f"W_{l}"] @ D
            tape.append((z, T))
        h = np.tanh(z)
        c = 1.0 - h**2
        H = c[:, :, None] * T
        out = h @ p["Z_out"].T + p["b_out"]
        jac = p["Z_out"] @ H
        return out, jac, (tape, h, c, H)

    def jacobian(self, beta):
        """Exact ``d out / d beta``; shape (r_out, r_in), or (batch, r_out, r_in)."""
        beta = self._check(beta)
        single = beta.ndim == 1
        _, jac, _ = self._sweep(np.atleast_2d(beta))
        return jac[0] if single else jac

    def forward_and_jacobian(self, beta):
        beta = self._check(beta)
        single = beta.ndim == 1
        out, jac, _ = self._sweep(np.atleast_2d(beta))
        return (out[0], jac[0]) if single else (out, jac)

    # training loss ---------------------------------------------------------
    def loss_and_grad(self, beta_m, beta_F, J_r=None, lambda_jac: float = 1.0):
        """Mean of ``|beta_F - out|^2 + lambda |J_r - d out/d beta|_F^2`` and its gradient."""
        beta_m = np.atleast_2d(self._check(beta_m))
        beta_F = np.atleast_2d(np.asarray(beta_F, dtype=float))
        B = len(beta_m)
        if B == 0:
            raise DimensionError("empty batch")
        p = self.params
        out, jac, (tape, h, c, H) = self._sweep(beta_m)
        rO = out - beta_F
        value = np.sum(rO**2)
        use_jac = lambda_jac != 0 and J_r is not None
        if use_jac:
            rJ = jac - np.asarray(J_r, dtype=float)
            value += lambda_jac * np.sum(rJ**2)
            gJ = (2.0 * lambda_jac / B) * rJ
        value /= B
        gO = (2.0 / B) * rO

        g = {}
        g["Z_out"] = gO.T @ h
        g["b_out"] = gO.sum(axis=0)
        gz = gO @ p["Z_out"]
        if use_jac:
            g["Z_out"] += np.tensordot(gJ, H, axes=([0, 2], [0, 2]))
            gH = p["Z_out"].T @ gJ
            gT = c[:, :, None] * gH
            T_L = tape[-1][1]
            gz = gz * c + np.sum(gH * T_L, axis=2) * (-2.0 * h * c)
        else:
            gT = None
            gz = gz * c

        for l in reversed(range(self.n_resnet)):
            s, ds, A, D = tape[2 * l + 1]
            z, T = tape[2 * l]
            W, Z = p[f"W_{l}"], p[f"Z_{l}"]
            g[f"W_{l}"] = gz.T @ s
            gs = gz @ W
            if gT is not None:
                g[f"W_{l}"] += np.tensordot(gT, D, axes=([0, 2], [0, 2]))
                gD = W.T @ gT
                gA = ds[:, :, None] * gD
                gds = np.sum(gD * A, axis=2)
                ga = gs * ds + gds * ds * (1.0 - 2.0 * s)
                g[f"Z_{l}"] = ga.T @ z + np.tensordot(gA, T, axes=([0, 2], [0, 2]))
                gT = gT + Z.T @ gA
            else:
                ga = gs * ds
                g[f"Z_{l}"] = ga.T @ z
            g[f"b_{l}"] = ga.sum(axis=0)
            gz = gz + ga @ Z

        z0, T0 = tape[0]
        c0 = 1.0 - z0**2
        g["Z_in"] = np.zeros_like(p["Z_in"])
        if gT is not None:
            g["Z_in"] += np.einsum("nw,nwk->wk", c0, gT)
            gc0 = np.sum(gT * p["Z_in"][None], axis=2)
            ga0 = gz * c0 + gc0 * (-2.0 * z0 * c0)
        else:
            ga0 = gz * c0
        g["Z_in"] += ga0.T @ beta_m
        g["b_in"] = ga0.sum(axis=0)
        return float(value), {k: g[k] for k in self.shapes()}


class LinearReducedMap:
    """Affine coefficient map ``beta -> offset + J beta``; a drop-in for :class:`ResNet`."""

    def __init__(self, J, offset=None):
        self.J = np.asarray(J, dtype=float)
        self.r_out, self.r_in = self.J.shape
        self.offset = np.zeros(self.r_out) if offset is None else np.asarray(offset, dtype=float)

    def forward(self, beta):
        return np.asarray(beta) @ self.J.T + self.offset

    def jacobian(self, beta):
        beta = np.asarray(beta)
        return self.J if beta.ndim == 1 else np.broadcast_to(self.J, (len(beta),) + self.J.shape)

    def forward_and_jacobian(self, beta):
        return self.forward(beta), self.jacobian(beta)


def net_forward(net, beta):
    return net.forward(beta)


def net_jacobian(net, beta):
    return net.jacobian(beta)


def loss(net: ResNet, batch, lambda_jac: float = 1.0):
    """``batch`` is a :class:`TrainBatch` or a ``(beta_m, beta_F, J_r)`` tuple."""
    if isinstance(batch, TrainBatch):
        batch = (batch.beta_m, batch.beta_F, batch.J_r)
    return net.loss_and_grad(*batch, lambda_jac=lambda_jac)


@dataclass
class TrainBatch:
    beta_m: np.ndarray
    beta_F: np.ndarray
    J_r: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.beta_m)
        if len(self.beta_F) != n or (self.J_r is not None and len(self.J_r) != n):
            raise DimensionError("batch arrays disagree in length")

    def __len__(self):
        return len(self.beta_m)

    def take(self, rows) -> "TrainBatch":
        return TrainBatch(self.beta_m[rows], self.beta_F[rows], None if self.J_r is None else self.J_r[rows])


class Adam:
    def __init__(self, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, x, g):
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


DEFAULT_EPOCHS = {
    ("linear_diffusion", True): 100,
    ("linear_diffusion", False): 200,
    ("semilinear_reaction", True): 200,
    ("semilinear_reaction", False): 300,
}


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    lambda_jac: float = 1.0
    batch: int = 32
    seed: int = 0
    width: int = 100
    n_resnet: int = 3
    holdout: float = 0.1


@dataclass
class Surrogate:
    input_basis: ReducedBasis
    output_basis: ReducedBasis
    net: object
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.input_basis.metric != PRIOR_INVERSE or self.output_basis.metric != EUCLIDEAN:
            raise ParameterDomainError("surrogate needs an input (DIS/KLE) and an output (PCA/DOS) basis")
        if self.net.r_in != self.input_basis.rank or self.net.r_out != self.output_basis.rank:
            raise DimensionError(
                f"network {self.net.r_in}->{self.net.r_out} does not match bases "
                f"{self.input_basis.rank}->{self.output_basis.rank}"
            )

    @property
    def r_m(self):
        return self.input_basis.rank

    @property
    def r_F(self):
        return self.output_basis.rank


def surrogate_forward(surrogate: Surrogate, m):
    beta = surrogate.input_basis.encode(m)
    return surrogate.output_basis.decode(surrogate.net.forward(beta))


def surrogate_jacobian_full(surrogate: Surrogate, m):
    """``Psi_F dPhi Psi_m^T Gamma_prior^-1`` as a dense ``d_s x d_m`` matrix."""
    beta = surrogate.input_basis.encode(m)
    return surrogate.output_basis.psi @ surrogate.net.jacobian(beta) @ surrogate.input_basis.dual.T


def encode_dataset(bank, input_basis: ReducedBasis, output_basis: ReducedBasis) -> TrainBatch:
    """Reduced training data; ``bank.reduced_jacobians`` must match the bases."""
    bm = input_basis.encode(bank.parameters)
    bF = output_basis.encode(bank.observables)
    Jr = bank.reduced_jacobians
    if Jr is None and bank.jacobians is not None:
        Jr = np.stack([output_basis.psi.T @ J @ input_basis.psi for J in bank.jacobians])
    return TrainBatch(bm, bF, Jr)


def split_holdout(n: int, fraction: float, seed: int):
    perm = sample_rng(seed, 1).permutation(n)
    n_hold = int(round(fraction * n))
    return np.sort(perm[n_hold:]), np.sort(perm[:n_hold])


def reduced_errors(net, data: TrainBatch) -> dict:
    """Mean relative output and reduced-Jacobian errors over a dataset."""
    out, jac = net.forward_and_jacobian(data.beta_m)
    res = {"output": float(np.mean(np.linalg.norm(out - data.beta_F, axis=1) / np.linalg.norm(data.beta_F, axis=1)))}
    if data.J_r is not None:
        num = np.linalg.norm(jac - data.J_r, axis=(1, 2))
        res["jacobian"] = float(np.mean(num / np.linalg.norm(data.J_r, axis=(1, 2))))
    return res


def train(data: TrainBatch, input_basis: ReducedBasis, output_basis: ReducedBasis,
          config: TrainConfig | None = None) -> Surrogate:
    """Fit a :class:`ResNet` with Adam; returns the surrogate with its loss record."""
    cfg = config or TrainConfig()
    n = len(data)
    if n == 0:
        raise DimensionError("empty training set")
    if cfg.lambda_jac != 0 and data.J_r is None:
        raise DimensionError("Jacobian-weighted training needs reduced Jacobians")
    train_rows, hold_rows = split_holdout(n, cfg.holdout, cfg.seed) if n > 1 else (np.arange(n), np.arange(0))
    tr = data.take(train_rows)
    net = ResNet.xavier(input_basis.rank, output_basis.rank, cfg.width, cfg.n_resnet, cfg.seed)
    opt = Adam(cfg.lr)
    theta = net.flat()
    lam = cfg.lambda_jac if data.J_r is not None else 0.0
    initial, _ = net.loss_and_grad(tr.beta_m, tr.beta_F, tr.J_r, lam)
    curve = [initial]
    for epoch in range(cfg.epochs):
        order = sample_rng(cfg.seed, 2 + epoch).permutation(len(tr))
        total = 0.0
        for start in range(0, len(tr), cfg.batch):
            rows = order[start:start + cfg.batch]
            b = tr.take(rows)
            value, grads = net.loss_and_grad(b.beta_m, b.beta_F, b.J_r, lam)
            if not np.isfinite(value):
                raise NumericalValidityError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            theta = opt.step(theta, np.concatenate([v.ravel() for v in grads.values()]))
            net.set_flat(theta)
            total += value * len(rows)
        curve.append(total / len(tr))
        log.debug("epoch %d loss %.6e", epoch, curve[-1])
    meta = {
        "epochs": cfg.epochs, "lr": cfg.lr, "lambda_jac": cfg.lambda_jac, "batch": cfg.batch,
        "seed": cfg.seed, "loss_curve": np.asarray(curve),
    }
    if len(hold_rows):
        meta["holdout"] = reduced_errors(net, data.take(hold_rows))
    return Surrogate(input_basis, output_basis, net, meta)

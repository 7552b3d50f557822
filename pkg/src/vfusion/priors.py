"""Data-driven pose priors: diagonal Gaussian mixture and recurrent predictor.

Both are inference-time components with loadable weights; the mixture ships
with a small EM fitter so priors can be trained on synthetic pose corpora.
Model files are self-describing (text header, float64 payload) with a pure
text variant for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.special import logsumexp


@dataclass
class GmmPrior:
    weights: np.ndarray  # (J,)
    means: np.ndarray  # (J, D)
    variances: np.ndarray  # (J, D) diagonal

    def __post_init__(self):
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ValueError("variances must be positive")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_logpdf(self, theta: np.ndarray) -> np.ndarray:
        diff = theta[None, :] - self.means
        return -0.5 * (
            np.sum(np.log(2.0 * np.pi * self.variances), axis=1)
            + np.sum(diff**2 / self.variances, axis=1)
        )

    def energy(self, theta: np.ndarray) -> float:
        """Negative log mixture density."""
        return float(-logsumexp(np.log(self.weights) + self.component_logpdf(theta)))

    def energy_grad_hess(self, theta: np.ndarray):
        """(energy, gradient, PSD Gauss-Newton style diagonal Hessian)."""
        lp = np.log(self.weights) + self.component_logpdf(theta)
        lse = logsumexp(lp)
        gamma = np.exp(lp - lse)
        diff = theta[None, :] - self.means
        grad = np.sum(gamma[:, None] * diff / self.variances, axis=0)
        hess_diag = np.sum(gamma[:, None] / self.variances, axis=0)
        return float(-lse), grad, np.diag(hess_diag)


def fit_gmm(
    samples: np.ndarray, n_components: int = 16, iters: int = 60, seed: int = 0,
    min_var: float = 1e-4,
) -> GmmPrior:
    """Diagonal-covariance EM with seeded farthest-point initialization."""
    rng = np.random.default_rng(seed)
    n, d = samples.shape
    centers = [samples[rng.integers(n)]]
    for _ in range(n_components - 1):
        dist = np.min(
            [np.sum((samples - c) ** 2, axis=1) for c in centers], axis=0
        )
        probs = dist / max(dist.sum(), 1e-30)
        centers.append(samples[rng.choice(n, p=probs)])
    means = np.array(centers)
    variances = np.tile(np.var(samples, axis=0) + min_var, (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)

    for _ in range(iters):
        logp = (
            np.log(weights)[None, :]
            - 0.5 * np.sum(np.log(2 * np.pi * variances), axis=1)[None, :]
            - 0.5
            * np.sum(
                (samples[:, None, :] - means[None, :, :]) ** 2 / variances[None, :, :], axis=2
            )
        )
        log_norm = logsumexp(logp, axis=1, keepdims=True)
        resp = np.exp(logp - log_norm)
        nk = resp.sum(axis=0) + 1e-12
        weights = nk / nk.sum()
        means = (resp.T @ samples) / nk[:, None]
        variances = (
            np.einsum("nj,njd->jd", resp, (samples[:, None, :] - means[None, :, :]) ** 2)
            / nk[:, None]
        )
        variances = np.maximum(variances, min_var)
    return GmmPrior(weights, means, variances)


def save_gmm(model: GmmPrior, path, text: bool = False) -> None:
    j, d = model.means.shape
    if text:
        with open(path, "w") as fh:
            fh.write(f"VFGMM 1 text\ncomponents {j} dim {d}\n")
            for arr in (model.weights, model.means.ravel(), model.variances.ravel()):
                fh.write(" ".join(repr(float(x)) for x in arr) + "\n")
    else:
        with open(path, "wb") as fh:
            fh.write(f"VFGMM 1 binary\ncomponents {j} dim {d}\n".encode())
            fh.write(model.weights.astype("<f8").tobytes())
            fh.write(model.means.astype("<f8").tobytes())
            fh.write(model.variances.astype("<f8").tobytes())


def load_gmm(path) -> GmmPrior:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().split()
        if magic[:2] != ["VFGMM", "1"]:
            raise ValueError("not a mixture model file")
        header = fh.readline().decode().split()
        j, d = int(header[1]), int(header[3])
        if magic[2] == "text":
            rows = [np.array([float(x) for x in fh.readline().decode().split()]) for _ in range(3)]
            w, m, v = rows
        else:
            w = np.frombuffer(fh.read(j * 8), dtype="<f8")
            m = np.frombuffer(fh.read(j * d * 8), dtype="<f8")
            v = np.frombuffer(fh.read(j * d * 8), dtype="<f8")
    return GmmPrior(w.copy(), m.reshape(j, d).copy(), v.reshape(j, d).copy())


HISTORY_LEN = 9


@dataclass
class LstmPredictor:
    """Single-layer LSTM over the last nine poses plus a linear readout.

    Gate layout follows the common (input, forget, cell, output) stacking.
    """

    w_ih: np.ndarray  # (4H, D)
    w_hh: np.ndarray  # (4H, H)
    b_ih: np.ndarray  # (4H,)
    b_hh: np.ndarray  # (4H,)
    w_out: np.ndarray  # (D, H)
    b_out: np.ndarray  # (D,)

    def __post_init__(self):
        h4, d = self.w_ih.shape
        h = h4 // 4
        if self.w_hh.shape != (h4, h) or self.w_out.shape != (d, h):
            raise ValueError("inconsistent recurrent weight shapes")

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    @property
    def dim(self) -> int:
        return self.w_ih.shape[1]

    def predict(self, history: np.ndarray) -> np.ndarray:
        """Next pose vector from exactly nine past pose vectors (9, D)."""
        history = np.asarray(history, dtype=float)
        if history.shape != (HISTORY_LEN, self.dim):
            raise ValueError(f"history must be ({HISTORY_LEN}, {self.dim})")
        hsize = self.hidden
        h = np.zeros(hsize)
        c = np.zeros(hsize)
        for x in history:
            gates = self.w_ih @ x + self.b_ih + self.w_hh @ h + self.b_hh
            i = _sigmoid(gates[:hsize])
            f = _sigmoid(gates[hsize : 2 * hsize])
            g = np.tanh(gates[2 * hsize : 3 * hsize])
            o = _sigmoid(gates[3 * hsize :])
            c = f * c + i * g
            h = o * np.tanh(c)
        return self.w_out @ h + self.b_out

    @staticmethod
    def random(dim: int, hidden: int = 128, seed: int = 0) -> "LstmPredictor":
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(hidden)
        return LstmPredictor(
            rng.uniform(-scale, scale, (4 * hidden, dim)),
            rng.uniform(-scale, scale, (4 * hidden, hidden)),
            rng.uniform(-scale, scale, 4 * hidden),
            rng.uniform(-scale, scale, 4 * hidden),
            rng.uniform(-scale, scale, (dim, hidden)),
            rng.uniform(-scale, scale, dim),
        )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def predict_pose(history: list[np.ndarray], model: LstmPredictor | None) -> np.ndarray | None:
    """Pose prediction from history; linear extrapolation without a model.

    Returns None when the history is too short for any prediction.
    """
    if model is not None:
        if len(history) < HISTORY_LEN:
            return None
        return model.predict(np.array(history[-HISTORY_LEN:]))
    if len(history) >= 2:
        return 2.0 * history[-1] - history[-2]
    if len(history) == 1:
        return history[-1].copy()
    return None


def save_lstm(model: LstmPredictor, path, text: bool = False) -> None:
    blocks = [model.w_ih, model.w_hh, model.b_ih, model.b_hh, model.w_out, model.b_out]
    header = f"VFLSTM 1 {'text' if text else 'binary'}\ninput {model.dim} hidden {model.hidden}\n"
    if text:
        with open(path, "w") as fh:
            fh.write(header)
            for b in blocks:
                fh.write(" ".join(repr(float(x)) for x in np.asarray(b).ravel()) + "\n")
    else:
        with open(path, "wb") as fh:
            fh.write(header.encode())
            for b in blocks:
                fh.write(np.asarray(b).astype("<f8").tobytes())


def load_lstm(path) -> LstmPredictor:
    with open(path, "rb") as fh:
        magic = fh.readline().decode().split()
        if magic[:2] != ["VFLSTM", "1"]:
            raise ValueError("not a recurrent predictor file")
        header = fh.readline().decode().split()
        d, h = int(header[1]), int(header[3])
        shapes = [(4 * h, d), (4 * h, h), (4 * h,), (4 * h,), (d, h), (d,)]
        blocks = []
        for shape in shapes:
            count = int(np.prod(shape))
            if magic[2] == "text":
                vals = np.array([float(x) for x in fh.readline().decode().split()])
            else:
                vals = np.frombuffer(fh.read(count * 8), dtype="<f8")
            blocks.append(vals.reshape(shape).copy())
    return LstmPredictor(*blocks)

"""Trainable sequential rankers used on both sides of the device-cloud split.

One estimator class serves as the compact on-device reranker and, at a
larger embedding width, as the high-capacity cloud ranker that generates
candidate slates. Scoring is ``dot(encode(history), item_emb) + item_bias``
with three interchangeable history encoders. All gradients are written by
hand and validated against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .core import CollabrecError, Rng, UnknownIdError, UserHistory
from .infer import CandidateSlate

__all__ = [
    "SequentialRanker",
    "TrainReport",
    "DivergenceError",
    "EmptySlateError",
    "CheckpointError",
    "ENCODERS",
    "save_checkpoint",
    "load_checkpoint",
    "loss_and_grads",
    "gradient_check",
]


class DivergenceError(CollabrecError):
    pass


class EmptySlateError(CollabrecError):
    pass


class CheckpointError(CollabrecError):
    pass


@dataclass
class TrainReport:
    """Per-phase training summary."""

    phase: str
    epoch_losses: list[float] = field(default_factory=list)
    n_samples: int = 0
    n_skipped: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def final_loss(self) -> float | None:
        return self.epoch_losses[-1] if self.epoch_losses else None

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "epoch_losses": self.epoch_losses,
            "n_samples": self.n_samples,
            "n_skipped": self.n_skipped,
            "warnings": self.warnings,
        }


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class _MeanPool:
    """Average of the windowed history embeddings; no parameters."""

    @staticmethod
    def param_shapes(d):
        return {}

    @staticmethod
    def forward(params, X):
        B, L, d = X.shape
        return X.mean(axis=1), (B, L, d)

    @staticmethod
    def backward(params, cache, dh):
        B, L, d = cache
        dX = np.repeat(dh[:, None, :], L, axis=1) / L
        return dX, {}


class _GatedRecurrent:
    """Single-layer GRU cell unrolled over the history window."""

    NAMES = ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wh", "Uh", "bh")

    @staticmethod
    def param_shapes(d):
        shapes = {}
        for n in _GatedRecurrent.NAMES:
            shapes[n] = (d,) if n.startswith("b") else (d, d)
        return shapes

    @staticmethod
    def forward(params, X):
        B, L, d = X.shape
        h = np.zeros((B, d))
        steps = []
        for t in range(L):
            x = X[:, t, :]
            z = _sigmoid(x @ params["Wz"] + h @ params["Uz"] + params["bz"])
            r = _sigmoid(x @ params["Wr"] + h @ params["Ur"] + params["br"])
            hc = np.tanh(x @ params["Wh"] + (r * h) @ params["Uh"] + params["bh"])
            h_new = (1.0 - z) * h + z * hc
            steps.append((x, h, z, r, hc))
            h = h_new
        return h, steps

    @staticmethod
    def backward(params, cache, dh):
        steps = cache
        B = dh.shape[0]
        L = len(steps)
        d = dh.shape[1]
        dX = np.zeros((B, L, d))
        grads = {n: np.zeros_like(params[n]) for n in _GatedRecurrent.NAMES}
        for t in range(L - 1, -1, -1):
            x, h_prev, z, r, hc = steps[t]
            dz = dh * (hc - h_prev)
            dhc = dh * z
            dh_prev = dh * (1.0 - z)

            dah = dhc * (1.0 - hc * hc)
            drh = dah @ params["Uh"].T
            dr = drh * h_prev
            dh_prev += drh * r
            dar = dr * r * (1.0 - r)
            dh_prev += dar @ params["Ur"].T
            daz = dz * z * (1.0 - z)
            dh_prev += daz @ params["Uz"].T

            dX[:, t, :] = dah @ params["Wh"].T + dar @ params["Wr"].T + daz @ params["Wz"].T
            grads["Wh"] += x.T @ dah
            grads["Uh"] += (r * h_prev).T @ dah
            grads["bh"] += dah.sum(axis=0)
            grads["Wr"] += x.T @ dar
            grads["Ur"] += h_prev.T @ dar
            grads["br"] += dar.sum(axis=0)
            grads["Wz"] += x.T @ daz
            grads["Uz"] += h_prev.T @ daz
            grads["bz"] += daz.sum(axis=0)
            dh = dh_prev
        return dX, grads


class _SelfAttention:
    """Single-head attention with the most recent item as query."""

    NAMES = ("Wq", "Wk", "Wv")

    @staticmethod
    def param_shapes(d):
        return {n: (d, d) for n in _SelfAttention.NAMES}

    @staticmethod
    def forward(params, X):
        B, L, d = X.shape
        scale = 1.0 / np.sqrt(d)
        q = X[:, -1, :] @ params["Wq"]
        K = X @ params["Wk"]
        V = X @ params["Wv"]
        s = np.einsum("bd,bld->bl", q, K) * scale
        a = _softmax(s, axis=1)
        h = np.einsum("bl,bld->bd", a, V)
        return h, (X, q, K, V, a, scale)

    @staticmethod
    def backward(params, cache, dh):
        X, q, K, V, a, scale = cache
        da = np.einsum("bd,bld->bl", dh, V)
        dV = a[:, :, None] * dh[:, None, :]
        ds = a * (da - np.sum(a * da, axis=1, keepdims=True))
        dq = np.einsum("bl,bld->bd", ds, K) * scale
        dK = ds[:, :, None] * q[:, None, :] * scale

        B, L, d = X.shape
        flatX = X.reshape(B * L, d)
        grads = {
            "Wq": X[:, -1, :].T @ dq,
            "Wk": flatX.T @ dK.reshape(B * L, d),
            "Wv": flatX.T @ dV.reshape(B * L, d),
        }
        dX = dK @ params["Wk"].T + dV @ params["Wv"].T
        dX[:, -1, :] += dq @ params["Wq"].T
        return dX, grads


ENCODERS = {
    "mean-pool": _MeanPool,
    "gated-recurrent": _GatedRecurrent,
    "self-attention": _SelfAttention,
}


class SequentialRanker(BaseEstimator):
    """Next-item ranker over windowed click histories.

    Parameters mirror the usual implicit-feedback setup: item embeddings
    plus a per-item popularity bias, a history encoder, and SGD with
    decoupled weight decay on a sampled binary cross-entropy loss.
    """

    def __init__(self, emb_dim=16, encoder="mean-pool", max_seq_len=10,
                 lr=0.05, weight_decay=0.0, epochs=5, neg_rate=1,
                 batch_size=256, seed=0):
        self.emb_dim = emb_dim
        self.encoder = encoder
        self.max_seq_len = max_seq_len
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.neg_rate = neg_rate
        self.batch_size = batch_size
        self.seed = seed

    # -- parameter plumbing ------------------------------------------------

    def _encoder_cls(self):
        try:
            return ENCODERS[self.encoder]
        except KeyError:
            raise ValueError(
                f"unknown encoder {self.encoder!r}; choose from {sorted(ENCODERS)}"
            ) from None

    def init_params(self, n_items: int, rng: np.random.Generator | None = None):
        """Allocate and randomly initialize all parameters."""
        if self.emb_dim < 1 or self.max_seq_len < 1:
            raise ValueError("emb_dim and max_seq_len must be >= 1")
        if rng is None:
            rng = Rng(self.seed).substream("ranker-init")
        scale = 1.0 / np.sqrt(self.emb_dim)
        params = {
            "item_emb": rng.normal(0.0, scale, size=(n_items, self.emb_dim)),
            "item_bias": np.zeros(n_items),
        }
        for name, shape in self._encoder_cls().param_shapes(self.emb_dim).items():
            params[name] = rng.normal(0.0, scale, size=shape)
        self.params_ = params
        self.n_items_ = n_items
        return self

    @property
    def is_fitted(self) -> bool:
        return hasattr(self, "params_")

    def param_names(self) -> list[str]:
        return sorted(self.params_)

    def flatten_params(self) -> np.ndarray:
        return np.concatenate([self.params_[n].ravel() for n in self.param_names()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        off = 0
        for n in self.param_names():
            size = self.params_[n].size
            self.params_[n] = flat[off:off + size].reshape(self.params_[n].shape).copy()
            off += size

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for n in self.param_names():
            h.update(n.encode())
            h.update(np.ascontiguousarray(self.params_[n], dtype=np.float64).tobytes())
        return h.hexdigest()

    # -- scoring -----------------------------------------------------------

    def encode(self, item_ids: np.ndarray):
        """Encode a (B, L) batch of history windows; L may be 0."""
        B, L = item_ids.shape
        if L == 0:
            return np.zeros((B, self.emb_dim)), None
        X = self.params_["item_emb"][item_ids]
        return self._encoder_cls().forward(self.params_, X)

    def score_items(self, history: UserHistory, items) -> np.ndarray:
        """Utility scores for ``items`` given one user's history window."""
        self._check_fitted()
        items = np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.n_items_):
            bad = items[(items < 0) | (items >= self.n_items_)][0]
            raise UnknownIdError(f"item id {bad} outside catalog of {self.n_items_}")
        hist = np.asarray(history.items[-self.max_seq_len:], dtype=np.int64)
        if hist.size and hist.max() >= self.n_items_:
            raise UnknownIdError(f"history item {hist.max()} outside catalog")
        h, _ = self.encode(hist[None, :])
        return h[0] @ self.params_["item_emb"][items].T + self.params_["item_bias"][items]

    def recall_topk(self, history: UserHistory, k: int) -> CandidateSlate:
        """Score the full catalog and return the top-k slate.

        Descending score; ties broken by ascending item id.
        """
        self._check_fitted()
        if k == 0:
            raise EmptySlateError("cannot build an empty slate (k=0)")
        if k > self.n_items_:
            raise CollabrecError(f"k={k} exceeds catalog size {self.n_items_}")
        scores = self.score_items(history, np.arange(self.n_items_))
        order = np.lexsort((np.arange(self.n_items_), -scores))[:k]
        return CandidateSlate(items=tuple(int(i) for i in order),
                              init_scores=tuple(float(scores[i]) for i in order))

    def _check_fitted(self):
        if not self.is_fitted:
            raise CollabrecError("ranker is not fitted; call fit() or init_params() first")

    # -- training ----------------------------------------------------------

    def fit(self, sequences: dict, n_items: int, sampler=None, phase: str = "independent",
            epochs: int | None = None, lr: float | None = None, rng_label: str = ""):
        """Train on per-user sequences with sampled-negative BCE.

        ``sequences`` maps user -> chronological item list. If the ranker
        is already fitted, training continues from the current parameters
        (used by the adaptive re-training phase); otherwise parameters are
        freshly initialized.
        """
        from .data import NegativeSampler

        report = TrainReport(phase=phase)
        if not self.is_fitted:
            self.init_params(n_items)
        if not sequences:
            report.warnings.append("empty training data; parameters unchanged")
            return report
        if sampler is None:
            sampler = NegativeSampler({u: set(s) for u, s in sequences.items()}, n_items,
                                      rate=self.neg_rate)

        samples = self._make_samples(sequences)
        report.n_samples = len(samples)
        rng = Rng(self.seed).substream(f"train-{phase}-{rng_label}")
        n_epochs = self.epochs if epochs is None else epochs
        step_lr = self.lr if lr is None else lr
        for epoch in range(n_epochs):
            losses = []
            order = rng.permutation(len(samples))
            negs = [sampler.sample(samples[i][0], self.neg_rate, rng) for i in order]
            for bucket, bucket_negs in self._buckets(samples, order, negs):
                loss = self._sgd_step(bucket, bucket_negs, step_lr)
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss at phase={phase} epoch={epoch}"
                    )
                losses.append(loss)
            report.epoch_losses.append(float(np.mean(losses)) if losses else 0.0)
        self.report_ = report
        return report

    def _make_samples(self, sequences) -> list[tuple[int, tuple[int, ...], int]]:
        # (user, history window, positive item) per position; position 0 has
        # no history to condition on and is not a training target.
        out = []
        L = self.max_seq_len
        for user in sorted(sequences):
            seq = sequences[user]
            for t in range(1, len(seq)):
                out.append((user, tuple(seq[max(0, t - L):t]), seq[t]))
        return out

    def _buckets(self, samples, order, negs):
        # Group shuffled samples by history length so batches need no padding.
        by_len: dict[int, list[int]] = {}
        for j, i in enumerate(order):
            by_len.setdefault(len(samples[i][1]), []).append(j)
        for length in sorted(by_len):
            idx = by_len[length]
            for start in range(0, len(idx), self.batch_size):
                chunk = idx[start:start + self.batch_size]
                yield ([samples[order[j]] for j in chunk], [negs[j] for j in chunk])

    def _sgd_step(self, batch, batch_negs, lr) -> float:
        hist = np.array([s[1] for s in batch], dtype=np.int64)
        pos = np.array([s[2] for s in batch], dtype=np.int64)
        negs = np.array(batch_negs, dtype=np.int64)
        loss, grads = _bce_batch(self, hist, pos, negs)
        self._apply_grads(grads, lr)
        return loss

    def _apply_grads(self, grads, lr):
        wd = self.weight_decay
        for name, p in self.params_.items():
            g = grads.get(name)
            if wd:
                p -= lr * wd * p
            if g is not None:
                p -= lr * g


def _bce_batch(ranker, hist, pos, negs):
    """Mean BCE over one equal-length batch; returns (loss, grads).

    ``hist`` is (B, L) with L possibly 0; ``negs`` is (B, R) with R
    possibly 0 (then only the positive term contributes).
    """
    params = ranker.params_
    B = hist.shape[0]
    emb = params["item_emb"]
    bias = params["item_bias"]
    h, cache = ranker.encode(hist)

    grads = {"item_emb": np.zeros_like(emb), "item_bias": np.zeros_like(bias)}
    logit_p = np.einsum("bd,bd->b", h, emb[pos]) + bias[pos]
    sp = _sigmoid(logit_p)
    loss = -np.log(np.clip(sp, 1e-12, None)).sum()
    dlogit_p = (sp - 1.0) / B
    dh = dlogit_p[:, None] * emb[pos]
    np.add.at(grads["item_emb"], pos, dlogit_p[:, None] * h)
    np.add.at(grads["item_bias"], pos, dlogit_p)

    if negs.size:
        logit_n = np.einsum("bd,brd->br", h, emb[negs]) + bias[negs]
        sn = _sigmoid(logit_n)
        loss += -np.log(np.clip(1.0 - sn, 1e-12, None)).sum()
        dlogit_n = sn / B
        dh += np.einsum("br,brd->bd", dlogit_n, emb[negs])
        np.add.at(grads["item_emb"], negs, dlogit_n[:, :, None] * h[:, None, :])
        np.add.at(grads["item_bias"], negs, dlogit_n)

    if cache is not None:
        enc = ranker._encoder_cls()
        dX, enc_grads = enc.backward(params, cache, dh)
        np.add.at(grads["item_emb"], hist, dX)
        for name, g in enc_grads.items():
            grads[name] = g
    return loss / B, grads


def softmax_slate_batch(ranker, hist, slate_items):
    """Softmax cross-entropy over a slate with the positive at index 0.

    ``slate_items`` is (B, S); column 0 holds the positive item. Returns
    (mean loss, grads) for one equal-length batch.
    """
    params = ranker.params_
    B = hist.shape[0]
    emb = params["item_emb"]
    h, cache = ranker.encode(hist)
    logits = np.einsum("bd,bsd->bs", h, emb[slate_items]) + params["item_bias"][slate_items]
    p = _softmax(logits, axis=1)
    loss = -np.log(np.clip(p[:, 0], 1e-12, None)).mean()

    dlogits = p.copy()
    dlogits[:, 0] -= 1.0
    dlogits /= B
    grads = {"item_emb": np.zeros_like(emb), "item_bias": np.zeros_like(params["item_bias"])}
    dh = np.einsum("bs,bsd->bd", dlogits, emb[slate_items])
    np.add.at(grads["item_emb"], slate_items, dlogits[:, :, None] * h[:, None, :])
    np.add.at(grads["item_bias"], slate_items, dlogits)
    if cache is not None:
        dX, enc_grads = ranker._encoder_cls().backward(params, cache, dh)
        np.add.at(grads["item_emb"], hist, dX)
        grads.update(enc_grads)
    return loss, grads


def loss_and_grads(ranker, samples):
    """Total BCE loss and analytic grads over explicit (hist, pos, negs) samples.

    Used by the finite-difference gradient check; samples may have mixed
    history lengths.
    """
    total = 0.0
    grads = {n: np.zeros_like(p) for n, p in ranker.params_.items()}
    for hist, pos, negs in samples:
        h = np.array([hist], dtype=np.int64)
        p = np.array([pos], dtype=np.int64)
        ng = np.array([list(negs)], dtype=np.int64) if negs else np.empty((1, 0), dtype=np.int64)
        loss, g = _bce_batch(ranker, h, p, ng)
        total += loss
        for n in g:
            grads[n] += g[n]
    return total, grads


def gradient_check(ranker, samples, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients."""
    _, grads = loss_and_grads(ranker, samples)
    analytic = np.concatenate([grads[n].ravel() for n in ranker.param_names()])
    flat = ranker.flatten_params()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += eps
        ranker.set_flat_params(bump)
        lp, _ = loss_and_grads(ranker, samples)
        bump[i] -= 2 * eps
        ranker.set_flat_params(bump)
        lm, _ = loss_and_grads(ranker, samples)
        numeric[i] = (lp - lm) / (2 * eps)
    ranker.set_flat_params(flat)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


# -- checkpoints ----------------------------------------------------------

_MAGIC = b"CRKP"
_CKPT_VERSION = 1


def save_checkpoint(ranker: SequentialRanker, path, config_hash: str = "") -> None:
    """Binary checkpoint: versioned header + little-endian float32 blobs."""
    meta = json.dumps({
        "config": ranker.get_params(),
        "config_hash": config_hash,
        "n_items": ranker.n_items_,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(meta)))
        fh.write(meta)
        names = ranker.param_names()
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(ranker.params_[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, expect_config_hash: str | None = None) -> SequentialRanker:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path}: not a ranker checkpoint")
        version, meta_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        if expect_config_hash is not None and meta["config_hash"] != expect_config_hash:
            raise CheckpointError(
                f"{path}: config hash mismatch "
                f"(checkpoint {meta['config_hash']!r}, expected {expect_config_hash!r})"
            )
        ranker = SequentialRanker(**meta["config"])
        params = {}
        (n_params,) = struct.unpack("<I", fh.read(4))
        for _ in range(n_params):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            params[name] = arr.astype(np.float64)
        ranker.params_ = params
        ranker.n_items_ = meta["n_items"]
        return ranker

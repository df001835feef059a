"""Episode-local adaptation: residual MLP head, Adam, leave-one-out BCE, soft-copy.

The head is trained with exact analytic gradients through the residual MLP,
masked prototype pooling, cosine margins, the fg/bg softmax, and BCE; no
autograd framework is involved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.special import erf

from .routing import RoutingDecision, TooFewSupportsError
from .store import Episode, FeatureDump, clone_dump, write_tensors, read_tensors

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)
_CLAMP = 1e-7

VARIANTS = ("m0", "m1", "m2")


@dataclass
class TtaConfig:
    lr: float = 1.3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    augment_views: int = 2  # synthetic views replacing a single support
    variant: str = "m2"
    hidden_dim: int | None = None  # None -> same as feature dim

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown head variant {self.variant!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class AdaptedHead:
    variant: str
    W1: np.ndarray | None = None  # [D, Dh]
    b1: np.ndarray | None = None  # [Dh]
    W2: np.ndarray | None = None  # [Dh, D]
    b2: np.ndarray | None = None  # [D]
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    diverged: bool = False

    def params(self) -> dict[str, np.ndarray]:
        if self.variant == "m0":
            return {}
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())


def init_head(dim: int, cfg: TtaConfig, seed: int = 0) -> AdaptedHead:
    """Zero-init residual head: identity map until the second layer trains."""
    cfg.validate()
    if cfg.variant == "m0":
        return AdaptedHead(variant="m0")
    dh = cfg.hidden_dim or dim
    rng = np.random.default_rng([seed, 0x48EAD])
    head = AdaptedHead(
        variant=cfg.variant,
        W1=rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, dh)),
        b1=np.zeros(dh),
        W2=np.zeros((dh, dim)),
        b2=np.zeros(dim),
    )
    for name, p in head.params().items():
        head.m[name] = np.zeros_like(p)
        head.v[name] = np.zeros_like(p)
    return head


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def apply_head(head: AdaptedHead, feat: np.ndarray) -> np.ndarray:
    """Residual transform token-wise; the m0 variant passes features through."""
    feat = np.asarray(feat, dtype=np.float64)
    if head.variant == "m0":
        return feat
    z1 = feat @ head.W1 + head.b1
    return feat + gelu(z1) @ head.W2 + head.b2


def _forward_cache(head: AdaptedHead, feat: np.ndarray):
    feat = np.asarray(feat, dtype=np.float64)
    if head.variant == "m0":
        return feat, None
    z1 = feat @ head.W1 + head.b1
    h = gelu(z1)
    return feat + h @ head.W2 + head.b2, (feat, z1, h)


def _backward_cache(head: AdaptedHead, cache, dout: np.ndarray, grads: dict) -> None:
    x, z1, h = cache
    grads["W2"] += h.T @ dout
    grads["b2"] += dout.sum(axis=0)
    dh = dout @ head.W2.T
    dz1 = dh * gelu_grad(z1)
    grads["W1"] += x.T @ dz1
    grads["b1"] += dz1.sum(axis=0)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _term_loss_grad(fq, y, fs, wfg, kappa, want_grad):
    """BCE of the cosine-margin prediction of one pseudo query.

    fq: [N, D] transformed pseudo-query tokens; fs: [M, D] transformed
    prototype-source tokens with fg weights wfg.
    Returns (loss, dFq, dFs) with gradients None when want_grad is false
    or the term is degenerate (single-class prototype source).
    """
    sf = wfg.sum()
    sb = (1.0 - wfg).sum()
    if sf <= 0.0 or sb <= 0.0:
        return None
    pf = (wfg @ fs) / sf
    pb = ((1.0 - wfg) @ fs) / sb
    npf = np.linalg.norm(pf)
    npb = np.linalg.norm(pb)
    if npf == 0.0 or npb == 0.0:
        return None
    nq = np.linalg.norm(fq, axis=1)
    inv_nq = np.where(nq > 0.0, 1.0 / np.where(nq > 0.0, nq, 1.0), 0.0)
    cf = (fq @ pf) * inv_nq / npf
    cb = (fq @ pb) * inv_nq / npb
    z = kappa * (cf - cb)
    p = _sigmoid(z)
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)).mean())
    if not want_grad:
        return loss, None, None

    n = fq.shape[0]
    dz = (p - y) / n  # d(mean BCE)/dz through the sigmoid
    dcf = kappa * dz
    dcb = -kappa * dz
    # query-side cosine gradients
    dfq = (dcf * inv_nq)[:, None] * (pf[None, :] / npf) - (dcf * cf * inv_nq**2)[:, None] * fq
    dfq += (dcb * inv_nq)[:, None] * (pb[None, :] / npb) - (dcb * cb * inv_nq**2)[:, None] * fq
    # prototype-side cosine gradients
    dpf = ((dcf * inv_nq) @ fq) / npf - float(dcf @ cf) * pf / npf**2
    dpb = ((dcb * inv_nq) @ fq) / npb - float(dcb @ cb) * pb / npb**2
    dfs = (wfg / sf)[:, None] * dpf[None, :] + ((1.0 - wfg) / sb)[:, None] * dpb[None, :]
    return loss, dfq, dfs


def _loo_terms(k: int, n_protos: int | None):
    """(pseudo-query index, prototype-source combination) pairs."""
    for i in range(k):
        rest = [j for j in range(k) if j != i]
        size = len(rest) if n_protos is None else n_protos
        for combo in combinations(rest, size):
            yield i, combo


def loo_loss(
    feats: list[np.ndarray],
    masks: list[np.ndarray],
    head: AdaptedHead,
    kappa: float,
    n_protos: int | None = None,
) -> float:
    """Mean leave-one-out BCE over head-transformed support features."""
    loss, _ = loo_loss_and_grads(feats, masks, head, kappa, n_protos, want_grad=False)
    return loss


def loo_loss_and_grads(
    feats: list[np.ndarray],
    masks: list[np.ndarray],
    head: AdaptedHead,
    kappa: float,
    n_protos: int | None = None,
    want_grad: bool = True,
):
    """Leave-one-out loss and analytic parameter gradients.

    ``n_protos`` restricts prototype sources to all size-n combinations of
    the remaining supports (None means all of them).
    """
    k = len(feats)
    if k < 2:
        raise TooFewSupportsError(f"need >= 2 supports, got {k}")
    want_grad = want_grad and head.variant == "m2"
    transformed, caches = [], []
    for f in feats:
        out, cache = _forward_cache(head, f)
        transformed.append(out)
        caches.append(cache)
    dfeat = [np.zeros_like(t) for t in transformed] if want_grad else None

    losses = []
    for i, combo in _loo_terms(k, n_protos):
        fs = np.concatenate([transformed[j] for j in combo], axis=0)
        wfg = np.concatenate([masks[j] for j in combo])
        res = _term_loss_grad(transformed[i], masks[i], fs, wfg, kappa, want_grad)
        if res is None:
            continue
        loss, dfq, dfs = res
        losses.append(loss)
        if want_grad:
            dfeat[i] += dfq
            row = 0
            for j in combo:
                nj = transformed[j].shape[0]
                dfeat[j] += dfs[row : row + nj]
                row += nj
    if not losses:
        raise TooFewSupportsError("every leave-one-out term was degenerate")
    total = float(np.mean(losses))
    if not want_grad:
        return total, None
    grads = {name: np.zeros_like(p) for name, p in head.params().items()}
    scale = 1.0 / len(losses)
    for cache, df in zip(caches, dfeat):
        _backward_cache(head, cache, df * scale, grads)
    return total, grads


def adam_step(head: AdaptedHead, grads: dict[str, np.ndarray], cfg: TtaConfig) -> AdaptedHead:
    """Bias-corrected Adam update on the head parameters, in place."""
    head.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    for name, p in head.params().items():
        g = grads[name]
        head.m[name] = b1 * head.m[name] + (1.0 - b1) * g
        head.v[name] = b2 * head.v[name] + (1.0 - b2) * g * g
        m_hat = head.m[name] / (1.0 - b1**head.t)
        v_hat = head.v[name] / (1.0 - b2**head.t)
        p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)
    return head


# ---------------------------------------------------------------------------
# soft-copy augmentation


def paste_foreground(dump: FeatureDump, dy: int, dx: int) -> FeatureDump:
    """Copy the foreground cells (tokens, image, mask) to a grid offset.

    Destination cells are overwritten, the new mask is the union, and cells
    pushed off the grid are dropped.
    """
    if dump.mask is None:
        raise ValueError("soft-copy needs a support mask")
    hg, wg = dump.grid
    out = clone_dump(dump)
    rows, cols = np.nonzero(dump.mask)
    dst_r, dst_c = rows + dy, cols + dx
    keep = (dst_r >= 0) & (dst_r < hg) & (dst_c >= 0) & (dst_c < wg)
    if keep.any():
        src_flat = rows[keep] * wg + cols[keep]
        dst_flat = dst_r[keep] * wg + dst_c[keep]
        out.tokens[:, dst_flat, :] = dump.tokens[:, src_flat, :]
        out.image_small[:, dst_r[keep], dst_c[keep]] = dump.image_small[:, rows[keep], cols[keep]]
        out.mask[dst_r[keep], dst_c[keep]] = 1
    return out


def soft_copy(dump: FeatureDump, seed: int) -> FeatureDump:
    """Paste the foreground at a uniformly sampled offset; deterministic per seed."""
    hg, wg = dump.grid
    rng = np.random.default_rng([seed, 0x50F7C0])
    dy = int(rng.integers(-(hg - 1), hg))
    dx = int(rng.integers(-(wg - 1), wg))
    return paste_foreground(dump, dy, dx)


def expand_one_shot(episode: Episode, views: int, seed: int) -> Episode:
    """Replace a single support with soft-copy views so leave-one-out is defined."""
    if episode.shot != 1:
        return episode
    supports = [soft_copy(episode.supports[0], seed + j) for j in range(views)]
    return Episode(supports=supports, query=episode.query, class_id=episode.class_id)


# ---------------------------------------------------------------------------
# the adaptation loop


def adapt(
    episode: Episode,
    decision: RoutingDecision,
    cfg: TtaConfig,
    kappa: float = 10.0,
    seed: int = 0,
) -> AdaptedHead:
    """K-1 Adam steps on leave-one-out losses over n-support prototype combinations.

    ``kappa`` must match the base predictor's cosine-to-logit scale so the
    optimized loss and the deployed prediction agree. Single-support episodes
    are expanded with soft-copy views first. On a non-finite loss the last
    finite head is returned with ``diverged`` set.
    """
    cfg.validate()
    if episode.shot == 1:
        episode = expand_one_shot(episode, cfg.augment_views, seed)
    if episode.shot < 2:
        raise TooFewSupportsError("adaptation needs >= 2 supports after augmentation")
    feats = [decision.features(s) for s in episode.supports]
    masks = [s.flat_mask() for s in episode.supports]
    head = init_head(feats[0].shape[1], cfg, seed)
    if cfg.variant in ("m0", "m1"):
        return head
    k = len(feats)
    for n in range(1, k):
        loss, grads = loo_loss_and_grads(feats, masks, head, kappa, n_protos=n)
        if not np.isfinite(loss):
            head.diverged = True
            return head
        adam_step(head, grads, cfg)
    return head


def save_head(head: AdaptedHead, path, extra_meta: dict | None = None) -> None:
    """Serialize head weights into the tensor container (names ``head.*``)."""
    meta = {"variant": head.variant, "t": head.t, "diverged": head.diverged}
    if extra_meta:
        meta.update(extra_meta)
    tensors = {f"head.{k}": v.astype("<f4") for k, v in head.params().items()}
    write_tensors(path, tensors, meta)


def load_head(path) -> AdaptedHead:
    tensors, meta = read_tensors(path)
    variant = meta.get("variant", "m2")
    if variant == "m0":
        return AdaptedHead(variant="m0", t=int(meta.get("t", 0)))
    head = AdaptedHead(
        variant=variant,
        W1=tensors["head.W1"].astype(np.float64),
        b1=tensors["head.b1"].astype(np.float64),
        W2=tensors["head.W2"].astype(np.float64),
        b2=tensors["head.b2"].astype(np.float64),
        t=int(meta.get("t", 0)),
        diverged=bool(meta.get("diverged", False)),
    )
    for name, p in head.params().items():
        head.m[name] = np.zeros_like(p)
        head.v[name] = np.zeros_like(p)
    return head

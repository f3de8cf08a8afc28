"""Class-aware contrastive objectives and the distillation loss.

All contrastive terms share :func:`supcon_rows`: for every anchor row, the
mean over its positives of ``-log softmax`` taken over the anchor's candidate
set, with the per-row maximum subtracted before exponentiation.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

FULL = "full"
WindowSize = Union[int, str]


class DegenerateFeatureWarning(RuntimeWarning):
    """A zero-norm feature vector took part in a cosine similarity."""


def check_window(k: WindowSize) -> WindowSize:
    if isinstance(k, str):
        if k.lower() != FULL:
            raise ValueError(f"window size must be an odd integer or {FULL!r}, got {k!r}")
        return FULL
    if int(k) != k or k < 1 or k % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {k!r}")
    return int(k)


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    k: WindowSize = 1
    stages_used: tuple = (1, 2, 3)
    max_candidates: int = 1024

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if not self.stages_used:
            raise ValueError("stages_used must be non-empty")
        object.__setattr__(self, "k", check_window(self.k))
        object.__setattr__(self, "stages_used", tuple(sorted(set(int(s) for s in self.stages_used))))


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        warnings.warn("cosine similarity of a zero vector; returning 0", DegenerateFeatureWarning, stacklevel=2)
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # zero vectors map to zero, giving cosine 0 instead of NaN
    return F.normalize(x, dim=dim, eps=1e-12)


@dataclass(frozen=True)
class PairSets:
    """Boolean positive/candidate masks, one row per anchor.

    ``anchors[r]`` is the feature row that row ``r`` contrasts from.
    """

    anchors: torch.Tensor  # (R,) long
    positives: torch.Tensor  # (R, N) bool
    candidates: torch.Tensor  # (R, N) bool

    def __post_init__(self):
        rows = torch.arange(len(self.anchors))
        if self.candidates[rows, self.anchors].any():
            raise ValueError("an anchor may not be its own candidate")
        if (self.positives & ~self.candidates).any():
            raise ValueError("positives must be a subset of candidates")

    @classmethod
    def from_labels(cls, labels, anchors: Optional[Sequence[int]] = None) -> "PairSets":
        """Positives: same label, excluding self. Candidates: everything but self."""
        labels = torch.as_tensor(labels)
        n = len(labels)
        anchors = torch.arange(n) if anchors is None else torch.as_tensor(anchors, dtype=torch.long)
        not_self = torch.ones(len(anchors), n, dtype=torch.bool)
        not_self[torch.arange(len(anchors)), anchors] = False
        pos = (labels[anchors][:, None] == labels[None, :]) & not_self
        return cls(anchors, pos, not_self)


def supcon_rows(logits: torch.Tensor, positives: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    """Per-row supervised contrastive loss from precomputed (scaled) logits."""
    n_pos = positives.sum(dim=-1)
    if (n_pos == 0).any():
        raise ValueError("every anchor needs at least one positive")
    masked = logits.masked_fill(~candidates, float("-inf"))
    row_max = masked.max(dim=-1, keepdim=True).values.detach()
    shifted = masked - row_max
    log_denom = torch.log(torch.exp(shifted).sum(dim=-1, keepdim=True))
    log_prob = (shifted - log_denom).masked_fill(~positives, 0.0)
    return -log_prob.sum(dim=-1) / n_pos


def supervised_contrastive_loss(features: torch.Tensor, pair_sets: PairSets, tau: float) -> torch.Tensor:
    """Mean over anchors of the supervised contrastive loss on cosine similarities."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    z = l2_normalize(features, dim=-1)
    logits = z[pair_sets.anchors] @ z.T / tau
    return supcon_rows(logits, pair_sets.positives, pair_sets.candidates).mean()


# --- windowed positive search ----------------------------------------------

def window_offsets(x: int, y: int, h: int, w: int, k: WindowSize) -> list:
    """In-bounds positions of the k x k window centred on (x, y), row-major."""
    k = check_window(k)
    if not (0 <= x < h and 0 <= y < w):
        raise IndexError(f"position {(x, y)} outside {h}x{w} map")
    if k == FULL:
        return [(m, n) for m in range(h) for n in range(w)]
    r = k // 2
    return [(m, n) for m in range(max(0, x - r), min(h, x + r + 1))
            for n in range(max(0, y - r), min(w, y + r + 1))]


def windowed_similarity(v_anchor, v_other, position, k: WindowSize) -> dict:
    """Cosine similarity between ``v_anchor[x, y]`` and each ``v_other[m, n]`` in the window.

    Maps are h x w x c arrays. Returns ``{(m, n): similarity}`` in row-major order;
    out-of-bounds window cells are omitted.
    """
    va = np.asarray(v_anchor, dtype=np.float64)
    vo = np.asarray(v_other, dtype=np.float64)
    h, w = va.shape[:2]
    x, y = position
    cells = window_offsets(x, y, h, w, k)
    a = va[x, y]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFeatureWarning)
        return {(m, n): cosine_sim(a, vo[m, n]) for m, n in cells}


def select_positive_index(similarities: dict, center) -> tuple:
    """Argmax cell; ties go to the smallest squared offset from ``center``, then row-major."""
    if not similarities:
        raise ValueError("empty window")
    best = max(similarities.values())
    cx, cy = center
    ties = [p for p, s in similarities.items() if s == best]
    return min(ties, key=lambda p: ((p[0] - cx) ** 2 + (p[1] - cy) ** 2, p[0], p[1]))


def _window_tables(h: int, w: int, k: WindowSize, device=None):
    """(P, P) window mask and tie-break rank for anchor cell p vs candidate cell q."""
    rows = torch.arange(h, device=device).repeat_interleave(w)
    cols = torch.arange(w, device=device).repeat(h)
    dr = rows[None, :] - rows[:, None]
    dc = cols[None, :] - cols[:, None]
    if k == FULL:
        inside = torch.ones(h * w, h * w, dtype=torch.bool, device=device)
    else:
        r = k // 2
        inside = (dr.abs() <= r) & (dc.abs() <= r)
    P = h * w
    rank = (dr**2 + dc**2) * P + torch.arange(P, device=device)[None, :]
    return inside, rank


def window_argmax(sim: torch.Tensor, h: int, w: int, k: WindowSize) -> torch.Tensor:
    """Vectorised positive selection.

    ``sim[..., p, q]`` is the similarity of anchor cell p to candidate cell q
    (cells flattened row-major). Returns the selected q for every p.
    """
    inside, rank = _window_tables(h, w, check_window(k), sim.device)
    masked = sim.masked_fill(~inside, float("-inf"))
    best = masked.max(dim=-1, keepdim=True).values
    tie_rank = torch.where(masked == best, rank.expand_as(masked), torch.iinfo(torch.long).max)
    return tie_rank.argmin(dim=-1)


# --- losses ------------------------------------------------------------------

def _stage_local_loss(v: torch.Tensor, labels: torch.Tensor, n_anchors: int, tau: float,
                      k: WindowSize, max_candidates: int, generator: Optional[torch.Generator]) -> torch.Tensor:
    """Local CL for one stage; ``v`` is E x c x h x w with anchors first."""
    E, c, h, w = v.shape
    P = h * w
    flat = l2_normalize(v.flatten(2).transpose(1, 2), dim=-1)  # E x P x c
    anchors = flat[:n_anchors]
    # sim[i, p, e, q]
    sim = torch.einsum("ipc,eqc->ipeq", anchors, flat)

    same = labels[:n_anchors, None] == labels[None, :]  # B x E
    not_self = torch.ones_like(same)
    not_self[torch.arange(n_anchors), torch.arange(n_anchors)] = False
    sources = same & not_self
    if not sources.any(dim=1).all():
        missing = (~sources.any(dim=1)).nonzero().flatten().tolist()
        raise ValueError(f"anchors {missing} have neither an augmented view nor a same-class companion")

    with torch.no_grad():
        choice = window_argmax(sim.detach().transpose(1, 2), h, w, k).transpose(1, 2)  # B x P x E
    positives = torch.zeros(n_anchors, P, E, P, dtype=torch.bool, device=v.device)
    positives.scatter_(3, choice.unsqueeze(-1), True)
    positives &= sources[:, None, :, None]

    n_avail = (E - 1) * P
    if max_candidates is not None and n_avail > max_candidates:
        # one uniform subset per anchor image, shared by its positions
        keep = torch.zeros(n_anchors, E * P, dtype=torch.bool)
        for i in range(n_anchors):
            pool = torch.cat([torch.arange(0, i * P), torch.arange((i + 1) * P, E * P)])
            pick = torch.randperm(len(pool), generator=generator)[:max_candidates]
            keep[i, pool[pick]] = True
        candidates = keep.to(v.device).reshape(n_anchors, 1, E, P) | positives
    else:
        candidates = not_self[:, None, :, None].expand(n_anchors, P, E, P)

    rows = supcon_rows((sim / tau).reshape(n_anchors, P, E * P),
                       positives.reshape(n_anchors, P, E * P),
                       candidates.reshape(n_anchors, P, E * P))
    # 1/|hw| inside the sum over anchors, then batch mean
    return rows.mean(dim=1).mean()


def local_cl_loss(projected: Sequence[torch.Tensor], labels, config: LossConfig,
                  n_anchors: Optional[int] = None, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Local contrastive loss averaged over ``config.stages_used``.

    ``projected`` holds one E x c x h x w tensor per stage. Entries
    ``[0, n_anchors)`` are anchors; the rest (views and companions) serve as
    positive sources and candidates only. Positives for anchor i are, in every
    other same-label entry, the best-matching cell in the k x k window.
    """
    labels = torch.as_tensor(labels)
    E = len(labels)
    n_anchors = E // 2 if n_anchors is None else n_anchors
    losses = []
    for s in config.stages_used:
        if not 1 <= s <= len(projected):
            raise ValueError(f"stage {s} not present in a {len(projected)}-stage pyramid")
        losses.append(_stage_local_loss(projected[s - 1], labels, n_anchors, config.tau, config.k,
                                        config.max_candidates, generator))
    return torch.stack(losses).mean()


def global_cl_loss(g: torch.Tensor, labels, tau: float) -> torch.Tensor:
    """Supervised contrastive loss over all 2B global vectors, each acting as anchor."""
    return supervised_contrastive_loss(g, PairSets.from_labels(labels), tau)


def kd_loss(encoder_pyramid: Sequence[torch.Tensor], decoder_pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over stages of the mean per-position ``1 - cos`` between feature vectors."""
    if len(encoder_pyramid) != len(decoder_pyramid):
        raise ValueError("pyramids have different stage counts")
    total = 0.0
    for fe, fd in zip(encoder_pyramid, decoder_pyramid):
        if fe.shape != fd.shape:
            raise ValueError(f"shape mismatch {tuple(fe.shape)} vs {tuple(fd.shape)}")
        cos = (l2_normalize(fe, dim=1) * l2_normalize(fd, dim=1)).sum(dim=1)
        total = total + (1.0 - cos).mean()
    return total


class LossTerms(NamedTuple):
    total: torch.Tensor
    kd: torch.Tensor
    lcl: torch.Tensor
    gcl: torch.Tensor


def total_loss(out, labels, config: LossConfig, n_anchors: Optional[int] = None,
               generator: Optional[torch.Generator] = None) -> LossTerms:
    """Distillation loss plus the weighted local and global contrastive terms.

    Contrastive terms with a zero weight are skipped and reported as 0.
    """
    labels = torch.as_tensor(labels)
    l_kd = kd_loss(out.encoder_pyramid, out.decoder_pyramid)
    zero = torch.zeros((), dtype=l_kd.dtype)
    l_lcl = local_cl_loss(out.projected, labels, config, n_anchors, generator) if config.lambda1 > 0 else zero
    l_gcl = global_cl_loss(out.global_features, labels, config.tau) if config.lambda2 > 0 else zero
    total = l_kd
    if config.lambda1 > 0:
        total = total + config.lambda1 * l_lcl
    if config.lambda2 > 0:
        total = total + config.lambda2 * l_gcl
    return LossTerms(total, l_kd, l_lcl, l_gcl)

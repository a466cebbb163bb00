"""Treatment-effect head and answer-based attention reconstruction.

The attention query role is played by the treatment ("answer") embedding;
keys are projections of position-wise treatment-effect estimates; values are
the raw covariates of a past-only window, recombined convexly by the
normalized causal scores.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Node


def one_hot(z, K: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.int64)
    if np.any(z < 0) or np.any(z >= K):
        raise ValueError(f"treatment indices outside 0..{K - 1}")
    eye = np.eye(K)
    return eye[z]


def arm_interactions(h: Node, onehot: np.ndarray) -> Node:
    """Per-arm gated copies of the hidden state, concatenated channelwise.

    (B,T,dh) x (B,T,K) -> (B,T,K*dh); a matmul against stacked per-arm weight
    blocks then yields an arm-specific linear map of h.
    """
    K = onehot.shape[-1]
    parts = [ad.mask_mul(h, onehot[..., k : k + 1]) for k in range(K)]
    return ad.concat(parts, axis=-1)


def cate_mu(w_mu: Node, b_mu: Node, h: Node, onehot: np.ndarray) -> Node:
    """Predicted next-covariate mean under the given arms: mu(h_t, z_t)."""
    return ad.add(ad.matmul(arm_interactions(h, onehot), w_mu), ad.matmul(ad.constant(onehot), b_mu))


def cate_hat(w_mu: Node, b_mu: Node, h: Node, z, z_ref, K: int) -> Node:
    """Arm contrast mu(h,z) - mu(h,z_ref): antisymmetric by construction."""
    lead = h.value.shape[:-1]
    oh = _expand_arms(z, lead, K)
    oh_ref = _expand_arms(z_ref, lead, K)
    return ad.sub(cate_mu(w_mu, b_mu, h, oh), cate_mu(w_mu, b_mu, h, oh_ref))


def _expand_arms(z, lead_shape, K: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.int64)
    if z.ndim == 0:
        z = np.broadcast_to(z, lead_shape)
    if z.shape != tuple(lead_shape):
        raise ValueError(f"arm index shape {z.shape} does not match positions {lead_shape}")
    return one_hot(z, K)


def answers(params: dict, z, K: int) -> Node:
    """Treatment embeddings: the attention queries' answers."""
    oh = one_hot(z, K)
    return ad.matmul(ad.constant(oh), params["attn.embed"])


def keys(params: dict, h: Node, z, K: int) -> Node:
    """Projected effect estimates: k = proj(cate_hat(h, z, 0)).

    The untreated arm is the fixed contrast reference, so z = 0 yields
    exactly the projection bias as key.
    """
    effect = cate_hat(params["cate.w"], params["cate.b"], h, np.asarray(z), 0, K)
    return ad.add(ad.matmul(effect, params["attn.key_w"]), params["attn.key_b"])


def answer_key(params: dict, h: Node, z, K: int):
    """Answer/key pair for positions carrying state ``h`` and arm ``z``."""
    return answers(params, z, K), keys(params, h, z, K)


def causal_score(answers: Node, keys: Node, window: int) -> Node:
    """Normalized alignment of each position's answer with windowed keys.

    alpha[., t, j] weights source position t-window+1+j; rows sum to one over
    the valid (past-only) lanes; scaled dot-product scores, max-guarded exp.
    """
    if window < 1:
        raise ValueError("causal_score: window must be >= 1")
    s_val = kernels.band_scores_fwd(answers.value, keys.value, window)

    def vjp_scores(g):
        return kernels.band_scores_bwd(answers.value, keys.value, window, g)

    scores = ad.custom(s_val, (answers, keys), vjp_scores, "band_scores")
    alpha_val = kernels.band_softmax_fwd(scores.value, window)

    def vjp_softmax(g):
        return (kernels.band_softmax_bwd(alpha_val, g),)

    return ad.custom(alpha_val, (scores,), vjp_softmax, "band_softmax")


def reconstruct(alpha: Node, x: Node, window: int) -> Node:
    """Convex recombination R_t = sum_j alpha[t, j] * X[t-window+1+j]."""
    if alpha.value.shape[-1] != window:
        raise ValueError(
            f"reconstruct: alpha lane count {alpha.value.shape[-1]} != window {window}"
        )
    r_val = kernels.band_wsum_fwd(alpha.value, x.value)

    def vjp(g):
        return kernels.band_wsum_bwd(alpha.value, x.value, g)

    return ad.custom(r_val, (alpha, x), vjp, "band_wsum")


def window_positions(T: int, window: int) -> np.ndarray:
    """Source position of each (t, lane) pair; -1 marks invalid lanes."""
    t = np.arange(T)[:, None]
    j = np.arange(window)[None, :]
    pos = t - window + 1 + j
    pos[pos < 0] = -1
    return pos

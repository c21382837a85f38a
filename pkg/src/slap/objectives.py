"""SLAP bootstrap loss and the InfoNCE contrastive baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from slap import diffcore as dc
from slap.errors import BatchSizeError, ContractError, DimensionError, StructuralError
from slap.nn import forward_tower

DEFAULT_LAMBDA = 0.5


@dataclass
class SlapLossParts:
    l_at: float
    l_ta: float
    l_a: float
    l_t: float
    lam: float
    total: float

    def as_dict(self):
        return {"l_at": self.l_at, "l_ta": self.l_ta, "l_a": self.l_a, "l_t": self.l_t,
                "lambda": self.lam, "total": self.total}


def slap_loss(q_a, q_t, zbar_a, zbar_t, lam=DEFAULT_LAMBDA):
    """Weighted sum of the two intermodal and two intramodal cosine distances.

    Each term is the batch mean of row-wise ``1 - cos``:

        total = lam * (d(q_a, zbar_t) + d(q_t, zbar_a))
                + (1 - lam) * (d(q_a, zbar_a) + d(q_t, zbar_t))

    Targets must already be off-tape (see :func:`slap.diffcore.stop_gradient`).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    shapes = {t.shape for t in (q_a, q_t, zbar_a, zbar_t)}
    if len(shapes) != 1:
        raise StructuralError(f"slap_loss inputs must share one shape, got {sorted(shapes)}")
    for name, t in (("zbar_a", zbar_a), ("zbar_t", zbar_t)):
        if t.requires_grad:
            raise ContractError(f"{name} carries gradient; wrap targets in stop_gradient")

    def term(q, zbar):
        return dc.cosine_distance(q, zbar).mean()

    l_at, l_ta = term(q_a, zbar_t), term(q_t, zbar_a)
    l_a, l_t = term(q_a, zbar_a), term(q_t, zbar_t)
    total = dc.scale(l_at + l_ta, lam) + dc.scale(l_a + l_t, 1.0 - lam)
    parts = SlapLossParts(l_at.item(), l_ta.item(), l_a.item(), l_t.item(), float(lam), total.item())
    return total, parts


def infonce_loss(z_a, z_t, temperature, *, require_negatives=True):
    """Symmetric InfoNCE over the ``B x B`` cosine-similarity matrix.

    Matched rows are positives, every other row in the batch a negative; the
    loss averages the A->T and T->A cross-entropies.
    """
    if z_a.shape != z_t.shape:
        raise DimensionError(f"infonce inputs differ in shape: {z_a.shape} vs {z_t.shape}")
    b = z_a.shape[0]
    if require_negatives and b < 2:
        raise BatchSizeError("InfoNCE needs a batch of at least 2 pairs")
    na, nt = dc.normalize_rows(z_a), dc.normalize_rows(z_t)
    logits = (na @ nt.T) / temperature
    eye = np.eye(b)
    # row-wise log-softmax picks A->T; transposing picks T->A
    ce_at = -(dc.log_softmax(logits, axis=1) * eye).sum() / b
    ce_ta = -(dc.log_softmax(logits, axis=0) * eye).sum() / b
    return dc.scale(ce_at + ce_ta, 0.5)


def slap_forward_step(model, x_a, x_t, lam=DEFAULT_LAMBDA, train_mode=True, x_a_target=None):
    """Context towers produce queries, target towers produce stop-gradient
    targets, and the four cosine terms combine into the SLAP loss.

    ``x_a_target`` is an optional second augmented view of the A inputs for
    the target branch; by default both branches see ``x_a``.
    """
    _, q_a = forward_tower(model.tower_a, x_a, use_target=False, train_mode=train_mode)
    _, q_t = forward_tower(model.tower_t, x_t, use_target=False, train_mode=train_mode)
    x_a_target = x_a if x_a_target is None else x_a_target
    zbar_a, _ = forward_tower(model.tower_a, x_a_target, use_target=True, train_mode=train_mode)
    zbar_t, _ = forward_tower(model.tower_t, x_t, use_target=True, train_mode=train_mode)
    return slap_loss(q_a, q_t, zbar_a, zbar_t, lam)


def clap_forward_step(model, x_a, x_t, train_mode=True):
    z_a, _ = forward_tower(model.tower_a, x_a, train_mode=train_mode)
    z_t, _ = forward_tower(model.tower_t, x_t, train_mode=train_mode)
    return infonce_loss(z_a, z_t, dc.exp(model.log_temperature))

"""Training objectives as pure functions of network outputs.

Reduction conventions (fixed so the beta weights are resolution independent):
patch maps, L1 distances and squared-L2 distances are all mean-reduced over
elements. Probabilities entering a log are clamped to [1e-7, 1 - 1e-7]; every
clamp is counted in ``diagnostics``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .datamodel import HyperParams, AppearanceFilter, TrainingAbort, ValidationError

PROB_CLAMP = 1e-7


@dataclass
class LossDiagnostics:
    clamp_events: int = 0

    def reset(self) -> None:
        self.clamp_events = 0


diagnostics = LossDiagnostics()


def _log_prob(p: torch.Tensor) -> torch.Tensor:
    clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    n_out = int((p < PROB_CLAMP).sum()) + int((p > 1.0 - PROB_CLAMP).sum())
    if n_out:
        diagnostics.clamp_events += n_out
    return clamped.log()


def adv_image(d_real_s: torch.Tensor, d_real_t: torch.Tensor,
              d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Image adversarial losses from probability patch maps.

    loss_D = -[log D(real_s) + log D(real_t) + log(1 - D(fake))], each term
    averaged over its patches; loss_G = -log D(fake) (non-saturating).
    """
    loss_d = -(_log_prob(d_real_s).mean() + _log_prob(d_real_t).mean()
               + _log_prob(1.0 - d_fake).mean())
    loss_g = -_log_prob(d_fake).mean()
    return loss_d, loss_g


def adv_appearance(d_same: torch.Tensor, d_cross: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Appearance adversarial losses: the same-domain pair is real, the pair
    with the translated image is fake."""
    loss_d = -(_log_prob(d_same).mean() + _log_prob(1.0 - d_cross).mean())
    loss_g = -_log_prob(d_cross).mean()
    return loss_d, loss_g


def rec_self(reconstruction: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Self-reconstruction L1, mean over all pixels and channels."""
    if reconstruction.shape != original.shape:
        raise ValidationError(
            f"shape mismatch: {tuple(reconstruction.shape)} vs {tuple(original.shape)}")
    return (reconstruction - original).abs().mean()


def rec_cycle(cycled: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Cycle-reconstruction L1; same form as rec_self, on the re-translated image."""
    return rec_self(cycled, original)


def _mean_sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).pow(2).mean()


def cons_content(f_s: torch.Tensor, f_st: torch.Tensor, f_neg: torch.Tensor,
                 m_c: float) -> torch.Tensor:
    """Content consistency hinge:
    max(0, ||f_s - f_st||^2 - ||f_s - f_neg||^2 + m_c), squared distances
    mean-reduced over elements."""
    if f_s.shape != f_st.shape or f_s.shape != f_neg.shape:
        raise ValidationError("content features must share a shape")
    return torch.relu(_mean_sq_dist(f_s, f_st) - _mean_sq_dist(f_s, f_neg) + m_c)


def _flat_cos(a: AppearanceFilter, b: AppearanceFilter) -> torch.Tensor:
    # float64 internally: freshly initialized filters can sit near the float32
    # underflow boundary, where the squared-norm product hits zero and the
    # backward pass turns into 0 * inf
    va, vb = a.flat_weights().double(), b.flat_weights().double()
    na2, nb2 = (va * va).sum(), (vb * vb).sum()
    if float(na2.detach()) == 0.0 or float(nb2.detach()) == 0.0:
        raise ValidationError("cosine of a zero-norm filter is undefined")
    # sqrt of the product (not product of sqrts) makes cos(w, w) exactly 1,
    # so a satisfied hinge evaluates to exactly 0
    return (va * vb).sum() / torch.sqrt(na2 * nb2)


def cons_appearance(w_t: AppearanceFilter, w_st: AppearanceFilter,
                    w_neg: AppearanceFilter) -> torch.Tensor:
    """Appearance consistency hinge on flattened filter weights:
    max(0, 1 - cos(w_t, w_st) + cos(w_t, w_neg)); the margin is the fixed 1
    implied by the cosine form."""
    return torch.relu(1.0 - _flat_cos(w_t, w_st) + _flat_cos(w_t, w_neg))


def nce(z_q: torch.Tensor, z_pos: torch.Tensor, z_negs: torch.Tensor,
        tau: float) -> torch.Tensor:
    """InfoNCE with one positive against N_neg negatives at temperature tau,
    computed via logsumexp for stability."""
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    negs = z_negs if isinstance(z_negs, torch.Tensor) else torch.stack(list(z_negs))
    if negs.dim() != 2 or negs.shape[0] == 0:
        raise ValidationError("nce requires a non-empty (N, K) stack of negatives")
    pos_logit = (z_q * z_pos).sum().reshape(1) / tau
    # sorted reduction keeps the loss exactly invariant to negative order
    neg_logits = torch.sort((negs @ z_q) / tau).values
    logits = torch.cat([pos_logit, neg_logits])
    return torch.logsumexp(logits, dim=0) - pos_logit.squeeze(0)


@dataclass
class LossTerms:
    """One training step's loss components (tensors or floats)."""

    adv_image_d: torch.Tensor | float = 0.0
    adv_image_g: torch.Tensor | float = 0.0
    adv_appearance_d: torch.Tensor | float = 0.0
    adv_appearance_g: torch.Tensor | float = 0.0
    rec_self: torch.Tensor | float = 0.0
    rec_cycle: torch.Tensor | float = 0.0
    cons_content: torch.Tensor | float = 0.0
    cons_appearance: torch.Tensor | float = 0.0
    nce: torch.Tensor | float = 0.0


def _is_finite(v) -> bool:
    if isinstance(v, torch.Tensor):
        return bool(torch.isfinite(v).all())
    return v == v and abs(v) != float("inf")


def total(terms: LossTerms, hp: HyperParams) -> dict[str, torch.Tensor | float]:
    """Weighted aggregates of the full objective.

    Returns the min-max sides separately plus the single weighted scalar:
      discriminator = adv_image_d + adv_appearance_d
      generator     = adv_image_g + adv_appearance_g + weighted non-adversarial terms
      objective     = adv_image_d + adv_appearance_d + weighted non-adversarial terms
    Raises TrainingAbort naming the first non-finite component.
    """
    for name in ("adv_image_d", "adv_image_g", "adv_appearance_d", "adv_appearance_g",
                 "rec_self", "rec_cycle", "cons_content", "cons_appearance", "nce"):
        if not _is_finite(getattr(terms, name)):
            raise TrainingAbort(f"non-finite loss component: {name}")
    weighted = (hp.beta_rs * terms.rec_self + hp.beta_rc * terms.rec_cycle
                + hp.beta_cc * terms.cons_content + hp.beta_ca * terms.cons_appearance
                + hp.beta_nce * terms.nce)
    return {
        "discriminator": terms.adv_image_d + terms.adv_appearance_d,
        "generator": terms.adv_image_g + terms.adv_appearance_g + weighted,
        "objective": terms.adv_image_d + terms.adv_appearance_d + weighted,
    }

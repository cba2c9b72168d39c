"""Iterative token reconstruction from the stage's own WCA map."""
from .dta import WCAMap
from .errors import ShapeError
from .numerics import stable_softmax


def reconstruction_weights(wm):
    """(.., H, N) map -> (.., N, H) weights, softmax over the sparsified axis."""
    wm = wm.wm if isinstance(wm, WCAMap) else wm
    return stable_softmax(wm.transpose(-1, -2), dim=-1)


def reconstruct(s, t, wm):
    """T_out = softmax(WM^T) S + T."""
    wm_t = wm.wm if isinstance(wm, WCAMap) else wm
    if s.shape[-1] != t.shape[-1]:
        raise ShapeError(f"sparsified width {s.shape[-1]} != token width {t.shape[-1]}")
    if wm_t.shape[-2:] != (s.shape[-2], t.shape[-2]):
        raise ShapeError(f"map shape {tuple(wm_t.shape[-2:])} does not match "
                         f"H={s.shape[-2]}, N={t.shape[-2]}")
    return reconstruction_weights(wm_t) @ s + t

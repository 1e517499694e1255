"""Cross-modal, region-aware contrastive losses between region crops and frozen text."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G


class ProjectionHead:
    """Affine map from pooled backbone features into the text-embedding space."""

    def __init__(self, in_dim, out_dim, rng):
        self.weight = G.Tensor(rng.normal(scale=np.sqrt(2.0 / in_dim), size=(in_dim, out_dim)), requires_grad=True)
        self.bias = G.Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x):
        return G.l2_normalize(G.add(G.matmul(x, self.weight), self.bias))

    def parameters(self):
        return [self.weight, self.bias]

    def named_parameters(self):
        return {"proj.weight": self.weight, "proj.bias": self.bias}


@dataclass
class FeatureBundle:
    """Row-normalized region features; ``_s`` is the clean view, ``_t`` the augmented one.

    Row i of every object matrix refers to the same region (and category); the
    text matrices never require grad.
    """

    I_obj_s: G.Tensor
    I_obj_t: G.Tensor
    I_bg_s: G.Tensor
    I_bg_t: G.Tensor
    T_obj_s: G.Tensor
    T_obj_t: G.Tensor
    T_bg_s: G.Tensor
    T_bg_t: G.Tensor

    def __post_init__(self):
        for name in ("T_obj_s", "T_obj_t", "T_bg_s", "T_bg_t"):
            t = getattr(self, name)
            if not isinstance(t, G.Tensor):
                t = G.Tensor(t)
            elif t.requires_grad:
                t = t.detach()
            setattr(self, name, t)
        for name in ("I_obj_s", "I_obj_t", "I_bg_s", "I_bg_t"):
            setattr(self, name, G.as_tensor(getattr(self, name)))
        n_obj = {self.I_obj_s.shape[0], self.I_obj_t.shape[0], self.T_obj_s.shape[0], self.T_obj_t.shape[0]}
        n_bg = {self.I_bg_s.shape[0], self.I_bg_t.shape[0], self.T_bg_s.shape[0], self.T_bg_t.shape[0]}
        if len(n_obj) != 1 or len(n_bg) != 1:
            raise ValueError(f"misaligned bundle: object rows {sorted(n_obj)}, background rows {sorted(n_bg)}")

    def matrices(self):
        return {k: getattr(self, k) for k in
                ("I_obj_s", "I_obj_t", "I_bg_s", "I_bg_t", "T_obj_s", "T_obj_t", "T_bg_s", "T_bg_t")}

    def permuted(self, obj_perm, bg_perm):
        def p(t, perm):
            return G.Tensor(t.data[perm], requires_grad=t.requires_grad)
        return FeatureBundle(p(self.I_obj_s, obj_perm), p(self.I_obj_t, obj_perm),
                             p(self.I_bg_s, bg_perm), p(self.I_bg_t, bg_perm),
                             p(self.T_obj_s, obj_perm), p(self.T_obj_t, obj_perm),
                             p(self.T_bg_s, bg_perm), p(self.T_bg_t, bg_perm))


def info_nce(a, b, tau=0.1):
    """Symmetric InfoNCE: matching row indices are positives, every other row a negative."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    n = a.shape[0]
    if n == 0:
        raise ValueError("info_nce needs at least one row")
    if b.shape[0] != n:
        raise ValueError(f"info_nce row mismatch: {a.shape[0]} vs {b.shape[0]}")
    logits = G.scale(G.matmul(a, G.transpose(b)), 1.0 / tau)
    labels = np.arange(n)
    forward = G.cross_entropy(G.log_softmax(logits), labels)
    reverse = G.cross_entropy(G.log_softmax(G.transpose(logits)), labels)
    return G.scale(G.add(forward, reverse), 0.5)


def loss_img(bundle, tau=0.1):
    clean = G.concat([bundle.I_obj_s, bundle.I_bg_s], axis=0)
    aug = G.concat([bundle.I_obj_t, bundle.I_bg_t], axis=0)
    return info_nce(clean, aug, tau)


def loss_text_obj(bundle, tau=0.1):
    return G.scale(G.add(info_nce(bundle.I_obj_s, bundle.T_obj_s, tau),
                         info_nce(bundle.I_obj_t, bundle.T_obj_t, tau)), 0.5)


def loss_text_bg(bundle, tau=0.1):
    return G.scale(G.add(info_nce(bundle.I_bg_s, bundle.T_bg_s, tau),
                         info_nce(bundle.I_bg_t, bundle.T_bg_t, tau)), 0.5)


def combine(l_img, l_text_obj, l_text_bg):
    """Half the image term plus a quarter of each text term."""
    return G.scale(G.add(l_img, G.scale(G.add(l_text_obj, l_text_bg), 0.5)), 0.5)


def crfi_total(bundle, tau=0.1, components=None):
    parts = {"img": loss_img(bundle, tau), "text_obj": loss_text_obj(bundle, tau),
             "text_bg": loss_text_bg(bundle, tau)}
    if components is not None:
        components.update({k: v.item() for k, v in parts.items()})
    return combine(parts["img"], parts["text_obj"], parts["text_bg"])


def encode_regions(backbone, head, crops):
    """Backbone features of (N, S, S, 3) crops, globally average pooled, projected and normalized."""
    feats = backbone(crops)
    return head(G.mean(feats, axis=(1, 2)))


def build_bundle(backbone, head, provider, selection, aug_obj_crops, aug_bg_crops):
    n_obj = selection.n_obj
    crops = np.concatenate([selection.obj_crops, selection.bg_crops, aug_obj_crops, aug_bg_crops])
    z = encode_regions(backbone, head, crops)
    n = n_obj + selection.n_bg
    clean, aug = np.arange(n), np.arange(n, 2 * n)
    return FeatureBundle(
        I_obj_s=G.take_rows(z, clean[:n_obj]), I_bg_s=G.take_rows(z, clean[n_obj:]),
        I_obj_t=G.take_rows(z, aug[:n_obj]), I_bg_t=G.take_rows(z, aug[n_obj:]),
        T_obj_s=provider.embed(selection.prompts_obj["original"]),
        T_obj_t=provider.embed(selection.prompts_obj["augmented"]),
        T_bg_s=provider.embed(selection.prompts_bg["original"]),
        T_bg_t=provider.embed(selection.prompts_bg["augmented"]),
    )

"""The fusion-denoising attack: re-weighting, relaxing, fusion, denoising.

A homogeneous set of abs-preprocessed encryptions is rescaled by 1/lambda1,
down-weighted by the variance ratio beta, pushed through a shared
relax + conv feature extractor per input, merged by a fusion rule chosen
from the set size, and cleaned up by a small residual denoiser with one
non-local attention block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError, DimensionError, ParameterError
from .imaging import image_variance, materialize
from .metrics import combined_loss, l1_loss_t, l2_loss_t


def reweight_factors(variances):
    """beta = min(variance) / variance, exactly 1 for the least noisy member."""
    v = np.asarray(variances, dtype=np.float64)
    if np.any(v <= 0):
        raise DataError("re-weighting needs strictly positive variances")
    return v.min() / v


def reweight(abs_images, lambdas):
    """Rescale abs images by 1/lambda1, then scale by the variance ratio."""
    if len(abs_images) != len(lambdas):
        raise DimensionError("one lambda per member required")
    rescaled = []
    for img, lam in zip(abs_images, lambdas):
        if not 0.0 < lam <= 1.0:
            raise DataError(f"lambda1 {lam} outside (0, 1]")
        img = np.asarray(img, dtype=np.float64)
        if img.min() < 0:
            raise DataError("reweight expects abs-preprocessed members")
        rescaled.append(img / lam)
    betas = reweight_factors([image_variance(r) for r in rescaled])
    return [b * r for b, r in zip(betas, rescaled)]


def select_fusion_rule(set_size):
    """choose-max for small sets (<= 10), average for larger ones."""
    if set_size < 1:
        raise ParameterError("fusion needs at least one input")
    return "choose_max" if set_size <= 10 else "average"


def fuse(features, rule):
    """Merge per-input feature maps elementwise; permutation invariant."""
    if not features:
        raise DimensionError("fuse of zero feature maps")
    for f in features[1:]:
        if f.shape != features[0].shape:
            raise DimensionError("fuse: feature shapes differ")
    if rule == "average":
        return ad.mean_stack(features)
    if rule == "choose_max":
        out = features[0]
        for f in features[1:]:
            out = ad.select_abs_max(out, f)
        return out
    raise ParameterError(f"unknown fusion rule '{rule}'")


class FdnModel:
    """Parameters of the restoration network.

    ``relax=False`` replaces the stride-2 down/up pair with a plain 3x3
    convolution (the image-relaxing ablation); ``use_reweight=False`` skips
    the variance re-weighting of the inputs.
    """

    def __init__(self, rng, channels=8, denoiser_blocks=4, relax=True, use_reweight=True, attention_pool=4):
        self.channels = channels
        self.relax = relax
        self.use_reweight = use_reweight
        self.attention_pool = attention_pool
        c = channels
        if relax:
            self.down_w = ad.parameter((c, 3, 3, 3), 3 * 9, rng)
            self.down_b = ad.parameter((c, 1, 1), 3 * 9, rng)
            self.up_w = ad.parameter((c, c, 3, 3), c * 9, rng)
            self.up_b = ad.parameter((c, 1, 1), c * 9, rng)
        else:
            self.down_w = ad.parameter((c, 3, 3, 3), 3 * 9, rng)
            self.down_b = ad.parameter((c, 1, 1), 3 * 9, rng)
            self.up_w = None
            self.up_b = None
        self.conv_block = (
            ad.parameter((c, c, 3, 3), c * 9, rng),
            ad.parameter((c, 1, 1), c * 9, rng),
            ad.parameter((c, c, 3, 3), c * 9, rng),
            ad.parameter((c, 1, 1), c * 9, rng),
        )
        self.blocks = []
        for _ in range(denoiser_blocks):
            self.blocks.append(
                (
                    ad.parameter((c, c, 3, 3), c * 9, rng),
                    ad.parameter((c, 1, 1), c * 9, rng),
                    ad.parameter((c, c, 3, 3), c * 9, rng),
                    ad.parameter((c, 1, 1), c * 9, rng),
                )
            )
        self.attn_value = ad.parameter((c, c), c, rng)
        self.final_w = ad.parameter((3, c, 3, 3), c * 9, rng)
        self.final_b = ad.parameter((3, 1, 1), c * 9, rng)

    def params(self):
        out = {"down.w": self.down_w, "down.b": self.down_b}
        if self.relax:
            out["up.w"] = self.up_w
            out["up.b"] = self.up_b
        for i, name in enumerate(("w1", "b1", "w2", "b2")):
            out[f"convblock.{name}"] = self.conv_block[i]
        for bi, block in enumerate(self.blocks):
            for i, name in enumerate(("w1", "b1", "w2", "b2")):
                out[f"denoise{bi}.{name}"] = block[i]
        out["attn.value"] = self.attn_value
        out["final.w"] = self.final_w
        out["final.b"] = self.final_b
        return out

    def state(self):
        return {k: v.data for k, v in self.params().items()}

    def load_state(self, state):
        for k, v in self.params().items():
            if state[k].shape != v.data.shape:
                raise DimensionError(f"checkpoint shape mismatch for {k}")
            v.data = np.array(state[k], dtype=np.float64)


def _bias(b, spatial):
    h, w = spatial
    rep = ad.matmul2d(ad.reshape(b, (b.shape[0], 1)), ad.Tensor(np.ones((1, h * w))))
    return ad.reshape(rep, (b.shape[0], h, w))


def relax_forward(model, image):
    """Stride-2 conv down to the ceil-half size, transposed conv back up.

    Output spatial dims always equal the input's; odd sizes are handled by
    choosing output_padding per axis (1 for even, 0 for odd extents).
    """
    x = ad.as_tensor(image)
    _, h, w = x.shape
    if not model.relax:
        y = ad.conv2d(x, model.down_w, 1, 1)
        return ad.relu(ad.add(y, _bias(model.down_b, (h, w))))
    mid = ad.conv2d(x, model.down_w, 2, 1)
    mid = ad.relu(ad.add(mid, _bias(model.down_b, mid.shape[1:])))
    opad = (1 if h % 2 == 0 else 0, 1 if w % 2 == 0 else 0)
    up = ad.conv_transpose2d(mid, model.up_w, 2, 1, opad)
    return ad.relu(ad.add(up, _bias(model.up_b, (h, w))))


def _conv_features(model, x):
    w1, b1, w2, b2 = model.conv_block
    h = ad.relu(ad.add(ad.conv2d(x, w1, 1, 1), _bias(b1, x.shape[1:])))
    return ad.relu(ad.add(ad.conv2d(h, w2, 1, 1), _bias(b2, x.shape[1:])))


def _attention(model, x):
    c, h, w = x.shape
    pooled = ad.avg_pool2d(x, model.attention_pool)
    hp, wp = pooled.shape[1:]
    flat = ad.reshape(pooled, (c, hp * wp))
    logits = ad.mul(ad.matmul2d(ad.transpose2d(flat), flat), 1.0 / math.sqrt(c))
    attended = ad.matmul2d(flat, ad.transpose2d(ad.softmax_rows(logits)))
    projected = ad.matmul2d(model.attn_value, attended)
    up = ad.upsample_nearest(ad.reshape(projected, (c, hp, wp)), model.attention_pool, h, w)
    return ad.add(x, up)


def denoiser_forward(model, features):
    """Residual conv blocks with one mid-network non-local attention block."""
    x = ad.as_tensor(features)
    mid = len(model.blocks) // 2
    for bi, (w1, b1, w2, b2) in enumerate(model.blocks):
        if bi == mid:
            x = _attention(model, x)
        r = ad.relu(ad.add(ad.conv2d(x, w1, 1, 1), _bias(b1, x.shape[1:])))
        r = ad.add(ad.conv2d(r, w2, 1, 1), _bias(b2, x.shape[1:]))
        x = ad.add(x, r)
    y = ad.conv2d(x, model.final_w, 1, 1)
    return ad.add(y, _bias(model.final_b, y.shape[1:]))


def fdn_forward_t(model, abs_images, lambdas, rule=None):
    """Differentiable forward pass; returns the clamped restored image tensor."""
    if not abs_images:
        raise DataError("empty homogeneous set")
    inputs = reweight(abs_images, lambdas) if model.use_reweight else [
        np.asarray(m, dtype=np.float64) for m in abs_images
    ]
    rule = rule or select_fusion_rule(len(inputs))
    feats = [_conv_features(model, relax_forward(model, m)) for m in inputs]
    fused = fuse(feats, rule)
    return ad.clamp(denoiser_forward(model, fused), -1.0, 1.0)


def fdn_forward(model, abs_images, lambdas, rule=None):
    return fdn_forward_t(model, abs_images, lambdas, rule).data


@dataclass
class TrainingPair:
    """One (homogeneous set, reference target image) supervision example."""

    inputs: list
    lambdas: list
    target: np.ndarray
    target_id: int
    reference_member: int


def make_training_pairs(clusters, encryptions, private_images):
    """Label each cluster with the target inside its minimum-variance member.

    Variance is measured on the 1/lambda1-rescaled abs image, consistent
    with re-weighting; ties pick the lowest encryption id.
    """
    pairs = []
    for cl in clusters:
        members = sorted(cl.member_ids)
        abs_imgs, lams, variances = [], [], []
        for m in members:
            enc = encryptions[m]
            if enc.oracle is None:
                raise DataError("training pairs need oracle blocks")
            a = np.abs(enc.image)
            lam = float(enc.oracle.lambdas[0])
            abs_imgs.append(a)
            lams.append(lam)
            variances.append(image_variance(a / lam))
        ref = int(np.argmin(variances))
        ref_enc = encryptions[members[ref]]
        target = materialize(ref_enc.oracle.target, private_images)
        pairs.append(
            TrainingPair(
                inputs=abs_imgs,
                lambdas=lams,
                target=np.asarray(target, dtype=np.float64),
                target_id=ref_enc.oracle.target.source_id,
                reference_member=members[ref],
            )
        )
    return pairs


def train_fdn(model, pairs, epochs, rng, learning_rate=1e-3, lambda_mssim=0.7, loss_kind="combined"):
    """Adam training on the fusion-denoising loss; returns the loss curve."""
    if not pairs:
        raise DataError("no training pairs")
    if loss_kind not in ("combined", "l1", "l2"):
        raise ParameterError(f"unknown loss kind '{loss_kind}'")
    params = list(model.params().values())
    state = ad.AdamState.for_params(params, learning_rate=learning_rate)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(pairs))
        losses = []
        for idx in order:
            pair = pairs[int(idx)]
            out = fdn_forward_t(model, pair.inputs, pair.lambdas)
            tgt = ad.Tensor(pair.target)
            if loss_kind == "combined":
                loss = combined_loss(out, tgt, lambda_mssim)
            elif loss_kind == "l1":
                loss = l1_loss_t(out, tgt)
            else:
                loss = l2_loss_t(out, tgt)
            value = loss.item()
            if not np.isfinite(value):
                raise DataError(f"training diverged at epoch {epoch}: loss={value}")
            losses.append(value)
            ad.zero_grads(params)
            loss.backward()
            ad.adam_step(params, [p.grad for p in params], state)
        curve.append(float(np.mean(losses)))
    return model, curve

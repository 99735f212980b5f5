"""Mixup-with-sign-mask encryption and dataset generation.

An encryption mixes one target image, one partner image and k - 2 public
images with simplex-distributed weights, then flips every pixel sign with
an independent fair coin.  The released pair is (image, soft label); the
oracle block keeps the ground truth for experiments and tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AmbiguityError, DataError, DimensionError, ParameterError
from .imaging import AugmentedImage, OracleBlock, augment, identity_params, materialize


@dataclass
class GenerationConfig:
    n_private: int = 16
    copies_per_image: int = 4
    mix_k: int = 6
    epsilon: float = 0.2
    num_classes: int = 16
    cluster_size: int | None = None

    def __post_init__(self):
        if self.mix_k < 2:
            raise ParameterError("mix count k must be >= 2")
        if self.copies_per_image < 1 or self.n_private < 2:
            raise ParameterError("need K >= 1 augmentation copies and N >= 2 private images")
        if self.cluster_size is not None and self.cluster_size < 2:
            raise ParameterError("cluster_size must be >= 2 when set")


@dataclass
class Encryption:
    """Released image + soft label; ``oracle`` only present experimenter-side."""

    image: np.ndarray
    label: np.ndarray
    oracle: OracleBlock | None = None


def sample_lambdas(k, rng):
    """Uniform draw from the k-simplex (normalised exponentials)."""
    if k < 2:
        raise ParameterError(f"mix count k={k} must be >= 2")
    e = rng.exponential(1.0, size=k)
    return e / e.sum()


def sign_mask(seed, shape):
    """Deterministic ±1 mask from a 64-bit seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def make_label(num_classes, target_class, partner_class, lam1, lam2):
    y = np.zeros(num_classes)
    y[target_class] += lam1
    y[partner_class] += lam2
    return y


def encrypt(target, partner, publics, rng, lambdas=None, sign_seed=None, sign_free=False, num_classes=None):
    """Mix target, partner and publics per the scheme and mask the signs.

    ``target``/``partner`` are AugmentedImage values carrying pixels and
    class ids; ``publics`` is a sequence of (public_id, image) pairs.
    """
    t_img = np.asarray(target.image, dtype=np.float64)
    p_img = np.asarray(partner.image, dtype=np.float64)
    if t_img.shape != p_img.shape:
        raise DimensionError(f"target {t_img.shape} vs partner {p_img.shape}")
    k = 2 + len(publics)
    if lambdas is None:
        lambdas = sample_lambdas(k, rng)
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (k,):
        raise DimensionError(f"expected {k} lambdas, got {lambdas.shape}")
    mix = lambdas[0] * t_img + lambdas[1] * p_img
    public_ids = []
    for lam, (pid, u) in zip(lambdas[2:], publics):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != t_img.shape:
            raise DimensionError(f"public image {u.shape} vs target {t_img.shape}")
        mix = mix + lam * u
        public_ids.append(int(pid))
    if sign_seed is None:
        sign_seed = int(rng.integers(0, 2**63))
    mask = 1.0 if sign_free else sign_mask(sign_seed, mix.shape)
    if num_classes is None:
        num_classes = max(target.class_id, partner.class_id) + 1
    label = make_label(num_classes, target.class_id, partner.class_id, lambdas[0], lambdas[1])
    oracle = OracleBlock(
        target=target,
        partner=partner,
        lambdas=lambdas,
        sign_seed=int(sign_seed),
        public_ids=tuple(public_ids),
        sign_free=sign_free,
    )
    return Encryption(image=mask * mix, label=label, oracle=oracle)


def recompute_from_oracle(oracle, private_images, public_pool):
    """Re-evaluate the mixing equation from an oracle block, bit-exact."""
    t_img = materialize(oracle.target, private_images)
    p_img = materialize(oracle.partner, private_images)
    mix = oracle.lambdas[0] * t_img + oracle.lambdas[1] * p_img
    for lam, pid in zip(oracle.lambdas[2:], oracle.public_ids):
        mix = mix + lam * public_pool[pid]
    mask = 1.0 if oracle.sign_free else sign_mask(oracle.sign_seed, mix.shape)
    return mask * mix


def decrypt_with_oracle(enc, private_images, public_pool):
    """Invert an encryption exactly using its oracle block (round-trip check)."""
    if enc.oracle is None:
        raise DataError("decryption requires the oracle block")
    o = enc.oracle
    mask = 1.0 if o.sign_free else sign_mask(o.sign_seed, enc.image.shape)
    mix = mask * enc.image  # mask is its own inverse
    mix = mix - o.lambdas[1] * materialize(o.partner, private_images)
    for lam, pid in zip(o.lambdas[2:], o.public_ids):
        mix = mix - lam * public_pool[pid]
    return mix / o.lambdas[0]


def _draw_publics(publics, k, rng):
    if k > 2 and len(publics) == 0:
        raise DataError("public pool is empty but k > 2")
    idx = rng.choice(len(publics), size=k - 2, replace=len(publics) < k - 2) if k > 2 else []
    return [(int(i), publics[int(i)]) for i in idx]


def generate_dataset(private_images, class_ids, cfg, publics, rng):
    """Generate encryptions; returns (encryptions, label matrix).

    Without ``cluster_size`` this follows the shuffled-pairing procedure:
    K augmented copies per image (copy 0 is the image itself) are flattened,
    shuffled, and mixed pairwise, giving N*K encryptions.  With
    ``cluster_size`` set, each private image becomes the target of exactly
    that many encryptions (experiment mode with known homogeneous sets).
    """
    private_images = [np.asarray(x, dtype=np.float64) for x in private_images]
    if len(private_images) != cfg.n_private:
        raise DataError(f"expected {cfg.n_private} private images, got {len(private_images)}")
    k = cfg.mix_k

    def make_copy(i, j):
        if j == 0:
            return AugmentedImage(
                image=private_images[i],
                params=identity_params(),
                source_id=i,
                copy_index=0,
                class_id=int(class_ids[i]),
            )
        return augment(
            private_images[i], cfg.epsilon, rng, source_id=i, copy_index=j, class_id=int(class_ids[i])
        )

    encryptions = []
    if cfg.cluster_size is None:
        flat = [make_copy(i, j) for i in range(cfg.n_private) for j in range(cfg.copies_per_image)]
        order = rng.permutation(len(flat))
        shuffled = [flat[int(o)] for o in order]
        for tgt, prt in zip(flat, shuffled):
            encryptions.append(
                encrypt(tgt, prt, _draw_publics(publics, k, rng), rng, num_classes=cfg.num_classes)
            )
    else:
        for i in range(cfg.n_private):
            for l in range(cfg.cluster_size):
                tgt = make_copy(i, 0 if l == 0 else l)
                j = int(rng.integers(0, cfg.n_private - 1))
                j = j if j < i else j + 1  # partner from a different image
                prt = augment(
                    private_images[j], cfg.epsilon, rng, source_id=j, copy_index=1, class_id=int(class_ids[j])
                )
                encryptions.append(
                    encrypt(tgt, prt, _draw_publics(publics, k, rng), rng, num_classes=cfg.num_classes)
                )
    labels = np.stack([e.label for e in encryptions])
    return encryptions, labels


def ground_truth_clusters(encryptions):
    """Map target source id -> list of encryption indices (experiment mode)."""
    out = {}
    for i, enc in enumerate(encryptions):
        if enc.oracle is None:
            raise DataError("ground-truth clusters need oracle blocks")
        out.setdefault(enc.oracle.target.source_id, []).append(i)
    return out


def shared_label_class(labels):
    """Class most often carrying label mass across a cluster's members.

    Ties break toward the larger accumulated coefficient, then the lower id.
    """
    counts, mass = {}, {}
    for lab in labels:
        for cls in np.flatnonzero(np.asarray(lab)):
            counts[int(cls)] = counts.get(int(cls), 0) + 1
            mass[int(cls)] = mass.get(int(cls), 0.0) + float(lab[cls])
    if not counts:
        raise DataError("no label mass in cluster")
    return max(counts, key=lambda c: (counts[c], mass[c], -c))


def infer_lambda(label, target_class):
    """Read the target's mixing coefficient off the released soft label."""
    label = np.asarray(label, dtype=np.float64)
    if target_class < 0 or target_class >= label.size:
        raise ParameterError(f"class {target_class} outside label of size {label.size}")
    nonzero = np.flatnonzero(label)
    if label[target_class] == 0.0:
        raise DataError(f"label carries no mass at class {target_class}")
    if nonzero.size == 1:
        # both mixed images share one class; the entry holds lam1 + lam2
        raise AmbiguityError("single-entry label cannot be split into lambda1 and lambda2")
    return float(label[target_class])

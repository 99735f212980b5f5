"""Pairwise similarity scoring, clique clustering and the epsilon filter.

The comparative scorer looks at two resolutions of each candidate pair: the
central 16x16 crop and the 2x-downsampled view, each stacked into a
6-channel input for a small residual branch.  Scores feed a weighted graph
from which homogeneous sets are carved out greedily.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError, DimensionError
from .imaging import abs_image, central_crop16, downsample2, epsilon_distance, pad_or_crop_center


def pair_features(m_a, m_b):
    """Build the (hi-res, lo-res) stacked 6-channel 16x16 pair views."""
    m_a, m_b = np.asarray(m_a), np.asarray(m_b)
    if m_a.shape != m_b.shape:
        raise DimensionError(f"pair_features: shapes {m_a.shape} vs {m_b.shape}")
    hi = np.concatenate([central_crop16(m_a), central_crop16(m_b)], axis=0)
    lo = np.concatenate(
        [pad_or_crop_center(downsample2(m_a), 16), pad_or_crop_center(downsample2(m_b), 16)], axis=0
    )
    return hi, lo


class _Branch:
    """conv + residual blocks over a 6-channel pair view, flattened features."""

    def __init__(self, rng, channels, blocks, prefix):
        self.prefix = prefix
        self.channels = channels
        self.entry_w = ad.parameter((channels, 6, 3, 3), 6 * 9, rng)
        self.entry_b = ad.parameter((channels, 1, 1), 6 * 9, rng)
        self.blocks = []
        for _ in range(blocks):
            self.blocks.append(
                (
                    ad.parameter((channels, channels, 3, 3), channels * 9, rng),
                    ad.parameter((channels, 1, 1), channels * 9, rng),
                    ad.parameter((channels, channels, 3, 3), channels * 9, rng),
                    ad.parameter((channels, 1, 1), channels * 9, rng),
                )
            )

    def forward(self, x):
        h = ad.relu(ad.add(ad.conv2d(x, self.entry_w, 1, 1), _bcast(self.entry_b, x.shape[1:])))
        for w1, b1, w2, b2 in self.blocks:
            r = ad.relu(ad.add(ad.conv2d(h, w1, 1, 1), _bcast(b1, h.shape[1:])))
            r = ad.add(ad.conv2d(r, w2, 1, 1), _bcast(b2, h.shape[1:]))
            h = ad.relu(ad.add(h, r))
        return ad.reshape(h, (-1,))

    def params(self):
        out = {f"{self.prefix}.entry.w": self.entry_w, f"{self.prefix}.entry.b": self.entry_b}
        for i, (w1, b1, w2, b2) in enumerate(self.blocks):
            out[f"{self.prefix}.block{i}.w1"] = w1
            out[f"{self.prefix}.block{i}.b1"] = b1
            out[f"{self.prefix}.block{i}.w2"] = w2
            out[f"{self.prefix}.block{i}.b2"] = b2
        return out


def _bcast(bias, spatial):
    # per-channel bias (C,1,1) expanded to (C,H,W); no general broadcasting
    h, w = spatial
    rep = ad.reshape(bias, (bias.shape[0], 1))
    rep = ad.matmul2d(rep, ad.Tensor(np.ones((1, h * w))))
    return ad.reshape(rep, (bias.shape[0], h, w))


def _standardize_halves(view):
    """Zero-mean unit-variance per stacked half, removing the mixing-weight
    scale so cross-image correlation carries the signal."""
    a, b = view[:3], view[3:]
    out = np.concatenate(
        [(a - a.mean()) / (a.std() + 1e-8), (b - b.mean()) / (b.std() + 1e-8)], axis=0
    )
    return out


class ComparativeNet:
    """Two-branch multi-resolution pair scorer; ``multires=False`` gives the
    plain single-view ablation standing in for the baseline scorer."""

    def __init__(self, rng, channels=16, blocks=2, multires=True, plain_size=32):
        self.multires = multires
        self.channels = channels
        self.plain_size = plain_size
        self.hi = _Branch(rng, channels, blocks, "hi")
        self.lo = _Branch(rng, channels, blocks, "lo") if multires else None
        feat = channels * (2 * 16 * 16 if multires else plain_size * plain_size)
        self.head_w = ad.parameter((1, feat), feat, rng)
        self.head_b = ad.parameter((1,), feat, rng)

    def logit(self, m_a, m_b):
        if self.multires:
            hi, lo = pair_features(m_a, m_b)
            feats = ad.concat(
                [
                    self.hi.forward(ad.Tensor(_standardize_halves(hi))),
                    self.lo.forward(ad.Tensor(_standardize_halves(lo))),
                ]
            )
        else:
            stacked = np.concatenate(
                [
                    pad_or_crop_center(m_a, self.plain_size),
                    pad_or_crop_center(m_b, self.plain_size),
                ],
                axis=0,
            )
            feats = self.hi.forward(ad.Tensor(_standardize_halves(stacked)))
        return ad.forward_dense(feats, self.head_w, self.head_b)

    def score(self, m_a, m_b):
        """Similarity in [0, 1]; mean of both orders, so exactly symmetric."""
        s1 = ad.sigmoid(self.logit(m_a, m_b)).item()
        s2 = ad.sigmoid(self.logit(m_b, m_a)).item()
        return 0.5 * (s1 + s2)

    def params(self):
        out = dict(self.hi.params())
        if self.lo is not None:
            out.update(self.lo.params())
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def state(self):
        return {k: v.data for k, v in self.params().items()}

    def load_state(self, state):
        for k, v in self.params().items():
            if state[k].shape != v.data.shape:
                raise DimensionError(f"checkpoint shape mismatch for {k}")
            v.data = np.array(state[k], dtype=np.float64)


def bce_with_logits(logit, y):
    """Numerically stable binary cross-entropy on a scalar logit, y in {0, 1}."""
    softplus = ad.add(ad.relu(logit), ad.log(ad.add(ad.exp(ad.mul(ad.absolute(logit), -1.0)), 1.0)))
    return ad.sub(softplus, ad.mul(logit, float(y)))


def _balanced_pairs(encryptions, rng, cap_per_class=512):
    by_target = {}
    for i, e in enumerate(encryptions):
        if e.oracle is None:
            raise DataError("pair labelling needs oracle blocks")
        by_target.setdefault(e.oracle.target.source_id, []).append(i)
    pos = [
        (a, b)
        for ids in by_target.values()
        for ai, a in enumerate(ids)
        for b in ids[ai + 1 :]
    ]
    if not pos:
        raise DataError("no positive pairs available")
    n = len(encryptions)
    tgt = [encryptions[i].oracle.target.source_id for i in range(n)]
    neg = []
    while len(neg) < min(len(pos), cap_per_class):
        a, b = int(rng.integers(0, n)), int(rng.integers(0, n))
        if a != b and tgt[a] != tgt[b]:
            neg.append((min(a, b), max(a, b)))
    if len(pos) > cap_per_class:
        keep = rng.choice(len(pos), size=cap_per_class, replace=False)
        pos = [pos[int(i)] for i in sorted(keep)]
    pairs = [(a, b, 1.0) for a, b in pos] + [(a, b, 0.0) for a, b in neg]
    order = rng.permutation(len(pairs))
    return [pairs[int(i)] for i in order]


def _train_pair_model(net, images, pairs, epochs, rng, learning_rate, batch_size=8):
    """Shared training loop for the comparative net and the filter net."""
    n_hold = max(2, len(pairs) // 5)
    hold, train = pairs[:n_hold], pairs[n_hold:]
    params = list(net.params().values())
    state = ad.AdamState.for_params(params, learning_rate=learning_rate)
    history = {"train_loss": [], "holdout_bce": [], "holdout_accuracy": []}

    def holdout_stats():
        total, hits = 0.0, 0
        for a, b, y in hold:
            s = net.score(images[a], images[b])
            s_c = min(max(s, 1e-12), 1.0 - 1e-12)
            total += -(y * np.log(s_c) + (1 - y) * np.log(1 - s_c))
            hits += int((s >= 0.5) == (y > 0.5))
        return total / len(hold), hits / len(hold)

    bce0, acc0 = holdout_stats()
    history["holdout_bce"].append(bce0)
    history["holdout_accuracy"].append(acc0)
    for _ in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), batch_size):
            ad.zero_grads(params)
            chunk = order[start : start + batch_size]
            for idx in chunk:
                a, b, y = train[int(idx)]
                if rng.integers(0, 2):  # random orientation; scoring is symmetric
                    a, b = b, a
                loss = ad.div(bce_with_logits(net.logit(images[a], images[b]), y), float(len(chunk)))
                losses.append(loss.item() * len(chunk))
                loss.backward()
            ad.adam_step(params, [p.grad for p in params], state)
        history["train_loss"].append(float(np.mean(losses)))
        bce, acc = holdout_stats()
        history["holdout_bce"].append(bce)
        history["holdout_accuracy"].append(acc)
    return history


def train_comparative(net, encryptions, epochs, rng, learning_rate=2e-3, cap_per_class=512, batch_size=8):
    """Train on balanced same-target / different-target pairs of abs images."""
    images = [abs_image(e.image) for e in encryptions]
    pairs = _balanced_pairs(encryptions, rng, cap_per_class)
    history = _train_pair_model(net, images, pairs, epochs, rng, learning_rate, batch_size)
    return net, history


@dataclass
class SimilarityGraph:
    n: int
    scores: np.ndarray

    def __post_init__(self):
        if self.scores.shape != (self.n, self.n):
            raise DimensionError("similarity matrix must be n x n")


@dataclass
class Cluster:
    member_ids: list
    seed_id: int
    filter_warning: bool = False


def oracle_scorer(encryptions):
    """1 if two encryptions share the target private image, else 0."""
    tgt = []
    for e in encryptions:
        if e.oracle is None:
            raise DataError("oracle scorer needs oracle blocks")
        tgt.append(e.oracle.target.source_id)

    def score(i, j):
        return 1.0 if tgt[i] == tgt[j] else 0.0

    return score


def net_scorer(net, images):
    images = [abs_image(m) for m in images]

    def score(i, j):
        return net.score(images[i], images[j])

    return score


def build_similarity_graph(encryptions, scorer):
    """Score every unordered pair once; diagonal is 1."""
    n = len(encryptions)
    scores = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            s = float(scorer(i, j))
            scores[i, j] = scores[j, i] = s
    return SimilarityGraph(n=n, scores=scores)


def extract_cliques(graph, num_clusters, expected_size):
    """Greedy dense-clique extraction.

    Seeds at the unassigned node of maximal weighted degree, then grows by
    best mean similarity to the current members while that mean stays above
    half the seed's row mean; the first neighbour always joins so clusters
    have at least two members.  All ties break toward the lowest id.
    """
    if num_clusters == 0:
        return []
    if num_clusters * 2 > graph.n:
        raise DimensionError(f"cannot carve {num_clusters} clusters out of {graph.n} nodes")
    unassigned = list(range(graph.n))
    clusters = []
    for _ in range(num_clusters):
        sub = graph.scores[np.ix_(unassigned, unassigned)]
        deg = sub.sum(axis=1) - 1.0  # drop the diagonal
        seed = unassigned[int(np.argmax(deg))]
        others = [u for u in unassigned if u != seed]
        row_mean = float(np.mean(graph.scores[seed, others])) if others else 0.0
        members = [seed]
        while len(members) < expected_size:
            cands = [u for u in unassigned if u not in members]
            if not cands:
                break
            means = graph.scores[np.ix_(cands, members)].mean(axis=1)
            best = int(np.argmax(means))
            if len(members) > 1 and means[best] < 0.5 * row_mean:
                break
            members.append(cands[best])
        clusters.append(Cluster(member_ids=members, seed_id=seed))
        unassigned = [u for u in unassigned if u not in members]
    return clusters


def assign_encryptions(graph, cliques):
    """Map each encryption to its two closest cliques by mean similarity."""
    if not cliques:
        raise DataError("assign_encryptions needs at least one clique")
    out = {}
    for e in range(graph.n):
        means = []
        for ci, cl in enumerate(cliques):
            others = [m for m in cl.member_ids if m != e]
            means.append(float(np.mean(graph.scores[e, others])) if others else -1.0)
        order = sorted(range(len(cliques)), key=lambda ci: (-means[ci], ci))
        primary = order[0]
        secondary = order[1] if len(order) > 1 else None
        out[e] = (primary, secondary)
    return out


class FilterModel:
    """Neighbour classifier over encryption pairs with an epsilon threshold."""

    def __init__(self, rng, t_epsilon=0.2, channels=16, blocks=2):
        self.t_epsilon = t_epsilon
        self.net = ComparativeNet(rng, channels=channels, blocks=blocks, multires=True)

    def is_neighbor(self, m_a, m_b):
        return self.net.score(m_a, m_b) >= 0.5

    def state(self):
        st = dict(self.net.state())
        st["t_epsilon"] = np.array([self.t_epsilon])
        return st

    def load_state(self, state):
        self.t_epsilon = float(state["t_epsilon"][0])
        self.net.load_state({k: v for k, v in state.items() if k != "t_epsilon"})


def pair_label(distance, t_epsilon):
    """+1 for neighbours (distance below the threshold), -1 otherwise."""
    return 1 if distance < t_epsilon else -1


def _filter_pairs(encryptions, t_epsilon, rng, cap_per_class):
    by_target = {}
    for i, e in enumerate(encryptions):
        if e.oracle is None:
            raise DataError("filter training needs oracle blocks")
        by_target.setdefault(e.oracle.target.source_id, []).append(i)
    h, w = encryptions[0].image.shape[1:]
    pos, neg = [], []
    for ids in by_target.values():
        for ai, a in enumerate(ids):
            for b in ids[ai + 1 :]:
                d = epsilon_distance(
                    encryptions[a].oracle.target.params, encryptions[b].oracle.target.params, w, h
                )
                (pos if pair_label(d, t_epsilon) == 1 else neg).append((a, b))
    if not pos or not neg:
        raise DataError("degenerate filter label distribution; adjust epsilon or t_epsilon")
    m = min(len(pos), len(neg), cap_per_class)
    pos = [pos[int(i)] for i in sorted(rng.choice(len(pos), size=m, replace=False))]
    neg = [neg[int(i)] for i in sorted(rng.choice(len(neg), size=m, replace=False))]
    pairs = [(a, b, 1.0) for a, b in pos] + [(a, b, 0.0) for a, b in neg]
    order = rng.permutation(len(pairs))
    return [pairs[int(i)] for i in order]


def train_filter(encryptions, t_epsilon, epochs, rng, learning_rate=2e-3, cap_per_class=256, channels=16, blocks=2):
    """Train the neighbour filter on within-cluster pairs labelled by the
    oracle epsilon distance between their target transforms."""
    model = FilterModel(rng, t_epsilon=t_epsilon, channels=channels, blocks=blocks)
    images = [abs_image(e.image) for e in encryptions]
    pairs = _filter_pairs(encryptions, t_epsilon, rng, cap_per_class)
    history = _train_pair_model(model.net, images, pairs, epochs, rng, learning_rate)
    return model, history


def oracle_filter(encryptions, t_epsilon):
    """Neighbour test from ground-truth transform distance."""
    for e in encryptions:
        if e.oracle is None:
            raise DataError("oracle filter needs oracle blocks")
    h, w = encryptions[0].image.shape[1:]

    def is_neighbor(i, j):
        d = epsilon_distance(
            encryptions[i].oracle.target.params, encryptions[j].oracle.target.params, w, h
        )
        return pair_label(d, t_epsilon) == 1

    return is_neighbor


def model_filter(model, images):
    images = [abs_image(m) for m in images]

    def is_neighbor(i, j):
        return model.is_neighbor(images[i], images[j])

    return is_neighbor


def filter_cluster(cluster, neighbor_fn):
    """Keep the member with the most neighbours, together with them.

    Returns (filtered cluster, warned); ``warned`` is set when every
    neighbour set was empty and only the seed survives.
    """
    ids = cluster.member_ids
    if len(ids) < 2:
        raise DataError("filter_cluster needs at least two members")
    neighbors = {m: [o for o in ids if o != m and neighbor_fn(m, o)] for m in ids}
    best = max(ids, key=lambda m: (len(neighbors[m]), -m))
    if not neighbors[best]:
        return Cluster(member_ids=[cluster.seed_id], seed_id=cluster.seed_id, filter_warning=True), True
    kept = [best] + neighbors[best]
    return Cluster(member_ids=kept, seed_id=best), False


def save_clusters(clusters, path):
    """One line per cluster: comma-separated encryption ids, seed first."""
    with open(path, "w") as fh:
        for cl in clusters:
            ordered = [cl.seed_id] + [m for m in cl.member_ids if m != cl.seed_id]
            fh.write(",".join(str(m) for m in ordered) + "\n")


def load_clusters(path):
    clusters = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            ids = [int(tok) for tok in line.split(",")]
            clusters.append(Cluster(member_ids=ids, seed_id=ids[0]))
    return clusters

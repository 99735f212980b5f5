"""Experiment orchestration: seeded data generation, stage runners, reports.

Every randomized stage draws its own generator from (seed, stage tag), so
re-running any stage of an identical config reproduces its artifacts
byte for byte and adding stages never perturbs earlier ones.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .baselines import CoefficientSource, averaging_attack, build_carlini_problem, carlini_attack
from .clustering import (
    Cluster,
    ComparativeNet,
    FilterModel,
    build_similarity_graph,
    extract_cliques,
    filter_cluster,
    load_clusters,
    model_filter,
    net_scorer,
    oracle_filter,
    oracle_scorer,
    save_clusters,
    train_comparative,
    train_filter,
)
from .errors import AmbiguityError, DataError, ParameterError
from .imaging import (
    AugmentedImage,
    DatasetRecord,
    abs_image,
    identity_params,
    load_dataset_bin,
    save_dataset_bin,
    save_image_ppm,
)
from .instahide import (
    Encryption,
    GenerationConfig,
    encrypt,
    generate_dataset,
    ground_truth_clusters,
    infer_lambda,
    shared_label_class,
)
from .metrics import mssim
from .restoration import FdnModel, fdn_forward, make_training_pairs, train_fdn


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainSettings:
    epochs: int = 8
    learning_rate: float = 2e-3
    channels: int = 16
    blocks: int = 2
    pair_cap: int = 512


@dataclass
class FilterSettings:
    epochs: int = 6
    learning_rate: float = 2e-3
    t_epsilon: float = 0.2
    channels: int = 16
    blocks: int = 2
    pair_cap: int = 256


@dataclass
class FdnSettings:
    epochs: int = 20
    learning_rate: float = 1e-3
    channels: int = 8
    denoiser_blocks: int = 4
    lambda_mssim: float = 0.7
    ablation: str = "full"  # full | no_reweight | no_relax | l1_only | l2_only
    fusion_rule: str = ""  # empty -> decided from the set size
    holdout_clusters: int = 4


@dataclass
class AttackSettings:
    oracle_clusters: bool = True
    use_filter: bool = False
    oracle_filter: bool = True
    coefficient_mode: str = "oracle"
    carlini_iterations: int = 300
    carlini_step: float = 0.05


@dataclass
class ExperimentConfig:
    seed: int = 7
    height: int = 32
    width: int = 32
    public_pool: int = 64
    generation: GenerationConfig = field(default_factory=lambda: GenerationConfig(cluster_size=10))
    comparative: TrainSettings = field(default_factory=TrainSettings)
    filter: FilterSettings = field(default_factory=FilterSettings)
    fdn: FdnSettings = field(default_factory=FdnSettings)
    attack: AttackSettings = field(default_factory=AttackSettings)
    workdir: str = "out"


def _set_fields(obj, section, parsers):
    for key, cast in parsers.items():
        if key in section:
            setattr(obj, key, cast(section[key]))


def _opt_int(s):
    return None if s.strip() == "" else int(s)


def _bool(s):
    return s.strip().lower() in ("1", "true", "yes", "on")


def load_config(path):
    """Parse the flat key=value config with section headers."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise DataError(f"config file not found: {path}")
    cfg = ExperimentConfig()
    if "experiment" in parser:
        _set_fields(cfg, parser["experiment"], {"seed": int})
    if "generation" in parser:
        sec = parser["generation"]
        _set_fields(cfg, sec, {"height": int, "width": int, "public_pool": int})
        gen = cfg.generation
        _set_fields(
            gen,
            sec,
            {
                "n_private": int,
                "copies_per_image": int,
                "mix_k": int,
                "epsilon": float,
                "num_classes": int,
                "cluster_size": _opt_int,
            },
        )
    if "comparative" in parser:
        _set_fields(
            cfg.comparative,
            parser["comparative"],
            {"epochs": int, "learning_rate": float, "channels": int, "blocks": int, "pair_cap": int},
        )
    if "filter" in parser:
        _set_fields(
            cfg.filter,
            parser["filter"],
            {
                "epochs": int,
                "learning_rate": float,
                "t_epsilon": float,
                "channels": int,
                "blocks": int,
                "pair_cap": int,
            },
        )
    if "fdn" in parser:
        _set_fields(
            cfg.fdn,
            parser["fdn"],
            {
                "epochs": int,
                "learning_rate": float,
                "channels": int,
                "denoiser_blocks": int,
                "lambda_mssim": float,
                "ablation": str,
                "fusion_rule": str,
                "holdout_clusters": int,
            },
        )
    if "attack" in parser:
        _set_fields(
            cfg.attack,
            parser["attack"],
            {
                "oracle_clusters": _bool,
                "use_filter": _bool,
                "oracle_filter": _bool,
                "coefficient_mode": str,
                "carlini_iterations": int,
                "carlini_step": float,
            },
        )
    if "paths" in parser:
        _set_fields(cfg, parser["paths"], {"workdir": str})
    return cfg


def save_config(cfg, path):
    parser = configparser.ConfigParser()
    parser["experiment"] = {"seed": str(cfg.seed)}
    gen = cfg.generation
    parser["generation"] = {
        "n_private": str(gen.n_private),
        "copies_per_image": str(gen.copies_per_image),
        "mix_k": str(gen.mix_k),
        "epsilon": str(gen.epsilon),
        "num_classes": str(gen.num_classes),
        "cluster_size": "" if gen.cluster_size is None else str(gen.cluster_size),
        "height": str(cfg.height),
        "width": str(cfg.width),
        "public_pool": str(cfg.public_pool),
    }
    parser["comparative"] = {
        "epochs": str(cfg.comparative.epochs),
        "learning_rate": str(cfg.comparative.learning_rate),
        "channels": str(cfg.comparative.channels),
        "blocks": str(cfg.comparative.blocks),
        "pair_cap": str(cfg.comparative.pair_cap),
    }
    parser["filter"] = {
        "epochs": str(cfg.filter.epochs),
        "learning_rate": str(cfg.filter.learning_rate),
        "t_epsilon": str(cfg.filter.t_epsilon),
        "channels": str(cfg.filter.channels),
        "blocks": str(cfg.filter.blocks),
        "pair_cap": str(cfg.filter.pair_cap),
    }
    parser["fdn"] = {
        "epochs": str(cfg.fdn.epochs),
        "learning_rate": str(cfg.fdn.learning_rate),
        "channels": str(cfg.fdn.channels),
        "denoiser_blocks": str(cfg.fdn.denoiser_blocks),
        "lambda_mssim": str(cfg.fdn.lambda_mssim),
        "ablation": cfg.fdn.ablation,
        "fusion_rule": cfg.fdn.fusion_rule,
        "holdout_clusters": str(cfg.fdn.holdout_clusters),
    }
    parser["attack"] = {
        "oracle_clusters": str(cfg.attack.oracle_clusters).lower(),
        "use_filter": str(cfg.attack.use_filter).lower(),
        "oracle_filter": str(cfg.attack.oracle_filter).lower(),
        "coefficient_mode": cfg.attack.coefficient_mode,
        "carlini_iterations": str(cfg.attack.carlini_iterations),
        "carlini_step": str(cfg.attack.carlini_step),
    }
    parser["paths"] = {"workdir": cfg.workdir}
    with open(path, "w") as fh:
        parser.write(fh)


def stage_rng(seed, stage):
    """Generator for one named stage, derived by hashing (seed, stage)."""
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


# ---------------------------------------------------------------------------
# synthetic desk-scale data


def _smooth_field(height, width, rng, waves=3):
    ys, xs = np.mgrid[0:height, 0:width]
    out = np.zeros((height, width))
    for _ in range(waves):
        fx, fy = rng.uniform(0.3, 2.0, size=2) * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.uniform(0.3, 1.0) * np.cos(fx * xs / width + fy * ys / height + phase)
    return out / waves


def make_synthetic_images(count, height, width, rng):
    """Random pictures: dark backgrounds, bright shapes and a distinctive
    oriented stripe texture per image (random orientations are mutually
    near-orthogonal, so images stay distinguishable inside mixtures)."""
    ys, xs = np.mgrid[0:height, 0:width]
    images = []
    for _ in range(count):
        level = rng.uniform(-0.85, -0.25)
        img = np.stack([level + 0.2 * _smooth_field(height, width, rng) for _ in range(3)])
        # low-frequency oriented waves survive small augmentation shifts,
        # keeping each target distinctive inside a mixture
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.75, 2.5) * 2 * np.pi
        phase = rng.uniform(0, 2 * np.pi)
        coord = (np.cos(theta) * xs / width + np.sin(theta) * ys / height)
        stripes = np.cos(freq * coord + phase)
        amp = rng.uniform(0.2, 0.45, size=3)
        img += amp[:, None, None] * stripes[None, :, :]
        for _ in range(int(rng.integers(1, 4))):
            cx, cy = rng.uniform(0.1, 0.9) * width, rng.uniform(0.1, 0.9) * height
            rx, ry = rng.uniform(0.08, 0.32) * width, rng.uniform(0.08, 0.32) * height
            color = rng.uniform(0.15, 0.95, size=3)
            if rng.integers(0, 2):
                mask = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
            else:
                mask = (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)
            for ch in range(3):
                img[ch][mask] = color[ch]
        img += 0.05 * np.stack([_smooth_field(height, width, rng, waves=2) for _ in range(3)])
        images.append(np.clip(img, -1.0, 1.0))
    return images


def generate_experiment_data(cfg, rng):
    """Private set, public pool and encryptions for one experiment."""
    gen = cfg.generation
    privates = make_synthetic_images(gen.n_private, cfg.height, cfg.width, rng)
    classes = [i % gen.num_classes for i in range(gen.n_private)]
    publics = make_synthetic_images(cfg.public_pool, cfg.height, cfg.width, rng)
    encryptions, labels = generate_dataset(privates, classes, gen, publics, rng)
    return {
        "privates": privates,
        "classes": classes,
        "publics": publics,
        "encryptions": encryptions,
        "labels": labels,
    }


def generate_zero_noise_data(n_private, cluster_size, height, width, rng):
    """Sanity dataset: nonnegative targets, no partner mass, no publics, no
    sign mask, no augmentation, so every member equals its target exactly."""
    base = make_synthetic_images(n_private, height, width, rng)
    privates = [(x + 1.0) / 2.0 for x in base]
    classes = list(range(n_private))
    encryptions = []
    for i, x in enumerate(privates):
        tgt = AugmentedImage(image=x, params=identity_params(), source_id=i, copy_index=0, class_id=i)
        j = (i + 1) % n_private
        prt = AugmentedImage(
            image=privates[j], params=identity_params(), source_id=j, copy_index=1, class_id=j
        )
        for _ in range(cluster_size):
            encryptions.append(
                encrypt(
                    tgt,
                    prt,
                    [],
                    rng,
                    lambdas=np.array([1.0, 0.0]),
                    sign_free=True,
                    num_classes=n_private,
                )
            )
    return {"privates": privates, "classes": classes, "publics": [], "encryptions": encryptions}


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReportRow:
    target_id: int
    method: str
    m_used: int
    epsilon: float
    k: int
    ssim: float


@dataclass
class AttackReport:
    rows: list = field(default_factory=list)

    def method_means(self):
        sums, counts = {}, {}
        for r in self.rows:
            sums[r.method] = sums.get(r.method, 0.0) + r.ssim
            counts[r.method] = counts.get(r.method, 0) + 1
        return {m: sums[m] / counts[m] for m in sums}


def write_report(report, path):
    """CSV with a fixed header and (target id, method) row order."""
    rows = sorted(report.rows, key=lambda r: (r.target_id, r.method))
    with open(path, "w") as fh:
        fh.write("target_id,method,m_used,epsilon,k,ssim\n")
        for r in rows:
            fh.write(f"{r.target_id},{r.method},{r.m_used},{r.epsilon:g},{r.k},{r.ssim:.6f}\n")


# ---------------------------------------------------------------------------
# cluster utilities


def clusters_from_oracle(encryptions):
    """Ground-truth clusters, ordered by target source id."""
    mapping = ground_truth_clusters(encryptions)
    return [
        Cluster(member_ids=sorted(ids), seed_id=sorted(ids)[0])
        for _, ids in sorted(mapping.items())
    ]


def resolve_cluster_lambda1(encryptions, cluster):
    """lambda1 per member via label inference, oracle fallback on ambiguity."""
    labels = [encryptions[m].label for m in cluster.member_ids]
    shared = shared_label_class(labels)
    out = []
    for m in cluster.member_ids:
        try:
            out.append(infer_lambda(encryptions[m].label, shared))
        except (AmbiguityError, DataError):
            orc = encryptions[m].oracle
            if orc is None:
                raise DataError(f"lambda1 of encryption {m} is ambiguous and no oracle is present")
            out.append(float(orc.lambdas[0]))
    return out


def cluster_target_id(encryptions, cluster):
    orc = encryptions[cluster.member_ids[0]].oracle
    if orc is None:
        raise DataError("target identification needs oracle blocks")
    return orc.target.source_id


# ---------------------------------------------------------------------------
# the seeded end-to-end experiment used by the attack stages and sweeps


def _make_fdn(cfg, rng):
    abl = cfg.fdn.ablation
    if abl not in ("full", "no_reweight", "no_relax", "l1_only", "l2_only"):
        raise ParameterError(f"unknown ablation '{abl}'")
    return FdnModel(
        rng,
        channels=cfg.fdn.channels,
        denoiser_blocks=cfg.fdn.denoiser_blocks,
        relax=abl != "no_relax",
        use_reweight=abl != "no_reweight",
    )


def _fdn_loss_kind(cfg):
    return {"l1_only": "l1", "l2_only": "l2"}.get(cfg.fdn.ablation, "combined")


def split_clusters(clusters, holdout):
    """Deterministic train/held-out split: the last ``holdout`` clusters."""
    if holdout <= 0 or holdout >= len(clusters):
        return clusters, clusters
    return clusters[:-holdout], clusters[-holdout:]


def train_fdn_on_clusters(cfg, encryptions, privates, clusters):
    pairs = make_training_pairs(clusters, encryptions, privates)
    model = _make_fdn(cfg, stage_rng(cfg.seed, "fdn-init"))
    model, curve = train_fdn(
        model,
        pairs,
        cfg.fdn.epochs,
        stage_rng(cfg.seed, "fdn-train"),
        learning_rate=cfg.fdn.learning_rate,
        lambda_mssim=cfg.fdn.lambda_mssim,
        loss_kind=_fdn_loss_kind(cfg),
    )
    return model, curve


def restore_with_fdn(cfg, model, encryptions, clusters):
    """Restored image + post-filter set size per cluster."""
    out = []
    for cl in clusters:
        lams = resolve_cluster_lambda1(encryptions, cl)
        abs_imgs = [abs_image(encryptions[m].image) for m in cl.member_ids]
        rule = cfg.fdn.fusion_rule or None
        restored = fdn_forward(model, abs_imgs, lams, rule)
        out.append((restored, len(cl.member_ids)))
    return out


def run_attack_experiment(cfg, methods=("FDN", "AVG", "CA")):
    """Generate data, train the restoration net on the training clusters and
    evaluate all requested methods on the held-out clusters.

    Returns (report, artifacts) where artifacts carries the data, model and
    per-cluster restorations for further inspection.
    """
    data = generate_experiment_data(cfg, stage_rng(cfg.seed, "gen-data"))
    encs, privates = data["encryptions"], data["privates"]
    clusters = clusters_from_oracle(encs)
    if cfg.attack.use_filter:
        neighbor = oracle_filter(encs, cfg.filter.t_epsilon)
        clusters = [filter_cluster(cl, neighbor)[0] for cl in clusters]
    train_cl, hold_cl = split_clusters(clusters, cfg.fdn.holdout_clusters)
    model, curve = train_fdn_on_clusters(cfg, encs, privates, train_cl)
    k = cfg.generation.mix_k
    eps = cfg.generation.epsilon
    report = AttackReport()
    restorations = {}
    if "FDN" in methods:
        for cl, (img, m_used) in zip(hold_cl, restore_with_fdn(cfg, model, encs, hold_cl)):
            tid = cluster_target_id(encs, cl)
            score = mssim(img, privates[tid])
            report.rows.append(ReportRow(tid, "FDN", m_used, eps, k, score))
            restorations[("FDN", tid)] = img
    if "AVG" in methods:
        for cl in hold_cl:
            tid = cluster_target_id(encs, cl)
            lams = resolve_cluster_lambda1(encs, cl)
            img = averaging_attack([abs_image(encs[m].image) for m in cl.member_ids], lams)
            report.rows.append(ReportRow(tid, "AVG", len(cl.member_ids), eps, k, mssim(img, privates[tid])))
            restorations[("AVG", tid)] = img
    if "CA" in methods or "CA-CN" in methods:
        name = "CA" if "CA" in methods else "CA-CN"
        problem = build_carlini_problem(
            encs, hold_cl, CoefficientSource(mode=cfg.attack.coefficient_mode)
        )
        images, objective = carlini_attack(
            problem, cfg.attack.carlini_iterations, cfg.attack.carlini_step
        )
        for ci, cl in enumerate(hold_cl):
            tid = cluster_target_id(encs, cl)
            report.rows.append(
                ReportRow(tid, name, len(cl.member_ids), eps, k, mssim(images[ci], privates[tid]))
            )
            restorations[(name, tid)] = images[ci]
    else:
        objective = None
    artifacts = {
        "data": data,
        "clusters": clusters,
        "train_clusters": train_cl,
        "holdout_clusters": hold_cl,
        "model": model,
        "loss_curve": curve,
        "restorations": restorations,
        "carlini_objective": objective,
    }
    return report, artifacts


def run_generalization_experiment(cfg, methods=("FDN",), eval_stage="eval-data"):
    """Train on every cluster of the training dataset, then evaluate on a
    freshly generated dataset (disjoint private images, same parameters).

    This mirrors the published ablation protocol, where the model is fitted
    on one private split and scored on another.
    """
    train_data = generate_experiment_data(cfg, stage_rng(cfg.seed, "gen-data"))
    model, curve = train_fdn_on_clusters(
        cfg, train_data["encryptions"], train_data["privates"], clusters_from_oracle(train_data["encryptions"])
    )
    eval_data = generate_experiment_data(cfg, stage_rng(cfg.seed, eval_stage))
    encs, privates = eval_data["encryptions"], eval_data["privates"]
    clusters = clusters_from_oracle(encs)
    if cfg.attack.use_filter:
        neighbor = oracle_filter(encs, cfg.filter.t_epsilon)
        clusters = [filter_cluster(cl, neighbor)[0] for cl in clusters]
    k, eps = cfg.generation.mix_k, cfg.generation.epsilon
    report = AttackReport()
    for cl, (img, m_used) in zip(clusters, restore_with_fdn(cfg, model, encs, clusters)):
        tid = cluster_target_id(encs, cl)
        report.rows.append(ReportRow(tid, "FDN", m_used, eps, k, mssim(img, privates[tid])))
        if "AVG" in methods:
            lams = resolve_cluster_lambda1(encs, cl)
            avg = averaging_attack([abs_image(encs[i].image) for i in cl.member_ids], lams)
            report.rows.append(ReportRow(tid, "AVG", m_used, eps, k, mssim(avg, privates[tid])))
    artifacts = {"model": model, "loss_curve": curve, "eval_data": eval_data, "clusters": clusters}
    return report, artifacts


def _evaluate_cell(args):
    """Restore one (|M|, epsilon) evaluation dataset with a trained model."""
    cfg, state, m, eps, methods = args
    cell_cfg = replace(cfg, generation=replace(cfg.generation, cluster_size=m, epsilon=eps))
    model = _make_fdn(cell_cfg, stage_rng(cfg.seed, "fdn-init"))
    model.load_state(state)
    data = generate_experiment_data(cell_cfg, stage_rng(cfg.seed, f"sweep-eval-m{m}-eps{eps:g}"))
    encs, privates = data["encryptions"], data["privates"]
    clusters = clusters_from_oracle(encs)
    if cell_cfg.attack.use_filter:
        neighbor = oracle_filter(encs, cell_cfg.filter.t_epsilon)
        clusters = [filter_cluster(cl, neighbor)[0] for cl in clusters]
    rows = []
    k = cell_cfg.generation.mix_k
    for cl, (img, m_used) in zip(clusters, restore_with_fdn(cell_cfg, model, encs, clusters)):
        tid = cluster_target_id(encs, cl)
        rows.append(ReportRow(tid, "FDN", m_used, eps, k, mssim(img, privates[tid])))
        if "AVG" in methods:
            lams = resolve_cluster_lambda1(encs, cl)
            avg = averaging_attack([abs_image(encs[i].image) for i in cl.member_ids], lams)
            rows.append(ReportRow(tid, "AVG", m_used, eps, k, mssim(avg, privates[tid])))
    return rows


def run_sweep(cfg, m_values, eps_values, methods=("FDN",)):
    """Train once at the config's (|M|, epsilon), then evaluate the model on
    a fresh filtered dataset per (|M|, epsilon) cell; cells may run in
    parallel processes, capped by MIXCRYPT_THREADS."""
    train_data = generate_experiment_data(cfg, stage_rng(cfg.seed, "sweep-train-data"))
    encs, privates = train_data["encryptions"], train_data["privates"]
    model, _ = train_fdn_on_clusters(cfg, encs, privates, clusters_from_oracle(encs))
    state = model.state()
    cells = [(cfg, state, m, eps, methods) for m in m_values for eps in eps_values]
    workers = int(os.environ.get("MIXCRYPT_THREADS", "1"))
    report = AttackReport()
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(_evaluate_cell, cells):
                report.rows.extend(rows)
    else:
        for cell in cells:
            report.rows.extend(_evaluate_cell(cell))
    return report


# ---------------------------------------------------------------------------
# file-based stage runners (the CLI surface)


def _work(cfg):
    w = Path(cfg.workdir)
    w.mkdir(parents=True, exist_ok=True)
    return w


def _dataset_paths(cfg):
    w = Path(cfg.workdir)
    return {
        "private": w / "private.mxd",
        "publics": w / "publics.mxd",
        "dataset": w / "dataset.mxd",
        "comparative": w / "comparative.mxw",
        "filter": w / "filter.mxw",
        "fdn": w / "fdn.mxw",
        "clusters": w / "clusters.txt",
        "filtered": w / "clusters_filtered.txt",
        "restored": w / "restored.mxd",
        "report": w / "report.csv",
    }


def _require(path, stage):
    if not Path(path).exists():
        raise DataError(f"missing {path}; run the '{stage}' stage first")
    return path


def _one_hot(i, n):
    v = np.zeros(n)
    v[i] = 1.0
    return v


def run_gen_data(cfg, strip_oracle=False):
    """Generate and persist the private set, public pool and encryptions."""
    w = _work(cfg)
    paths = _dataset_paths(cfg)
    data = generate_experiment_data(cfg, stage_rng(cfg.seed, "gen-data"))
    n = cfg.generation.n_private
    save_dataset_bin(
        [
            DatasetRecord(image=x, label=_one_hot(c, cfg.generation.num_classes))
            for x, c in zip(data["privates"], data["classes"])
        ],
        paths["private"],
    )
    save_dataset_bin(
        [DatasetRecord(image=u, label=np.zeros(0)) for u in data["publics"]], paths["publics"]
    )
    save_dataset_bin(
        [
            DatasetRecord(image=e.image, label=e.label, oracle=None if strip_oracle else e.oracle)
            for e in data["encryptions"]
        ],
        paths["dataset"],
    )
    digest = hashlib.sha256(paths["dataset"].read_bytes()).hexdigest()
    return {"paths": paths, "count": len(data["encryptions"]), "digest": digest}


def _load_encryptions(cfg):
    paths = _dataset_paths(cfg)
    _require(paths["dataset"], "gen-data")
    records = load_dataset_bin(paths["dataset"])
    return [Encryption(image=r.image, label=r.label, oracle=r.oracle) for r in records]


def _load_privates(cfg):
    paths = _dataset_paths(cfg)
    _require(paths["private"], "gen-data")
    return [r.image for r in load_dataset_bin(paths["private"])]


def run_train_comparative(cfg, multires=True):
    encs = _load_encryptions(cfg)
    net = ComparativeNet(
        stage_rng(cfg.seed, "comparative-init"),
        channels=cfg.comparative.channels,
        blocks=cfg.comparative.blocks,
        multires=multires,
    )
    net, history = train_comparative(
        net,
        encs,
        cfg.comparative.epochs,
        stage_rng(cfg.seed, "comparative-train"),
        learning_rate=cfg.comparative.learning_rate,
        cap_per_class=cfg.comparative.pair_cap,
    )
    paths = _dataset_paths(cfg)
    ad.save_checkpoint(paths["comparative"], net.state())
    return {"paths": paths, "history": history, "net": net}


def run_cluster(cfg, scorer_kind="net"):
    encs = _load_encryptions(cfg)
    paths = _dataset_paths(cfg)
    if scorer_kind == "oracle":
        scorer = oracle_scorer(encs)
    else:
        multires = scorer_kind != "plain"
        net = ComparativeNet(
            stage_rng(cfg.seed, "comparative-init"),
            channels=cfg.comparative.channels,
            blocks=cfg.comparative.blocks,
            multires=multires,
        )
        net.load_state(ad.load_checkpoint(_require(paths["comparative"], "train-comparative")))
        scorer = net_scorer(net, [e.image for e in encs])
    graph = build_similarity_graph(encs, scorer)
    expected = cfg.generation.cluster_size or cfg.generation.copies_per_image
    clusters = extract_cliques(graph, cfg.generation.n_private, expected)
    save_clusters(clusters, paths["clusters"])
    return {"paths": paths, "clusters": clusters, "graph": graph}


def run_train_filter(cfg):
    encs = _load_encryptions(cfg)
    model, history = train_filter(
        encs,
        cfg.filter.t_epsilon,
        cfg.filter.epochs,
        stage_rng(cfg.seed, "filter-train"),
        learning_rate=cfg.filter.learning_rate,
        cap_per_class=cfg.filter.pair_cap,
        channels=cfg.filter.channels,
        blocks=cfg.filter.blocks,
    )
    paths = _dataset_paths(cfg)
    ad.save_checkpoint(paths["filter"], model.state())
    return {"paths": paths, "history": history, "model": model}


def run_filter(cfg, use_oracle=None):
    encs = _load_encryptions(cfg)
    paths = _dataset_paths(cfg)
    clusters = load_clusters(_require(paths["clusters"], "cluster"))
    if use_oracle is None:
        use_oracle = cfg.attack.oracle_filter
    if use_oracle:
        neighbor = oracle_filter(encs, cfg.filter.t_epsilon)
    else:
        model = FilterModel(
            stage_rng(cfg.seed, "filter-init"),
            t_epsilon=cfg.filter.t_epsilon,
            channels=cfg.filter.channels,
            blocks=cfg.filter.blocks,
        )
        model.load_state(ad.load_checkpoint(_require(paths["filter"], "train-filter")))
        neighbor = model_filter(model, [e.image for e in encs])
    filtered, warnings = [], 0
    for cl in clusters:
        kept, warned = filter_cluster(cl, neighbor)
        warnings += int(warned)
        filtered.append(kept)
    save_clusters(filtered, paths["filtered"])
    return {"paths": paths, "clusters": filtered, "warnings": warnings}


def _stage_clusters(cfg, encs, prefer_filtered=True):
    paths = _dataset_paths(cfg)
    if cfg.attack.oracle_clusters:
        return clusters_from_oracle(encs)
    if prefer_filtered and cfg.attack.use_filter:
        return load_clusters(_require(paths["filtered"], "filter"))
    return load_clusters(_require(paths["clusters"], "cluster"))


def run_train_fdn(cfg):
    encs = _load_encryptions(cfg)
    privates = _load_privates(cfg)
    clusters = _stage_clusters(cfg, encs)
    train_cl, _ = split_clusters(clusters, cfg.fdn.holdout_clusters)
    model, curve = train_fdn_on_clusters(cfg, encs, privates, train_cl)
    paths = _dataset_paths(cfg)
    ad.save_checkpoint(paths["fdn"], model.state())
    return {"paths": paths, "loss_curve": curve, "model": model}


def run_attack(cfg):
    """Restore the held-out clusters with the trained model and score them."""
    encs = _load_encryptions(cfg)
    privates = _load_privates(cfg)
    paths = _dataset_paths(cfg)
    clusters = _stage_clusters(cfg, encs)
    _, hold_cl = split_clusters(clusters, cfg.fdn.holdout_clusters)
    model = _make_fdn(cfg, stage_rng(cfg.seed, "fdn-init"))
    model.load_state(ad.load_checkpoint(_require(paths["fdn"], "train-fdn")))
    report = AttackReport()
    restored_records = []
    out_dir = Path(cfg.workdir) / "restored"
    out_dir.mkdir(parents=True, exist_ok=True)
    k, eps = cfg.generation.mix_k, cfg.generation.epsilon
    for cl, (img, m_used) in zip(hold_cl, restore_with_fdn(cfg, model, encs, hold_cl)):
        tid = cluster_target_id(encs, cl)
        report.rows.append(ReportRow(tid, "FDN", m_used, eps, k, mssim(img, privates[tid])))
        restored_records.append(
            DatasetRecord(image=img, label=_one_hot(tid, cfg.generation.n_private))
        )
        save_image_ppm(img, out_dir / f"target_{tid:03d}_FDN.ppm")
    save_dataset_bin(restored_records, paths["restored"])
    write_report(report, paths["report"])
    return {"paths": paths, "report": report}


def run_baseline(cfg, methods=("AVG", "CA")):
    encs = _load_encryptions(cfg)
    privates = _load_privates(cfg)
    paths = _dataset_paths(cfg)
    clusters = _stage_clusters(cfg, encs)
    _, hold_cl = split_clusters(clusters, cfg.fdn.holdout_clusters)
    report = AttackReport()
    out_dir = Path(cfg.workdir) / "restored"
    out_dir.mkdir(parents=True, exist_ok=True)
    k, eps = cfg.generation.mix_k, cfg.generation.epsilon
    if "AVG" in methods:
        for cl in hold_cl:
            tid = cluster_target_id(encs, cl)
            lams = resolve_cluster_lambda1(encs, cl)
            img = averaging_attack([abs_image(encs[m].image) for m in cl.member_ids], lams)
            report.rows.append(
                ReportRow(tid, "AVG", len(cl.member_ids), eps, k, mssim(img, privates[tid]))
            )
            save_image_ppm(img, out_dir / f"target_{tid:03d}_AVG.ppm")
    ca_methods = [m for m in methods if m in ("CA", "CA-CN")]
    if ca_methods:
        problem = build_carlini_problem(
            encs, hold_cl, CoefficientSource(mode=cfg.attack.coefficient_mode)
        )
        images, _ = carlini_attack(problem, cfg.attack.carlini_iterations, cfg.attack.carlini_step)
        for ci, cl in enumerate(hold_cl):
            tid = cluster_target_id(encs, cl)
            report.rows.append(
                ReportRow(
                    tid, ca_methods[0], len(cl.member_ids), eps, k, mssim(images[ci], privates[tid])
                )
            )
            save_image_ppm(images[ci], out_dir / f"target_{tid:03d}_{ca_methods[0]}.ppm")
    out = Path(cfg.workdir) / "baseline_report.csv"
    write_report(report, out)
    return {"report": report, "path": out}


def run_eval(cfg, restored_path=None, method="FDN"):
    """Score a restored dataset against the oracle targets."""
    privates = _load_privates(cfg)
    paths = _dataset_paths(cfg)
    restored_path = restored_path or _require(paths["restored"], "attack")
    records = load_dataset_bin(restored_path)
    report = AttackReport()
    k, eps = cfg.generation.mix_k, cfg.generation.epsilon
    for rec in records:
        tid = int(np.argmax(rec.label))
        report.rows.append(
            ReportRow(tid, method, 0, eps, k, mssim(rec.image, privates[tid]))
        )
    out = Path(cfg.workdir) / "eval_report.csv"
    write_report(report, out)
    return {"report": report, "path": out}

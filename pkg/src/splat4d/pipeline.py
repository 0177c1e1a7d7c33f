"""End-to-end orchestration: dataset -> perception -> reconstruction -> report.

Stage 1 decides which tracked instances move and emits label/mask artifacts;
stage 2 trains the full 4D field against those artifacts only (it never sees
the oracle instance maps or the ground-truth dynamic set). Everything is
driven by a flat key = value RunConfig so that two runs with the same config
and seed produce byte-identical outputs.
"""

import copy
import json
from dataclasses import asdict, dataclass, fields as dc_fields, replace
from pathlib import Path

import numpy as np

from .losses import (IdClassifier, knn_exact, loss_3d_identity,
                     loss_consistency, loss_depth, loss_dyn_reg, loss_id,
                     loss_image, loss_opacity_sky, partition_gaussians, ssim)
from .optimizer import (DENSIFY_INTERVAL, ClassifierOptimizer, FieldOptimizer,
                        Schedule)
from .perception import (Stage1Artifacts, accumulate_and_select,
                         build_static_overfiltered, compute_scores,
                         derive_labels_and_masks, write_stage1_artifacts)
from .rasterizer import render, render_backward
from .scene import Camera, GaussianField, load_field, save_field
from .synth import corrupt_tracks, read_dataset

PSNR_CAP = 99.0
DYN_SEED_BETA_SCALE = 0.3     # seed lifespan as a fraction of the cycle length

_ABLATIONS = ("", "id", "threed", "consist")


# -- configuration --------------------------------------------------------------

@dataclass
class RunConfig:
    """Every knob of a full run, parseable from flat key = value text."""

    dataset: str = ""
    out: str = ""
    seed: int = 0
    holdout_every: int = 4        # every n-th frame held out; < 2 disables
    cycle_length: float = 0.4

    # stage 1: dynamic perception
    delta: float = 1e-3           # threshold on the cubed instance score
    warp_horizon: int = 2
    s_over_iters: int = 1000
    candidate_iters: int = 400
    s_over_budget: int = 4000
    s_over_cap: int = 6000        # densification ceiling for the static stage
    id_switch_prob: float = 0.0   # tracker corruption (0 = clean tracks)
    drop_prob: float = 0.0
    mask_dilate_px: int = 0
    noise_seed: int = 0

    # stage 2: full reconstruction
    stage2_iters: int = 8000
    eps_exist: float = 5e-4
    knn_k: int = 5
    lam_ssim: float = 0.2
    lam_image: float = 1.0
    lam_depth: float = 1.0
    lam_o: float = 0.05
    lam_vbar: float = 0.01
    lam_beta: float = 0.001
    lam_id: float = 0.1
    lam_3d: float = 1.5
    lam_consist: float = 0.01
    lam_mag: float = 0.4
    lam_dir: float = 0.2
    frac_id: float = 0.10
    frac_vel: float = 0.20
    frac_3d: float = 0.60
    frac_consist: float = 0.70
    checkpoint_interval: int = 2000
    max_gaussians: int = 50000
    ablate: str = ""              # one of: "", id, threed, consist

    # decomposition / selection thresholds
    rho_static_floor: float = 50.0
    rho_dyn_ceiling: float = 0.5
    vbar_floor: float = 0.0

    def __post_init__(self):
        if self.ablate not in _ABLATIONS:
            raise ValueError(f"ablate must be one of {_ABLATIONS}, "
                             f"got {self.ablate!r}")
        if self.stage2_iters < 1:
            raise ValueError("stage2_iters must be positive")
        if self.holdout_every < 0:
            raise ValueError("holdout_every must be nonnegative")

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in dc_fields(cls)}
        kwargs = {}
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"config line {ln}: expected 'key = value'")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise ValueError(f"config line {ln}: unknown key {key!r}")
            if key in kwargs:
                raise ValueError(f"config line {ln}: duplicate key {key!r}")
            kwargs[key] = _coerce(val, types[key], key)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text())

    def to_text(self):
        lines = [f"{f.name} = {getattr(self, f.name)!r}"
                 if isinstance(getattr(self, f.name), str)
                 else f"{f.name} = {getattr(self, f.name)}"
                 for f in dc_fields(self)]
        return "\n".join(lines) + "\n"

    def to_file(self, path):
        Path(path).write_text(self.to_text())


def _coerce(val, typ, key):
    # dataclass field types may be classes or (under deferred annotations)
    # their names; accept both
    name = typ if isinstance(typ, str) else typ.__name__
    try:
        if name == "int":
            return int(val)
        if name == "float":
            return float(val)
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {val!r} as {name}")
    if val and val[0] in "'\"" and val[-1] == val[0] and len(val) >= 2:
        return val[1:-1]
    return val


def split_frames(n_frames, holdout_every):
    """(train, test) frame indices; every holdout_every-th frame is test."""
    if holdout_every < 2:
        return list(range(n_frames)), []
    test = [i for i in range(n_frames) if i % holdout_every == holdout_every - 1]
    train = [i for i in range(n_frames) if i % holdout_every != holdout_every - 1]
    return train, test


# -- stage 1 ---------------------------------------------------------------------

def run_stage1(cfg: RunConfig, dataset=None, log=None) -> Stage1Artifacts:
    """Dynamic perception over the training frames; writes <out>/stage1.

    Tracker corruption (id switches, drops, dilation) is applied first when
    configured, so downstream stages only ever see the corrupted tracks.
    """
    if dataset is None:
        dataset = read_dataset(cfg.dataset)
    if cfg.id_switch_prob > 0 or cfg.drop_prob > 0 or cfg.mask_dilate_px > 0:
        tracks, _ = corrupt_tracks(dataset.tracks,
                                   id_switch_prob=cfg.id_switch_prob,
                                   drop_prob=cfg.drop_prob,
                                   mask_dilate_px=cfg.mask_dilate_px,
                                   seed=cfg.noise_seed)
        dataset = replace(dataset, tracks=tracks)

    train, _ = split_frames(dataset.n_frames, cfg.holdout_every)
    s_over = build_static_overfiltered(dataset, iters=cfg.s_over_iters,
                                       frames=train,
                                       init_budget=cfg.s_over_budget,
                                       max_gaussians=cfg.s_over_cap, log=log)
    table, seed_map = compute_scores(dataset, s_over, frames=train,
                                     k=cfg.warp_horizon,
                                     candidate_iters=cfg.candidate_iters,
                                     log=log)
    dynamic_ids = accumulate_and_select(table, delta=cfg.delta)
    shape = dataset.frames[0].rgb.shape[:2]
    labels, masks, remap = derive_labels_and_masks(dataset.tracks, dynamic_ids,
                                                   shape)

    seeds = _seed_field(seed_map, dynamic_ids, len(dynamic_ids))
    art = Stage1Artifacts(s_over=s_over, dynamic_ids=dynamic_ids, remap=remap,
                          labels=labels, masks=masks, table=table, seeds=seeds)
    if cfg.out:
        write_stage1_artifacts(art, Path(cfg.out) / "stage1")
    return art


def _seed_field(seed_map, dynamic_ids, num_classes):
    """Combine per-instance candidate seeds into one stage-2 init field.

    Dynamic instances get localized in time: tau at the frame the seed was
    lifted from and a short lifespan, so each seed explains its instance
    around that moment and training stretches it along the trajectory.
    Static tracked instances keep their flat (large-beta) envelope.
    """
    dyn = set(dynamic_ids)
    parts = []
    for oid in sorted(seed_map):
        t_seed, sub = seed_map[oid]
        sub = sub.copy()
        if oid in dyn:
            sub.tau[:] = t_seed
            sub.log_beta[:] = np.log(DYN_SEED_BETA_SCALE * sub.cycle_length)
        parts.append(sub)
    if not parts:
        return None
    out = GaussianField.concatenate(parts)
    out.num_classes = num_classes
    return out


# -- stage 2 ---------------------------------------------------------------------

@dataclass
class TrainFrame:
    """The observation fields stage 2 is allowed to see (no oracle data)."""

    rgb: np.ndarray
    depth: np.ndarray
    sky: np.ndarray
    camera: Camera


def training_frames(dataset):
    """Strip oracle fields from a dataset for the stage-2 interface."""
    return [TrainFrame(rgb=o.rgb, depth=o.depth, sky=o.sky, camera=o.camera)
            for o in dataset.frames]


@dataclass
class Stage2Result:
    field: GaussianField
    classifier: IdClassifier          # None when no dynamic instances
    loss_log: list                    # per-iteration rows, see _LOG_COLUMNS
    pre_consist: tuple                # (field, classifier) snapshot or None
    skipped: int                      # non-finite gradient elements skipped


_LOG_COLUMNS = ("it", "frame", "total", "image", "depth", "opacity", "id",
                "vmag", "beta", "threed", "consist", "n_gaussians")


def run_stage2(cfg: RunConfig, artifacts: Stage1Artifacts, frames,
               log=None) -> Stage2Result:
    """Train the full 4D field from stage-1 artifacts; writes <out>/stage2.

    ``frames`` is the full list of TrainFrame observations, indexed like the
    stage-1 label maps; only the training split is ever rendered against.
    """
    total = cfg.stage2_iters
    train, _ = split_frames(len(frames), cfg.holdout_every)
    if not train:
        raise ValueError("empty training split")
    n_classes = len(artifacts.dynamic_ids)

    parts = [artifacts.s_over.copy()]
    if artifacts.seeds is not None and len(artifacts.seeds):
        parts.append(artifacts.seeds.copy())
    field = GaussianField.concatenate(parts) if len(parts) > 1 else parts[0]
    field.num_classes = n_classes

    classifier = IdClassifier(n_classes, seed=cfg.seed) if n_classes else None
    opt = FieldOptimizer(field, total_iters=total)
    copt = ClassifierOptimizer(classifier) if classifier else None
    sched = Schedule(total=total, frac_id=cfg.frac_id, frac_vel=cfg.frac_vel,
                     frac_3d=cfg.frac_3d, frac_consist=cfg.frac_consist)

    out_dir = None
    if cfg.out:
        out_dir = Path(cfg.out) / "stage2"
        out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    pre_consist = None
    for it in range(total):
        if pre_consist is None and it / total >= cfg.frac_consist:
            pre_consist = (opt.field.copy(), copy.deepcopy(classifier))
            if out_dir:
                save_field(out_dir / "ckpt_consist_pre.dgs4", pre_consist[0])
                if classifier is not None:
                    pre_consist[1].save(out_dir / "ckpt_consist_pre.mlp")

        f = train[it % len(train)]
        obs = frames[f]
        fld = opt.field
        t_now = obs.camera.t
        active = sched.active(it)
        out, cache = render(fld, obs.camera, with_cache=True)

        l_img, d_color = loss_image(obs.rgb, out.color, lam_ssim=cfg.lam_ssim)
        l_dep, d_depth = loss_depth(out.depth, obs.depth, obs.depth > 0)
        l_opa, d_opac = loss_opacity_sky(out.opacity, obs.sky)

        l_id = l_vm = l_bt = l_3d = l_co = 0.0
        d_emb = d_vmag = d_bmap = None
        w_grads = None
        use_id = "id" in active and classifier is not None and cfg.ablate != "id"
        if use_id:
            l_id, d_emb, w_grads = loss_id(classifier, out.embedding,
                                           artifacts.labels[f])
        if "vel" in active:
            l_vm, l_bt, d_vmag, d_bmap = loss_dyn_reg(out.vmag, out.beta,
                                                      artifacts.masks[f])

        grads = render_backward(
            cache,
            d_color=cfg.lam_image * d_color,
            d_depth=cfg.lam_depth * d_depth,
            d_opacity=cfg.lam_o * d_opac,
            d_embedding=None if d_emb is None else cfg.lam_id * d_emb,
            d_vmag=None if d_vmag is None else cfg.lam_vbar * d_vmag,
            d_beta=None if d_bmap is None else cfg.lam_beta * d_bmap)

        part = None
        need_part = classifier is not None and (
            ("threed" in active and cfg.ablate != "threed")
            or ("consist" in active and cfg.ablate != "consist"))
        if need_part:
            part = partition_gaussians(fld, t_now, classifier,
                                       eps=cfg.eps_exist)
            pos = fld.positions_at(t_now)
        if (part is not None and "threed" in active and cfg.ablate != "threed"
                and part.dynamic.size and part.static.size):
            nbr = knn_exact(pos[part.dynamic], pos[part.static], cfg.knn_k)
            l_3d, d_e = loss_3d_identity(fld, t_now, classifier, k=cfg.knn_k,
                                         eps=cfg.eps_exist, partition=part,
                                         neighbors=nbr)
            grads["e"] = grads["e"] + cfg.lam_3d * d_e
        if part is not None and "consist" in active and cfg.ablate != "consist":
            nbrs = {k: knn_exact(pos[gi], pos[gi], cfg.knn_k,
                                 exclude=np.arange(gi.size))
                    for k, gi in part.instances.items() if gi.size >= 2}
            l_co, d_v, d_b = loss_consistency(fld, t_now, part, k=cfg.knn_k,
                                              lam_mag=cfg.lam_mag,
                                              lam_dir=cfg.lam_dir,
                                              neighbors=nbrs)
            grads["v"] = grads["v"] + cfg.lam_consist * d_v
            grads["beta"] = grads["beta"] + cfg.lam_consist * d_b

        opt.record_densify_stats(grads, obs.camera)
        opt.step(grads)
        if use_id:
            copt.step({k: cfg.lam_id * g for k, g in w_grads.items()})

        # densify and prune only inside the window: afterwards the primitive
        # count and ordering are frozen, which also freezes checkpoint layout
        if it > 0 and it % DENSIFY_INTERVAL == 0 and sched.densify_window(it):
            opt.densify_and_prune(hard_cap=cfg.max_gaussians)

        total_val = (cfg.lam_image * l_img + cfg.lam_depth * l_dep
                     + cfg.lam_o * l_opa + cfg.lam_id * l_id
                     + cfg.lam_vbar * l_vm + cfg.lam_beta * l_bt
                     + cfg.lam_3d * l_3d + cfg.lam_consist * l_co)
        rows.append((it, f, total_val, l_img, l_dep, l_opa, l_id, l_vm, l_bt,
                     l_3d, l_co, len(opt.field)))

        if (out_dir and cfg.checkpoint_interval > 0
                and (it + 1) % cfg.checkpoint_interval == 0
                and (it + 1) < total):
            _save_checkpoint(out_dir, f"ckpt_{it + 1:06d}", opt, classifier)
        if log and it % 500 == 0:
            log(f"stage2 it {it}: loss {total_val:.4f}, n {len(opt.field)}")

    if out_dir:
        _save_checkpoint(out_dir, "final", opt, classifier)
        header = "\t".join(_LOG_COLUMNS)
        body = "\n".join(
            "\t".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                      for v in row)
            for row in rows)
        (out_dir / "loss_log.tsv").write_text(header + "\n" + body + "\n")

    return Stage2Result(field=opt.field, classifier=classifier, loss_log=rows,
                        pre_consist=pre_consist, skipped=opt.skipped)


def _save_checkpoint(out_dir, stem, opt, classifier):
    save_field(out_dir / f"{stem}.dgs4", opt.field)
    if classifier is not None:
        classifier.save(out_dir / f"{stem}.mlp")
    opt.save_state(out_dir / f"{stem}.npz")


def load_checkpoint(out_dir, stem="final"):
    """(field, classifier or None) from a stage-2 checkpoint stem."""
    out_dir = Path(out_dir)
    field = load_field(out_dir / f"{stem}.dgs4")
    clf_path = out_dir / f"{stem}.mlp"
    classifier = IdClassifier.load(clf_path) if clf_path.exists() else None
    return field, classifier


# -- decomposition ---------------------------------------------------------------

@dataclass
class Decomposition:
    static_idx: np.ndarray
    instance_idx: dict            # class k (1..C) -> index array

    def static_field(self, field):
        return field.subset(self.static_idx)

    def instance_field(self, field, k):
        return field.subset(self.instance_idx[k])


def decompose(field, classifier, t, rho_static_floor=50.0,
              rho_dyn_ceiling=0.5, eps=5e-4) -> Decomposition:
    """Split the field at time t into static plus per-instance dynamic parts.

    The classifier argmax over existing Gaussians is the primary criterion;
    staticness rho = beta / l overrides it in both directions: long-lived
    "dynamic" Gaussians go static, short-lived "static" ones get reassigned
    to their best dynamic class.
    """
    if classifier is None:
        part_exist = field.opacities_at(t) > eps
        return Decomposition(static_idx=np.flatnonzero(part_exist),
                             instance_idx={})
    part = partition_gaussians(field, t, classifier, eps=eps)
    rho = field.beta / field.cycle_length

    static = [part.static[rho[part.static] >= rho_dyn_ceiling]]
    moved_static = part.static[rho[part.static] < rho_dyn_ceiling]
    instances = {}
    for k in sorted(part.instances):
        gi = part.instances[k]
        keep = rho[gi] <= rho_static_floor
        instances[k] = gi[keep]
        static.append(gi[~keep])
    if moved_static.size:
        logits = classifier.logits(field.e[moved_static])
        best = np.argmax(logits[:, 1:], axis=1) + 1
        for k in instances:
            extra = moved_static[best == k]
            if extra.size:
                instances[k] = np.sort(np.concatenate([instances[k], extra]))
    static_idx = np.sort(np.concatenate(static)) if static else \
        np.zeros(0, dtype=np.int64)
    return Decomposition(static_idx=static_idx, instance_idx=instances)


# -- evaluation ------------------------------------------------------------------

def psnr(a, b):
    """Peak signal-to-noise ratio for [0,1] images, capped at 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def _gray(img):
    return np.asarray(img, dtype=np.float64).mean(axis=2)


@dataclass
class EvalReport:
    train_frames: list
    test_frames: list
    psnr_train: list              # [frame, value] pairs
    psnr_test: list
    ssim_train: list
    ssim_test: list
    mean_psnr_train: float
    mean_psnr_test: float        # None when no held-out frames
    mean_ssim_train: float
    mean_ssim_test: float
    precision: float             # stage-1 dynamic set vs oracle; None w/o oracle
    recall: float
    iou_per_instance: list       # [oracle id, mean IoU] pairs
    mean_iou: float

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())


def _mean(vals):
    return float(np.mean([v for _, v in vals])) if vals else None


def evaluate(field, classifier, dataset, cfg: RunConfig,
             artifacts: Stage1Artifacts = None) -> EvalReport:
    """Render-quality metrics on both splits plus oracle comparisons.

    Unlike training, evaluation may read the oracle: stage-1 precision and
    recall compare the selected dynamic set against the scripted one, and
    decomposition IoU rasterizes each recovered instance against the oracle
    instance masks.
    """
    train, test = split_frames(dataset.n_frames, cfg.holdout_every)
    train_set = set(train)
    p_tr, p_te, s_tr, s_te = [], [], [], []
    for i, obs in enumerate(dataset.frames):
        out = render(field, obs.camera)
        color = np.clip(out.color, 0.0, 1.0)
        p = psnr(obs.rgb, color)
        s = float(ssim(_gray(obs.rgb), _gray(color)))
        (p_tr if i in train_set else p_te).append([i, p])
        (s_tr if i in train_set else s_te).append([i, s])

    precision = recall = None
    if artifacts is not None:
        pred = set(artifacts.dynamic_ids)
        true = set(dataset.dynamic_ids)
        tp = len(pred & true)
        precision = tp / len(pred) if pred else 1.0
        recall = tp / len(true) if true else 1.0

    iou_pairs = []
    if artifacts is not None and classifier is not None and artifacts.remap:
        iou_pairs = _decomposition_iou(field, classifier, dataset, cfg,
                                       artifacts.remap)

    return EvalReport(
        train_frames=train, test_frames=test,
        psnr_train=p_tr, psnr_test=p_te, ssim_train=s_tr, ssim_test=s_te,
        mean_psnr_train=_mean(p_tr), mean_psnr_test=_mean(p_te),
        mean_ssim_train=_mean(s_tr), mean_ssim_test=_mean(s_te),
        precision=precision, recall=recall,
        iou_per_instance=iou_pairs,
        mean_iou=float(np.mean([v for _, v in iou_pairs])) if iou_pairs
        else None,
    )


def instance_mask(field, idx, cam, threshold=0.5):
    """Binary mask of one decomposed instance: render it alone, threshold
    the accumulated opacity."""
    if len(idx) == 0:
        return np.zeros((cam.height, cam.width), dtype=bool)
    return render(field.subset(idx), cam).opacity > threshold


def _decomposition_iou(field, classifier, dataset, cfg, remap):
    """Mean IoU of each decomposed instance against its oracle masks,
    over the frames where the oracle instance is visible."""
    by_class = {c: i for i, c in remap.items()}
    sums = {i: [0.0, 0] for i in remap}
    for obs in dataset.frames:
        dec = decompose(field, classifier, obs.camera.t,
                        rho_static_floor=cfg.rho_static_floor,
                        rho_dyn_ceiling=cfg.rho_dyn_ceiling,
                        eps=cfg.eps_exist)
        for k, idx in dec.instance_idx.items():
            oid = by_class.get(k)
            if oid is None:
                continue
            gt = obs.inst == oid
            if not gt.any():
                continue
            pred = instance_mask(field, idx, obs.camera)
            union = int((gt | pred).sum())
            iou = float((gt & pred).sum() / union) if union else 1.0
            sums[oid][0] += iou
            sums[oid][1] += 1
    return [[i, s / n] for i, (s, n) in sorted(sums.items()) if n > 0]


# -- whole-run convenience ---------------------------------------------------------

def run_pipeline(cfg: RunConfig, dataset=None, log=None):
    """gen-to-eval in one call: returns (artifacts, stage2 result, report)."""
    if dataset is None:
        dataset = read_dataset(cfg.dataset)
    art = run_stage1(cfg, dataset=dataset, log=log)
    result = run_stage2(cfg, art, training_frames(dataset), log=log)
    report = evaluate(result.field, result.classifier, dataset, cfg,
                      artifacts=art)
    if cfg.out:
        report.save(Path(cfg.out) / "eval.json")
    return art, result, report

"""Stage 1: find which tracked instances actually move.

The recipe: fit an over-filtered static field on everything outside the
tracked masks, fit per-frame candidate Gaussians inside them, re-render the
frozen union from nearby frames ("warping"), and measure how inconsistent
each instance looks against the real observations. Appearance and position
inconsistencies accumulate into a per-instance dynamic score; cubing the
score amplifies the dynamic/static separation before thresholding.
"""

from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import netpbm
from .losses import loss_depth, loss_image, loss_opacity_sky
from .optimizer import FieldOptimizer, Schedule
from .rasterizer import (DEFAULT_BACKGROUND, render, render_backward,
                         render_payload, visible_in_window)
from .scene import Camera, GaussianField, load_field, mask_bbox, save_field

WARP_HORIZON = 2          # forward frames checked per source frame
DELTA_DYNAMIC = 1e-3      # threshold on the cubed score
S_MISS = 1.0              # penalty when an instance is unmatched at t+k
CANDIDATE_STRIDE = 2
CANDIDATE_CAP = 4000
STATIC_TAU = 0.5
STATIC_BETA = 1e3         # large lifespan: opacity envelope ~flat over [0,1]
_TRAIN_GROUPS = ("mu", "q", "s", "o", "c")


# -- inconsistency measures ---------------------------------------------------

def appearance_inconsistency(image, warped, gt_mask, pred_mask):
    """Mean absolute color difference over the union of the two masks.

    Per pixel the channel differences are averaged first, so images in [0,1]
    give a score in [0,1]. Empty union returns 0.
    """
    union = np.asarray(gt_mask, bool) | np.asarray(pred_mask, bool)
    n = int(union.sum())
    if n == 0:
        return 0.0
    diff = np.abs(np.asarray(image, np.float64)
                  - np.asarray(warped, np.float64)).mean(axis=-1)
    return float(diff[union].sum() / n)


def position_inconsistency(bbox_gt, bbox_pred, s_miss=S_MISS):
    """Box disagreement: center shift + area change + edge scatter.

    value = |c - c_hat| / sqrt(A) + |A - A_hat| / A + sigma(E) / sqrt(A)
    with A the reference box area, E the four signed per-side edge
    differences and sigma the population standard deviation. A missing box
    on either side returns the ``s_miss`` penalty.
    """
    if bbox_gt is None or bbox_pred is None:
        return float(s_miss)
    l0, r0, t0, b0 = (float(x) for x in bbox_gt)
    l1, r1, t1, b1 = (float(x) for x in bbox_pred)
    area = (r0 - l0 + 1.0) * (b0 - t0 + 1.0)
    area_hat = (r1 - l1 + 1.0) * (b1 - t1 + 1.0)
    root = np.sqrt(area)
    c_term = np.hypot((l0 + r0) - (l1 + r1), (t0 + b0) - (t1 + b1)) / 2.0 / root
    a_term = abs(area - area_hat) / area
    edges = np.array([l1 - l0, r1 - r0, t1 - t0, b1 - b0])
    return float(c_term + a_term + edges.std() / root)


# -- score accumulation -------------------------------------------------------

@dataclass
class DynamicScoreTable:
    """Per (instance, source frame) inconsistency samples, averaged over the
    warp targets of that frame."""

    rows: dict = dc_field(default_factory=dict)   # (id, frame) -> [app, pos, n]

    def add(self, inst_id, frame, i_app, i_pos):
        if i_app < 0 or i_pos < 0:
            raise ValueError("inconsistencies must be nonnegative")
        row = self.rows.setdefault((int(inst_id), int(frame)), [0.0, 0.0, 0])
        row[0] += float(i_app)
        row[1] += float(i_pos)
        row[2] += 1

    def entries(self):
        """Sorted (id, frame, i_app, i_pos, s_it) with per-frame averages."""
        out = []
        for (i, f), (a, p, n) in sorted(self.rows.items()):
            out.append((i, f, a / n, p / n, (a + p) / n))
        return out

    def totals(self):
        """Per-instance mean score S_i over its scored frames."""
        acc = {}
        for i, _, _, _, s_it in self.entries():
            acc.setdefault(i, []).append(s_it)
        return {i: float(np.mean(v)) for i, v in acc.items()}


def accumulate_and_select(table: DynamicScoreTable, delta=DELTA_DYNAMIC):
    """Ids whose cubed mean score clears the threshold, sorted."""
    return sorted(i for i, s in table.totals().items() if s ** 3 > delta)


def derive_labels_and_masks(tracks, dynamic_ids, shape):
    """Per-frame id label maps and dynamic-union masks.

    Dynamic ids are remapped to dense classes 1..|D| in sorted-id order;
    everything else is class 0. Returns (labels, masks, remap).
    """
    remap = {int(i): k + 1 for k, i in enumerate(sorted(dynamic_ids))}
    labels, masks = [], []
    for entries in tracks.frames:
        lab = np.zeros(shape, dtype=np.int64)
        for e in sorted(entries, key=lambda e: e.id):
            if e.id in remap:
                lab[e.mask] = remap[e.id]
        labels.append(lab)
        masks.append(lab > 0)
    return labels, masks, remap


# -- masked static training ---------------------------------------------------

def crop_camera(cam: Camera, left, right, top, bottom) -> Camera:
    """Camera for the inclusive pixel window [left..right] x [top..bottom]."""
    return Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx - left, cy=cam.cy - top,
                  width=right - left + 1, height=bottom - top + 1,
                  r_wc=cam.r_wc, t_wc=cam.t_wc, t=cam.t)


def _static_field_from_pixels(obs, mask, stride, cap, cycle_length):
    """Back-project masked valid-depth pixels into degenerate-4D Gaussians."""
    ys, xs = np.nonzero(mask & obs.depth_valid)
    ys, xs = ys[::stride], xs[::stride]
    if ys.size > cap:
        pick = np.linspace(0, ys.size - 1, cap).astype(np.int64)
        ys, xs = ys[pick], xs[pick]
    n = ys.size
    d = obs.depth[ys, xs]
    mu = obs.camera.back_project(xs + 0.5, ys + 0.5, d)
    q = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    s = np.repeat((stride * d / obs.camera.fx)[:, None], 3, axis=1)
    field = GaussianField.from_constrained(
        mu=mu, q=q, s=np.maximum(s, 1e-3), o=np.full(n, 0.5),
        c=obs.rgb[ys, xs].copy(), e=np.zeros((n, 8)), v=np.zeros((n, 3)),
        tau=np.full(n, STATIC_TAU), beta=np.full(n, STATIC_BETA),
        cycle_length=cycle_length)
    return field, ys, xs


def _static_step(opt, obs, region, cam=None, rgb=None, depth=None, sky=None,
                 lam_depth=1.0, lam_o=0.05, frozen_prefix=0):
    """One masked photometric training step; returns the loss value."""
    cam = cam or obs.camera
    rgb = obs.rgb if rgb is None else rgb
    depth = obs.depth if depth is None else depth
    sky = obs.sky if sky is None else sky
    out, cache = render(opt.field, cam, t=cam.t, with_cache=True)
    l_i, d_color = loss_image(rgb, out.color, mask=region)
    l_d, d_depth = loss_depth(out.depth, depth, (depth > 0) & region)
    l_o, d_opac = loss_opacity_sky(out.opacity, sky, region=region)
    grads = render_backward(cache, d_color=d_color, d_depth=lam_depth * d_depth,
                            d_opacity=lam_o * d_opac)
    if frozen_prefix:
        for g in grads.values():
            g[:frozen_prefix] = 0.0
    opt.record_densify_stats(grads, cam)
    opt.step({k: grads[k] for k in _TRAIN_GROUPS})
    return l_i + lam_depth * l_d + lam_o * l_o


def tracked_id_map(tracks, frame, shape):
    """Rasterized tracker view of a frame: instance id per pixel, 0 outside."""
    idmap = np.zeros(shape, dtype=np.int64)
    for e in sorted(tracks.frames[frame], key=lambda e: e.id):
        idmap[e.mask] = e.id
    return idmap


def build_static_overfiltered(dataset, iters=3000, frames=None, lam_depth=1.0,
                              lam_o=0.05, init_budget=9000, max_gaussians=12000,
                              log=None):
    """Train a static field on the complement of all tracked masks.

    The field is degenerate 4D (v = 0, tau = 0.5, beta frozen large) so its
    opacity envelope is flat over the sequence. Raises if the tracked masks
    cover every pixel of every frame. Densification stops at ``max_gaussians``;
    the background only needs to be clean enough that warp residuals are
    dominated by mislabeled movers, not photometric noise.
    """
    if len(dataset.frames) < 2:
        raise ValueError("need at least 2 frames")
    frames = sorted(frames) if frames is not None else list(range(dataset.n_frames))
    shape = dataset.frames[0].rgb.shape[:2]
    regions = {f: tracked_id_map(dataset.tracks, f, shape) == 0 for f in frames}
    if not any(r.any() for r in regions.values()):
        raise ValueError("tracked masks cover every pixel in every frame")

    # back-project from a handful of spread-out frames rather than all of
    # them: the same budget in finer, less stacked splats renders much
    # faster and the movers' sweep still exposes the background behind them
    init_frames = frames[::max(1, len(frames) // 6)]
    quota = max(1, init_budget // len(init_frames))
    parts = []
    for f in init_frames:
        obs = dataset.frames[f]
        stride = max(1, int((regions[f] & obs.depth_valid).sum()) // quota)
        part, _, _ = _static_field_from_pixels(obs, regions[f], stride, quota,
                                               cycle_length=0.4)
        parts.append(part)
    field = GaussianField.concatenate(parts)

    opt = FieldOptimizer(field, total_iters=iters)
    sched = Schedule(total=iters)
    for it in range(iters):
        f = frames[it % len(frames)]
        loss = _static_step(opt, dataset.frames[f], regions[f],
                            lam_depth=lam_depth, lam_o=lam_o)
        if sched.densify_window(it) and it % 100 == 0 and it > 0:
            opt.densify_and_prune(hard_cap=max_gaussians)
        elif it % 100 == 0 and it > 0:
            opt.densify_and_prune(densify=False)
        if log and it % 250 == 0:
            log(f"s_over it {it}: loss {loss:.4f}, n {len(opt.field)}")
    return opt.field


def _widen_box(box, w, h, need=16):
    """Grow an inclusive box to at least ``need`` pixels per side, in-image."""
    l, r, t, b = box
    if r - l + 1 < need:
        r = min(w - 1, l + need - 1)
        l = max(0, r - need + 1)
    if b - t + 1 < need:
        b = min(h - 1, t + need - 1)
        t = max(0, b - need + 1)
    return l, r, t, b


def _cluster_boxes(boxes):
    """Group keys whose inclusive boxes overlap, transitively."""
    clusters = []
    for key in sorted(boxes):
        l, r, t, b = boxes[key]
        hit = [c for c in clusters
               if any(boxes[j][0] <= r and l <= boxes[j][1]
                      and boxes[j][2] <= b and t <= boxes[j][3] for j in c)]
        rest = [c for c in clusters if c not in hit]
        merged = [j for c in hit for j in c] + [key]
        clusters = rest + [merged]
    return clusters


_STORAGE = ("mu", "q_raw", "log_s", "logit_o", "c", "e", "v", "tau", "log_beta")


def build_candidates(dataset, frame, s_over, iters=400, stride=CANDIDATE_STRIDE,
                     cap=CANDIDATE_CAP, lam_depth=1.0, crop_margin=8):
    """Fit static candidate Gaussians inside the tracked masks of one frame.

    Candidates are back-projected from valid-depth pixels (every
    ``stride``-th, capped), tagged with their source instance id, and
    optimized against this frame only with the static field frozen behind
    them. Instances whose padded boxes overlap are fit jointly on their
    union window; separated instances get their own crop, each rendered
    against only the static splats whose footprint reaches it. Returns
    (field, tags); both empty when the region is empty.
    """
    obs = dataset.frames[frame]
    shape = obs.rgb.shape[:2]
    idmap = tracked_id_map(dataset.tracks, frame, shape)
    region = idmap > 0
    if not (region & obs.depth_valid).any():
        return GaussianField.empty(cycle_length=s_over.cycle_length), \
            np.zeros(0, dtype=np.int64)

    cand, ys, xs = _static_field_from_pixels(obs, region, stride, cap,
                                             cycle_length=s_over.cycle_length)
    tags = idmap[ys, xs]

    h, w = shape
    boxes = {}
    for i in sorted(set(int(v) for v in tags)):
        l, r, t, b = mask_bbox(idmap == i)
        boxes[i] = (max(0, l - crop_margin), min(w - 1, r + crop_margin),
                    max(0, t - crop_margin), min(h - 1, b + crop_margin))

    for members in _cluster_boxes(boxes):
        l = min(boxes[i][0] for i in members)
        r = max(boxes[i][1] for i in members)
        t = min(boxes[i][2] for i in members)
        b = max(boxes[i][3] for i in members)
        # keep the window big enough for the windowed image loss
        l, r, t, b = _widen_box((l, r, t, b), w, h)
        cam = crop_camera(obs.camera, l, r, t, b)
        win = (slice(t, b + 1), slice(l, r + 1))
        rows = np.flatnonzero(np.isin(tags, members))
        prefix = visible_in_window(s_over, obs.camera, obs.camera.t, l, r, t, b)

        # fit the whole window, not just the masked pixels: the frozen
        # static field already explains the surroundings, so any candidate
        # bleeding past its instance is pushed back by the photometric terms
        union = GaussianField.concatenate([s_over.subset(prefix),
                                           cand.subset(rows)])
        opt = FieldOptimizer(union, total_iters=iters)
        window_all = np.ones((b - t + 1, r - l + 1), dtype=bool)
        for _ in range(iters):
            _static_step(opt, obs, window_all, cam=cam, rgb=obs.rgb[win],
                         depth=obs.depth[win], sky=obs.sky[win],
                         lam_depth=lam_depth, frozen_prefix=prefix.size)
        done = opt.field
        for name in _STORAGE:
            getattr(cand, name)[rows] = getattr(done, name)[prefix.size:]
    return cand, tags


def warp_render(cand, tags, s_over, cam, t=None, background=None):
    """Render the frozen union from another camera/time and segment it.

    Instance masks come from compositing dominance: per pixel, the class
    (background = static field and residual transmittance, or one tagged
    candidate instance) with the largest accumulated alpha-weighted
    transmittance wins. Returns (image, {instance id: mask}).
    """
    if background is None:
        background = DEFAULT_BACKGROUND
    ids = sorted(set(int(i) for i in np.asarray(tags).ravel()))
    col = {i: k + 1 for k, i in enumerate(ids)}
    union = GaussianField.concatenate([s_over, cand])
    p = np.zeros((len(union), 3 + len(ids) + 1))
    p[:, :3] = union.c
    p[:len(s_over), 3] = 1.0
    for k, i in enumerate(tags):
        p[len(s_over) + k, 3 + col[int(i)]] = 1.0
    bg = np.zeros(p.shape[1])
    bg[:3] = background
    bg[3] = 1.0
    out, _, _ = render_payload(union, cam, t=t, payload=p, bg_payload=bg)
    winner = np.argmax(out[..., 3:], axis=-1)
    return np.clip(out[..., :3], 0.0, 1.0), {i: winner == col[i] for i in ids}


def compute_scores(dataset, s_over, frames=None, k=WARP_HORIZON,
                   candidate_iters=400, s_miss=S_MISS, log=None,
                   collect_seeds=True):
    """Score every tracked instance by warp inconsistency.

    For each source frame with candidates, render the frozen union at the
    next k frames (restricted to ``frames`` when given) and compare against
    the observations. Returns (table, seeds) where seeds maps instance id
    to its best candidate subset (largest tracked mask) and source time,
    used downstream to initialize the full reconstruction.
    """
    frames = sorted(frames) if frames is not None else list(range(dataset.n_frames))
    fset = set(frames)
    table = DynamicScoreTable()
    seeds = {}
    for f in frames:
        targets = [f + j for j in range(1, k + 1) if f + j in fset]
        entries = dataset.tracks.frames[f]
        if not entries:
            continue
        cand, tags = build_candidates(dataset, f, s_over, iters=candidate_iters)
        if collect_seeds:
            for e in entries:
                area = int(e.mask.sum())
                if tags.size and area > seeds.get(e.id, (-1,))[0]:
                    sub = cand.subset(np.flatnonzero(tags == e.id))
                    if len(sub):
                        seeds[e.id] = (area, dataset.frames[f].camera.t, sub)
        if not targets or not len(cand):
            continue
        for ft in targets:
            obs = dataset.frames[ft]
            img, masks = warp_render(cand, tags, s_over, obs.camera)
            for e in entries:
                gt = dataset.tracks.entry(ft, e.id)
                pred = masks.get(e.id)
                if gt is None or pred is None or not pred.any():
                    table.add(e.id, f, 0.0, s_miss)
                    continue
                i_app = appearance_inconsistency(obs.rgb, img, gt.mask, pred)
                i_pos = position_inconsistency(gt.bbox, mask_bbox(pred))
                table.add(e.id, f, i_app, i_pos)
        if log:
            log(f"scored frame {f} ({len(cand)} candidates)")
    return table, {i: (t, sub) for i, (_, t, sub) in seeds.items()}


# -- artifacts ----------------------------------------------------------------

@dataclass
class Stage1Artifacts:
    s_over: GaussianField
    dynamic_ids: list
    remap: dict                   # instance id -> dense class index
    labels: list                  # per-frame int label maps
    masks: list                   # per-frame bool dynamic-union masks
    table: DynamicScoreTable = None
    seeds: GaussianField = None   # stage-2 init material (dynamic + static inst.)


def write_stage1_artifacts(art: Stage1Artifacts, out_dir):
    out = Path(out_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    save_field(out / "s_over.dgs4", art.s_over)
    if art.seeds is not None:
        save_field(out / "seeds.dgs4", art.seeds)

    lines = []
    if art.table is not None:
        for i, f, a, p, s in art.table.entries():
            lines.append(f"{i}\t{f}\t{a:.17g}\t{p:.17g}\t{s:.17g}")
    (out / "scores.tsv").write_text("\n".join(lines) + ("\n" if lines else ""))

    totals = art.table.totals() if art.table is not None else {}
    sel = set(art.dynamic_ids)
    lines = [f"{i}\t{s:.17g}\t{s ** 3:.17g}\t{int(i in sel)}"
             for i, s in sorted(totals.items())]
    (out / "dynamic_ids.tsv").write_text("\n".join(lines) + ("\n" if lines else ""))

    lines = [f"{i}\t{c}" for i, c in sorted(art.remap.items())]
    (out / "remap.tsv").write_text("\n".join(lines) + ("\n" if lines else ""))

    for f, (lab, mask) in enumerate(zip(art.labels, art.masks)):
        netpbm.write_u16_grid(out / "labels" / f"{f:04d}.u16", lab)
        netpbm.write_pbm(out / "masks" / f"{f:04d}.pbm", mask)


def read_stage1_artifacts(in_dir) -> Stage1Artifacts:
    root = Path(in_dir)
    s_over = load_field(root / "s_over.dgs4")
    seeds = None
    if (root / "seeds.dgs4").exists():
        seeds = load_field(root / "seeds.dgs4")

    remap = {}
    text = (root / "remap.tsv").read_text()
    for line in text.splitlines():
        i, c = line.split("\t")
        remap[int(i)] = int(c)

    table = DynamicScoreTable()
    for line in (root / "scores.tsv").read_text().splitlines():
        i, f, a, p, _ = line.split("\t")
        table.add(int(i), int(f), float(a), float(p))

    dynamic_ids = []
    for line in (root / "dynamic_ids.tsv").read_text().splitlines():
        i, _, _, sel = line.split("\t")
        if int(sel):
            dynamic_ids.append(int(i))

    labels, masks = [], []
    for f in range(len(sorted((root / "labels").glob("*.u16")))):
        labels.append(netpbm.read_u16_grid(root / "labels" / f"{f:04d}.u16"))
        masks.append(netpbm.read_pbm(root / "masks" / f"{f:04d}.pbm"))
    return Stage1Artifacts(s_over=s_over, dynamic_ids=dynamic_ids, remap=remap,
                           labels=labels, masks=masks, table=table, seeds=seeds)

"""Instance-level editing of a trained field: remove, move, recolor, retime.

Edits are driven by a small text spec, one operation per line:

    remove <id> <t>
    translate <id> <t> <dx> <dy> <dz>
    recolor <id> <t> <r> <g> <b>
    retime <id> <t> dt=<seconds>
    retime <id> <t> kappa=<scale>

``id`` is the tracked instance id (validated against the stage-1 remap
table), ``t`` the normalized time at which the instance is selected. Ops
apply in file order to a copy of the field; the input is never mutated.
"""

import warnings
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .pipeline import decompose
from .rasterizer import render, render_payload

OP_KINDS = ("remove", "translate", "recolor", "retime")


@dataclass
class EditOp:
    kind: str
    inst_id: int
    t: float
    params: dict = dc_field(default_factory=dict)


@dataclass
class EditSpec:
    ops: list

    @classmethod
    def from_text(cls, text):
        ops = []
        for ln, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind not in OP_KINDS:
                raise ValueError(f"edit line {ln}: unknown op {kind!r}")
            if len(parts) < 3:
                raise ValueError(f"edit line {ln}: need '<op> <id> <t> ...'")
            inst_id, t = int(parts[1]), float(parts[2])
            args = parts[3:]
            if kind == "remove":
                if args:
                    raise ValueError(f"edit line {ln}: remove takes no params")
                params = {}
            elif kind == "translate":
                if len(args) != 3:
                    raise ValueError(f"edit line {ln}: translate needs dx dy dz")
                params = {"delta": np.array([float(a) for a in args])}
            elif kind == "recolor":
                if len(args) != 3:
                    raise ValueError(f"edit line {ln}: recolor needs r g b")
                params = {"color": np.array([float(a) for a in args])}
            else:
                if len(args) != 1 or "=" not in args[0]:
                    raise ValueError(
                        f"edit line {ln}: retime needs dt=<x> or kappa=<x>")
                key, _, val = args[0].partition("=")
                if key not in ("dt", "kappa"):
                    raise ValueError(f"edit line {ln}: unknown retime "
                                     f"param {key!r}")
                params = {key: float(val)}
            ops.append(EditOp(kind=kind, inst_id=inst_id, t=t, params=params))
        return cls(ops=ops)

    @classmethod
    def from_file(cls, path):
        return cls.from_text(Path(path).read_text())


def select_instance(field, classifier, inst_id, t, remap=None,
                    rho_static_floor=50.0, rho_dyn_ceiling=0.5,
                    vbar_floor=0.0, eps=5e-4):
    """Index set of one instance at time t.

    Classifier argmax over the existing Gaussians is primary; the staticness
    coefficient rho = beta / l corrects it in both directions with the same
    thresholds the decomposition uses. Gaussians whose decayed speed falls
    below ``vbar_floor`` are dropped (the default keeps everything). Warns
    and returns an empty set when nothing is selected.
    """
    if remap is not None:
        if inst_id not in remap:
            raise ValueError(f"unknown instance id {inst_id} "
                             f"(known: {sorted(remap)})")
        k = remap[inst_id]
    else:
        k = int(inst_id)
    if classifier is None or not 1 <= k <= classifier.num_classes:
        warnings.warn(f"instance {inst_id}: no dynamic class to select")
        return np.zeros(0, dtype=np.int64)

    dec = decompose(field, classifier, t, rho_static_floor=rho_static_floor,
                    rho_dyn_ceiling=rho_dyn_ceiling, eps=eps)
    idx = dec.instance_idx[k]
    if vbar_floor > 0.0:
        speed = np.linalg.norm(field.instant_velocities()[idx], axis=1)
        idx = idx[speed >= vbar_floor]
    if idx.size == 0:
        warnings.warn(f"instance {inst_id}: empty selection at t={t}")
    return idx


def apply_edit(field, spec: EditSpec, classifier, remap=None,
               rho_static_floor=50.0, rho_dyn_ceiling=0.5, vbar_floor=0.0,
               eps=5e-4):
    """Apply the ops of a spec, in order, to a copy of the field.

    Each op re-selects its instance on the current (already edited) field,
    so conflicting ops compose in spec order. Unselected Gaussians keep
    bit-identical parameters throughout.
    """
    out = field.copy()
    for op in spec.ops:
        sel = select_instance(out, classifier, op.inst_id, op.t, remap=remap,
                              rho_static_floor=rho_static_floor,
                              rho_dyn_ceiling=rho_dyn_ceiling,
                              vbar_floor=vbar_floor, eps=eps)
        if op.kind == "remove":
            keep = np.setdiff1d(np.arange(len(out)), sel)
            out = out.subset(keep)
        elif op.kind == "translate":
            out.mu[sel] += op.params["delta"]
        elif op.kind == "recolor":
            out.c[sel] = op.params["color"]
        elif op.kind == "retime":
            if "dt" in op.params:
                # advance along the decayed velocity; tau and the vibration
                # trajectory itself stay untouched
                vbar = out.instant_velocities()[sel]
                out.mu[sel] += op.params["dt"] * vbar
            else:
                out.v[sel] *= op.params["kappa"]
    return out


def instance_matte(field, classifier, inst_id, cam, t=None, remap=None,
                   rho_static_floor=50.0, rho_dyn_ceiling=0.5,
                   vbar_floor=0.0, eps=5e-4):
    """Alpha matte of one instance: its accumulated alpha * transmittance
    under the full-field compositing order. Values in [0, 1]."""
    t_sel = cam.t if t is None else t
    sel = select_instance(field, classifier, inst_id, t_sel, remap=remap,
                          rho_static_floor=rho_static_floor,
                          rho_dyn_ceiling=rho_dyn_ceiling,
                          vbar_floor=vbar_floor, eps=eps)
    payload = np.zeros((len(field), 1))
    payload[sel, 0] = 1.0
    out, _, _ = render_payload(field, cam, t=t, payload=payload)
    return out[:, :, 0]


def render_edited(field, spec: EditSpec, cameras, classifier, remap=None,
                  background=None, mattes_for=(), **thresholds):
    """Apply a spec and render the result for each camera.

    Returns (images, mattes) where mattes maps instance id to a list of
    per-camera alpha mattes (only for ids in ``mattes_for``).
    """
    edited = apply_edit(field, spec, classifier, remap=remap, **thresholds)
    images = []
    mattes = {i: [] for i in mattes_for}
    for cam in cameras:
        images.append(np.clip(render(edited, cam, background=background).color,
                              0.0, 1.0))
        for i in mattes_for:
            mattes[i].append(instance_matte(edited, classifier, i, cam,
                                            remap=remap, **thresholds))
    return images, mattes

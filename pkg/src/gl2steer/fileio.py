"""Text formats: JSON checkpoints, TSV/CSV tables and a small SVG bar chart.

Floats are written with ``repr``, the shortest decimal string that reads back
to the same double, so every file round-trips bit-exactly.  All files are
UTF-8 with LF line endings.
"""
from __future__ import annotations

import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .geometry import Affine2, Homography
from .repr_gl2 import SteererSpec


def fmt(x) -> str:
    return repr(float(x))


def _write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def write_json(path, obj) -> Path:
    return _write(path, json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# checkpoints


def spec_to_json(spec: SteererSpec) -> dict:
    return spec.to_dict()


def save_spec(path, spec: SteererSpec) -> Path:
    return write_json(path, spec.to_dict())


def load_spec(path) -> SteererSpec:
    return SteererSpec.from_dict(read_json(path))


def state_to_dict(state) -> dict:
    out = state.spec.to_dict()
    out["prototypes"] = [[float(v) for v in P.ravel()] for P in state.prototypes]
    out["step"] = int(state.step)
    out["seed"] = int(state.rng_seed)
    return out


def state_from_dict(data: dict):
    from .steer_train import TrainState

    spec = SteererSpec.from_dict(data)
    protos = np.array(data["prototypes"], dtype=float).reshape(2, 2, 2)
    return TrainState(spec, protos, step=int(data.get("step", 0)), rng_seed=int(data.get("seed", 0)))


def save_checkpoint(path, state) -> Path:
    return write_json(path, state_to_dict(state))


def load_checkpoint(path):
    """A TrainState from a checkpoint; a bare steerer file gets identity prototypes."""
    data = read_json(path)
    if "prototypes" not in data:
        data = dict(data, prototypes=[[1.0, 0.0, 0.0, 1.0]] * 2)
    return state_from_dict(data)


def warp_to_dict(phi) -> dict:
    if isinstance(phi, Homography):
        return {"type": "homography", "h": phi.to_list()}
    if isinstance(phi, Affine2):
        return {"type": "affine", "a": phi.to_list()}
    raise TypeError(f"cannot serialize warp of type {type(phi).__name__}")


def warp_from_dict(data: dict):
    if data["type"] == "homography":
        return Homography.from_list(data["h"])
    if data["type"] == "affine":
        return Affine2.from_list(data["a"])
    raise ValueError(f"unknown warp type {data['type']!r}")


# --------------------------------------------------------------------------
# tables


def write_keypoints_tsv(path, kps, scores=None) -> Path:
    kps = np.asarray(kps, dtype=float).reshape(-1, 2)
    scores = np.zeros(len(kps)) if scores is None else np.asarray(scores, dtype=float)
    lines = ["x\ty\tscore"]
    lines += [f"{fmt(x)}\t{fmt(y)}\t{fmt(s)}" for (x, y), s in zip(kps, scores)]
    return _write(path, "\n".join(lines) + "\n")


def write_descriptors_tsv(path, kps, descs, scores=None, convention: str = "M") -> Path:
    """Header ``# dim=<d> convention=<c>``, column names, then x, y, score, d_0..d_{d-1}."""
    kps = np.asarray(kps, dtype=float).reshape(-1, 2)
    descs = np.asarray(descs, dtype=float).reshape(len(kps), -1)
    d = descs.shape[1]
    scores = np.zeros(len(kps)) if scores is None else np.asarray(scores, dtype=float)
    lines = [f"# dim={d} convention={convention}", "\t".join(["x", "y", "score"] + [f"d{k}" for k in range(d)])]
    for (x, y), s, row in zip(kps, scores, descs):
        lines.append("\t".join([fmt(x), fmt(y), fmt(s)] + [fmt(v) for v in row]))
    return _write(path, "\n".join(lines) + "\n")


def read_descriptors_tsv(path):
    """(keypoints (K, 2), scores (K,), descriptors (K, d), convention)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split())
    d = int(meta["dim"])
    rows = [[float(v) for v in line.split("\t")] for line in lines[2:] if line]
    arr = np.array(rows, dtype=float).reshape(-1, 3 + d)
    return arr[:, :2], arr[:, 2], arr[:, 3:], meta["convention"]


def write_matches_tsv(path, matches, n_a: int, n_b: int, inv_temperature, threshold, tolerance, correct=None) -> Path:
    """Header with K_A, K_B, inv_T, threshold and tolerance; rows i, j, score[, correct]."""
    lines = [
        f"# K_A={n_a} K_B={n_b} inv_T={fmt(inv_temperature)} threshold={fmt(threshold)} tolerance={fmt(tolerance)}",
        "i\tj\tscore" + ("\tcorrect" if correct is not None else ""),
    ]
    for k, ((i, j), s) in enumerate(zip(matches.pairs, matches.scores)):
        row = f"{int(i)}\t{int(j)}\t{fmt(s)}"
        if correct is not None:
            row += f"\t{int(bool(correct[k]))}"
        lines.append(row)
    return _write(path, "\n".join(lines) + "\n")


def write_gt_tsv(path, gt) -> Path:
    """Ground-truth pairs with their local affines M_i (row-major)."""
    lines = ["i\tj\tm00\tm01\tm10\tm11"]
    for (i, j), M in zip(gt.pairs, gt.local_affines):
        lines.append("\t".join([str(int(i)), str(int(j))] + [fmt(v) for v in M.ravel()]))
    return _write(path, "\n".join(lines) + "\n")


def read_gt_tsv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    pairs, affs = [], []
    for line in lines:
        if not line:
            continue
        parts = line.split("\t")
        pairs.append((int(parts[0]), int(parts[1])))
        affs.append([float(v) for v in parts[2:]])
    return np.array(pairs, dtype=int).reshape(-1, 2), np.array(affs, dtype=float).reshape(-1, 2, 2)


def write_csv(path, header, rows) -> Path:
    def cell(v):
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return fmt(v)
        return str(v)

    lines = [",".join(header)] + [",".join(cell(v) for v in row) for row in rows]
    return _write(path, "\n".join(lines) + "\n")


def write_loss_csv(path, trace) -> Path:
    return write_csv(path, ["step", "loss"], [(int(s), float(l)) for s, l in trace])


def read_loss_csv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return [(int(a), float(b)) for a, b in (line.split(",") for line in lines if line)]


# --------------------------------------------------------------------------
# SVG


def bar_chart_svg(path, groups, series, values, title: str = "", ylabel: str = "") -> Path:
    """Grouped bar chart.  ``values[g][s]`` is the bar of series s in group g."""
    width, height = 640, 360
    left, right, top, bottom = 60, 20, 40, 80
    plot_w, plot_h = width - left - right, height - top - bottom
    vmax = max([float(v) for row in values for v in row] + [1.0])
    colors = ["#d66", "#66d", "#6a6", "#da3", "#999"]
    n_g, n_s = len(groups), len(series)
    slot = plot_w / max(n_g, 1)
    bar = slot * 0.8 / max(n_s, 1)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
        f'<text x="15" y="{top + plot_h / 2:.1f}" font-size="12" transform="rotate(-90 15 {top + plot_h / 2:.1f})"'
        f' text-anchor="middle">{escape(ylabel)}</text>',
        f'<text x="{left - 5}" y="{top + 4}" font-size="10" text-anchor="end">{vmax:g}</text>',
        f'<text x="{left - 5}" y="{top + plot_h + 4}" font-size="10" text-anchor="end">0</text>',
    ]
    for g, name in enumerate(groups):
        x0 = left + g * slot + slot * 0.1
        for s in range(n_s):
            v = float(values[g][s])
            h = plot_h * v / vmax
            x = x0 + s * bar
            out.append(
                f'<rect x="{x:.2f}" y="{top + plot_h - h:.2f}" width="{bar:.2f}" height="{h:.2f}" '
                f'fill="{colors[s % len(colors)]}"><title>{escape(str(series[s]))}: {v:g}</title></rect>'
            )
        out.append(
            f'<text x="{left + (g + 0.5) * slot:.2f}" y="{top + plot_h + 16}" font-size="11" '
            f'text-anchor="middle">{escape(str(name))}</text>'
        )
    for s, name in enumerate(series):
        y = height - 30 + 0 * s
        x = left + s * 150
        out.append(f'<rect x="{x}" y="{y}" width="12" height="12" fill="{colors[s % len(colors)]}"/>')
        out.append(f'<text x="{x + 16}" y="{y + 10}" font-size="11">{escape(str(name))}</text>')
    out.append("</svg>")
    return _write(path, "\n".join(out) + "\n")

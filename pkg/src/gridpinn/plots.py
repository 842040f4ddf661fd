"""SVG rendering of bundle CSVs: per-epoch curves, per-point overlays and the weight-simplex heatmap."""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from .io import read_csv  # noqa: E402

log = logging.getLogger(__name__)

_RC = {"svg.fonttype": "none", "svg.hashsalt": "gridpinn", "font.size": 9}
_SQRT3_2 = math.sqrt(3) / 2


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_lines(path: str | Path, x: Sequence[float], series: Mapping[str, Sequence[float]],
               title: str = "", xlabel: str = "", ylabel: str = "", logy: bool = False) -> bool:
    """Line chart with one labelled line per series. Empty series are skipped; returns False if nothing drawn."""
    series = {k: list(v) for k, v in series.items() if len(v)}
    if not series or not len(x):
        log.warning("no data for %s, skipped", path)
        return False
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for label, y in series.items():
            ax.plot(list(x)[:len(y)], y, label=label, linewidth=1.2)
        if logy:
            ax.set_yscale("log")
        ax.set(title=title, xlabel=xlabel, ylabel=ylabel)
        ax.legend()
        fig.tight_layout()
        _save(fig, Path(path))
    return True


def simplex_xy(lambda_d: float, lambda_p: float, lambda_c: float) -> tuple[float, float]:
    """Planar position of a weight triple: data at (0,0), physics at (1,0), constants at the apex."""
    return lambda_p + 0.5 * lambda_c, _SQRT3_2 * lambda_c


def plot_simplex_heatmap(path: str | Path, cells: Sequence[tuple[float, float, float, float]],
                         title: str = "") -> bool:
    """One hexagonal cell per ``(lambda_d, lambda_p, lambda_c, mae)``, coloured by log10 MAE.

    Each cell carries the SVG id ``cell-<d>-<p>-<c>``.
    """
    finite = [c for c in cells if math.isfinite(c[3]) and c[3] > 0]
    if not cells:
        log.warning("no heatmap cells for %s, skipped", path)
        return False
    weights = sorted({c[0] for c in cells} | {c[1] for c in cells} | {c[2] for c in cells})
    steps = [b - a for a, b in zip(weights, weights[1:]) if b - a > 1e-9]
    radius = 0.5 * (min(steps) if steps else 1.0) / _SQRT3_2 * 0.98
    logs = [math.log10(c[3]) for c in finite] or [0.0]
    lo, hi = min(logs), max(logs)
    cmap = plt.get_cmap("viridis")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 4.5))
        for d, p, c, mae in cells:
            cx, cy = simplex_xy(d, p, c)
            hexagon = [(cx + radius * math.cos(math.pi / 6 + k * math.pi / 3),
                        cy + radius * math.sin(math.pi / 6 + k * math.pi / 3)) for k in range(6)]
            if math.isfinite(mae) and mae > 0:
                colour = cmap((math.log10(mae) - lo) / (hi - lo) if hi > lo else 0.5)
            else:
                colour = "lightgrey"
            patch = Polygon(hexagon, closed=True, facecolor=colour, edgecolor="white", linewidth=0.5)
            patch.set_gid(f"cell-{d!r}-{p!r}-{c!r}")
            ax.add_patch(patch)
        pad = radius + 0.05
        ax.set_xlim(-pad, 1 + pad)
        ax.set_ylim(-pad, _SQRT3_2 + pad)
        ax.set_aspect("equal")
        ax.axis("off")
        ax.text(0, -pad, "data", ha="center", va="top")
        ax.text(1, -pad, "physics", ha="center", va="top")
        ax.text(0.5, _SQRT3_2 + pad * 0.6, "constants", ha="center", va="bottom")
        sm = plt.cm.ScalarMappable(cmap=cmap, norm=plt.Normalize(lo, hi))
        fig.colorbar(sm, ax=ax, shrink=0.7, label="log10 MAE")
        if title:
            ax.set_title(title)
        _save(fig, Path(path))
    return True


def _columns(path: Path) -> dict[str, list[str]]:
    header, rows = read_csv(path)
    return {h: [r[i] for r in rows] for i, h in enumerate(header)}


def _floats(col: list[str]) -> list[float]:
    return [float(v) for v in col]


def render_plots(bundle_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every seed directory of a scenario bundle; returns the SVG paths written."""
    bundle_dir = Path(bundle_dir)
    out_dir = Path(out_dir) if out_dir else bundle_dir / "plots"
    written: list[Path] = []
    seed_dirs = sorted(p for p in bundle_dir.glob("seed_*") if p.is_dir())
    if not seed_dirs:
        log.warning("%s holds no seed directories, nothing to plot", bundle_dir)
    for sd in seed_dirs:
        tag = sd.name
        curves = sd / "epoch_curves.csv"
        if curves.exists():
            cols = _columns(curves)
            series: dict[str, list[float]] = {}
            for d, p, c, v in zip(cols["lambda_d"], cols["lambda_p"], cols["lambda_c"], cols["val_mae_normalized"]):
                series.setdefault(f"({d}, {p}, {c})", []).append(float(v))
            n = max((len(s) for s in series.values()), default=0)
            target = out_dir / f"{tag}_epoch_mae.svg"
            if plot_lines(target, range(1, n + 1), series, "Validation MAE per epoch", "epoch",
                          "MAE (normalized)", logy=True):
                written.append(target)
        heat = sd / "heatmap.csv"
        if heat.exists():
            cols = _columns(heat)
            cells = list(zip(*(_floats(cols[k]) for k in ("lambda_d", "lambda_p", "lambda_c", "mae"))))
            target = out_dir / f"{tag}_heatmap.svg"
            if plot_simplex_heatmap(target, cells, "Best test MAE per weight triple"):
                written.append(target)
        for points in sorted(sd.glob("points_*.csv")):
            set_name = points.stem[len("points_"):]
            cols = _columns(points)
            x = _floats(cols["point"])
            target = out_dir / f"{tag}_{set_name}_system.svg"
            if plot_lines(target, x, {"PINN": _floats(cols["pinn_mae"]), "NN": _floats(cols["nn_mae"])},
                          f"System MAE per test point ({set_name})", "test point", "MAE"):
                written.append(target)
            if "pinn_bus_mae" in cols:
                target = out_dir / f"{tag}_{set_name}_bus.svg"
                if plot_lines(target, x, {"PINN": _floats(cols["pinn_bus_mae"]), "NN": _floats(cols["nn_bus_mae"])},
                              f"Attacked-bus MAE per test point ({set_name})", "test point", "MAE"):
                    written.append(target)
    return written

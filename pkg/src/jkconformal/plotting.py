"""Figure rendering for benchmark output directories.

Matplotlib is imported lazily here (with the Agg backend) so that the
core library never pulls in a GUI toolkit.
"""

import csv
from pathlib import Path


def _load_csv(path: Path) -> dict[str, list[float]]:
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols: dict[str, list] = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for name, val in row.items():
                try:
                    cols[name].append(float(val))
                except (TypeError, ValueError):
                    cols[name].append(val)
    return cols


def render_bench_figures(out_dir) -> list[Path]:
    """Render PNG figures next to the CSVs under ``out_dir/plots``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    plots = out / "plots"
    written: list[Path] = []

    interval_files = sorted(plots.glob("intervals_*.csv"))
    if interval_files:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for path in interval_files:
            method = path.stem.removeprefix("intervals_")
            cols = _load_csv(path)
            if not cols.get("x") or not isinstance(cols["x"][0], float):
                continue
            order = sorted(range(len(cols["x"])), key=cols["x"].__getitem__)
            xs = [cols["x"][i] for i in order]
            hw = [2.0 * cols["half_width"][i] for i in order]
            ax.plot(xs, hw, lw=0.8, label=method)
        ax.set_xlabel("x")
        ax.set_ylabel("interval size")
        ax.legend()
        fig.tight_layout()
        target = plots / "interval_size_vs_x.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)

    mi_scan = plots / "mi_scan.csv"
    if mi_scan.exists():
        cols = _load_csv(mi_scan)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(cols["scale"], cols["mean_mi"], marker="o")
        ax.set_xscale("log")
        ax.set_xlabel("kernel length scale")
        ax.set_ylabel("mean mutual information")
        fig.tight_layout()
        target = plots / "mi_scan.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)

    return written

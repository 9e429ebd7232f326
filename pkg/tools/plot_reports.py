import argparse
import csv
import json
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

PATHWAY_COLORS = {"s": "#4a7c59", "m": "#dbc55b", "d": "#b55239"}
VIEW_MARKERS = {"ground": "o", "aerial": "^"}


def load_json(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"Report not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        return json.load(f)


def load_csv(path: Path) -> list[dict[str, str]]:
    if not path.exists():
        raise FileNotFoundError(f"Table not found: {path}")
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = [h.strip() for h in next(reader)]
        return [dict(zip(header, (cell.strip() for cell in row))) for row in reader]


def plot_schedule(ax, rows: list[dict[str, str]]) -> None:
    steps = [int(r["step"]) for r in rows]
    probs = [float(r["p_pair"]) for r in rows]
    ax.plot(steps, probs, color="#202020", linewidth=2)
    ax.fill_between(steps, probs, color="#97c96b", alpha=0.3)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("step")
    ax.set_ylabel("p_pair")
    ax.set_title("Paired sampling schedule")


def plot_seeds(ax, report: dict, metric: str) -> None:
    runs = [r for r in report["runs"] if r.get("metrics")]
    values = [r["metrics"].get(metric) for r in runs]
    seeds = [r["seed"] for r in runs]
    xs = np.arange(len(seeds))
    ax.bar(xs, [v or 0.0 for v in values], color="#7b7b88")
    mean = report.get("mean", {}).get(metric)
    if mean is not None:
        ax.axhline(mean, color="#b55239", linestyle="--", label=f"mean {mean:.2f}")
        ax.legend(loc="lower right", fontsize=8)
    for seed in report.get("outliers", {}).get("seeds", []):
        if seed in seeds:
            ax.text(seeds.index(seed), 0.5, "!", ha="center", color="#b55239", fontweight="bold")
    ax.set_xticks(xs, [str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel(metric)
    ax.set_title(f"Per-seed {metric}")


def plot_routing(ax, rows: list[dict[str, str]]) -> None:
    for view, marker in VIEW_MARKERS.items():
        subset = [r for r in rows if r["view"] == view]
        if not subset:
            continue
        counts = [int(r["object_count"]) for r in subset]
        for pathway, color in PATHWAY_COLORS.items():
            ax.scatter(counts, [float(r[f"w_{pathway}"]) for r in subset], s=14, c=color, marker=marker,
                       alpha=0.7, label=f"w_{pathway} ({view})")
    ax.set_xlabel("object count")
    ax.set_ylabel("gate weight")
    ax.set_title("Routing vs object count")
    ax.legend(fontsize=7, ncol=2)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Plot CLI reports (schedule, seed sweep, routing)")
    parser.add_argument("--schedule", default=None, help="schedule.csv from `main.py schedule`")
    parser.add_argument("--seed-report", default=None, help="seed_report.json from `main.py sweep-seeds`")
    parser.add_argument("--metric", default="aerial.map", help="Metric to plot from the seed report")
    parser.add_argument("--routing", default=None, help="routing.csv from `main.py analyze-routing`")
    parser.add_argument("--output", default=None, help="Optional output image path, e.g. reports.png")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    panels = []
    if args.schedule:
        panels.append(lambda ax: plot_schedule(ax, load_csv(Path(args.schedule))))
    if args.seed_report:
        panels.append(lambda ax: plot_seeds(ax, load_json(Path(args.seed_report)), args.metric))
    if args.routing:
        panels.append(lambda ax: plot_routing(ax, load_csv(Path(args.routing))))
    if not panels:
        raise SystemExit("Nothing to plot: pass --schedule, --seed-report and/or --routing.")

    fig, axes = plt.subplots(1, len(panels), figsize=(6 * len(panels), 5), dpi=120, squeeze=False)
    for ax, draw in zip(axes[0], panels):
        draw(ax)
    fig.tight_layout()

    if args.output:
        out_path = Path(args.output)
        fig.savefig(out_path, dpi=180)
        print(f"Saved plot to {out_path.resolve()}")
    else:
        plt.show()


if __name__ == "__main__":
    main()

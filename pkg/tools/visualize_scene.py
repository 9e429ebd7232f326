import argparse
import sys
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle

ROOT_DIR = Path(__file__).resolve().parents[1]
if str(ROOT_DIR) not in sys.path:
    sys.path.insert(0, str(ROOT_DIR))

import detector
import synthdata

VIEW_COLORS = {"ground": "#b55239", "aerial": "#4a7c59"}
PREDICTION_COLOR = "#1f5fbf"
CATEGORY_CMAP = "tab10"


def find_pair(dataset: Path, split: str, pair_id: int) -> list[synthdata.SceneSample]:
    splits, _ = synthdata.load_dataset(dataset)
    data = splits.split(split)
    for ground, aerial in data.pairs:
        if ground.pair_id == pair_id:
            return [ground, aerial]
    known = [g.pair_id for g, _ in data.pairs]
    raise ValueError(f"pair {pair_id} not in split {split} (ids {min(known)}..{max(known)})")


def draw_boxes(ax, boxes, categories, edge: str | None, linestyle: str = "-") -> None:
    cmap = plt.get_cmap(CATEGORY_CMAP)
    for (x, y, w, h), cat in zip(boxes, categories):
        color = edge or cmap(cat % cmap.N)
        ax.add_patch(Rectangle((x, y), w, h, fill=False, edgecolor=color, linewidth=1.2, linestyle=linestyle))


def draw_sample(ax, sample: synthdata.SceneSample, predictions=None, show_heat: bool = True) -> None:
    if show_heat and sample.features is not None:
        grid = sample.features.tokens.value[:, : -synthdata.GEOMETRY_CHANNELS]
        heat = np.abs(grid).sum(axis=1).reshape(sample.features.grid_h, sample.features.grid_w)
        ax.imshow(heat, cmap="Greys", extent=(0, sample.image_w, sample.image_h, 0), alpha=0.5)
    draw_boxes(ax, sample.boxes, sample.categories, edge=None)
    if predictions:
        draw_boxes(ax, [p.box for p in predictions], [p.category for p in predictions], PREDICTION_COLOR, "--")

    ax.set_xlim(0, sample.image_w)
    ax.set_ylim(sample.image_h, 0)  # pixel coordinates
    ax.set_aspect("equal", adjustable="box")
    title = f"{sample.view}  objects={len(sample.boxes)}"
    if predictions is not None:
        title += f"  predicted={len(predictions)}"
    ax.set_title(title, color=VIEW_COLORS[sample.view], fontsize=10)
    ax.set_xticks([])
    ax.set_yticks([])


def render(pair: list[synthdata.SceneSample], model=None, show_heat: bool = True):
    fig, axes = plt.subplots(1, 2, figsize=(12, 6), dpi=120)
    predict = detector.predictor(model) if model is not None else None
    for ax, sample in zip(axes, pair):
        draw_sample(ax, sample, predict(sample) if predict else None, show_heat=show_heat)
    fig.suptitle(f"pair {pair[0].pair_id}")
    fig.tight_layout()
    return fig


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Draw one ground/aerial pair of a generated dataset")
    parser.add_argument("--data", required=True, help="Dataset directory written by `main.py generate`")
    parser.add_argument("--split", default="val", choices=synthdata.SPLITS)
    parser.add_argument("--pair", type=int, default=None, help="Pair id (default: first pair of the split)")
    parser.add_argument("--checkpoint", default=None, help="Overlay predictions from this checkpoint")
    parser.add_argument("--hide-heat", action="store_true", help="Hide the feature-energy background")
    parser.add_argument("--output", default=None, help="Optional output image path, e.g. pair.png")
    return parser.parse_args()


def main() -> None:
    args = parse_args()
    dataset = Path(args.data)
    if args.pair is None:
        splits, _ = synthdata.load_dataset(dataset)
        pair = list(splits.split(args.split).pairs[0])
    else:
        pair = find_pair(dataset, args.split, args.pair)
    model = detector.load_checkpoint(Path(args.checkpoint)) if args.checkpoint else None

    fig = render(pair, model, show_heat=not args.hide_heat)

    if args.output:
        out_path = Path(args.output)
        fig.savefig(out_path, dpi=180)
        print(f"Saved visualization to {out_path.resolve()}")
    else:
        plt.show()


if __name__ == "__main__":
    main()

"""Run the CLI pipeline on the bundled fixture and plot its main outputs.

    python demos/pipeline_walkthrough.py [--out treecrop-demo]

Writes ``walkthrough.png`` into the working directory: ground truth, the
grown class map and MC dropout uncertainty for the last year, plus the
estimated change areas with 95% intervals against the true pixel counts.
"""

import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import ListedColormap

from treecrop import cli
from treecrop.evaluation import change_strata
from treecrop.raster import RasterStack, load_mask

CLASS_COLOURS = ListedColormap(["#9bbf6a", "#1b5e20", "#9e9e9e", "#f3d27a"])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="treecrop-demo")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out)
    cli.run("run", out, seed=args.seed)

    years = json.loads((out / "synth/scenes.json").read_text())["years"]
    last = years[-1]
    truth = load_mask(out / f"synth/{last}.labels.rstk")
    grown = load_mask(out / f"grow/{last}.map.rstk")
    unc = RasterStack.load(out / f"infer/{last}.field.rstk").values[0, -1]
    acc = json.loads((out / "evaluate/accuracy.json").read_text())
    classes = acc["area_estimates"]["classes"]

    # the estimates cover the mapped change strata; truth outside them is "other"
    ref = change_strata(load_mask(out / f"synth/{years[0]}.labels.rstk"), truth)
    ref[ref < 0] = len(classes) - 1
    mapped = change_strata(load_mask(out / f"grow/{years[0]}.map.rstk"), grown) >= 0
    true_area = np.bincount(ref[mapped], minlength=len(classes))

    fig, axes = plt.subplots(1, 4, figsize=(18, 4.5), gridspec_kw={"width_ratios": [1, 1, 1, 1.6]})
    for ax, img, title in ((axes[0], truth, f"truth {last}"), (axes[1], grown, f"map {last}")):
        ax.imshow(np.where(img == 255, 3, img), cmap=CLASS_COLOURS, vmin=0, vmax=3,
                  interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    im = axes[2].imshow(unc, cmap="magma")
    axes[2].set_title("MC dropout uncertainty")
    axes[2].axis("off")
    fig.colorbar(im, ax=axes[2], fraction=0.046)

    x = np.arange(len(classes))
    axes[3].bar(x - 0.2, [c["area"] for c in classes], 0.4,
                yerr=[c["ci95"] for c in classes], capsize=3, label="estimate")
    axes[3].bar(x + 0.2, true_area, 0.4, label="truth")
    axes[3].set_xticks(x, [c["class"].replace(" to ", "\nto ") for c in classes],
                       rotation=60, ha="right", fontsize=7)
    axes[3].set_ylabel("pixels")
    axes[3].legend()
    axes[3].set_title("change areas, 95% intervals")
    fig.tight_layout()
    fig.savefig(out / "walkthrough.png", dpi=120)

    for c, t in zip(classes, true_area):
        print(f"{c['class']:>42}: {c['area']:8.1f} +/- {c['ci95']:6.1f}  (truth {t})")
    print(f"figure: {out / 'walkthrough.png'}")


if __name__ == "__main__":
    main()

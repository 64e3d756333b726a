"""Per-sample figure: image, masks, reconstruction and every vMF activation channel."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .eval import harden_predictions  # noqa: E402
from .trainers import TwinModel  # noqa: E402
from .vmf_core import normalize_features, recompose, vmf_activations  # noqa: E402

TILES_PER_ROW = 6


def minmax(ch):
    """Scale one channel to [0, 1] for display; a flat channel shows as zeros."""
    lo, hi = float(ch.min()), float(ch.max())
    return np.zeros_like(ch) if hi <= lo else (ch - lo) / (hi - lo)


@torch.no_grad()
def sample_panels(model, sample):
    """``[(title, image)]`` panels then the raw activation channels (or None)."""
    if isinstance(model, TwinModel):
        model = model.a
    model.eval()
    dtype = next(model.parameters()).dtype
    x = torch.from_numpy(sample.image[None, None].astype(np.float32)).to(dtype)
    panels = [("input", sample.image)]
    if sample.mask is not None:
        panels.append(("ground truth", sample.mask))
    out = model(x)
    if model.seg_head is not None:
        panels.append(("prediction", harden_predictions(out["pred"].float())[0]))
    if getattr(model, "reconstructor", None) is not None:
        panels.append(("reconstruction", out["recon"][0, 0].float().numpy()))
    acts = out["act"][0].double().numpy() if "act" in out else None
    return panels, acts


def render_sample(model, sample, path, title=""):
    """Write the figure to ``path`` and return the figure's axes titles."""
    panels, acts = sample_panels(model, sample)
    n_tiles = 0 if acts is None else len(acts)
    tile_rows = math.ceil(n_tiles / TILES_PER_ROW)
    cols = max(TILES_PER_ROW, len(panels))
    fig, axes = plt.subplots(1 + tile_rows, cols, figsize=(1.8 * cols, 1.9 * (1 + tile_rows)),
                             squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for k, (name, img) in enumerate(panels):
        ax = axes[0, k]
        if name in ("ground truth", "prediction"):
            ax.imshow(img, cmap="viridis", vmin=0, vmax=3, interpolation="nearest")
        else:
            ax.imshow(img, cmap="gray")
        ax.set_title(name, fontsize=8)
    for j in range(n_tiles):
        ax = axes[1 + j // TILES_PER_ROW, j % TILES_PER_ROW]
        ax.imshow(minmax(acts[j]), cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.set_title(f"channel {j}", fontsize=8)
    note = "activation tiles min-max normalised per channel" if n_tiles else ""
    fig.suptitle(f"{title}  {note}".strip(), fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    titles = [ax.get_title() for ax in axes.ravel() if ax.get_title()]
    plt.close(fig)
    return titles

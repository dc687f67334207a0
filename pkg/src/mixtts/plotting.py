"""Deterministic figure output (Agg backend, fixed colormaps, no timestamps)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.image as mpimg  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MEL_CMAP = "viridis"
ATTENTION_CMAP = "gray"
_SAVE = dict(metadata={"Software": None})


def plot_mel(frames, path, title=None):
    """Mel-spectrogram figure with frequency bins on the vertical axis."""
    frames = np.asarray(frames)
    fig, ax = plt.subplots(figsize=(8, 3), dpi=100)
    im = ax.imshow(frames.T, origin="lower", aspect="auto", interpolation="nearest", cmap=MEL_CMAP)
    ax.set_xlabel("frame")
    ax.set_ylabel("mel bin")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_mel_grid(grid, path):
    """One panel per ``{label: frames}`` entry, stacked vertically."""
    n = len(grid)
    fig, axes = plt.subplots(n, 1, figsize=(8, 2 * n), dpi=100, squeeze=False)
    vmin = min(float(np.min(f)) for f in grid.values())
    vmax = max(float(np.max(f)) for f in grid.values())
    for ax, (label, frames) in zip(axes[:, 0], grid.items()):
        ax.imshow(np.asarray(frames).T, origin="lower", aspect="auto", interpolation="nearest",
                  cmap=MEL_CMAP, vmin=vmin, vmax=vmax)
        ax.set_title(str(label), fontsize=8)
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def attention_raster(attention):
    """``[T, P]`` weights -> ``[P, T]`` array as written by :func:`plot_attention` (row 0 = top)."""
    return np.flipud(np.asarray(attention, dtype=np.float64).T)


def plot_attention(attention, path):
    """Raw raster of the word-to-phoneme weights: one pixel per (phoneme, frame) cell.

    Frames run left to right and phonemes bottom to top; weight 0 is black
    and weight 1 is white.
    """
    mpimg.imsave(path, attention_raster(attention), cmap=ATTENTION_CMAP, vmin=0.0, vmax=1.0,
                 format="png", metadata={"Software": None})


def read_attention_png(path):
    """Inverse of :func:`plot_attention` up to 8-bit quantization; returns ``[T, P]``."""
    img = mpimg.imread(path)
    return np.flipud(img[..., 0]).T

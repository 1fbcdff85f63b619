"""
Static SVG figures of the CLI commands.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from odmrsim.core.fitting import DoubleLorentzianFit  # noqa: E402
from odmrsim.core.hamiltonian import Branch  # noqa: E402

# deterministic SVG ids, no timestamp
plt.rcParams["svg.hashsalt"] = "odmrsim"
plt.rcParams["svg.fonttype"] = "none"
SVG_METADATA = {"Date": None, "Creator": None}


def _numpy(values) -> np.ndarray:
    if hasattr(values, "detach"):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=float)


def _save(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    return path


def plot_spectrum(path: str, freqs, contrasts, title: str = "") -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(_numpy(freqs), _numpy(contrasts), color="tab:blue")
    ax.set_xlabel("Frequency (MHz)")
    ax.set_ylabel("Contrast")
    ax.set_title(title)
    return _save(fig, path)


def plot_phase_map(path: str, deltas, freqs, grid, below=None, above=None) -> str:
    deltas, freqs, grid = _numpy(deltas), _numpy(freqs), _numpy(grid)
    ncols = 2 if below is not None else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 4), squeeze=False)
    ax = axes[0, 0]
    mesh = ax.pcolormesh(deltas, freqs, grid.T, shading="nearest", cmap="viridis")
    fig.colorbar(mesh, ax=ax, label="Contrast")
    ax.set_xlabel("Phase difference (deg)")
    ax.set_ylabel("Frequency (MHz)")
    if below is not None:
        ax = axes[0, 1]
        ax.plot(deltas, _numpy(below), "o-", label="below D")
        ax.plot(deltas, _numpy(above), "s-", label="above D")
        ax.set_xlabel("Phase difference (deg)")
        ax.set_ylabel("Normalized integrated contrast")
        ax.legend()
    return _save(fig, path)


def plot_selectivity_curve(path: str, b_values, sel_minus, sigma_minus, sel_plus, sigma_plus) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    b = _numpy(b_values)
    ax.errorbar(b, _numpy(sel_minus), yerr=_numpy(sigma_minus), fmt="o", label="|0> -> |-1>")
    ax.errorbar(b, _numpy(sel_plus), yerr=_numpy(sigma_plus), fmt="s", label="|0> -> |+1>")
    ax.set_xlabel("Static field (mT)")
    ax.set_ylabel("Maximum selectivity")
    ax.legend()
    return _save(fig, path)


def plot_fit(path: str, freqs, contrasts, fit: DoubleLorentzianFit) -> str:
    f = _numpy(freqs)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(f, _numpy(contrasts), ".", color="black", label="data")
    ax.plot(f, _numpy(fit.evaluate(freqs)), color="tab:red", label="fit")
    background = fit.bg_slope * (f - fit.ref_freq) + fit.bg_offset
    for branch, color in ((Branch.MINUS, "tab:blue"), (Branch.PLUS, "tab:orange")):
        component = _numpy(fit.component(freqs, branch)) + background
        ax.fill_between(f, background, component, color=color, alpha=0.3, label=f"{branch.value} component")
    ax.set_xlabel("Frequency (MHz)")
    ax.set_ylabel("Contrast")
    ax.legend()
    return _save(fig, path)


def plot_sticks(path: str, lines) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    for branch, color in ((Branch.MINUS, "tab:blue"), (Branch.PLUS, "tab:orange")):
        selected = [line for line in lines if line.branch == branch]
        if selected:
            ax.stem(
                [line.frequency for line in selected],
                [line.weight for line in selected],
                linefmt=color,
                markerfmt="o",
                basefmt=" ",
                label=branch.value,
            )
    ax.set_xlabel("Frequency (MHz)")
    ax.set_ylabel("Weight")
    ax.legend()
    return _save(fig, path)

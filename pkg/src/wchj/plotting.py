"""Optional figures next to the CSV outputs; needs matplotlib."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise RuntimeError("--plots needs matplotlib (pip install matplotlib)") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_run(out: Path, u, report, lipschitz_rows=None, curves=()) -> list[Path]:
    """Write PNGs into ``out/figures``; returns the paths written."""
    plt = _pyplot()
    fig_dir = Path(out) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    grid = u.grid

    fig, ax = plt.subplots(figsize=(6, 4))
    if grid.dim == 1:
        x = np.arange(grid.points_per_axis) * grid.dx
        for i in range(u.m):
            ax.plot(x, u.values[i, 0], "--", lw=1, label=f"u_{i + 1}(x, 0)")
            ax.plot(x, u.values[i, -1], lw=1.5, label=f"u_{i + 1}(x, {grid.t_final:g})")
        ax.set_xlabel("x")
        ax.legend(fontsize=8)
    else:
        im = ax.imshow(u.values[0, -1].T, origin="lower", extent=(0, 1, 0, 1))
        fig.colorbar(im, ax=ax)
        ax.set_title(f"u_1(., {grid.t_final:g})")
    path = fig_dir / "solution.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    j = np.arange(report.iterations)
    res = np.maximum(np.asarray(report.residuals), 1e-300)
    ax.semilogy(j, res, "o-", label="residual")
    ax.semilogy(j, np.maximum(report.predicted_bounds, 1e-300), "k--", label="(T theta)^j / j! r_0")
    ax.set_xlabel("iteration")
    ax.legend()
    path = fig_dir / "residuals.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if curves and grid.dim == 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        for c in curves:
            t = np.arange(c.end_slice + 1) * c.dt
            # unwrap so curves crossing the seam draw continuously
            x = c.nodes[0, 0] + np.concatenate([[0.0], np.cumsum(c.velocities[:, 0] * c.dt)])
            ax.plot(x, t, lw=1)
        ax.set_xlabel("x (unwrapped)")
        ax.set_ylabel("t")
        path = fig_dir / "curves.png"
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if lipschitz_rows:
        fig, ax = plt.subplots(figsize=(6, 4))
        t = [r.t for r in lipschitz_rows]
        ax.semilogy(t, [r.measured for r in lipschitz_rows], label="empirical")
        ax.semilogy(t, [r.bound for r in lipschitz_rows], "k--", label="ledger bound")
        ax.set_xlabel("t")
        ax.set_ylabel("x-Lipschitz constant")
        ax.legend()
        path = fig_dir / "lipschitz.png"
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written

"""Run reports: waveform/digital/timing figures plus a delimited export.

Renders from the on-disk run directory (store + timing.json), so it
works on any finished or aborted run, local or fetched.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .recorder import load_index


def _load_store(store: Path):
    index = load_index(store)
    dt = index["dt"]
    channels = []
    for entry in index["channels"]:
        data = np.fromfile(store / entry["file"], dtype="<f8",
                           count=entry["samples"])
        channels.append((entry["id"], entry["units"], data))
    return dt, channels


def render_run_report(run_dir: Path | str,
                      out_dir: Path | str | None = None) -> list[Path]:
    """Write waveforms.png, digital.png, timing.png and channels.csv;
    returns the created paths."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    store = run_dir / "store"
    dt, channels = _load_store(store)
    created: list[Path] = []

    volts = [(cid, d) for cid, u, d in channels if u == "V"]
    amps = [(cid, d) for cid, u, d in channels if u == "A"]
    bits = [(cid, d) for cid, u, d in channels if u == "bit"]
    n = max((len(d) for _, _, d in channels), default=0)
    t = np.arange(n) * dt

    if volts or amps:
        fig, axes = plt.subplots(2 if volts and amps else 1, 1,
                                 sharex=True, figsize=(11, 6))
        axes = np.atleast_1d(axes)
        row = 0
        if volts:
            for cid, data in volts:
                axes[row].plot(t[:len(data)], data / 1e3, lw=0.7, label=cid)
            axes[row].set_ylabel("voltage [kV]")
            axes[row].legend(loc="upper right", fontsize=7, ncol=3)
            axes[row].grid(alpha=0.3)
            row += 1
        if amps:
            for cid, data in amps:
                axes[row].plot(t[:len(data)], data / 1e3, lw=0.7, label=cid)
            axes[row].set_ylabel("current [kA]")
            axes[row].legend(loc="upper right", fontsize=7, ncol=3)
            axes[row].grid(alpha=0.3)
        axes[-1].set_xlabel("t [s]")
        fig.tight_layout()
        path = out / "waveforms.png"
        fig.savefig(path, dpi=130)
        plt.close(fig)
        created.append(path)

    if bits:
        fig, ax = plt.subplots(figsize=(11, 1 + 0.7 * len(bits)))
        for row, (cid, data) in enumerate(bits):
            ax.step(t[:len(data)], data * 0.8 + row, where="post", lw=1.2)
            ax.text(0.0, row + 0.4, cid, fontsize=8, va="center")
        ax.set_yticks([])
        ax.set_xlabel("t [s]")
        ax.grid(alpha=0.3, axis="x")
        fig.tight_layout()
        path = out / "digital.png"
        fig.savefig(path, dpi=130)
        plt.close(fig)
        created.append(path)

    timing_path = run_dir / "timing.json"
    if timing_path.is_file():
        timing = json.loads(timing_path.read_text())
        hist = timing.get("jitter_histogram", {})
        if hist:
            fig, ax = plt.subplots(figsize=(8, 4))
            labels = list(hist.keys())
            counts = [max(hist[k], 0.5) for k in labels]
            ax.bar(range(len(labels)), counts, color="#3b6ea5")
            ax.set_yscale("log")
            ax.set_xticks(range(len(labels)))
            ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
            ax.set_ylabel("steps")
            ax.set_title(
                f"step work: mean "
                f"{timing['mean_step_work'] * 1e6:.1f} us, "
                f"overruns {timing['overruns']}")
            fig.tight_layout()
            path = out / "timing.png"
            fig.savefig(path, dpi=130)
            plt.close(fig)
            created.append(path)

    csv_path = out / "channels.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [cid for cid, _u, _d in channels])
        for k in range(n):
            writer.writerow([f"{k * dt:.9f}"] + [
                repr(float(d[k])) if k < len(d) else ""
                for _cid, _u, d in channels])
    created.append(csv_path)
    return created

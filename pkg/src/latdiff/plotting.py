"""Report rendering: every figure is written to disk next to a CSV twin.

Uses the Agg backend so reports work in headless runs; nothing here opens a
window. CSV files are the deterministic artifact, PNGs are the human view.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalsuite import pairwise_path_cosines
from .schedule import alpha_sigma, gamma_ramp, ramp_grid


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _save(fig, path) -> Path:
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def ramp_report(outdir, n: int = 1000) -> list:
    """Tabulate and draw the frozen schedule: gamma, moments, rates."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = ramp_grid(n)
    t = grid["t"]
    mom = alpha_sigma(gamma_ramp(t))
    alpha2, sigma2 = mom.alpha2, mom.sigma2

    paths = [
        write_csv(outdir / "ramp_gamma.csv", ["t", "gamma", "dgamma_dt"],
                  zip(t, grid["gamma"], grid["dgamma_dt"])),
        write_csv(outdir / "ramp_moments.csv", ["t", "alpha2", "sigma2", "snr"],
                  zip(t, alpha2, sigma2, grid["snr"])),
        write_csv(outdir / "ramp_rates.csv", ["t", "g2", "lam"],
                  zip(t, grid["g2"], grid["lam"])),
        write_csv(outdir / "ramp_all.csv",
                  ["t", "gamma", "dgamma_dt", "alpha2", "sigma2", "snr", "g2", "lam"],
                  zip(t, grid["gamma"], grid["dgamma_dt"], alpha2, sigma2,
                      grid["snr"], grid["g2"], grid["lam"])),
    ]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, grid["gamma"], label="gamma")
    ax2 = ax.twinx()
    ax2.plot(t, grid["dgamma_dt"], color="tab:orange", label="dgamma/dt")
    ax.set_xlabel("t")
    ax.set_ylabel("gamma")
    ax2.set_ylabel("dgamma/dt")
    ax.set_title("log-NSR ramp")
    paths.append(_save(fig, outdir / "ramp_gamma.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(t, alpha2, label="alpha^2")
    ax.plot(t, sigma2, label="sigma^2")
    ax.set_xlabel("t")
    ax.legend()
    ax.set_title("signal and noise variance shares")
    paths.append(_save(fig, outdir / "ramp_moments.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(t, grid["g2"], label="g^2")
    ax.semilogy(t, grid["lam"], label="lambda")
    ax.set_xlabel("t")
    ax.legend()
    ax.set_title("volatility and ELBO weight")
    paths.append(_save(fig, outdir / "ramp_rates.png"))
    return paths


def cosine_report(model, emb, outdir, times=None) -> list:
    """Pairwise time-cosine matrix of the free-flow interior mean field."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    times, cos = pairwise_path_cosines(model, emb, times)
    k = len(times)
    mat = np.eye(k)
    rows = []
    p = 0
    for i in range(k):
        for j in range(i + 1, k):
            mean, sd = cos[p].mean(), cos[p].std(ddof=1) if cos.shape[1] > 1 else 0.0
            mat[i, j] = mat[j, i] = mean
            rows.append([times[i], times[j], mean, sd])
            p += 1
    paths = [write_csv(outdir / "path_cosine.csv", ["t_a", "t_b", "mean_cos", "sd_cos"], rows)]

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(mat, vmin=-1.0, vmax=1.0, cmap="RdBu_r", origin="lower")
    ticks = list(range(k))
    ax.set_xticks(ticks, [f"{v:.1f}" for v in times])
    ax.set_yticks(ticks, [f"{v:.1f}" for v in times])
    ax.set_xlabel("t")
    ax.set_ylabel("t")
    ax.set_title("mean-field cosine across times")
    fig.colorbar(im, ax=ax)
    paths.append(_save(fig, outdir / "path_cosine.png"))
    return paths


def history_report(log_csv, outdir) -> list:
    """Loss curves from a training log CSV (step,loss,diff,rec,prior)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(log_csv) as fh:
        rows = list(csv.DictReader(fh))
    step = [int(r["step"]) for r in rows]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax.plot(step, [float(r["loss"]) for r in rows])
    ax.set_xlabel("step")
    ax.set_ylabel("training loss / position")
    for key in ("diff", "rec", "prior"):
        ax2.plot(step, [float(r[key]) for r in rows], label=key)
    ax2.set_xlabel("step")
    ax2.set_ylabel("per-sequence nats")
    ax2.legend()
    fig.tight_layout()
    return [_save(fig, outdir / "history.png")]


def ablation_report(csv_path, outdir) -> list:
    """Bar chart of PPL and a diversity/memorization scatter from an ablation CSV."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    labels = [f"{r['method']}/{r['steps']}" + (f"/{r['knob']}" if r["knob"] else "") for r in rows]
    ppl = [float(r["ppl"]) for r in rows]
    se = [float(r["ppl_se"]) for r in rows]

    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(rows)), 4))
    ax.bar(range(len(rows)), ppl, yerr=se, capsize=3)
    ax.set_xticks(range(len(rows)), labels, rotation=30, ha="right")
    ax.set_ylabel("oracle PPL")
    fig.tight_layout()
    paths = [_save(fig, outdir / "ablation_ppl.png")]

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([float(r["diversity"]) for r in rows], [float(r["memorization"]) for r in rows])
    for lab, r in zip(labels, rows):
        ax.annotate(lab, (float(r["diversity"]), float(r["memorization"])), fontsize=7)
    ax.set_xlabel("diversity")
    ax.set_ylabel("memorization")
    fig.tight_layout()
    paths.append(_save(fig, outdir / "ablation_quality.png"))
    return paths

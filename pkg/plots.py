"""
Plot files for roofline, time breakdown and banking-factor studies.

Uses the non-interactive Agg backend; every function writes one image and
returns its path.
"""

import logging
import os
from typing import Dict, List, Sequence

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from hardware import HardwareProfile  # noqa: E402
from smcsim import COMPONENTS, SimReport, ridge_point  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, out: str) -> str:
    directory = os.path.dirname(out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig.savefig(out, dpi=120, bbox_inches='tight')
    plt.close(fig)
    logger.info(f"Wrote plot {out}")
    return out


def roofline_plot(profile: HardwareProfile, reports: Sequence[SimReport], out: str) -> str:
    """Log-log roofline of the cube with one marker per simulated network."""
    smc = profile.smc
    ridge = ridge_point(profile)
    oi = np.logspace(np.log10(ridge) - 3, np.log10(ridge) + 3, 400)
    roof = np.minimum(smc.peak_gflops, oi * smc.dram.internal_bandwidth_gbps)

    fig, ax = plt.subplots(figsize=(8, 6))
    ax.loglog(oi, roof, '-', color='black', label='Roofline')
    ax.axvline(ridge, ls=':', color='grey', label=f'Ridge {ridge:.2f} FLOP/B')
    for report in reports:
        ax.scatter(report.oi, report.gflops, s=60)
        ax.annotate(report.network, (report.oi, report.gflops), textcoords='offset points', xytext=(5, 5))
    ax.set_xlabel('Operational Intensity (FLOP / Byte)')
    ax.set_ylabel('Performance (GFLOPS)')
    ax.set_title(f'{profile.name} roofline')
    ax.grid(True, which='both', ls='--', alpha=0.5)
    ax.legend()
    return _save(fig, out)


def breakdown_plot(reports: Sequence[SimReport], out: str) -> str:
    """Stacked share of T_U/T_C/T_B/T_L/T_S per network."""
    names = [r.network for r in reports]
    shares = np.array([[r.breakdown[c] / r.cycles if r.cycles else 0.0 for c in COMPONENTS] for r in reports])

    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(names)), 5))
    bottom = np.zeros(len(names))
    for i, component in enumerate(COMPONENTS):
        ax.bar(names, shares[:, i], bottom=bottom, label=component)
        bottom += shares[:, i]
    ax.set_ylabel('Share of execution time')
    ax.set_ylim(0, 1)
    ax.legend(loc='lower right')
    ax.tick_params(axis='x', rotation=30)
    return _save(fig, out)


def bf_sweep_plot(rows: List[Dict], out: str) -> str:
    """Mean PEF against banking factor, one line per kernel class."""
    fig, ax = plt.subplots(figsize=(7, 5))
    for kernel in sorted({r['kernel'] for r in rows}):
        points = sorted((r['banking_factor'], r['mean_pef']) for r in rows if r['kernel'] == kernel)
        ax.plot([p[0] for p in points], [p[1] for p in points], marker='o', label=kernel)
    ax.set_xscale('log', base=2)
    ax.set_xlabel('Banking factor')
    ax.set_ylabel('Performance efficiency')
    ax.set_ylim(0, 1.05)
    ax.grid(True, ls='--', alpha=0.5)
    ax.legend()
    return _save(fig, out)
